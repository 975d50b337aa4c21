"""View boxes, coordinate mapping, and correspondence grids.

The heavy randomized ramp check (1,000 pairs) is acceptance criterion 5;
these tests pin the closed-form pieces it builds on.
"""

import numpy as np
import pytest

from densesim import geometry as G
from densesim.errors import EmptyOverlapError, GeometryError, UsageError


def test_viewspec_validation():
    with pytest.raises(GeometryError):
        G.ViewSpec(-0.1, 0.0, 4.0, 4.0)
    with pytest.raises(GeometryError):
        G.ViewSpec(0.0, 0.0, 0.5, 4.0)
    with pytest.raises(GeometryError):
        G.ViewSpec(0.0, 0.0, 4.0, 4.0, False, 0)


def test_validate_within_bounds():
    G.ViewSpec(0.0, 0.0, 4.0, 4.0).validate_within(4, 4)
    with pytest.raises(GeometryError):
        G.ViewSpec(1.0, 0.0, 4.0, 4.0).validate_within(4, 4)


def test_viewspec_array_round_trip():
    spec = G.ViewSpec(1.5, 2.25, 3.0, 4.0, True, 16)
    back = G.ViewSpec.from_array(spec.to_array())
    assert back == spec


def test_intersect_cases():
    a = G.ViewSpec(0.0, 0.0, 4.0, 4.0)
    assert G.intersect(a, G.ViewSpec(5.0, 5.0, 2.0, 2.0)) is None
    assert G.intersect(a, G.ViewSpec(4.0, 0.0, 2.0, 2.0)) is None  # touching != overlap
    assert G.intersect(a, G.ViewSpec(2.0, 1.0, 4.0, 4.0)) == (2.0, 1.0, 2.0, 3.0)
    assert G.intersect(a, a) == (0.0, 0.0, 4.0, 4.0)


def test_make_grid_cell_centers():
    g = G.make_grid((2.0, 3.0, 4.0, 6.0), 2)
    assert g.shape == (2, 2, 2)
    # [i, j] = (x0 + (j+.5)w/K, y0 + (i+.5)h/K)
    assert np.allclose(g[0, 0], [3.0, 4.5])
    assert np.allclose(g[0, 1], [5.0, 4.5])
    assert np.allclose(g[1, 0], [3.0, 7.5])
    assert np.allclose(g[1, 1], [5.0, 7.5])
    with pytest.raises(UsageError):
        G.make_grid((0.0, 0.0, 1.0, 1.0), 0)


def test_map_to_view_and_back():
    spec = G.ViewSpec(2.0, 3.0, 4.0, 6.0, False, 8)
    pts = np.array([[2.0, 3.0], [6.0, 9.0], [3.0, 4.5]])
    uv = G.map_to_view(pts, spec)
    assert np.allclose(uv, [[0.0, 0.0], [1.0, 1.0], [0.25, 0.25]])
    assert np.allclose(G.map_from_view(uv, spec), pts)


def test_map_to_view_hflip_mirrors_u_only():
    spec = G.ViewSpec(2.0, 3.0, 4.0, 6.0, True, 8)
    uv = G.map_to_view(np.array([[3.0, 4.5]]), spec)
    assert np.allclose(uv, [[0.75, 0.25]])
    assert np.allclose(G.map_from_view(uv, spec), [[3.0, 4.5]])


def test_map_to_view_rejects_outside_points():
    spec = G.ViewSpec(2.0, 3.0, 4.0, 6.0)
    with pytest.raises(GeometryError):
        G.map_to_view(np.array([[1.0, 4.0]]), spec)
    # boundary itself is inside (with a hair of slack)
    G.map_to_view(np.array([[2.0, 9.0]]), spec)


def test_build_correspondence_consistency():
    v1 = G.ViewSpec(0.0, 0.0, 4.0, 4.0, False, 8)
    v2 = G.ViewSpec(2.0, 1.0, 4.0, 4.0, True, 8)
    corr = G.build_correspondence(v1, v2, 3)
    assert corr.k == 3
    assert corr.points_orig.shape == (3, 3, 2)
    assert corr.coords_v1.shape == (3, 3, 2)
    # both coordinate sets must un-map to the same original points
    p1 = G.map_from_view(corr.coords_v1.reshape(-1, 2), v1)
    p2 = G.map_from_view(corr.coords_v2.reshape(-1, 2), v2)
    assert np.allclose(p1, corr.points_orig.reshape(-1, 2), atol=1e-12)
    assert np.allclose(p2, corr.points_orig.reshape(-1, 2), atol=1e-12)
    # grid points sit in the overlap, so all view coords are in [0,1]
    assert corr.coords_v1.min() >= 0.0 and corr.coords_v1.max() <= 1.0
    assert corr.coords_v2.min() >= 0.0 and corr.coords_v2.max() <= 1.0


def test_build_correspondence_requires_overlap():
    with pytest.raises(EmptyOverlapError):
        G.build_correspondence(
            G.ViewSpec(0.0, 0.0, 2.0, 2.0), G.ViewSpec(3.0, 3.0, 2.0, 2.0), 3
        )


def test_raster_centers_layout():
    rc = G.raster_centers(2)
    assert rc.shape == (2, 2, 2)
    assert np.allclose(rc[0, 0], [0.25, 0.25])
    assert np.allclose(rc[1, 0], [0.25, 0.75])  # [row, col] = ((col+.5)/S, (row+.5)/S)


def test_view_source_coords_flip():
    spec = G.ViewSpec(0.0, 0.0, 8.0, 8.0, False, 2)
    flipped = G.ViewSpec(0.0, 0.0, 8.0, 8.0, True, 2)
    src = G.view_source_coords(spec, 8, 8)
    srcf = G.view_source_coords(flipped, 8, 8)
    assert src.shape == (2, 2, 2)
    # flipping mirrors the x source coordinates, leaves y alone
    assert np.allclose(srcf[..., 0], src[..., ::-1, 0])
    assert np.allclose(srcf[..., 1], src[..., 1])
