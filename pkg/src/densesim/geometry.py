"""Crop/flip view geometry and cross-view correspondence grids.

A view is an axis-aligned crop box of the source image plus an optional
horizontal flip, rendered to a fixed square raster.  Crop boxes live in
source pixel units (floats allowed); rendered rasters and sampling
coordinates use the normalized pixel-center convention of the bilinear
sampler: pixel (i, j) of an S-sized raster sits at ((j+0.5)/S, (i+0.5)/S),
coordinate order (x, y).

Mapping directions:
  map_to_view    source point (pixels) -> view-normalized coords, flip last
  map_from_view  exact inverse

A correspondence grid is the K x K cell-center lattice of the overlap
rectangle of two crops, expressed in each view's own coordinates; entry
(i, j) of both coordinate grids refers to the same source point.
"""

from dataclasses import dataclass

import numpy as np

from densesim.errors import EmptyOverlapError, GeometryError, UsageError


@dataclass(frozen=True)
class ViewSpec:
    """One augmented view: crop box in source pixels, flip, output side."""

    x0: float
    y0: float
    w: float
    h: float
    hflip: bool = False
    out_size: int = 32

    def __post_init__(self):
        if self.x0 < 0 or self.y0 < 0:
            raise GeometryError(f"crop origin must be non-negative, got ({self.x0}, {self.y0})")
        if self.w < 1 or self.h < 1:
            raise GeometryError(f"crop sides must be >= 1 pixel, got w={self.w}, h={self.h}")
        if self.out_size < 1:
            raise GeometryError(f"out_size must be >= 1, got {self.out_size}")

    @property
    def crop_box(self):
        return (self.x0, self.y0, self.w, self.h)

    def validate_within(self, img_h, img_w):
        if self.x0 + self.w > img_w + 1e-6 or self.y0 + self.h > img_h + 1e-6:
            raise GeometryError(
                f"crop box {self.crop_box} leaves a {img_w}x{img_h} image"
            )

    def to_array(self):
        return np.array(
            [self.x0, self.y0, self.w, self.h, float(self.hflip), float(self.out_size)],
            dtype=np.float64,
        )

    @staticmethod
    def from_array(arr):
        x0, y0, w, h, flip, size = (float(v) for v in np.asarray(arr).reshape(6))
        return ViewSpec(x0, y0, w, h, bool(round(flip)), int(round(size)))


@dataclass(frozen=True)
class CorrespondenceGrid:
    """Matched K x K sampling grids for two views of one source image."""

    k: int
    points_orig: np.ndarray  # [K,K,2] source pixels
    coords_v1: np.ndarray  # [K,K,2] normalized in view 1
    coords_v2: np.ndarray  # [K,K,2] normalized in view 2


def intersect(a: ViewSpec, b: ViewSpec):
    """Overlap rectangle (x0, y0, w, h) of two crop boxes, None if empty."""
    x0 = max(a.x0, b.x0)
    y0 = max(a.y0, b.y0)
    x1 = min(a.x0 + a.w, b.x0 + b.w)
    y1 = min(a.y0 + a.h, b.y0 + b.h)
    if x1 - x0 <= 0.0 or y1 - y0 <= 0.0:
        return None
    return (x0, y0, x1 - x0, y1 - y0)


def make_grid(inter, k: int):
    """[K,K,2] cell-center lattice of a box, (x, y) order.

    Row i, column j maps to (x0 + (j+0.5)*w/K, y0 + (i+0.5)*h/K); all
    points lie strictly inside the box.
    """
    if k <= 0:
        raise UsageError(f"grid side must be positive, got {k}")
    x0, y0, w, h = inter
    cells = (np.arange(k, dtype=np.float64) + 0.5) / k
    out = np.empty((k, k, 2), dtype=np.float64)
    out[..., 0] = x0 + cells[None, :] * w
    out[..., 1] = y0 + cells[:, None] * h
    return out


def map_to_view(points, view: ViewSpec):
    """Source points [...,2] (pixels) -> view-normalized coordinates.

    u = (x - x0)/w then u <- 1-u under hflip; vertical likewise, never
    flipped.  Points outside the crop box indicate a grid built from the
    wrong intersection and raise GeometryError.
    """
    pts = np.asarray(points, dtype=np.float64)
    out = np.empty_like(pts)
    out[..., 0] = (pts[..., 0] - view.x0) / view.w
    out[..., 1] = (pts[..., 1] - view.y0) / view.h
    if np.any(out < -1e-9) or np.any(out > 1 + 1e-9):
        raise GeometryError("point outside the view's crop box")
    if view.hflip:
        out[..., 0] = 1.0 - out[..., 0]
    return out


def map_from_view(coords, view: ViewSpec):
    """Inverse of map_to_view: view coordinates back to source pixels."""
    co = np.asarray(coords, dtype=np.float64)
    u = co[..., 0]
    if view.hflip:
        u = 1.0 - u
    out = np.empty_like(co)
    out[..., 0] = view.x0 + u * view.w
    out[..., 1] = view.y0 + co[..., 1] * view.h
    return out


def build_correspondence(v1: ViewSpec, v2: ViewSpec, k: int) -> CorrespondenceGrid:
    """Compose intersect, make_grid and map_to_view for both views.

    Raises EmptyOverlapError when the crops do not overlap; the caller's
    augmentation policy decides what happens then.
    """
    inter = intersect(v1, v2)
    if inter is None:
        raise EmptyOverlapError(f"views do not overlap: {v1.crop_box} vs {v2.crop_box}")
    pts = make_grid(inter, k)
    return CorrespondenceGrid(k, pts, map_to_view(pts, v1), map_to_view(pts, v2))


def raster_centers(size: int):
    """[S,S,2] normalized pixel-center coordinates of an S x S raster."""
    c = (np.arange(size, dtype=np.float64) + 0.5) / size
    out = np.empty((size, size, 2), dtype=np.float64)
    out[..., 0] = c[None, :]
    out[..., 1] = c[:, None]
    return out


def view_source_coords(view: ViewSpec, img_h: int, img_w: int):
    """[S,S,2] source-normalized sampling coords of the view's raster.

    Each view pixel center is mapped back through the view into source
    pixels, then normalized by the source size for the bilinear sampler.
    Rendering a view is bilinear_forward(image, these coords).
    """
    view.validate_within(img_h, img_w)
    src = map_from_view(raster_centers(view.out_size), view)
    src[..., 0] /= img_w
    src[..., 1] /= img_h
    return src
