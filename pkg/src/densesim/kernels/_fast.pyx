# cython: boundscheck=False, wraparound=False, cdivision=True
# cython: language_level=3
"""Compiled implementations of the hot inner kernels.

Same contract as kernels/reference.py: im2col/col2im patch movement and
the border-clamped bilinear sampler (forward plus both backward passes).
Matched float32/float64 input dtypes are the supported path; mixed dtypes
are normalized to the promoted type first.
"""

import numpy as np

from libc.math cimport floor

BACKEND_NAME = "cython"

ctypedef fused real:
    float
    double


def _im2col_typed(real[:, :, :, ::1] x, real[:, :, ::1] out,
                  Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1]
    cdef Py_ssize_t oh = (x.shape[2] - kh) // stride + 1
    cdef Py_ssize_t ow = (x.shape[3] - kw) // stride + 1
    cdef Py_ssize_t bb, cc, i, j, oi, oj, row
    with nogil:
        for bb in range(b):
            for cc in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (cc * kh + i) * kw + j
                        for oi in range(oh):
                            for oj in range(ow):
                                out[bb, row, oi * ow + oj] = x[bb, cc, i + stride * oi, j + stride * oj]


def im2col(x, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride):
    """[B,C,H,W] -> [B, C*kh*kw, OH*OW] patch matrix (padding done by caller)."""
    x = np.ascontiguousarray(x)
    b, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    out = np.empty((b, c * kh * kw, oh * ow), dtype=x.dtype)
    _im2col_typed(x, out, kh, kw, stride)
    return out


def _col2im_typed(real[:, :, ::1] cols, real[:, :, :, ::1] out,
                  Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride):
    cdef Py_ssize_t b = out.shape[0], c = out.shape[1]
    cdef Py_ssize_t oh = (out.shape[2] - kh) // stride + 1
    cdef Py_ssize_t ow = (out.shape[3] - kw) // stride + 1
    cdef Py_ssize_t bb, cc, i, j, oi, oj, row
    with nogil:
        for bb in range(b):
            for cc in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (cc * kh + i) * kw + j
                        for oi in range(oh):
                            for oj in range(ow):
                                out[bb, cc, i + stride * oi, j + stride * oj] += cols[bb, row, oi * ow + oj]


def col2im(cols, Py_ssize_t c, Py_ssize_t h, Py_ssize_t w,
           Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride):
    """Scatter-add inverse of im2col back onto a [B,C,H,W] canvas."""
    cols = np.ascontiguousarray(cols)
    out = np.zeros((cols.shape[0], c, h, w), dtype=cols.dtype)
    _col2im_typed(cols, out, kh, kw, stride)
    return out


cdef inline void _corners(real cx, real cy, Py_ssize_t h, Py_ssize_t w,
                          Py_ssize_t* x0, Py_ssize_t* y0, real* tx, real* ty) noexcept nogil:
    # cx/cy are pixel-space coordinates (already shifted by -0.5)
    cdef real xc = cx, yc = cy
    if xc < 0.0:
        xc = 0.0
    elif xc > w - 1.0:
        xc = <real>(w - 1.0)
    if yc < 0.0:
        yc = 0.0
    elif yc > h - 1.0:
        yc = <real>(h - 1.0)
    x0[0] = <Py_ssize_t>floor(xc)
    y0[0] = <Py_ssize_t>floor(yc)
    if w > 1 and x0[0] > w - 2:
        x0[0] = w - 2
    if h > 1 and y0[0] > h - 2:
        y0[0] = h - 2
    tx[0] = xc - <real>x0[0]
    ty[0] = yc - <real>y0[0]


def _bilinear_fwd_typed(real[:, :, :, ::1] field, real[:, :, :, ::1] coords,
                        real[:, :, :, ::1] out):
    cdef Py_ssize_t b = field.shape[0], c = field.shape[1]
    cdef Py_ssize_t h = field.shape[2], w = field.shape[3]
    cdef Py_ssize_t p = coords.shape[1], q = coords.shape[2]
    cdef Py_ssize_t bb, cc, pp, qq, x0, y0, x1, y1
    cdef real cx, cy, tx, ty, w00, w01, w10, w11
    with nogil:
        for bb in range(b):
            for pp in range(p):
                for qq in range(q):
                    cx = coords[bb, pp, qq, 0] * w - <real>0.5
                    cy = coords[bb, pp, qq, 1] * h - <real>0.5
                    _corners(cx, cy, h, w, &x0, &y0, &tx, &ty)
                    x1 = x0 + 1 if x0 + 1 < w else w - 1
                    y1 = y0 + 1 if y0 + 1 < h else h - 1
                    w00 = (1 - tx) * (1 - ty)
                    w01 = tx * (1 - ty)
                    w10 = (1 - tx) * ty
                    w11 = tx * ty
                    for cc in range(c):
                        out[bb, cc, pp, qq] = (field[bb, cc, y0, x0] * w00
                                               + field[bb, cc, y0, x1] * w01
                                               + field[bb, cc, y1, x0] * w10
                                               + field[bb, cc, y1, x1] * w11)


def bilinear_forward(field, coords):
    """Sample [B,C,H,W] at [B,P,Q,2] normalized coords -> [B,C,P,Q]."""
    dt = np.promote_types(field.dtype, coords.dtype)
    f = np.ascontiguousarray(field, dtype=dt)
    co = np.ascontiguousarray(coords, dtype=dt)
    out = np.empty((f.shape[0], f.shape[1], co.shape[1], co.shape[2]), dtype=dt)
    _bilinear_fwd_typed(f, co, out)
    return out.astype(field.dtype, copy=False)


def _bilinear_bwd_field_typed(real[:, :, :, ::1] coords, real[:, :, :, ::1] g,
                              real[:, :, :, ::1] gfield):
    cdef Py_ssize_t b = g.shape[0], c = g.shape[1], p = g.shape[2], q = g.shape[3]
    cdef Py_ssize_t h = gfield.shape[2], w = gfield.shape[3]
    cdef Py_ssize_t bb, cc, pp, qq, x0, y0, x1, y1
    cdef real cx, cy, tx, ty, w00, w01, w10, w11, gv
    with nogil:
        for bb in range(b):
            for pp in range(p):
                for qq in range(q):
                    cx = coords[bb, pp, qq, 0] * w - <real>0.5
                    cy = coords[bb, pp, qq, 1] * h - <real>0.5
                    _corners(cx, cy, h, w, &x0, &y0, &tx, &ty)
                    x1 = x0 + 1 if x0 + 1 < w else w - 1
                    y1 = y0 + 1 if y0 + 1 < h else h - 1
                    w00 = (1 - tx) * (1 - ty)
                    w01 = tx * (1 - ty)
                    w10 = (1 - tx) * ty
                    w11 = tx * ty
                    for cc in range(c):
                        gv = g[bb, cc, pp, qq]
                        gfield[bb, cc, y0, x0] += gv * w00
                        gfield[bb, cc, y0, x1] += gv * w01
                        gfield[bb, cc, y1, x0] += gv * w10
                        gfield[bb, cc, y1, x1] += gv * w11


def bilinear_backward_field(coords, grad_out, Py_ssize_t h, Py_ssize_t w):
    """Gradient of bilinear_forward w.r.t. the sampled field."""
    dt = np.promote_types(coords.dtype, grad_out.dtype)
    co = np.ascontiguousarray(coords, dtype=dt)
    g = np.ascontiguousarray(grad_out, dtype=dt)
    gfield = np.zeros((g.shape[0], g.shape[1], h, w), dtype=dt)
    _bilinear_bwd_field_typed(co, g, gfield)
    return gfield.astype(grad_out.dtype, copy=False)


def _bilinear_bwd_coords_typed(real[:, :, :, ::1] field, real[:, :, :, ::1] coords,
                               real[:, :, :, ::1] g, real[:, :, :, ::1] gcoords):
    cdef Py_ssize_t b = field.shape[0], c = field.shape[1]
    cdef Py_ssize_t h = field.shape[2], w = field.shape[3]
    cdef Py_ssize_t p = coords.shape[1], q = coords.shape[2]
    cdef Py_ssize_t bb, cc, pp, qq, x0, y0, x1, y1
    cdef real cx, cy, tx, ty, f00, f01, f10, f11, gv
    cdef double dx, dy
    cdef bint in_x, in_y
    with nogil:
        for bb in range(b):
            for pp in range(p):
                for qq in range(q):
                    cx = coords[bb, pp, qq, 0] * w - <real>0.5
                    cy = coords[bb, pp, qq, 1] * h - <real>0.5
                    in_x = 0.0 < cx < w - 1.0
                    in_y = 0.0 < cy < h - 1.0
                    if not (in_x or in_y):
                        continue
                    _corners(cx, cy, h, w, &x0, &y0, &tx, &ty)
                    x1 = x0 + 1 if x0 + 1 < w else w - 1
                    y1 = y0 + 1 if y0 + 1 < h else h - 1
                    dx = 0.0
                    dy = 0.0
                    for cc in range(c):
                        f00 = field[bb, cc, y0, x0]
                        f01 = field[bb, cc, y0, x1]
                        f10 = field[bb, cc, y1, x0]
                        f11 = field[bb, cc, y1, x1]
                        gv = g[bb, cc, pp, qq]
                        dx += ((f01 - f00) * (1 - ty) + (f11 - f10) * ty) * gv
                        dy += ((f10 - f00) * (1 - tx) + (f11 - f01) * tx) * gv
                    if in_x:
                        gcoords[bb, pp, qq, 0] = <real>(dx * w)
                    if in_y:
                        gcoords[bb, pp, qq, 1] = <real>(dy * h)


def bilinear_backward_coords(field, coords, grad_out):
    """Gradient of bilinear_forward w.r.t. the normalized coords.

    Border-clamped samples get zero gradient (the clamp is flat).
    """
    dt = np.promote_types(np.promote_types(field.dtype, coords.dtype), grad_out.dtype)
    f = np.ascontiguousarray(field, dtype=dt)
    co = np.ascontiguousarray(coords, dtype=dt)
    g = np.ascontiguousarray(grad_out, dtype=dt)
    gcoords = np.zeros(co.shape, dtype=dt)
    _bilinear_bwd_coords_typed(f, co, g, gcoords)
    return gcoords.astype(coords.dtype, copy=False)
