"""Pure-numpy implementations of the hot inner kernels.

This is the fallback backend; `densesim.kernels._fast` (Cython) implements
the same five functions with identical semantics.  Everything here is
dtype-generic over float32/float64 and allocates fresh output arrays.

Coordinate convention for the bilinear sampler: coords are normalized to
[0,1]^2 in (x, y) order, with pixel (i, j) centered at
((j+0.5)/W, (i+0.5)/H).  Coordinates outside the center lattice clamp to
the border.
"""

import numpy as np

BACKEND_NAME = "numpy"


def im2col(x, kh, kw, stride):
    """[B,C,H,W] -> [B, C*kh*kw, OH*OW] patch matrix (padding done by caller)."""
    b, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols.reshape(b, c * kh * kw, oh * ow)


def col2im(cols, c, h, w, kh, kw, stride):
    """Scatter-add inverse of im2col back onto a [B,C,H,W] canvas."""
    b = cols.shape[0]
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    cols6 = cols.reshape(b, c, kh, kw, oh, ow)
    out = np.zeros((b, c, h, w), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols6[:, :, i, j]
    return out


def _corner_setup(coords, h, w):
    # Returns integer corner indices, fractional weights, and the pre-clamp
    # pixel-space coordinates (needed for the coords gradient mask).
    x = coords[..., 0] * w - 0.5
    y = coords[..., 1] * h - 0.5
    xc = np.clip(x, 0.0, w - 1.0)
    yc = np.clip(y, 0.0, h - 1.0)
    x0 = np.floor(xc)
    y0 = np.floor(yc)
    if w > 1:
        x0 = np.minimum(x0, w - 2.0)
    if h > 1:
        y0 = np.minimum(y0, h - 2.0)
    tx = xc - x0
    ty = yc - y0
    return x0.astype(np.intp), y0.astype(np.intp), tx, ty, x, y


def bilinear_forward(field, coords):
    """Sample [B,C,H,W] at [B,P,Q,2] normalized coords -> [B,C,P,Q]."""
    b, c, h, w = field.shape
    x0, y0, tx, ty, _, _ = _corner_setup(coords, h, w)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    flat = field.reshape(b, c, h * w)

    def gather(yi, xi):
        idx = (yi * w + xi).reshape(b, 1, -1)
        return np.take_along_axis(flat, np.broadcast_to(idx, (b, c, idx.shape[2])), axis=2)

    p, q = coords.shape[1], coords.shape[2]
    tx = tx.reshape(b, 1, p * q)
    ty = ty.reshape(b, 1, p * q)
    out = (
        gather(y0, x0) * (1 - tx) * (1 - ty)
        + gather(y0, x1) * tx * (1 - ty)
        + gather(y1, x0) * (1 - tx) * ty
        + gather(y1, x1) * tx * ty
    )
    return out.reshape(b, c, p, q).astype(field.dtype, copy=False)


def bilinear_backward_field(coords, grad_out, h, w):
    """Gradient of bilinear_forward w.r.t. the sampled field."""
    b, c, p, q = grad_out.shape
    x0, y0, tx, ty, _, _ = _corner_setup(coords, h, w)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    tx = tx.reshape(b, 1, p * q)
    ty = ty.reshape(b, 1, p * q)
    g = grad_out.reshape(b, c, p * q)
    gfield = np.zeros((b, c, h * w), dtype=grad_out.dtype)
    bb = np.arange(b).reshape(b, 1, 1)
    cc = np.arange(c).reshape(1, c, 1)

    def scatter(yi, xi, wgt):
        idx = (yi * w + xi).reshape(b, 1, p * q)
        np.add.at(gfield, (bb, cc, idx), g * wgt)

    scatter(y0, x0, (1 - tx) * (1 - ty))
    scatter(y0, x1, tx * (1 - ty))
    scatter(y1, x0, (1 - tx) * ty)
    scatter(y1, x1, tx * ty)
    return gfield.reshape(b, c, h, w)


def bilinear_backward_coords(field, coords, grad_out):
    """Gradient of bilinear_forward w.r.t. the normalized coords.

    Border-clamped samples get zero gradient (the clamp is flat).
    """
    b, c, h, w = field.shape
    p, q = coords.shape[1], coords.shape[2]
    x0, y0, tx, ty, xraw, yraw = _corner_setup(coords, h, w)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    flat = field.reshape(b, c, h * w)

    def gather(yi, xi):
        idx = (yi * w + xi).reshape(b, 1, -1)
        return np.take_along_axis(flat, np.broadcast_to(idx, (b, c, idx.shape[2])), axis=2)

    f00 = gather(y0, x0)
    f01 = gather(y0, x1)
    f10 = gather(y1, x0)
    f11 = gather(y1, x1)
    txf = tx.reshape(b, 1, p * q)
    tyf = ty.reshape(b, 1, p * q)
    g = grad_out.reshape(b, c, p * q)
    # d(out)/d(x_pixel), d(out)/d(y_pixel), summed over channels.
    dx = ((f01 - f00) * (1 - tyf) + (f11 - f10) * tyf) * g
    dy = ((f10 - f00) * (1 - txf) + (f11 - f01) * txf) * g
    dx = dx.sum(axis=1).reshape(b, p, q)
    dy = dy.sum(axis=1).reshape(b, p, q)
    in_x = (xraw > 0.0) & (xraw < w - 1.0)
    in_y = (yraw > 0.0) & (yraw < h - 1.0)
    gcoords = np.zeros_like(coords)
    gcoords[..., 0] = dx * in_x * w
    gcoords[..., 1] = dy * in_y * h
    return gcoords
