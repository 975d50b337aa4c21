"""Dense tensors with reverse-mode automatic differentiation.

The engine is intentionally small: dense numpy storage, a dynamic graph
built as ops run, and a single scalar-rooted backward pass.  float32 is
the training dtype, float64 the verification dtype, so every op is
dtype-generic.  The graph is implicit: each tensor produced by an op keeps
a tuple of grad-requiring parents and a closure that scatters its output
gradient onto them.  backward() walks the graph once in reverse
topological order; leaf gradients accumulate additively across calls,
intermediate gradients are reset per call.
"""

import contextlib

import numpy as np

from densesim import kernels
from densesim.errors import ShapeError, UsageError

_FLOAT_DTYPES = (np.float32, np.float64)
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction (inference paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward_fn = None

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- graph plumbing ------------------------------------------------------
    def detach(self):
        """Forward-identity tensor cut off from the graph (shares storage)."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise UsageError(f"backward requires a scalar loss, got shape {self.data.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        for node in topo:
            if node._parents:
                node.grad = np.zeros_like(node.data)
            elif node.requires_grad and node.grad is None:
                node.grad = np.zeros_like(node.data)
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad = self.grad + np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 or not isinstance(shape[0], (tuple, list)) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)


def _as_tensor(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _from_op(data, parents, backward_fn):
    out = Tensor(data)
    if _grad_enabled:
        grad_parents = tuple(p for p in parents if p.requires_grad)
        if grad_parents:
            out.requires_grad = True
            out._parents = grad_parents
            out._backward_fn = backward_fn
    return out


def _unbroadcast(grad, shape):
    """Sum grad down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _accum(t, g):
    if t.requires_grad:
        t.grad += _unbroadcast(g, t.data.shape)


# -- elementwise arithmetic ----------------------------------------------------


def add(a, b):
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    data = a.data + b.data

    def bk(g):
        _accum(a, g)
        _accum(b, g)

    return _from_op(data, (a, b), bk)


def sub(a, b):
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    data = a.data - b.data

    def bk(g):
        _accum(a, g)
        _accum(b, -g)

    return _from_op(data, (a, b), bk)


def mul(a, b):
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    data = a.data * b.data

    def bk(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _from_op(data, (a, b), bk)


def div(a, b):
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    data = a.data / b.data

    def bk(g):
        _accum(a, g / b.data)
        _accum(b, -g * a.data / (b.data * b.data))

    return _from_op(data, (a, b), bk)


def neg(a):
    def bk(g):
        _accum(a, -g)

    return _from_op(-a.data, (a,), bk)


def power(a, exponent):
    if isinstance(exponent, Tensor):
        raise UsageError("power supports scalar exponents only")
    data = a.data**exponent

    def bk(g):
        _accum(a, g * exponent * a.data ** (exponent - 1))

    return _from_op(data, (a,), bk)


def exp(a):
    data = np.exp(a.data)

    def bk(g):
        _accum(a, g * data)

    return _from_op(data, (a,), bk)


def log(a):
    def bk(g):
        _accum(a, g / a.data)

    return _from_op(np.log(a.data), (a,), bk)


def sqrt(a):
    data = np.sqrt(a.data)

    def bk(g):
        _accum(a, g * (0.5 / data))

    return _from_op(data, (a,), bk)


def relu(a):
    mask = a.data > 0

    def bk(g):
        _accum(a, g * mask)

    return _from_op(a.data * mask, (a,), bk)


def maximum_scalar(a, s):
    """Elementwise max(a, s); the scalar branch gets no gradient."""
    mask = a.data > s

    def bk(g):
        _accum(a, g * mask)

    return _from_op(np.maximum(a.data, s), (a,), bk)


# -- reductions and shape ops --------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bk(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape))
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape))

    return _from_op(data, (a,), bk)


def tmean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.data.shape[ax]
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape):
    old = a.data.shape

    def bk(g):
        _accum(a, g.reshape(old))

    return _from_op(a.data.reshape(shape), (a,), bk)


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    inv = np.argsort(axes)

    def bk(g):
        _accum(a, g.transpose(inv))

    return _from_op(a.data.transpose(axes), (a,), bk)


def matmul(a, b):
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul requires tensors with ndim >= 2")
    data = np.matmul(a.data, b.data)

    def bk(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accum(a, ga)
        _accum(b, gb)

    return _from_op(data, (a, b), bk)


def stop_gradient(a):
    """Identity forward, exactly zero gradient to the input subgraph."""
    return a.detach()


# -- stable softmax family -----------------------------------------------------


def softmax(a, axis):
    m = np.max(a.data, axis=axis, keepdims=True)
    e = exp(a - Tensor(m))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(a, axis):
    m = np.max(a.data, axis=axis, keepdims=True)
    shifted = a - Tensor(m)
    return shifted - log(exp(shifted).sum(axis=axis, keepdims=True))


def l2_normalize(a, axis=-1, eps=1e-12):
    """Unit L2 norm along `axis`; vectors with norm <= eps map to zero-ish.

    The clamp sits inside the sqrt: max(sqrt(s), eps) would send the
    backward pass through sqrt'(0) = inf, turning an exactly-zero vector
    (bias-free layers do produce them) into NaN gradients.
    """
    norm = sqrt(maximum_scalar((a * a).sum(axis=axis, keepdims=True), eps * eps))
    return a / norm


# -- structured ops --------------------------------------------------------------


def conv2d(x, weight, stride=1, padding=0):
    """2-D cross-correlation of [B,Cin,H,W] with [Cout,Cin,kh,kw].

    Output spatial size is floor((H + 2*padding - kh)/stride) + 1.  The
    patch gather/scatter goes through the kernel backend; the contraction
    itself is a batched matmul.
    """
    b, cin, h, w = x.data.shape
    cout, cin_w, kh, kw = weight.data.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: input has {cin}, weight expects {cin_w}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise UsageError(f"conv2d kernel sides must be odd, got {kh}x{kw}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError("conv2d input smaller than kernel after padding")
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hp, wp = xp.shape[2], xp.shape[3]
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    cols = kernels.im2col(xp, kh, kw, stride)  # [B, Cin*kh*kw, OH*OW]
    wmat = weight.data.reshape(cout, cin * kh * kw)
    out = np.matmul(wmat, cols).reshape(b, cout, oh, ow)

    def bk(g):
        gmat = g.reshape(b, cout, oh * ow)
        if weight.requires_grad:
            gw = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0)
            weight.grad += gw.reshape(weight.data.shape)
        if x.requires_grad:
            gcols = np.matmul(wmat.T, gmat)
            gx = kernels.col2im(gcols, cin, hp, wp, kh, kw, stride)
            if padding:
                gx = gx[:, :, padding : padding + h, padding : padding + w]
            x.grad += gx

    return _from_op(out, (x, weight), bk)


def grid_sample_bilinear(field, coords):
    """Bilinear sampling of [B,C,H,W] at [B,P,Q,2] normalized coords.

    Differentiable w.r.t. both the field and the coordinates.  Coordinates
    use the pixel-center convention documented in the kernel backend.
    """
    if not np.all(np.isfinite(coords.data)):
        raise UsageError("grid_sample_bilinear got non-finite coordinates")
    if coords.data.ndim != 4 or coords.data.shape[-1] != 2:
        raise ShapeError(f"coords must be [B,P,Q,2], got {coords.data.shape}")
    if coords.data.shape[0] != field.data.shape[0]:
        raise ShapeError("field/coords batch mismatch")
    h, w = field.data.shape[2], field.data.shape[3]
    out = kernels.bilinear_forward(field.data, coords.data)

    def bk(g):
        if field.requires_grad:
            field.grad += kernels.bilinear_backward_field(coords.data, g, h, w)
        if coords.requires_grad:
            coords.grad += kernels.bilinear_backward_coords(field.data, coords.data, g)

    return _from_op(out, (field, coords), bk)


def batch_norm(x, gamma, beta, running_mean, running_var, axes, training, momentum=0.1, eps=1e-5):
    """Batch normalization over `axes` with running-statistic buffers.

    `running_mean`/`running_var` are plain ndarrays updated in place during
    training (unbiased variance, momentum 0.1 by default); they never enter
    the graph.  `gamma`/`beta` are optional affine tensors.  Composite op:
    gradients flow through the batch statistics.
    """
    if training:
        count = 1
        for ax in axes:
            count *= x.data.shape[ax]
        if count < 2:
            raise UsageError("batch_norm train mode needs >= 2 values per channel")
        m = x.mean(axis=axes, keepdims=True)
        centered = x - m
        v = (centered * centered).mean(axis=axes, keepdims=True)
        running_mean *= 1.0 - momentum
        running_mean += momentum * m.data.reshape(running_mean.shape)
        running_var *= 1.0 - momentum
        running_var += momentum * (v.data.reshape(running_var.shape) * count / (count - 1))
        xn = centered / sqrt(v + _as_tensor(eps, x.dtype))
    else:
        shape = [1] * x.data.ndim
        ch_axis = [ax for ax in range(x.data.ndim) if ax not in axes]
        assert len(ch_axis) == 1
        shape[ch_axis[0]] = running_mean.size
        rm = running_mean.reshape(shape).astype(x.dtype)
        rv = running_var.reshape(shape).astype(x.dtype)
        xn = (x - Tensor(rm)) / Tensor(np.sqrt(rv + eps))
    if gamma is not None:
        shape = [1] * x.data.ndim
        ch_axis = [ax for ax in range(x.data.ndim) if ax not in axes]
        shape[ch_axis[0]] = gamma.data.size
        xn = xn * gamma.reshape(shape) + beta.reshape(shape)
    return xn
