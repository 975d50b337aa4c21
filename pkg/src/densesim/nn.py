"""Model components: encoder, dense/region/global heads, checkpoints.

A tiny module system over the tensor core.  Parameters are Tensors with
requires_grad; buffers (BN running statistics) are plain ndarrays kept
out of the graph.  Child modules are discovered from instance attributes
in definition order, giving stable hierarchical names like
"encoder.stage0.conv.weight" for checkpoints and the optimizer.

All weights initialize from a fan-in-scaled Gaussian, std = sqrt(2/fan_in),
drawn from the generator handed to the constructor; construction order is
fixed, so one seeded generator reproduces the full model bit-exactly.
No layer carries a bias: every conv/linear is either followed by a BN or
feeds a loss that is shift-insensitive there.
"""

import numpy as np

from densesim import container
from densesim import tensor as T
from densesim.errors import ConfigError, UsageError
from densesim.tensor import Tensor


def _init_weight(rng, shape, fan_in, dtype=np.float32):
    std = np.sqrt(2.0 / fan_in)
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


class Module:
    def __init__(self):
        self._training = True

    # -- discovery ---------------------------------------------------------
    def _children(self):
        for name, value in self.__dict__.items():
            if isinstance(value, Module):
                yield name, value

    def named_parameters(self, prefix=""):
        for name, value in self.__dict__.items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name, value in self.__dict__.items():
            if isinstance(value, np.ndarray):
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_buffers(prefix + name + ".")

    # -- mode / dtype --------------------------------------------------------
    def train(self, mode=True):
        self._training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    @property
    def training(self):
        return self._training

    def to_dtype(self, dtype):
        """Convert parameters and buffers in place (f64 for grad checks)."""
        for name, value in list(self.__dict__.items()):
            if isinstance(value, Tensor):
                value.data = value.data.astype(dtype)
                value.grad = None
            elif isinstance(value, np.ndarray):
                self.__dict__[name] = value.astype(dtype)
        for _, child in self._children():
            child.to_dtype(dtype)
        return self

    # -- persistence ---------------------------------------------------------
    def state_entries(self):
        """Ordered {name: array} with buffers under the 'buffer.' namespace."""
        out = {name: p.data for name, p in self.named_parameters()}
        for name, buf in self.named_buffers():
            out["buffer." + name] = buf
        return out

    def load_state_entries(self, entries):
        for name, p in self.named_parameters():
            if name not in entries:
                raise ConfigError(f"checkpoint missing parameter {name!r}")
            if tuple(entries[name].shape) != p.data.shape:
                raise ConfigError(
                    f"checkpoint shape mismatch for {name!r}: "
                    f"{entries[name].shape} vs {p.data.shape}"
                )
            p.data = entries[name].astype(p.data.dtype).copy()
            p.grad = None
        for name, buf in self.named_buffers():
            key = "buffer." + name
            if key not in entries:
                raise ConfigError(f"checkpoint missing buffer {name!r}")
            buf[...] = entries[key].reshape(buf.shape)

    def parameter_count(self):
        return sum(p.data.size for _, p in self.named_parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


# -- layers ---------------------------------------------------------------------


class Conv2d(Module):
    def __init__(self, cin, cout, k, rng, stride=1, padding=0):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.weight = _init_weight(rng, (cout, cin, k, k), cin * k * k)

    def forward(self, x):
        return T.conv2d(x, self.weight, stride=self.stride, padding=self.padding)


class Linear(Module):
    def __init__(self, cin, cout, rng):
        super().__init__()
        self.weight = _init_weight(rng, (cout, cin), cin)

    def forward(self, x):
        return x @ T.transpose(self.weight)


class _BatchNorm(Module):
    def __init__(self, c, axes, affine=True):
        super().__init__()
        self._axes = axes
        if affine:
            self.gamma = Tensor(np.ones(c, dtype=np.float32), requires_grad=True)
            self.beta = Tensor(np.zeros(c, dtype=np.float32), requires_grad=True)
        else:
            self.gamma = None
            self.beta = None
        self.running_mean = np.zeros(c, dtype=np.float32)
        self.running_var = np.ones(c, dtype=np.float32)

    def forward(self, x):
        return T.batch_norm(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            axes=self._axes,
            training=self._training,
        )


class BatchNorm2d(_BatchNorm):
    def __init__(self, c, affine=True):
        super().__init__(c, (0, 2, 3), affine)


class BatchNorm1d(_BatchNorm):
    def __init__(self, c, affine=True):
        super().__init__(c, (0,), affine)


class ConvBNRelu(Module):
    def __init__(self, cin, cout, k, rng, stride=1, padding=0):
        super().__init__()
        self.conv = Conv2d(cin, cout, k, rng, stride=stride, padding=padding)
        self.bn = BatchNorm2d(cout)

    def forward(self, x):
        return T.relu(self.bn(self.conv(x)))


# -- encoder ----------------------------------------------------------------------


class Encoder(Module):
    """Strided 3x3 conv stages: the first log2(output_stride) stages halve
    the raster, the rest keep it."""

    def __init__(self, stage_channels, output_stride, rng, in_channels=3):
        super().__init__()
        n_down = int(round(np.log2(output_stride)))
        if 2**n_down != output_stride or output_stride < 1:
            raise ConfigError(f"output_stride must be a power of two, got {output_stride}")
        if n_down > len(stage_channels):
            raise ConfigError(
                f"output_stride {output_stride} needs {n_down} stages, "
                f"got {len(stage_channels)}"
            )
        self.output_stride = output_stride
        self.out_channels = stage_channels[-1]
        self._stage_names = []
        cin = in_channels
        for i, cout in enumerate(stage_channels):
            stride = 2 if i < n_down else 1
            setattr(self, f"stage{i}", ConvBNRelu(cin, cout, 3, rng, stride=stride, padding=1))
            self._stage_names.append(f"stage{i}")
            cin = cout

    def forward(self, x):
        s = x.shape[2]
        if s % self.output_stride or x.shape[3] % self.output_stride:
            raise ConfigError(
                f"input size {x.shape[2]}x{x.shape[3]} not divisible by "
                f"output_stride {self.output_stride}"
            )
        for name in self._stage_names:
            x = getattr(self, name)(x)
        return x


# -- heads -------------------------------------------------------------------------


class DenseProjector(Module):
    """Three 1x1 convs; the last BN carries no learnable affine."""

    def __init__(self, cin, width, nout, rng):
        super().__init__()
        self.conv1 = Conv2d(cin, width, 1, rng)
        self.bn1 = BatchNorm2d(width)
        self.conv2 = Conv2d(width, width, 1, rng)
        self.bn2 = BatchNorm2d(width)
        self.conv3 = Conv2d(width, nout, 1, rng)
        self.bn3 = BatchNorm2d(nout, affine=False)

    def forward(self, x):
        x = T.relu(self.bn1(self.conv1(x)))
        x = T.relu(self.bn2(self.conv2(x)))
        return self.bn3(self.conv3(x))


def _bottleneck(dim):
    return max(dim // 4, 8)


class DensePredictor(Module):
    """1x1-conv bottleneck: dim -> max(dim/4, 8) -> dim."""

    def __init__(self, dim, rng):
        super().__init__()
        hidden = _bottleneck(dim)
        self.conv1 = Conv2d(dim, hidden, 1, rng)
        self.bn1 = BatchNorm2d(hidden)
        self.conv2 = Conv2d(hidden, dim, 1, rng)

    def forward(self, x):
        return self.conv2(T.relu(self.bn1(self.conv1(x))))


class MLPProjector(Module):
    """Three-layer MLP, affine-free final BN (region and global branches)."""

    def __init__(self, cin, width, nout, rng):
        super().__init__()
        self.fc1 = Linear(cin, width, rng)
        self.bn1 = BatchNorm1d(width)
        self.fc2 = Linear(width, width, rng)
        self.bn2 = BatchNorm1d(width)
        self.fc3 = Linear(width, nout, rng)
        self.bn3 = BatchNorm1d(nout, affine=False)

    def forward(self, x):
        x = T.relu(self.bn1(self.fc1(x)))
        x = T.relu(self.bn2(self.fc2(x)))
        return self.bn3(self.fc3(x))


class MLPPredictor(Module):
    """Two-layer bottleneck MLP: dim -> max(dim/4, 8) -> dim."""

    def __init__(self, dim, rng):
        super().__init__()
        hidden = _bottleneck(dim)
        self.fc1 = Linear(dim, hidden, rng)
        self.bn1 = BatchNorm1d(hidden)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x):
        return self.fc2(T.relu(self.bn1(self.fc1(x))))


# -- full model --------------------------------------------------------------------


class DenseSiamModel(Module):
    """Encoder plus every head a mode needs.

    pretrain: dense head (N), region head, global SimSiam branch.
    seg: dense head (N classes), auxiliary dense head (N_aux), region head.
    """

    def __init__(self, mode, rng, *, stage_channels, output_stride, head_width,
                 n, n_aux, region_dim):
        super().__init__()
        if mode not in ("pretrain", "seg"):
            raise ConfigError(f"mode must be pretrain or seg, got {mode!r}")
        self.mode = mode
        self.n = n
        self.n_aux = n_aux
        self.encoder = Encoder(stage_channels, output_stride, rng)
        cenc = self.encoder.out_channels
        self.proj = DenseProjector(cenc, head_width, n, rng)
        self.pred = DensePredictor(n, rng)
        self.region_proj = MLPProjector(cenc, head_width, region_dim, rng)
        self.region_pred = MLPPredictor(region_dim, rng)
        if mode == "pretrain":
            self.global_proj = MLPProjector(cenc, head_width, head_width, rng)
            self.global_pred = MLPPredictor(head_width, rng)
        else:
            self.aux_proj = DenseProjector(cenc, head_width, n_aux, rng)
            self.aux_pred = DensePredictor(n_aux, rng)

    # -- forward pieces ------------------------------------------------------
    def encode(self, x):
        return self.encoder(x)

    def dense_out(self, feat):
        z = self.proj(feat)
        return z, self.pred(z)

    def aux_out(self, feat):
        if self.mode != "seg":
            raise UsageError("auxiliary dense branch only exists in seg mode")
        z = self.aux_proj(feat)
        return z, self.aux_pred(z)

    def global_out(self, feat):
        if self.mode != "pretrain":
            raise UsageError("global branch only exists in pretrain mode")
        z = self.global_proj(feat.mean(axis=(2, 3)))
        return z, self.global_pred(z)

    def region_out(self, e):
        """e: [B,N,C_enc] region embeddings -> (u, v), both [B,N,D_r]."""
        b, n, c = e.shape
        v = self.region_proj(e.reshape(b * n, c))
        u = self.region_pred(v)
        d = v.shape[-1]
        return u.reshape(b, n, d), v.reshape(b, n, d)


def model_from_config(cfg, rng):
    """Build a DenseSiamModel from a TrainConfig-like object."""
    return DenseSiamModel(
        cfg.mode,
        rng,
        stage_channels=list(cfg.encoder_channels),
        output_stride=cfg.resolved_output_stride(),
        head_width=cfg.head_width,
        n=cfg.n,
        n_aux=cfg.n_aux,
        region_dim=cfg.region_dim,
    )


def save_checkpoint(path, model, extra=None):
    """Model state plus any extra entries (optimizer, counters, config).

    String extras (e.g. the config echo) are stored through the text
    encoding; everything else must already be array-like.
    """
    entries = model.state_entries()
    if extra:
        for k, v in extra.items():
            entries[k] = container.text_to_array(v) if isinstance(v, str) else v
    container.save(path, entries)


def load_checkpoint(path):
    return container.load(path)
