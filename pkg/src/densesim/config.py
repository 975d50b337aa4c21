"""Run configuration: flat key=value files with strict validation.

Format: one `key = value` per line, `#` starts a comment, blank lines
ignored.  Unknown keys are rejected rather than silently ignored, and so
are duplicates — both usually mean a typo that would otherwise train the
wrong model.  The original file text is kept on the parsed config and
echoed verbatim into run outputs so results stay attributable.
"""

import dataclasses
import sys

from densesim.errors import ConfigError


def _parse_bool(s):
    v = s.strip().lower()
    if v in ("true", "false"):
        return v == "true"
    raise ValueError(f"expected true or false, got {s!r}")


def _parse_int_list(s):
    items = [p.strip() for p in s.split(",") if p.strip()]
    if not items:
        raise ValueError("expected a comma-separated list of ints")
    return tuple(int(p) for p in items)


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclasses.dataclass
class TrainConfig:
    mode: str = "pretrain"
    base_lr: float = 0.05
    batch_size: int = 32
    epochs: int = 5
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: str = "auto"          # auto -> cosine (pretrain) / constant (seg)
    region_start_fraction: float = 0.5
    seed: int = 0
    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda3: float = 1.0
    tau: float = 0.1
    k: int = 7                      # sampled correspondence grid is k x k
    n: int = 32
    n_aux: int = 128
    max_steps: int = 0              # 0 = no cap
    view_size: int = 32
    output_stride: int = 0          # 0 = auto: 8 pretrain / 4 seg
    encoder_channels: tuple = (16, 32, 64)
    head_width: int = 64
    region_dim: int = 64
    dist: str = "ce"
    region_detach: bool = True
    seg_cross_view_labels: bool = False
    sample_k: int = 1               # candidate multiplier for point selection
    sample_beta: float = 0.0        # fraction of points picked by dissimilarity
    save_every: int = 0             # epochs between periodic checkpoints; 0 = off
    init_from: str = ""             # checkpoint whose encoder weights seed this run
    vflip: bool = False
    raw_text: str = dataclasses.field(default="", repr=False, compare=False)

    # -- derived values -----------------------------------------------------
    def resolved_output_stride(self):
        if self.output_stride:
            return self.output_stride
        return 8 if self.mode == "pretrain" else 4

    def resolved_schedule(self):
        if self.schedule != "auto":
            return self.schedule
        return "cosine" if self.mode == "pretrain" else "constant"

    def echo_text(self):
        return self.raw_text if self.raw_text else format_config(self)

    # -- validation ---------------------------------------------------------
    def validate(self, warn_stream=None):
        warn = warn_stream if warn_stream is not None else sys.stderr
        if self.mode not in ("pretrain", "seg"):
            raise ConfigError(f"mode must be pretrain or seg, got {self.mode!r}")
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        if self.batch_size < 2:
            raise ConfigError(
                f"batch_size must be at least 2 (batch statistics), got {self.batch_size}"
            )
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0,1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.schedule not in ("auto", "cosine", "constant"):
            raise ConfigError(
                f"schedule must be auto, cosine or constant, got {self.schedule!r}"
            )
        if not 0.0 <= self.region_start_fraction <= 1.0:
            raise ConfigError(
                f"region_start_fraction must lie in [0,1], got {self.region_start_fraction}"
            )
        for name in ("lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.k < 1:
            raise ConfigError(f"k must be at least 1, got {self.k}")
        if self.n < 2 or self.n_aux < 2:
            raise ConfigError(f"n and n_aux must be at least 2, got {self.n}, {self.n_aux}")
        if self.max_steps < 0:
            raise ConfigError(f"max_steps must be non-negative, got {self.max_steps}")
        os_ = self.resolved_output_stride()
        if os_ < 1 or (os_ & (os_ - 1)) != 0:
            raise ConfigError(f"output_stride must be a power of two, got {os_}")
        if self.view_size < 1 or self.view_size % os_ != 0:
            raise ConfigError(
                f"view_size must be a positive multiple of the output stride "
                f"({os_}), got {self.view_size}"
            )
        if any(c < 1 for c in self.encoder_channels) or not self.encoder_channels:
            raise ConfigError(f"encoder_channels must be positive, got {self.encoder_channels}")
        if 2 ** len(self.encoder_channels) < os_:
            raise ConfigError(
                f"output stride {os_} needs at least "
                f"{max(1, os_.bit_length() - 1)} encoder stages, "
                f"got {len(self.encoder_channels)}"
            )
        if self.head_width < 1 or self.region_dim < 1:
            raise ConfigError("head_width and region_dim must be positive")
        if self.dist not in ("ce", "cosine"):
            raise ConfigError(f"dist must be ce or cosine, got {self.dist!r}")
        if self.sample_k < 1:
            raise ConfigError(f"sample_k must be at least 1, got {self.sample_k}")
        if not 0.0 <= self.sample_beta <= 1.0:
            raise ConfigError(f"sample_beta must lie in [0,1], got {self.sample_beta}")
        if self.save_every < 0:
            raise ConfigError(f"save_every must be non-negative, got {self.save_every}")
        if self.vflip:
            raise ConfigError(
                "vertical flips are not supported: view geometry models "
                "horizontal flips only"
            )
        if self.mode == "seg" and self.n_aux <= self.n:
            warn.write(
                f"warning: n_aux ({self.n_aux}) should exceed n ({self.n}) so the "
                "auxiliary branch is the finer-grained one\n"
            )
        return self


_FIELD_PARSERS = {
    "mode": str,
    "base_lr": float,
    "batch_size": int,
    "epochs": int,
    "momentum": float,
    "weight_decay": float,
    "schedule": str,
    "region_start_fraction": float,
    "seed": int,
    "lambda1": float,
    "lambda2": float,
    "lambda3": float,
    "tau": float,
    "k": int,
    "n": int,
    "n_aux": int,
    "max_steps": int,
    "view_size": int,
    "output_stride": int,
    "encoder_channels": _parse_int_list,
    "head_width": int,
    "region_dim": int,
    "dist": str,
    "region_detach": _parse_bool,
    "seg_cross_view_labels": _parse_bool,
    "sample_k": int,
    "sample_beta": float,
    "save_every": int,
    "init_from": str,
    "vflip": _parse_bool,
}


def parse_config_text(text, validate=True, warn_stream=None):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _FIELD_PARSERS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = _FIELD_PARSERS[key](value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    cfg = TrainConfig(raw_text=text, **values)
    if validate:
        cfg.validate(warn_stream=warn_stream)
    return cfg


def load_config(path, validate=True, warn_stream=None):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, validate=validate, warn_stream=warn_stream)


def format_config(cfg):
    """Canonical text for a config built in code (no file to echo)."""
    lines = []
    for f in dataclasses.fields(TrainConfig):
        if f.name == "raw_text":
            continue
        lines.append(f"{f.name} = {_fmt(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"
