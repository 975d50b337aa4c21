"""Training loop: batching, SGD, schedules, metrics CSV, checkpoints.

Determinism contract: a run is a pure function of (config, dataset).
Every random stream is derived statelessly from the root seed — batch
order from (seed, "order", epoch), augmentations from (seed, "aug",
epoch, dataset_index), candidate points from (seed, "points", epoch,
dataset_index) — so resuming from an epoch-boundary checkpoint replays
the remaining epochs bit-exactly without serializing generator state.
"""

import dataclasses
import math
import os

import numpy as np

from densesim import data as D
from densesim import geometry as G
from densesim import nn
from densesim import objectives as O
from densesim import tensor as T
from densesim.config import TrainConfig
from densesim.errors import ConfigError, ShapeError, TrainingDiverged, UsageError
from densesim.seeding import derive_rng
from densesim.tensor import Tensor

CSV_HEADER = "step,epoch,lr,l_sim,l_dense,l_region,l_seg,l_aux,collapse"


# -- optimizer ---------------------------------------------------------------------


def effective_lr(cfg):
    """Linear batch scaling: base_lr * batch_size / 256."""
    return cfg.base_lr * cfg.batch_size / 256.0


def lr_at(t, total, schedule, lr0):
    """Step-t learning rate; cosine decays to 0 at t == total."""
    if schedule == "constant":
        return lr0
    if schedule == "cosine":
        if total <= 0:
            return lr0
        return lr0 * 0.5 * (1.0 + math.cos(math.pi * t / total))
    raise ConfigError(f"unknown schedule {schedule!r}")


def sgd_step(params, grads, state, lr, momentum, weight_decay):
    """g <- grad + wd*p; buf <- m*buf + g; p <- p - lr*buf.

    Every parameter moves every step: a parameter outside the step's
    graph contributes grad 0 but still decays, so a branch being inactive
    never silently freezes its weights differently from a zero-weight run.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter {name} {p.data.shape}")
        g = g + weight_decay * p.data
        buf = state.get(name)
        buf = g if buf is None else momentum * buf + g
        state[name] = buf
        p.data = p.data - lr * buf
    return params, state


def collapse_metric(z_batch):
    """Mean per-channel std of row-normalized embeddings; 0 means collapse."""
    z = z_batch.data if isinstance(z_batch, Tensor) else np.asarray(z_batch)
    z = np.asarray(z, dtype=np.float64)
    norms = np.sqrt((z * z).sum(axis=1, keepdims=True))
    z = z / np.maximum(norms, 1e-12)
    return float(z.std(axis=0).mean())


# -- batch assembly ------------------------------------------------------------------


@dataclasses.dataclass
class Batch:
    x1: Tensor
    x2: Tensor
    coords1: Tensor  # [B,K,K,2] normalized view-1 sample positions
    coords2: Tensor


def _point_dissimilarity(z1, z2):
    # symmetric cross entropy per point; z*: [N, P] logits, returns [P]
    def logsoft(a):
        m = a.max(axis=0, keepdims=True)
        e = np.exp(a - m)
        return (a - m) - np.log(e.sum(axis=0, keepdims=True))

    lp1, lp2 = logsoft(z1), logsoft(z2)
    ce12 = -(np.exp(lp1) * lp2).sum(axis=0)
    ce21 = -(np.exp(lp2) * lp1).sum(axis=0)
    return 0.5 * (ce12 + ce21)


def _select_grid(pair, cfg, rng_points, model=None):
    """Correspondence coords for one view pair, [K,K,2] per view.

    Default path is the deterministic cell-center grid.  With sample_k>1
    the grid is replaced by K*K points chosen from sample_k*K*K uniform
    candidates in the overlap, biased toward cross-view disagreement when
    sample_beta>0.
    """
    k = cfg.k
    if cfg.sample_k == 1:
        corr = G.build_correspondence(pair.spec1, pair.spec2, k)
        return corr.coords_v1, corr.coords_v2
    inter = G.intersect(pair.spec1, pair.spec2)
    if inter is None:  # overlap guaranteed by sample_pair, but stay safe
        corr = G.build_correspondence(pair.spec1, pair.spec2, k)
        return corr.coords_v1, corr.coords_v2
    ix, iy, iw, ih = inter
    n_pts = k * k
    cand = np.stack(
        [
            rng_points.uniform(ix, ix + iw, size=cfg.sample_k * n_pts),
            rng_points.uniform(iy, iy + ih, size=cfg.sample_k * n_pts),
        ],
        axis=1,
    )
    c1 = G.map_to_view(cand, pair.spec1)
    c2 = G.map_to_view(cand, pair.spec2)
    if cfg.sample_beta > 0.0 and model is not None:
        was_training = model._training
        model.eval()  # selection must not touch BN running statistics
        try:
            with T.no_grad():
                f1 = model.encode(Tensor(pair.x1[None].astype(np.float32)))
                f2 = model.encode(Tensor(pair.x2[None].astype(np.float32)))
                z1 = model.dense_out(f1)[0]
                z2 = model.dense_out(f2)[0]
                s1 = T.grid_sample_bilinear(
                    z1, Tensor(c1[None, :, None, :].astype(np.float32))
                )
                s2 = T.grid_sample_bilinear(
                    z2, Tensor(c2[None, :, None, :].astype(np.float32))
                )
        finally:
            if was_training:
                model.train()
        dissim = _point_dissimilarity(s1.data[0, :, :, 0], s2.data[0, :, :, 0])
    else:
        dissim = np.zeros(cand.shape[0])
    idx = O.select_hard_points(dissim, cfg.sample_beta, n_pts, rng_points)
    return c1[idx].reshape(k, k, 2), c2[idx].reshape(k, k, 2)


def build_batch(images, idxs, cfg, aug_cfg, epoch, model=None):
    x1s, x2s, c1s, c2s = [], [], [], []
    for idx in idxs:
        rng = derive_rng(cfg.seed, "aug", epoch, int(idx))
        pair = D.sample_pair(images[int(idx)], rng, aug_cfg)
        rng_points = derive_rng(cfg.seed, "points", epoch, int(idx))
        c1, c2 = _select_grid(pair, cfg, rng_points, model=model)
        x1s.append(pair.x1)
        x2s.append(pair.x2)
        c1s.append(c1)
        c2s.append(c2)
    return Batch(
        x1=Tensor(np.stack(x1s)),
        x2=Tensor(np.stack(x2s)),
        coords1=Tensor(np.stack(c1s).astype(np.float32)),
        coords2=Tensor(np.stack(c2s).astype(np.float32)),
    )


# -- single optimization step ---------------------------------------------------------


def _sample(grid_map, coords):
    return T.grid_sample_bilinear(grid_map, coords)


class _NonFiniteLoss(Exception):
    """Internal signal distinguishing divergence from genuine usage bugs."""


def _finite(name, t):
    v = float(t.data)
    if not np.isfinite(v):
        raise _NonFiniteLoss(name)
    return v


def train_step(model, batch, cfg, region_active):
    """Forward both views, build all active losses; returns (total, metrics)."""
    feat1 = model.encode(batch.x1)
    feat2 = model.encode(batch.x2)
    z1, p1 = model.dense_out(feat1)
    z2, p2 = model.dense_out(feat2)
    z1s, p1s = _sample(z1, batch.coords1), _sample(p1, batch.coords1)
    z2s, p2s = _sample(z2, batch.coords2), _sample(p2, batch.coords2)

    metrics = {"l_sim": None, "l_dense": None, "l_region": None,
               "l_seg": None, "l_aux": None}
    l_dense = O.pixsim_loss(p1s, z1s, p2s, z2s, dist=cfg.dist)

    l_region = None
    if region_active:
        e1 = O.region_embeddings(z1s, _sample(feat1, batch.coords1))
        e2 = O.region_embeddings(z2s, _sample(feat2, batch.coords2))
        u1, v1 = model.region_out(e1)
        u2, v2 = model.region_out(e2)
        l_region = O.region_contrastive_loss(
            u1, u2, v1, v2, cfg.tau, detach_targets=cfg.region_detach
        )

    if cfg.mode == "pretrain":
        gz1, gp1 = model.global_out(feat1)
        gz2, gp2 = model.global_out(feat2)
        l_sim = O.global_loss(gp1, gz1, gp2, gz2)
        total = O.total_pretrain_loss(l_sim, l_dense, l_region, cfg.lambda1, cfg.lambda2)
        metrics["l_sim"] = _finite("l_sim", l_sim)
        emb = np.concatenate([gz1.data, gz2.data], axis=0)
    else:
        za1, pa1 = model.aux_out(feat1)
        za2, pa2 = model.aux_out(feat2)
        l_aux = O.pixsim_loss(
            _sample(pa1, batch.coords1), _sample(za1, batch.coords1),
            _sample(pa2, batch.coords2), _sample(za2, batch.coords2),
            dist=cfg.dist,
        )
        if cfg.seg_cross_view_labels:
            lab1 = O.seg_pseudo_labels(z2s)
            lab2 = O.seg_pseudo_labels(z1s)
        else:
            lab1 = lab2 = None
        l_seg = 0.5 * (O.seg_ce_loss(z1s, lab1) + O.seg_ce_loss(z2s, lab2))
        lam1, lam4 = O.seg_lambda_weights(cfg.n, cfg.n_aux)
        total = O.total_seg_loss(
            l_dense, l_region, l_seg, l_aux, lam1, cfg.lambda2, cfg.lambda3, lam4
        )
        metrics["l_seg"] = _finite("l_seg", l_seg)
        metrics["l_aux"] = _finite("l_aux", l_aux)
        emb = np.concatenate([z1.data.mean(axis=(2, 3)), z2.data.mean(axis=(2, 3))], axis=0)

    metrics["l_dense"] = _finite("l_dense", l_dense)
    if l_region is not None:
        metrics["l_region"] = _finite("l_region", l_region)
    metrics["collapse"] = collapse_metric(emb)
    return total, metrics


# -- epoch / loop -------------------------------------------------------------------


@dataclasses.dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    momentum: dict = dataclasses.field(default_factory=dict)
    total_steps: int = 0


def region_active_at(epoch, cfg):
    return cfg.lambda2 > 0 and epoch >= cfg.region_start_fraction * cfg.epochs


def _fmt_field(v):
    return "" if v is None else repr(float(v))


def format_row(step, epoch, lr, metrics):
    fields = [str(step), str(epoch), repr(float(lr))]
    for key in ("l_sim", "l_dense", "l_region", "l_seg", "l_aux", "collapse"):
        fields.append(_fmt_field(metrics.get(key)))
    return ",".join(fields)


def train_epoch(model, images, cfg, state, aug_cfg=None, row_sink=None):
    """One pass over the dataset (drop-last batching); returns CSV-shaped rows."""
    if model.mode != cfg.mode:
        raise UsageError(f"model mode {model.mode!r} != config mode {cfg.mode!r}")
    if aug_cfg is None:
        aug_cfg = _aug_for(cfg)
    n = len(images)
    spe = n // cfg.batch_size
    if spe == 0:
        raise ConfigError(
            f"dataset of {n} images is smaller than one batch ({cfg.batch_size})"
        )
    params = dict(model.named_parameters())
    lr0 = effective_lr(cfg)
    schedule = cfg.resolved_schedule()
    region_on = region_active_at(state.epoch, cfg)
    order = derive_rng(cfg.seed, "order", state.epoch).permutation(n)
    model.train()
    rows = []
    for b in range(spe):
        if cfg.max_steps and state.step >= state.total_steps:
            break
        idxs = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
        batch = build_batch(images, idxs, cfg, aug_cfg, state.epoch, model=model)
        lr = lr_at(state.step, state.total_steps, schedule, lr0)
        for p in params.values():
            p.grad = None
        try:
            total, metrics = train_step(model, batch, cfg, region_on)
            if not np.isfinite(float(total.data)):
                raise _NonFiniteLoss("total")
        except _NonFiniteLoss as exc:
            raise TrainingDiverged(
                f"non-finite loss component {exc} at step {state.step}",
                dump={"step": state.step, "epoch": state.epoch, "lr": lr,
                      "component": str(exc)},
            ) from exc
        total.backward()
        grads = {name: p.grad for name, p in params.items()}
        sgd_step(params, grads, state.momentum, lr, cfg.momentum, cfg.weight_decay)
        row = format_row(state.step, state.epoch, lr, metrics)
        rows.append(row)
        if row_sink is not None:
            row_sink(row)
        state.step += 1
    state.epoch += 1
    return rows


def _aug_for(cfg):
    if cfg.mode == "pretrain":
        return D.pretrain_aug_config(cfg.view_size)
    return D.seg_aug_config(cfg.view_size)


# -- persistence --------------------------------------------------------------------


def _metrics_path(out):
    return out + ".metrics.csv"


def _config_path(out):
    return out + ".config.txt"


def save_train_checkpoint(path, model, cfg, state):
    extra = {
        "state.step": np.int64(state.step),
        "state.epoch": np.int64(state.epoch),
        "state.seed": np.int64(cfg.seed),
        "meta.config": cfg.echo_text(),
    }
    for name, buf in state.momentum.items():
        extra["momentum." + name] = buf
    nn.save_checkpoint(path, model, extra)


def load_train_checkpoint(path, cfg):
    """Rebuild (model, state) from a checkpoint written by this trainer."""
    from densesim import container
    from densesim.config import parse_config_text

    entries = nn.load_checkpoint(path)
    if "meta.config" in entries:
        saved = parse_config_text(
            container.array_to_text(entries["meta.config"]), validate=False
        )
        a = dataclasses.replace(saved, raw_text="")
        b = dataclasses.replace(cfg, raw_text="")
        if a != b:
            raise ConfigError(
                "checkpoint was written with a different config; refusing to "
                "resume (pass the original config file)"
            )
    model = nn.model_from_config(cfg, derive_rng(cfg.seed, "init"))
    model_keys = {k for k, _ in model.named_parameters()}
    model_keys |= {"buffer." + k for k, _ in model.named_buffers()}
    model.load_state_entries({k: v for k, v in entries.items() if k in model_keys})
    state = TrainState(
        step=int(entries["state.step"].item()) if "state.step" in entries else 0,
        epoch=int(entries["state.epoch"].item()) if "state.epoch" in entries else 0,
    )
    for key, value in entries.items():
        if key.startswith("momentum."):
            state.momentum[key[len("momentum."):]] = value
    return model, state


def load_encoder_init(model, path):
    """Seed matching weights from another run's checkpoint.

    Transfers every parameter and buffer whose name and shape both match
    the donor, so a pretrain checkpoint warm-starts the encoder (and any
    same-shaped heads) while mode-specific heads stay freshly initialized.
    The encoder itself must match; a donor without one is a config error.
    """
    entries = nn.load_checkpoint(path)
    copied = 0
    for name, p in model.named_parameters():
        if name not in entries or tuple(entries[name].shape) != p.data.shape:
            if name.startswith("encoder."):
                raise ConfigError(
                    f"init_from checkpoint {path!r} has no encoder weight "
                    f"{name!r} of shape {p.data.shape}"
                )
            continue
        p.data = entries[name].astype(p.data.dtype).copy()
        p.grad = None
        copied += 1
    for name, buf in model.named_buffers():
        key = "buffer." + name
        if key not in entries or tuple(entries[key].shape) != buf.shape:
            if name.startswith("encoder."):
                raise ConfigError(
                    f"init_from checkpoint {path!r} has no encoder buffer "
                    f"{name!r} of shape {buf.shape}"
                )
            continue
        buf[...] = entries[key]
    return copied


def train_loop(cfg, images, out_path, resume=None, log_stream=None):
    """Full run: epochs, periodic checkpoints, metrics CSV, config echo.

    `resume` points at an epoch-boundary checkpoint; its sibling metrics
    CSV (when present) seeds the new CSV so the resumed file is
    byte-identical to an uninterrupted run's.
    """
    n = len(images)
    spe = n // cfg.batch_size
    if spe == 0:
        raise ConfigError(
            f"dataset of {n} images is smaller than one batch ({cfg.batch_size})"
        )
    total_steps = cfg.epochs * spe
    if cfg.max_steps:
        total_steps = min(total_steps, cfg.max_steps)

    if resume is not None:
        model, state = load_train_checkpoint(resume, cfg)
        prior_csv = None
        resume_csv = _metrics_path(resume)
        if os.path.exists(resume_csv):
            with open(resume_csv, "r", encoding="utf-8") as fh:
                prior_csv = fh.read()
    else:
        model = nn.model_from_config(cfg, derive_rng(cfg.seed, "init"))
        if cfg.init_from:
            load_encoder_init(model, cfg.init_from)
        state = TrainState()
        prior_csv = None
    state.total_steps = total_steps

    parent = os.path.dirname(out_path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(_config_path(out_path), "w", encoding="utf-8") as fh:
        fh.write(cfg.echo_text())

    aug_cfg = _aug_for(cfg)
    with open(_metrics_path(out_path), "w", encoding="utf-8") as csv:
        if prior_csv is not None:
            csv.write(prior_csv)
        else:
            csv.write(CSV_HEADER + "\n")
        csv.flush()

        def sink(row):
            csv.write(row + "\n")
            csv.flush()
            if log_stream is not None:
                log_stream.write(row + "\n")

        while state.epoch < cfg.epochs and state.step < max(total_steps, 1):
            if cfg.max_steps and state.step >= total_steps:
                break
            train_epoch(model, images, cfg, state, aug_cfg=aug_cfg, row_sink=sink)
            boundary = state.epoch  # epochs completed so far
            if (
                cfg.save_every
                and boundary % cfg.save_every == 0
                and boundary < cfg.epochs
                and state.step < total_steps
            ):
                snap = f"{out_path}.epoch{boundary}"
                save_train_checkpoint(snap, model, cfg, state)
                csv.flush()
                # snapshot the CSV too, so resuming from this checkpoint can
                # reproduce the uninterrupted run's file byte-for-byte
                with open(_metrics_path(out_path), "r", encoding="utf-8") as src:
                    rows_so_far = src.read()
                with open(_metrics_path(snap), "w", encoding="utf-8") as dst:
                    dst.write(rows_so_far)

    save_train_checkpoint(out_path, model, cfg, state)
    return model, state
