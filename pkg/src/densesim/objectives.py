"""Training objectives: pixel, region, global, segmentation, composites.

Shape conventions: dense grids are [B,N,K,K] with the channel axis as the
vector dimension; region embeddings are [B,N,C]; global embeddings [B,D].
Distance helpers reduce with a mean over every non-vector dimension.

Symmetric losses are written as 0.5*term(1->2) + 0.5*term(2->1) so that
swapping the two views swaps the addends, which IEEE addition keeps
bit-identical.
"""

import numpy as np

from densesim import tensor as T
from densesim.errors import ConfigError, UsageError
from densesim.tensor import Tensor


def dist_cosine(p, z, axis=-1, eps=1e-12):
    """Mean negative cosine similarity; zero vectors contribute 0."""
    pn = T.l2_normalize(p, axis=axis, eps=eps)
    zn = T.l2_normalize(z, axis=axis, eps=eps)
    return -(pn * zn).sum(axis=axis).mean()


def dist_ce(p, z, axis=-1):
    """Mean of -<softmax(p), log_softmax(z)> over the vector axis."""
    return -(T.softmax(p, axis=axis) * T.log_softmax(z, axis=axis)).sum(axis=axis).mean()


_DISTS = {"ce": dist_ce, "cosine": dist_cosine}


def pixsim_loss(p1, z1, p2, z2, dist="ce"):
    """Pixel-level similarity over sampled grids [B,N,K,K].

    0.5*D(p1, sg(z2)) + 0.5*D(p2, sg(z1)); gradients flow only through
    the predictor arguments.
    """
    if dist not in _DISTS:
        raise ConfigError(f"pixsim distance must be one of {sorted(_DISTS)}, got {dist!r}")
    fn = _DISTS[dist]
    return 0.5 * fn(p1, T.stop_gradient(z2), axis=1) + 0.5 * fn(p2, T.stop_gradient(z1), axis=1)


# -- region branch ---------------------------------------------------------------


def region_masks(z_grid):
    """Channel softmax of z': per-location pseudo-category probabilities."""
    return T.softmax(z_grid, axis=1)


def region_embeddings(z_grid, enc_grid):
    """e[b,n,c] = sum_ij softmax(z')[b,n,i,j] * enc'[b,c,i,j].

    No mass normalization: a region's embedding scales with how much
    probability mass it claims.
    """
    b, n = z_grid.shape[0], z_grid.shape[1]
    k2 = z_grid.shape[2] * z_grid.shape[3]
    c = enc_grid.shape[1]
    w = region_masks(z_grid).reshape(b, n, k2)
    f = enc_grid.reshape(b, c, k2)
    return w @ T.transpose(f, (0, 2, 1))


def info_nce(u, v, tau):
    """InfoNCE over the region axis: diagonal positives, same-image negatives.

    Rows are L2-normalized and scaled by 1/tau; the loss sums over the N
    regions and averages over the batch.  N=1 gives exactly 0.
    """
    if u.shape[1] == 0:
        raise UsageError("info_nce needs at least one region")
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    n = u.shape[1]
    un = T.l2_normalize(u, axis=2)
    vn = T.l2_normalize(v, axis=2)
    logits = (un @ T.transpose(vn, (0, 2, 1))) * (1.0 / tau)
    logp = T.log_softmax(logits, axis=2)
    diag = Tensor(np.eye(n, dtype=u.data.dtype)[None])
    return -(logp * diag).sum(axis=(1, 2)).mean()


def region_contrastive_loss(u1, u2, v1, v2, tau, detach_targets=True):
    """0.5*L_c(u1, v2) + 0.5*L_c(u2, v1), targets detached by default."""
    t2 = T.stop_gradient(v2) if detach_targets else v2
    t1 = T.stop_gradient(v1) if detach_targets else v1
    return 0.5 * info_nce(u1, t2, tau) + 0.5 * info_nce(u2, t1, tau)


def global_loss(p1, z1, p2, z2):
    """SimSiam image-level loss on [B,D] embeddings of the full views."""
    return 0.5 * dist_cosine(p1, T.stop_gradient(z2)) + 0.5 * dist_cosine(
        p2, T.stop_gradient(z1)
    )


# -- segmentation objectives -------------------------------------------------------


def seg_pseudo_labels(z_grid):
    """Argmax pseudo labels [B,K,K] (ties resolve to the lowest index)."""
    return np.argmax(z_grid.data, axis=1)


def seg_class_weights(labels, n):
    """Clamped inverse-frequency weights from within-batch label counts.

    weight(c) = clamp(median(present counts)/count(c), 0.1, 10); absent
    classes get 0 so they cannot contribute through numerical accident.
    """
    counts = np.bincount(labels.ravel(), minlength=n).astype(np.float64)
    present = counts > 0
    w = np.zeros(n, dtype=np.float64)
    if present.any():
        med = float(np.median(counts[present]))
        w[present] = np.clip(med / counts[present], 0.1, 10.0)
    return w


def seg_ce_loss(z_grid, labels=None):
    """Class-balanced cross entropy of z' against its own argmax labels.

    Labels are detached (self-distillation sharpens the prediction); pass
    `labels` explicitly for cross-view supervision.  Weighted-mean
    normalization: sum(w_i * nll_i) / sum(w_i) over all grid positions.
    """
    n = z_grid.shape[1]
    if labels is None:
        labels = seg_pseudo_labels(z_grid)
    w = seg_class_weights(labels, n)
    onehot = np.moveaxis(np.eye(n, dtype=z_grid.data.dtype)[labels], -1, 1)
    wmap = w[labels][:, None].astype(z_grid.data.dtype)
    denom = float(wmap.sum())
    if denom == 0.0:
        return Tensor(np.zeros((), dtype=z_grid.data.dtype))
    logp = T.log_softmax(z_grid, axis=1)
    return -(logp * Tensor(onehot * wmap)).sum() * (1.0 / denom)


def seg_lambda_weights(n, n_aux):
    """(lambda1, lambda4) balancing the N-way and N_aux-way dense terms."""
    if n < 2 or n_aux < 2:
        raise ConfigError(f"need n, n_aux >= 2, got {n}, {n_aux}")
    ln_n = float(np.log(n))
    ln_a = float(np.log(n_aux))
    lam4 = ln_n / (ln_n + ln_a)
    lam1 = ln_a / (ln_n + ln_a)
    return lam1, lam4


# -- combined objectives -------------------------------------------------------------


def _require_non_negative(**weights):
    for name, value in weights.items():
        if value < 0:
            raise ConfigError(f"loss weight {name} must be non-negative, got {value}")


def total_pretrain_loss(l_sim, l_dense, l_region, lam1, lam2):
    """L_sim + lam1*L_dense + lam2*L_region.

    A None or zero-weighted region term is skipped entirely, so inactive
    RegionSim leaves the value (and the graph) bit-identical to a lam2=0
    run.
    """
    _require_non_negative(lambda1=lam1, lambda2=lam2)
    total = l_sim + lam1 * l_dense
    if l_region is not None and lam2 > 0:
        total = total + lam2 * l_region
    return total


def total_seg_loss(l_dense, l_region, l_seg, l_aux, lam1, lam2, lam3, lam4):
    """lam1*L_dense + lam2*L_region + lam3*L_seg + lam4*L_aux (Nones skip)."""
    _require_non_negative(lambda1=lam1, lambda2=lam2, lambda3=lam3, lambda4=lam4)
    total = lam1 * l_dense
    if l_region is not None and lam2 > 0:
        total = total + lam2 * l_region
    if l_seg is not None and lam3 > 0:
        total = total + lam3 * l_seg
    if l_aux is not None and lam4 > 0:
        total = total + lam4 * l_aux
    return total


# -- biased point selection (over-generate, keep dissimilar) -------------------------


def select_hard_points(dissim, beta, n, rng=None):
    """Pick n of len(dissim) candidates: floor(beta*n) most dissimilar,
    remainder uniform without replacement.

    Ties in dissimilarity break toward the lower index; the returned
    indices are sorted, so beta=0 with exactly n candidates is the
    identity selection.
    """
    d = np.asarray(dissim, dtype=np.float64).ravel()
    if not 0.0 <= beta <= 1.0:
        raise UsageError(f"beta must lie in [0,1], got {beta}")
    if n <= 0 or d.size < n:
        raise UsageError(f"cannot select {n} points from {d.size} candidates")
    n_hard = int(np.floor(beta * n))
    order = np.lexsort((np.arange(d.size), -d))
    hard = order[:n_hard]
    rest = np.setdiff1d(np.arange(d.size), hard)
    n_fill = n - n_hard
    if n_fill == rest.size:
        fill = rest
    elif n_fill == 0:
        fill = np.empty(0, dtype=np.int64)
    else:
        if rng is None:
            raise UsageError("uniform fill requires an rng")
        fill = rng.choice(rest, size=n_fill, replace=False)
    return np.sort(np.concatenate([hard, fill]).astype(np.int64))


# -- finite-difference checks contributed to the gradcheck suite ---------------------
#
# Functions containing stop_gradient are checked against finite
# differences only through their live arguments (targets enter as
# constants); the detached side has its own exact graph-substitution
# tests.  The no-detach region variant covers the embedding + InfoNCE
# chain end to end.


def _rng(tag, seed):
    from densesim.seeding import derive_rng

    return derive_rng(7, "gradcheck-loss", tag, seed)


def _leaf(rng, *shape):
    return Tensor(rng.normal(0.0, 1.0, size=shape), requires_grad=True)


def _const(rng, *shape):
    return Tensor(rng.normal(0.0, 1.0, size=shape))


def _check_dist_cosine(seed=0):
    from densesim.gradcheck import grad_check

    rng = _rng("cos", seed)
    p, z = _leaf(rng, 6, 5), _leaf(rng, 6, 5)
    return grad_check(lambda p, z: dist_cosine(p, z), [p, z])


def _check_dist_ce(seed=0):
    from densesim.gradcheck import grad_check

    rng = _rng("ce", seed)
    p, z = _leaf(rng, 6, 5), _leaf(rng, 6, 5)
    return grad_check(lambda p, z: dist_ce(p, z), [p, z])


def _check_pixsim(dist):
    def check(seed=0):
        from densesim.gradcheck import grad_check

        rng = _rng(f"pixsim-{dist}", seed)
        p1, p2 = _leaf(rng, 2, 4, 3, 3), _leaf(rng, 2, 4, 3, 3)
        z1, z2 = _const(rng, 2, 4, 3, 3), _const(rng, 2, 4, 3, 3)
        return grad_check(lambda p1, p2: pixsim_loss(p1, z1, p2, z2, dist=dist), [p1, p2])

    return check


def _check_region_embeddings(seed=0):
    from densesim.gradcheck import grad_check

    rng = _rng("regemb", seed)
    zg = _leaf(rng, 2, 3, 2, 2)
    eg = _leaf(rng, 2, 5, 2, 2)
    probe = _const(rng, 2, 3, 5)

    def f(zg, eg):
        return (region_embeddings(zg, eg) * probe).sum()

    return grad_check(f, [zg, eg])


def _check_info_nce(seed=0):
    from densesim.gradcheck import grad_check

    rng = _rng("nce", seed)
    u, v = _leaf(rng, 2, 4, 6), _leaf(rng, 2, 4, 6)
    return grad_check(lambda u, v: info_nce(u, v, 0.5), [u, v])


def _check_region_contrastive(seed=0):
    from densesim.gradcheck import grad_check

    rng = _rng("region", seed)
    tensors = [_leaf(rng, 2, 3, 5) for _ in range(4)]

    def f(u1, u2, v1, v2):
        return region_contrastive_loss(u1, u2, v1, v2, tau=0.5, detach_targets=False)

    return grad_check(f, tensors)


def _check_global_loss(seed=0):
    from densesim.gradcheck import grad_check

    rng = _rng("global", seed)
    p1, p2 = _leaf(rng, 4, 6), _leaf(rng, 4, 6)
    z1, z2 = _const(rng, 4, 6), _const(rng, 4, 6)
    return grad_check(lambda p1, p2: global_loss(p1, z1, p2, z2), [p1, p2])


def _bump_argmax_margin(z, margin=0.05):
    # finite differences must not flip the argmax labels mid-check
    lab = np.argmax(z.data, axis=1)
    onehot = np.moveaxis(np.eye(z.data.shape[1], dtype=z.data.dtype)[lab], -1, 1)
    z.data = z.data + margin * onehot
    return z


def _check_seg_ce(seed=0):
    from densesim.gradcheck import grad_check

    rng = _rng("segce", seed)
    z = _bump_argmax_margin(_leaf(rng, 2, 4, 3, 3))
    return grad_check(lambda z: seg_ce_loss(z), [z])


def _check_seg_composite(seed=0):
    """Full objective shape: weighted dense, region, seg-CE and aux terms."""
    from densesim.gradcheck import grad_check

    rng = _rng("composite", seed)
    lam1, lam4 = seg_lambda_weights(3, 8)
    p1, p2 = _leaf(rng, 2, 3, 2, 2), _leaf(rng, 2, 3, 2, 2)
    z1, z2 = _const(rng, 2, 3, 2, 2), _const(rng, 2, 3, 2, 2)
    pa1, pa2 = _leaf(rng, 2, 8, 2, 2), _leaf(rng, 2, 8, 2, 2)
    za1, za2 = _const(rng, 2, 8, 2, 2), _const(rng, 2, 8, 2, 2)
    u1, u2 = _leaf(rng, 2, 3, 5), _leaf(rng, 2, 3, 5)
    v1, v2 = _const(rng, 2, 3, 5), _const(rng, 2, 3, 5)
    zseg = _bump_argmax_margin(_leaf(rng, 2, 3, 2, 2))

    def f(p1, p2, pa1, pa2, u1, u2, zseg):
        l_dense = pixsim_loss(p1, z1, p2, z2)
        l_aux = pixsim_loss(pa1, za1, pa2, za2)
        l_region = 0.5 * info_nce(u1, v2, 0.5) + 0.5 * info_nce(u2, v1, 0.5)
        l_seg = seg_ce_loss(zseg)
        return total_seg_loss(l_dense, l_region, l_seg, l_aux, lam1, 0.1, 1.0, lam4)

    return grad_check(f, [p1, p2, pa1, pa2, u1, u2, zseg])


LOSS_CHECKS = {
    "dist_cosine": _check_dist_cosine,
    "dist_ce": _check_dist_ce,
    "pixsim_ce": _check_pixsim("ce"),
    "pixsim_cosine": _check_pixsim("cosine"),
    "region_embeddings": _check_region_embeddings,
    "info_nce": _check_info_nce,
    "region_contrastive": _check_region_contrastive,
    "global_loss": _check_global_loss,
    "seg_ce": _check_seg_ce,
    "seg_composite": _check_seg_composite,
}
