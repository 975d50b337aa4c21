"""Unsupervised segmentation scoring.

Pipeline: predict label maps with encoder+projector, accumulate a
confusion matrix against ground truth, find the optimal one-to-one
pred->gt relabeling, then report IoU split into stuff and thing classes.

The assignment solver returns the lexicographically smallest permutation
among the optima so that reports are stable across runs and platforms;
`brute_force_assign` is the independent oracle for it.
"""

import dataclasses
import itertools

import numpy as np

from densesim import geometry as G
from densesim import tensor as T
from densesim.errors import UsageError
from densesim.seeding import derive_rng
from densesim.tensor import Tensor


# -- confusion accumulation -----------------------------------------------------------


def new_confusion(n_pred, n_gt):
    return np.zeros((n_pred, n_gt), dtype=np.int64)


def accumulate_confusion(pred_map, gt_map, cm):
    """cm[p,g] += #pixels with prediction p and truth g; returns cm."""
    pred = np.asarray(pred_map).ravel()
    gt = np.asarray(gt_map).ravel()
    if pred.shape != gt.shape:
        raise UsageError(f"prediction/truth shapes differ: {pred_map.shape} vs {gt_map.shape}")
    n_pred, n_gt = cm.shape
    if pred.size and (pred.min() < 0 or pred.max() >= n_pred):
        raise UsageError(f"prediction labels outside [0,{n_pred})")
    if gt.size and (gt.min() < 0 or gt.max() >= n_gt):
        raise UsageError(f"ground-truth labels outside [0,{n_gt})")
    flat = np.bincount(pred * n_gt + gt, minlength=n_pred * n_gt)
    cm += flat.reshape(n_pred, n_gt)
    return cm


# -- optimal assignment ---------------------------------------------------------------


def _hungarian_duals(cost):
    """O(n^3) augmenting-path assignment; returns (col_of_row, u, v).

    Potentials (u, v) stay dual-feasible (u[i]+v[j] <= c[i,j]) throughout,
    which the tie-breaking step relies on.
    """
    n = cost.shape[0]
    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j] = row matched to column j; col n is virtual
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, INF)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = INF
            j1 = -1
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = np.zeros(n, dtype=np.int64)
    for j in range(1, n + 1):
        if p[j] > 0:
            col_of_row[p[j] - 1] = j - 1
    return col_of_row, u[1:], v[1:]


def _kuhn_match(adj, rows, cols):
    """Perfect matching over the given rows/columns of a boolean adjacency."""
    col_list = list(cols)
    col_index = {c: k for k, c in enumerate(col_list)}
    match = [-1] * len(col_list)

    def try_row(r, seen):
        for c in col_list:
            k = col_index[c]
            if adj[r, c] and not seen[k]:
                seen[k] = True
                if match[k] == -1 or try_row(match[k], seen):
                    match[k] = r
                    return True
        return False

    for r in rows:
        if not try_row(r, [False] * len(col_list)):
            return False
    return True


def hungarian_assign(cost):
    """Minimum-cost row->column permutation, lexicographically smallest.

    Any optimal assignment uses only edges tight against an optimal dual
    (complementary slackness works in both directions for assignment
    LPs), so the tie-break greedily picks the smallest feasible tight
    column per row, checking that a perfect matching on tight edges
    remains for the rows below.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise UsageError(f"cost matrix must be square, got shape {c.shape}")
    if c.size == 0:
        return np.zeros(0, dtype=np.int64)
    if not np.isfinite(c).all():
        raise UsageError("cost matrix entries must be finite")
    n = c.shape[0]
    col_of_row, u, v = _hungarian_duals(c)
    slack = c - u[:, None] - v[None, :]
    integral = np.issubdtype(np.asarray(cost).dtype, np.integer)
    tol = 0.0 if integral else 1e-9 * (1.0 + np.abs(c).max())
    tight = slack <= tol

    result = np.full(n, -1, dtype=np.int64)
    free_cols = list(range(n))
    for i in range(n):
        rest_rows = range(i + 1, n)
        for j in free_cols:
            if not tight[i, j]:
                continue
            remaining = [jj for jj in free_cols if jj != j]
            if _kuhn_match(tight, rest_rows, remaining):
                result[i] = j
                free_cols = remaining
                break
        else:  # numerically impossible if duals are feasible; fall back
            result[i] = col_of_row[i]
            free_cols = [jj for jj in free_cols if jj != col_of_row[i]]
    return result


def brute_force_assign(cost):
    """Exhaustive oracle: first strict minimum in lexicographic order."""
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise UsageError(f"cost matrix must be square, got shape {c.shape}")
    n = c.shape[0]
    best_perm, best_cost = None, None
    for perm in itertools.permutations(range(n)):
        total = sum(c[i, perm[i]] for i in range(n))
        if best_cost is None or total < best_cost:
            best_cost = total
            best_perm = perm
    return np.asarray(best_perm, dtype=np.int64)


def assignment_cost(cost, perm):
    c = np.asarray(cost)
    return c[np.arange(len(perm)), perm].sum()


# -- metrics ---------------------------------------------------------------------------


@dataclasses.dataclass
class SegMetrics:
    mapping: np.ndarray      # pred index -> gt index
    iou: np.ndarray          # per gt class; NaN where the union is empty
    miou: float
    miou_st: float
    miou_th: float


def match_labels(cm):
    """pred->gt mapping maximizing matched pixels (cost = -counts)."""
    n_pred, n_gt = cm.shape
    n = max(n_pred, n_gt)
    padded = np.zeros((n, n), dtype=cm.dtype)
    padded[:n_pred, :n_gt] = cm
    return hungarian_assign(-padded)[:n_pred]


def compute_miou(cm, mapping, class_kinds):
    """IoU per gt class after relabeling rows by `mapping`.

    Classes whose union is empty (never predicted-as and never present)
    are excluded from every mean; means over an empty class set are NaN.
    """
    n_pred, n_gt = cm.shape
    n = max(n_pred, n_gt)
    padded = np.zeros((n, n), dtype=np.int64)
    padded[:n_pred, :n_gt] = cm
    full_map = np.full(n, -1, dtype=np.int64)
    full_map[: len(mapping)] = mapping
    missing = [g for g in range(n) if g not in set(full_map.tolist())]
    for i in range(n):
        if full_map[i] < 0:
            full_map[i] = missing.pop(0)
    inv = np.argsort(full_map)          # inv[g] = pred row assigned to gt g
    pcm = padded[inv]
    diag = np.diag(pcm).astype(np.float64)
    union = pcm.sum(axis=0) + pcm.sum(axis=1) - np.diag(pcm)
    iou = np.full(n, np.nan)
    valid = union > 0
    iou[valid] = diag[valid] / union[valid]
    iou = iou[:n_gt]
    valid = valid[:n_gt]

    kinds = np.asarray(class_kinds)

    def mean_over(mask):
        sel = valid & mask
        return float(np.mean(iou[sel])) if sel.any() else float("nan")

    return SegMetrics(
        mapping=np.asarray(mapping, dtype=np.int64),
        iou=iou,
        miou=mean_over(np.ones(n_gt, dtype=bool)),
        miou_st=mean_over(kinds[:n_gt] == 0),
        miou_th=mean_over(kinds[:n_gt] == 1),
    )


def evaluate_maps(pred_maps, gt_maps, class_kinds, n_pred=None):
    """Full scoring pipeline from label maps to SegMetrics."""
    n_gt = len(class_kinds)
    if n_pred is None:
        n_pred = max(n_gt, int(np.max(pred_maps)) + 1 if np.size(pred_maps) else n_gt)
    cm = new_confusion(n_pred, n_gt)
    for pred, gt in zip(pred_maps, gt_maps):
        accumulate_confusion(pred, gt, cm)
    return compute_miou(cm, match_labels(cm), class_kinds)


# -- inference -------------------------------------------------------------------------


def predict_labels(model, images, batch_size=32):
    """Label maps at input resolution from encoder f + projector g only.

    Projector logits are sampled back to pixel centers bilinearly, then
    argmaxed; ties resolve to the lowest class index.
    """
    model.eval()
    size = images.shape[-1]
    centers = G.raster_centers(size).astype(np.float32)
    out = []
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            xb = Tensor(np.asarray(images[start : start + batch_size], dtype=np.float32))
            z = model.dense_out(model.encode(xb))[0]
            coords = Tensor(np.broadcast_to(centers, (xb.shape[0],) + centers.shape).copy())
            logits = T.grid_sample_bilinear(z, coords)
            out.append(np.argmax(logits.data, axis=1).astype(np.int64))
    return np.concatenate(out, axis=0)


# -- chance baseline -------------------------------------------------------------------


def prediction_marginals(pred_maps, n_classes):
    counts = np.bincount(np.asarray(pred_maps).ravel(), minlength=n_classes)
    total = counts.sum()
    if total == 0:
        return np.full(n_classes, 1.0 / n_classes)
    return counts / total


def random_baseline_miou(marginals, gt_maps, class_kinds, n_draws=20, seed=0):
    """Mean mIoU of iid label maps drawn from the given class marginals."""
    gt = np.asarray(gt_maps)
    scores = []
    for i in range(n_draws):
        rng = derive_rng(seed, "baseline", i)
        draw = rng.choice(len(marginals), size=gt.shape, p=marginals)
        scores.append(evaluate_maps(draw, gt, class_kinds, n_pred=len(marginals)).miou)
    return float(np.mean(scores)), scores


# -- report rendering ------------------------------------------------------------------

_KIND_NAMES = {0: "stuff", 1: "thing"}


def _fmt4(x):
    return "nan" if not np.isfinite(x) else f"{x:.4f}"


def render_report(metrics, class_kinds):
    lines = ["class kind iou"]
    for c, kind in enumerate(np.asarray(class_kinds)):
        lines.append(f"{c} {_KIND_NAMES.get(int(kind), '?')} {_fmt4(metrics.iou[c])}")
    lines.append(
        f"mIoU={_fmt4(metrics.miou)} mIoU_St={_fmt4(metrics.miou_st)} "
        f"mIoU_Th={_fmt4(metrics.miou_th)}"
    )
    return "\n".join(lines) + "\n"


def render_csv(metrics, class_kinds):
    lines = ["class,kind,iou"]
    for c, kind in enumerate(np.asarray(class_kinds)):
        lines.append(f"{c},{_KIND_NAMES.get(int(kind), '?')},{_fmt4(metrics.iou[c])}")
    lines.append(f"mIoU,,{_fmt4(metrics.miou)}")
    lines.append(f"mIoU_St,,{_fmt4(metrics.miou_st)}")
    lines.append(f"mIoU_Th,,{_fmt4(metrics.miou_th)}")
    return "\n".join(lines) + "\n"
