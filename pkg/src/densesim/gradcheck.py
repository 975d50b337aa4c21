"""Finite-difference verification of autodiff gradients.

Central differences in float64 are the oracle: for scalar loss f and leaf
x, df/dx_i ~ (f(x + h e_i) - f(x - h e_i)) / (2h) with a per-element step
h = base_step * max(1, |x_i|).  Gradients are compared by the norm ratio
||a - n|| / max(||a||, ||n||): near-zero individual elements sit at the
difference-quotient noise floor (cancellation error ~ eps*|f|/h), so an
elementwise quotient there would measure the oracle, not the gradient.
"""

from densesim import tensor as T
from densesim.errors import UsageError

import numpy as np


def relative_error(analytic, numeric):
    """||a - n||_2 / max(||a||_2, ||n||_2); 0 when both gradients vanish."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def numeric_grad(f, inputs, index, base_step=1e-5):
    """Central-difference gradient of scalar f w.r.t. inputs[index]."""
    x = inputs[index]
    if not x.data.flags["C_CONTIGUOUS"]:
        x.data = np.ascontiguousarray(x.data)
    flat = x.data.reshape(-1)  # view: in-place nudges reach f
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        h = base_step * max(1.0, abs(orig))
        flat[i] = orig + h
        with T.no_grad():
            fp = f(*inputs).item()
        flat[i] = orig - h
        with T.no_grad():
            fm = f(*inputs).item()
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(x.data.shape)


def grad_check(f, inputs, base_step=1e-5, tol=1e-4):
    """Compare autodiff and finite-difference gradients of scalar f.

    All inputs must be float64 leaves.  Returns (ok, report) where report
    maps input index to the worst relative error.  The function is
    evaluated twice at the base point first: a mismatch means f is
    nondeterministic and finite differences would be meaningless.
    """
    for x in inputs:
        if x.dtype != np.float64:
            raise UsageError("grad_check requires float64 inputs")
        if x._parents:
            raise UsageError("grad_check inputs must be leaves")
    with T.no_grad():
        v1 = f(*inputs).item()
        v2 = f(*inputs).item()
    if v1 != v2:
        raise UsageError(f"function is nondeterministic at the base point: {v1!r} != {v2!r}")

    for x in inputs:
        x.grad = None
    loss = f(*inputs)
    if loss.data.size != 1:
        raise UsageError("grad_check expects a scalar-valued function")
    loss.backward()

    ok = True
    report = {}
    for idx, x in enumerate(inputs):
        if not x.requires_grad:
            continue
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        numeric = numeric_grad(f, inputs, idx, base_step)
        err = relative_error(analytic, numeric)
        report[idx] = err
        if err > tol:
            ok = False
    return ok, report


# -- named check suite (CLI surface) -------------------------------------------
#
# Each entry builds a scalar function plus float64 leaf inputs, runs
# grad_check, and reports pass/fail.  Every check takes a seed so the
# suite can sweep many random inputs.  A separate sabotaged check with a
# deliberately wrong backward proves the checker has teeth; stop-gradient
# probes verify detached branches really receive zero gradient.


def _rng(tag, seed=0):
    from densesim.seeding import derive_rng

    return derive_rng(7, "gradcheck", tag, seed)


def _leaf(rng, *shape):
    return T.Tensor(rng.normal(0.0, 1.0, size=shape), requires_grad=True)


def _check_elementwise(seed=0):
    rng = _rng("elementwise", seed)
    a = _leaf(rng, 3, 4)
    b = _leaf(rng, 3, 4)

    def f(a, b):
        return ((a * b + a - b / (b * b + 1.5)) * 0.5).sum()

    return grad_check(f, [a, b])


def _check_activations(seed=0):
    rng = _rng("activations", seed)
    a = _leaf(rng, 5, 3)
    # keep clear of the relu kink so finite differences stay two-sided
    a.data[np.abs(a.data) < 0.05] += 0.1

    def f(a):
        return (T.relu(a) + T.exp(a * 0.3) + T.sqrt(a * a + 1.0)).sum()

    return grad_check(f, [a])


def _check_matmul(seed=0):
    rng = _rng("matmul", seed)
    a = _leaf(rng, 2, 3, 4)
    b = _leaf(rng, 2, 4, 5)

    def f(a, b):
        return (a @ b).sum(axis=(1, 2)).mean()

    return grad_check(f, [a, b])


def _check_reductions(seed=0):
    rng = _rng("reductions", seed)
    a = _leaf(rng, 4, 3, 2)

    def f(a):
        return (a.mean(axis=0).sum(axis=1) * a.sum(axis=(0, 2)).mean()).sum()

    return grad_check(f, [a])


def _check_softmax(seed=0):
    rng = _rng("softmax", seed)
    a = _leaf(rng, 4, 6)
    w = _leaf(rng, 4, 6)

    def f(a, w):
        return (T.softmax(a, axis=1) * w).sum() + (T.log_softmax(a * 0.7, axis=1) * w).mean()

    return grad_check(f, [a, w])


def _check_normalize(seed=0):
    rng = _rng("normalize", seed)
    a = _leaf(rng, 5, 8)

    def f(a):
        n = T.l2_normalize(a, axis=1)
        return (n * n * T.Tensor(np.arange(8.0))).sum()

    return grad_check(f, [a])


def _check_conv2d(seed=0):
    rng = _rng("conv2d", seed)
    x = _leaf(rng, 2, 3, 6, 7)
    w = _leaf(rng, 4, 3, 3, 3)

    def f(x, w):
        y = T.conv2d(x, w, stride=2, padding=1)
        return (y * y).mean()

    return grad_check(f, [x, w])


def _check_grid_sample(seed=0):
    rng = _rng("grid_sample", seed)
    field = _leaf(rng, 2, 3, 5, 6)
    coords = T.Tensor(rng.uniform(0.15, 0.85, size=(2, 3, 4, 2)), requires_grad=True)
    # keep sampling points away from cell boundaries where the bilinear
    # surface has kinks and one-sided derivatives would disagree
    h, w = 5, 6
    cx = coords.data[..., 0] * w - 0.5
    cy = coords.data[..., 1] * h - 0.5
    coords.data[..., 0] += ((cx - np.floor(cx)) < 0.1) * (0.15 / w)
    coords.data[..., 1] += ((cy - np.floor(cy)) < 0.1) * (0.15 / h)

    def f(field, coords):
        s = T.grid_sample_bilinear(field, coords)
        return (s * s).sum()

    return grad_check(f, [field, coords])


def _check_batch_norm(seed=0):
    rng = _rng("batch_norm", seed)
    x = _leaf(rng, 4, 3, 5, 5)
    gamma = T.Tensor(rng.uniform(0.5, 1.5, size=3), requires_grad=True)
    beta = _leaf(rng, 3)
    # fixed probe weights: an unweighted square of a normalized output is
    # nearly constant in x, which starves finite differences of signal
    probe = T.Tensor(rng.normal(size=(4, 3, 5, 5)))

    def f(x, gamma, beta):
        rm = np.zeros(3)
        rv = np.ones(3)
        y = T.batch_norm(x, gamma, beta, rm, rv, axes=(0, 2, 3), training=True)
        return (y * probe).mean() + (y * y * probe).sum() * 0.01

    return grad_check(f, [x, gamma, beta])


def _check_stop_gradient(seed=0):
    """Detached branches must receive exactly zero gradient."""
    rng = _rng("stopgrad", seed)
    a = _leaf(rng, 3, 3)
    b = _leaf(rng, 3, 3)

    loss = (a * T.stop_gradient(b)).sum()
    loss.backward()
    ok = b.grad is None or not np.any(b.grad)
    ok = ok and np.allclose(a.grad, b.data)

    # without the detach, b would get a's data as gradient; confirm the
    # substitution changes the answer so the probe is not vacuous
    a2 = T.Tensor(a.data.copy(), requires_grad=True)
    b2 = T.Tensor(b.data.copy(), requires_grad=True)
    (a2 * b2).sum().backward()
    ok = ok and np.allclose(b2.grad, a2.data) and np.any(b2.grad)
    return ok, {0: 0.0 if ok else 1.0}


def sabotage_check(seed=0):
    """Negative control: a deliberately wrong backward that the checker
    must flag.  Returns (caught, report); run via the CLI --sabotage flag.
    """
    rng = _rng("sabotage", seed)
    a = _leaf(rng, 3, 4)

    def bad_square(t):
        data = t.data * t.data

        def bk(g):
            # deliberately wrong scale: should be 2*t
            t.grad += g * 3.0 * t.data

        return T._from_op(data, (t,), bk)

    def f(a):
        return bad_square(a).sum()

    ok, report = grad_check(f, [a])
    return (not ok), report


# Primitive checks; loss checks from the objectives module are appended
# lazily (import cycle: objectives builds on tensor, not on this module).
CHECKS = {
    "elementwise": _check_elementwise,
    "activations": _check_activations,
    "matmul": _check_matmul,
    "reductions": _check_reductions,
    "softmax": _check_softmax,
    "normalize": _check_normalize,
    "conv2d": _check_conv2d,
    "grid_sample": _check_grid_sample,
    "batch_norm": _check_batch_norm,
    "stop_gradient": _check_stop_gradient,
}


def all_checks():
    """Primitive checks plus the loss checks contributed by objectives."""
    from densesim import objectives

    combined = dict(CHECKS)
    combined.update(objectives.LOSS_CHECKS)
    return combined


def run_suite(names=None, stream=None, seeds=1):
    """Run named checks over `seeds` random draws each; returns #failures.

    Each line reports the worst relative error seen across seeds.
    """
    import sys

    checks = all_checks()
    out = stream or sys.stdout
    failures = 0
    for name in names or checks:
        if name not in checks:
            raise UsageError(f"unknown gradient check: {name!r}")
        worst = 0.0
        ok = True
        for seed in range(seeds):
            seed_ok, report = checks[name](seed)
            ok = ok and seed_ok
            if report:
                worst = max(worst, max(report.values()))
        status = "PASS" if ok else "FAIL"
        if not ok:
            failures += 1
        out.write(f"{status} {name} seeds={seeds} worst_rel_err={worst:.3e}\n")
    return failures
