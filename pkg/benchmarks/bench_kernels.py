"""Compare the compiled and numpy kernel backends on the hot paths.

Run:  python3 benchmarks/bench_kernels.py [--repeats 5]

Times im2col/col2im, bilinear sampling forward/backward, and a full
conv2d forward+backward through the tensor core under each backend.
"""

import argparse
import time

import numpy as np

from densesim import tensor as T
from densesim.kernels import get_backend
from densesim.tensor import Tensor


def timeit(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_backend(impl, repeats):
    rng = np.random.default_rng(0)
    x = rng.random((16, 32, 32, 32), dtype=np.float32)
    cols = impl.im2col(x, 3, 3, 1)
    g = rng.random(cols.shape, dtype=np.float32)
    field = rng.random((16, 32, 16, 16), dtype=np.float32)
    coords = rng.random((16, 24, 24, 2), dtype=np.float32)
    sampled = impl.bilinear_forward(field, coords)
    gs = rng.random(sampled.shape, dtype=np.float32)
    _, c, h, w = x.shape

    results = {
        "im2col 16x32x32x32 k3": timeit(lambda: impl.im2col(x, 3, 3, 1), repeats),
        "col2im (transpose)": timeit(
            lambda: impl.col2im(g, c, h, w, 3, 3, 1), repeats
        ),
        "bilinear fwd 16x32 24x24": timeit(
            lambda: impl.bilinear_forward(field, coords), repeats
        ),
        "bilinear bwd field": timeit(
            lambda: impl.bilinear_backward_field(coords, gs, field.shape[2], field.shape[3]),
            repeats,
        ),
        "bilinear bwd coords": timeit(
            lambda: impl.bilinear_backward_coords(field, coords, gs), repeats
        ),
    }
    return results


def bench_conv(backend_name, repeats):
    # end-to-end autodiff conv2d; backend choice enters through T's kernels
    import densesim.kernels as K

    impl = get_backend(backend_name)
    saved = {
        name: getattr(K, name)
        for name in (
            "im2col",
            "col2im",
            "bilinear_forward",
            "bilinear_backward_field",
            "bilinear_backward_coords",
        )
    }
    for name in saved:
        setattr(K, name, getattr(impl, name))
    try:
        rng = np.random.default_rng(0)
        x = Tensor(rng.random((8, 16, 32, 32), dtype=np.float32))
        w = Tensor(rng.random((32, 16, 3, 3), dtype=np.float32) * 0.1, requires_grad=True)

        def step():
            w.grad = None
            y = T.conv2d(x, w, stride=1, padding=1)
            y.sum().backward()

        return timeit(step, repeats)
    finally:
        for name, fn in saved.items():
            setattr(K, name, fn)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    backends = {}
    for name in ("numpy", "cython"):
        try:
            backends[name] = get_backend(name)
        except ImportError:
            print(f"backend {name}: unavailable, skipping")
    rows = {name: bench_backend(impl, args.repeats) for name, impl in backends.items()}

    keys = next(iter(rows.values())).keys()
    width = max(len(k) for k in keys) + 2
    header = f"{'kernel':<{width}}" + "".join(f"{n:>12}" for n in rows)
    if len(rows) == 2:
        header += f"{'speedup':>10}"
    print(header)
    for key in keys:
        line = f"{key:<{width}}"
        vals = [rows[n][key] for n in rows]
        for v in vals:
            line += f"{v * 1e3:>10.2f}ms"
        if len(vals) == 2 and vals[1] > 0:
            line += f"{vals[0] / vals[1]:>9.1f}x"
        print(line)

    if len(backends) == 2:
        tn = bench_conv("numpy", args.repeats)
        tc = bench_conv("cython", args.repeats)
        print(f"{'conv2d fwd+bwd (autodiff)':<{width}}{tn * 1e3:>10.2f}ms"
              f"{tc * 1e3:>10.2f}ms{tn / tc:>9.1f}x")


if __name__ == "__main__":
    main()
