"""Behavioral acceptance gates for the whole package.

Each test prints one PASS/FAIL verdict line (collected again in the
terminal summary) and then asserts.  The two training gates rerun the
recorded recipes from scratch, so this file dominates suite runtime:
roughly a minute for the pretraining gate and a few minutes for the
segmentation gate on a desktop CPU.
"""

import csv
import io
import math
import time

import numpy as np

from densesim import data as D
from densesim import evalseg as E
from densesim import geometry as G
from densesim import gradcheck
from densesim import nn
from densesim import objectives as O
from densesim import tensor as T
from densesim import train as TR
from densesim.config import TrainConfig
from densesim.errors import EmptyOverlapError
from densesim.seeding import derive_rng
from densesim.tensor import Tensor


def _read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- 1: gradient integrity ---------------------------------------------------------


def test_criterion_01_gradient_integrity(verdict):
    t0 = time.perf_counter()
    buf = io.StringIO()
    failures = gradcheck.run_suite(stream=buf, seeds=20)
    elapsed = time.perf_counter() - t0
    out = buf.getvalue()
    lines = out.strip().splitlines()
    worst = max(float(line.rsplit("=", 1)[1]) for line in lines)
    required = set(gradcheck.CHECKS) | set(O.LOSS_CHECKS)
    covered = {line.split()[1] for line in lines}
    ok = (
        failures == 0
        and required <= covered
        and worst < 1e-4
        and elapsed < 60.0
    )
    verdict(1, "gradient integrity", ok,
            f"{len(lines)} checks x 20 seeds, worst rel err {worst:.2e}, {elapsed:.1f}s")
    assert ok, out


# -- 2: stop-gradient contract ------------------------------------------------------


def _sg_leaves(seed, shape):
    rng = derive_rng(seed, "sg-oracle", *shape)
    x1 = Tensor(rng.normal(size=shape), requires_grad=True)
    x2 = Tensor(rng.normal(size=shape), requires_grad=True)
    # p and z share leaves, so a leaky stop-gradient would change the grads
    return (x1, x2), x1 * x1, x1 * 3.0 + 0.25, x2 * x2, x2 * 3.0 + 0.25


def _sg_case(shape, loss_fn, const_fn):
    leaves, p1, z1, p2, z2 = _sg_leaves(0, shape)
    loss = loss_fn(p1, z1, p2, z2)
    loss.backward()
    ref = (float(loss.data), [l.grad.copy() for l in leaves])

    leaves, p1, z1, p2, z2 = _sg_leaves(0, shape)
    loss = const_fn(p1, Tensor(z1.data.copy()), p2, Tensor(z2.data.copy()))
    loss.backward()
    sub = (float(loss.data), [l.grad.copy() for l in leaves])
    return ref[0] == sub[0] and all(
        np.array_equal(a, b) for a, b in zip(ref[1], sub[1])
    )


def test_criterion_02_stop_gradient_contract(verdict):
    cases = {
        "pixsim": _sg_case(
            (2, 5, 3, 3),
            lambda p1, z1, p2, z2: O.pixsim_loss(p1, z1, p2, z2, dist="ce"),
            lambda p1, c1, p2, c2: 0.5 * O.dist_ce(p1, c2, axis=1)
            + 0.5 * O.dist_ce(p2, c1, axis=1),
        ),
        "region": _sg_case(
            (2, 4, 6),
            lambda u1, v1, u2, v2: O.region_contrastive_loss(u1, u2, v1, v2, tau=0.2),
            lambda u1, c1, u2, c2: 0.5 * O.info_nce(u1, c2, tau=0.2)
            + 0.5 * O.info_nce(u2, c1, tau=0.2),
        ),
        "global": _sg_case(
            (4, 8),
            O.global_loss,
            lambda p1, c1, p2, c2: 0.5 * O.dist_cosine(p1, c2)
            + 0.5 * O.dist_cosine(p2, c1),
        ),
    }
    ok = all(cases.values())
    verdict(2, "stop-gradient contract", ok,
            "constant substitution leaves grads bit-identical for "
            + ", ".join(cases))
    assert ok, cases


# -- 3: view-swap symmetry ----------------------------------------------------------


def test_criterion_03_loss_symmetry(verdict):
    trials = 100
    exact = True
    for trial in range(trials):
        rng = derive_rng(trial, "sym")
        b = int(rng.integers(1, 4))
        c = int(rng.integers(2, 7))
        k = int(rng.integers(1, 4))
        nr = int(rng.integers(2, 6))
        d = int(rng.integers(2, 9))
        tau = float(rng.uniform(0.05, 1.0))
        dist = ("ce", "cosine")[trial % 2]

        def mk(*shape):
            return Tensor(rng.normal(size=shape))

        p1, z1, p2, z2 = (mk(b, c, k, k) for _ in range(4))
        a = float(O.pixsim_loss(p1, z1, p2, z2, dist=dist).data)
        s = float(O.pixsim_loss(p2, z2, p1, z1, dist=dist).data)
        exact &= math.isfinite(a) and a == s

        g1, h1, g2, h2 = (mk(b, d) for _ in range(4))
        a = float(O.global_loss(g1, h1, g2, h2).data)
        s = float(O.global_loss(g2, h2, g1, h1).data)
        exact &= math.isfinite(a) and a == s

        u1, u2, v1, v2 = (mk(b, nr, d) for _ in range(4))
        a = float(O.region_contrastive_loss(u1, u2, v1, v2, tau).data)
        s = float(O.region_contrastive_loss(u2, u1, v2, v1, tau).data)
        exact &= math.isfinite(a) and a == s
    verdict(3, "view-swap symmetry", exact,
            f"{trials} random configurations x 3 losses, bit-exact")
    assert exact


# -- 4: analytic anchors -------------------------------------------------------------


def test_criterion_04_analytic_anchors(verdict):
    uniform_ok = True
    for n in (2, 27, 128):
        val = float(O.dist_ce(Tensor(np.zeros((1, n))), Tensor(np.zeros((1, n)))).data)
        uniform_ok &= abs(val - math.log(n)) < 1e-9
    lam1, lam4 = O.seg_lambda_weights(27, 128)
    lam_ok = (
        abs(lam4 - 0.4045) < 1e-4
        and abs(lam1 - 0.5955) < 1e-4
        and abs((lam1 + lam4) - 1.0) < 1e-12
    )
    lr_ok = TR.effective_lr(TrainConfig(base_lr=0.05, batch_size=512)) == 0.1
    ok = uniform_ok and lam_ok and lr_ok
    verdict(4, "analytic anchors", ok,
            f"uniform ce=ln N; lam=({lam1:.4f},{lam4:.4f}); scaled lr exact")
    assert ok


# -- 5: geometry ramp check ----------------------------------------------------------


def test_criterion_05_geometry_correspondence(verdict):
    S, V, K = 64, 32, 7
    xs, ys = np.meshgrid(np.arange(S) + 0.5, np.arange(S) + 0.5)
    ramp = Tensor(np.stack([xs, ys])[None])  # value at each pixel = its center (x, y)
    lo, hi = 0.5 / V, 1.0 - 0.5 / V

    def rand_view(rng):
        w = float(rng.uniform(10.0, S - 2.0))
        h = float(rng.uniform(10.0, S - 2.0))
        x0 = float(rng.uniform(1.0, S - 1.0 - w))
        y0 = float(rng.uniform(1.0, S - 1.0 - h))
        return G.ViewSpec(x0, y0, w, h, bool(rng.integers(2)), V)

    def raster(view):
        src = G.view_source_coords(view, S, S)
        return T.grid_sample_bilinear(ramp, Tensor(src[None])).data

    def recovered(view_img, coords):
        out = T.grid_sample_bilinear(Tensor(view_img), Tensor(coords[None])).data
        return np.moveaxis(out[0], 0, -1)  # [K,K,2]

    pairs = flips = attempts = 0
    worst_interp = worst_rt = 0.0
    rng = derive_rng(0, "ramp-pairs")
    while pairs < 1000:
        attempts += 1
        assert attempts < 50_000, "view sampler starved"
        v1, v2 = rand_view(rng), rand_view(rng)
        try:
            grid = G.build_correspondence(v1, v2, K)
        except EmptyOverlapError:
            continue
        # keep grid points on both views' pixel-center lattices: the ramp is
        # only exactly linear away from the clamped border band
        if (grid.coords_v1.min() < lo or grid.coords_v1.max() > hi
                or grid.coords_v2.min() < lo or grid.coords_v2.max() > hi):
            continue
        pairs += 1
        flips += int(v1.hflip) + int(v2.hflip)
        for view, coords in ((v1, grid.coords_v1), (v2, grid.coords_v2)):
            err = np.abs(recovered(raster(view), coords) - grid.points_orig).max()
            worst_interp = max(worst_interp, float(err))
            rt = np.abs(G.map_from_view(coords, view) - grid.points_orig).max()
            worst_rt = max(worst_rt, float(rt))
    ok = worst_interp < 1e-3 * S and worst_rt < 1e-9 and flips > 0
    verdict(5, "geometry correspondence", ok,
            f"{pairs} pairs ({flips} flipped views): ramp err {worst_interp:.2e} px "
            f"(tol {1e-3 * S}), round-trip {worst_rt:.2e}")
    assert ok


# -- 6: assignment oracle -------------------------------------------------------------


def test_criterion_06_assignment_oracle(verdict):
    checked = 0
    exact = True
    for n in range(2, 8):
        for trial in range(200):
            rng = derive_rng(n, "hungarian", trial)
            cost = rng.integers(0, 20, size=(n, n)).astype(np.float64)
            if E.hungarian_assign(cost).tolist() != E.brute_force_assign(cost).tolist():
                exact = False
            checked += 1
    verdict(6, "assignment oracle", exact,
            f"{checked} integer matrices, n=2..7, exact match")
    assert exact


# -- 7: non-collapse pretraining -------------------------------------------------------


def _total_loss(row, lam1, lam2):
    total = float(row["l_sim"]) + lam1 * float(row["l_dense"])
    if row["l_region"]:
        total += lam2 * float(row["l_region"])
    return total


def test_criterion_07_non_collapse_pretraining(verdict, tmp_path):
    t0 = time.perf_counter()
    images, _ = D.gen_shapes_dataset(512, 3, 64, seed=100)
    details = []
    ok = True
    for seed in (0, 1, 2):
        cfg = TrainConfig(mode="pretrain", batch_size=32, epochs=19, max_steps=300,
                          view_size=32, n=4, base_lr=1.6, output_stride=4, seed=seed)
        out = str(tmp_path / f"c7_seed{seed}")
        TR.train_loop(cfg, images, out)
        rows = _read_rows(out + ".metrics.csv")
        assert len(rows) == 300
        totals = [_total_loss(r, cfg.lambda1, cfg.lambda2) for r in rows]
        ratio = np.mean(totals[-20:]) / np.mean(totals[:20])
        collapse = float(rows[-1]["collapse"])
        floor = 0.5 / math.sqrt(cfg.head_width)  # global head keeps head_width dims
        seed_ok = ratio <= 0.8 and collapse >= floor
        ok &= seed_ok
        details.append(f"seed {seed}: ratio {ratio:.3f}, collapse {collapse:.3f}")
    elapsed = time.perf_counter() - t0
    ok = ok and elapsed < 900.0
    verdict(7, "non-collapse pretraining", ok,
            "; ".join(details) + f"; {elapsed:.0f}s")
    assert ok, details


# -- 8: segmentation above chance ------------------------------------------------------


def test_criterion_08_segmentation_above_chance(verdict, tmp_path):
    t0 = time.perf_counter()
    train_images, _ = D.gen_shapes_dataset(2000, 3, 80, seed=300)
    val_images, val_masks = D.gen_shapes_dataset(200, 3, 80, seed=301)
    kinds = D.class_kinds(3)

    donor_cfg = TrainConfig(mode="pretrain", batch_size=32, epochs=15,
                            view_size=32, n=4, base_lr=1.6, output_stride=4, seed=0)
    donor = str(tmp_path / "c8_donor")
    TR.train_loop(donor_cfg, train_images, donor)

    details = []
    ok = True
    for seed in (0, 1, 2):
        cfg = TrainConfig(mode="seg", n=3, n_aux=32, epochs=5, batch_size=32,
                          base_lr=3.2, view_size=32, k=11, lambda3=0.25,
                          head_width=128, init_from=donor, seed=seed)
        model, _ = TR.train_loop(cfg, train_images, str(tmp_path / f"c8_seed{seed}"))
        preds = E.predict_labels(model, val_images)
        miou = E.evaluate_maps(preds, val_masks, kinds, n_pred=3).miou
        base_mean, _ = E.random_baseline_miou(
            E.prediction_marginals(preds, 3), val_masks, kinds, n_draws=20, seed=seed
        )
        ratio = miou / base_mean
        ok &= ratio >= 2.0
        details.append(f"seed {seed}: mIoU {miou:.3f} vs chance {base_mean:.3f} "
                       f"(x{ratio:.2f})")
    elapsed = time.perf_counter() - t0
    ok = ok and elapsed < 1800.0
    verdict(8, "segmentation above chance", ok,
            "; ".join(details) + f"; {elapsed:.0f}s")
    assert ok, details


# -- 9: region-branch schedule ----------------------------------------------------------


def test_criterion_09_region_schedule(verdict, tiny_dataset, tiny_cfg, tmp_path):
    images = tiny_dataset[0]
    lines = {}
    for tag, lam2 in (("on", 0.1), ("off", 0.0)):
        out = str(tmp_path / f"c9_{tag}")
        TR.train_loop(tiny_cfg(lambda2=lam2), images, out)
        lines[tag] = open(out + ".metrics.csv").read().splitlines()
    split = 1 + 2 * 3  # header + epochs 0-1 (region starts at epoch 2 of 4)
    before_same = lines["on"][:split] == lines["off"][:split]
    after_differs = lines["on"][split:] != lines["off"][split:]
    region_logged = all(r.split(",")[5] != "" for r in lines["on"][split:])
    ok = before_same and after_differs and region_logged
    verdict(9, "region branch schedule", ok,
            "rows before the region start match a weight-zero run bit-exactly")
    assert ok


# -- 10: persistence ---------------------------------------------------------------------


def test_criterion_10_persistence(verdict, tiny_dataset, tiny_cfg, tmp_path):
    images, masks, kinds = tiny_dataset

    data_path = str(tmp_path / "round.dst")
    D.save_dataset(data_path, images, masks, kinds)
    im2, mk2, kd2 = D.load_dataset(data_path)
    data_ok = (
        np.array_equal(images, im2) and images.dtype == im2.dtype
        and np.array_equal(masks, mk2) and np.array_equal(kinds, kd2)
    )

    model = nn.model_from_config(tiny_cfg(), derive_rng(1, "init"))
    ck = str(tmp_path / "model.ckpt")
    nn.save_checkpoint(ck, model)
    entries = nn.load_checkpoint(ck)
    ckpt_ok = all(
        np.array_equal(entries[name], p.data) for name, p in model.named_parameters()
    ) and all(
        np.array_equal(entries["buffer." + name], b) for name, b in model.named_buffers()
    )
    nn.save_checkpoint(ck + ".again", model)
    ckpt_ok &= open(ck, "rb").read() == open(ck + ".again", "rb").read()

    cfg = tiny_cfg(save_every=2)
    full = str(tmp_path / "c10_full")
    TR.train_loop(cfg, images, full)
    resumed = str(tmp_path / "c10_resumed")
    TR.train_loop(cfg, images, resumed, resume=full + ".epoch2")
    resume_ok = (
        open(full + ".metrics.csv", "rb").read()
        == open(resumed + ".metrics.csv", "rb").read()
    )

    ok = data_ok and ckpt_ok and resume_ok
    verdict(10, "persistence", ok,
            "dataset + checkpoint round-trips bit-exact; resumed CSV identical")
    assert ok, (data_ok, ckpt_ok, resume_ok)
