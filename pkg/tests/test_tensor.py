"""Autodiff core: graph mechanics, error contracts, and value oracles.

Gradient *correctness* of every op lives in the finite-difference suite
(densesim.gradcheck, exercised by test_gradcheck and acceptance
criterion 1); here we pin the mechanics that finite differences cannot
see — accumulation rules, storage sharing, error types — plus
closed-form value checks against plain numpy.
"""

import numpy as np
import pytest

from densesim import tensor as T
from densesim.errors import ShapeError, UsageError
from densesim.seeding import derive_rng
from densesim.tensor import Tensor


def _leaf(data):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


# -- construction ----------------------------------------------------------------


def test_int_input_promotes_to_float64():
    t = Tensor(np.arange(4))
    assert t.dtype == np.float64


def test_float32_is_preserved():
    t = Tensor(np.zeros(3, dtype=np.float32))
    assert t.dtype == np.float32


# -- graph mechanics ---------------------------------------------------------------


def test_backward_requires_scalar():
    x = _leaf([1.0, 2.0])
    with pytest.raises(UsageError):
        (x * 2.0).backward()


def test_leaf_grads_accumulate_across_backward_calls():
    x = _leaf([1.0, 2.0, 3.0])
    (x * x).sum().backward()
    first = x.grad.copy()
    (x * x).sum().backward()
    assert np.array_equal(x.grad, 2.0 * first)
    x.zero_grad()
    assert x.grad is None


def test_intermediate_grads_reset_per_backward():
    x = _leaf([1.0, 2.0])
    y = x * 3.0
    y.sum().backward()
    g1 = y.grad.copy()
    y.sum().backward()
    assert np.array_equal(y.grad, g1)  # not doubled: intermediates restart at 0


def test_diamond_graph_reuses_node_correctly():
    # y = u + u with u = x*x: dy/dx = 4x exercises fan-out accumulation
    x = _leaf([1.0, -2.0, 0.5])
    u = x * x
    (u + u).sum().backward()
    assert np.allclose(x.grad, 4.0 * x.data)


def test_detach_shares_storage_and_blocks_grad():
    x = _leaf([1.0, 2.0])
    d = x.detach()
    assert d.data is x.data
    assert not d.requires_grad
    (d * 3.0).sum().backward()
    assert x.grad is None


def test_stop_gradient_is_identity_forward():
    x = _leaf([[1.0, -1.0]])
    s = T.stop_gradient(x)
    assert np.array_equal(s.data, x.data)
    (s * x).sum().backward()
    assert np.array_equal(x.grad, x.data)  # only the live factor contributes


def test_no_grad_suppresses_graph_building():
    x = _leaf([2.0])
    with T.no_grad():
        y = (x * x).sum()
    y.backward()  # inert: no graph was recorded
    assert x.grad is None
    # graph building resumes after the context exits
    (x * x).sum().backward()
    assert np.allclose(x.grad, [4.0])


# -- values against numpy -----------------------------------------------------------


def test_arithmetic_matches_numpy():
    rng = derive_rng(11, "tensor", "arith")
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4)) + 3.0  # keep away from 0 for div
    ta, tb = Tensor(a), Tensor(b)
    assert np.allclose((ta + tb).data, a + b)
    assert np.allclose((ta - tb).data, a - b)
    assert np.allclose((ta * tb).data, a * b)
    assert np.allclose((ta / tb).data, a / b)
    assert np.allclose((-ta).data, -a)
    assert np.allclose((ta ** 2).data, a ** 2)
    assert np.allclose((2.0 + ta).data, 2.0 + a)
    assert np.allclose((2.0 - ta).data, 2.0 - a)
    assert np.allclose((2.0 / tb).data, 2.0 / b)
    assert np.allclose(T.exp(ta).data, np.exp(a))
    assert np.allclose(T.log(tb).data, np.log(b))
    assert np.allclose(T.sqrt(tb).data, np.sqrt(b))
    assert np.allclose(T.relu(ta).data, np.maximum(a, 0.0))
    assert np.allclose(T.maximum_scalar(ta, 0.25).data, np.maximum(a, 0.25))


def test_broadcast_add_unbroadcasts_gradient():
    x = _leaf(np.ones((2, 3)))
    b = _leaf(np.zeros((1, 3)))
    (x + b).sum().backward()
    assert b.grad.shape == (1, 3)
    assert np.array_equal(b.grad, np.full((1, 3), 2.0))  # summed over broadcast rows


def test_scalar_times_matrix_gradient():
    s = _leaf(2.0)
    x = _leaf(np.arange(6, dtype=np.float64).reshape(2, 3))
    (s * x).sum().backward()
    assert s.grad.shape == ()
    assert float(s.grad) == x.data.sum()


def test_power_rejects_tensor_exponent():
    x = _leaf([1.0, 2.0])
    with pytest.raises(UsageError):
        T.power(x, Tensor([2.0]))


def test_matmul_requires_matrices():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones(3)), Tensor(np.ones(3)))


def test_matmul_batched_matches_numpy():
    rng = derive_rng(11, "tensor", "matmul")
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 5))
    assert np.allclose((Tensor(a) @ Tensor(b)).data, a @ b)


def test_reductions_and_reshapes_match_numpy():
    rng = derive_rng(11, "tensor", "reduce")
    a = rng.normal(size=(2, 3, 4))
    t = Tensor(a)
    assert np.allclose(t.sum(axis=(1, 2)).data, a.sum(axis=(1, 2)))
    assert np.allclose(t.mean(axis=0, keepdims=True).data, a.mean(axis=0, keepdims=True))
    assert np.allclose(t.reshape(6, 4).data, a.reshape(6, 4))
    assert np.allclose(t.reshape((4, 6)).data, a.reshape(4, 6))
    assert np.allclose(T.transpose(t, (0, 2, 1)).data, a.transpose(0, 2, 1))
    assert np.allclose(Tensor(a[0]).transpose().data, a[0].T)


def test_mean_gradient_is_uniform():
    x = _leaf(np.arange(8, dtype=np.float64))
    x.mean().backward()
    assert np.allclose(x.grad, np.full(8, 1.0 / 8.0))


# -- softmax family -------------------------------------------------------------------


def test_softmax_stable_at_large_logits():
    z = Tensor(np.array([[1000.0, 1000.0, -1000.0]]))
    p = T.softmax(z, axis=1).data
    assert np.all(np.isfinite(p))
    assert np.allclose(p, [[0.5, 0.5, 0.0]])
    lp = T.log_softmax(z, axis=1).data
    assert np.all(np.isfinite(lp[:, :2]))


def test_softmax_rows_sum_to_one():
    rng = derive_rng(11, "tensor", "softmax")
    z = Tensor(rng.normal(size=(4, 7)) * 10.0)
    assert np.allclose(T.softmax(z, axis=1).data.sum(axis=1), 1.0)
    assert np.allclose(
        T.log_softmax(z, axis=1).data, np.log(T.softmax(z, axis=1).data)
    )


def test_l2_normalize_unit_rows():
    rng = derive_rng(11, "tensor", "l2")
    x = Tensor(rng.normal(size=(5, 3)) * 4.0)
    n = T.l2_normalize(x, axis=1).data
    assert np.allclose((n * n).sum(axis=1), 1.0)


def test_l2_normalize_zero_vector_gradient_is_finite():
    # the epsilon clamp sits inside the sqrt exactly so this case cannot
    # produce 0 * inf = NaN (bias-free layers do emit exact zero rows)
    eps = 1e-6
    x = _leaf(np.zeros((1, 3)))
    T.l2_normalize(x, axis=1, eps=eps).sum().backward()
    assert np.all(np.isfinite(x.grad))
    assert np.allclose(x.grad, 1.0 / eps)


# -- conv2d ---------------------------------------------------------------------------


def _conv2d_naive(x, w, stride, padding):
    b, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((b, cout, oh, ow), dtype=x.dtype)
    for bi in range(b):
        for co in range(cout):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[bi, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[bi, co, i, j] = (patch * w[co]).sum()
    return out


def test_conv2d_matches_naive_loop():
    rng = derive_rng(11, "tensor", "conv")
    x = rng.normal(size=(2, 3, 5, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    for stride, padding in [(1, 0), (1, 1), (2, 1)]:
        got = T.conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding).data
        assert np.allclose(got, _conv2d_naive(x, w, stride, padding), atol=1e-12)


def test_conv2d_rejects_even_kernel():
    with pytest.raises(UsageError):
        T.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))))


def test_conv2d_rejects_channel_mismatch():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


def test_conv2d_rejects_undersized_input():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 5, 5))))


# -- grid sample ------------------------------------------------------------------------


def test_grid_sample_bilinear_interior_value():
    # 2x2 field, sample dead center: plain average of the four corners
    field = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    coords = Tensor(np.array([[[[0.5, 0.5]]]]))
    out = T.grid_sample_bilinear(field, coords).data
    assert np.allclose(out, 2.5)


def test_grid_sample_clamps_at_border():
    field = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    coords = Tensor(np.array([[[[0.0, 0.0], [1.0, 1.0]]]]))  # outside center lattice
    out = T.grid_sample_bilinear(field, coords).data.ravel()
    assert np.allclose(out, [1.0, 4.0])


def test_grid_sample_reproduces_linear_ramp():
    s = 8
    ramp = (np.arange(s, dtype=np.float64) + 0.5)[None, None, None, :].repeat(s, axis=2)
    rng = derive_rng(11, "tensor", "ramp")
    uv = rng.uniform(0.5 / s, 1 - 0.5 / s, size=(1, 5, 4, 2))
    out = T.grid_sample_bilinear(Tensor(ramp.copy()), Tensor(uv)).data
    assert np.allclose(out[0, 0], uv[0, :, :, 0] * s, atol=1e-12)


def test_grid_sample_error_contracts():
    field = Tensor(np.ones((2, 1, 4, 4)))
    with pytest.raises(UsageError):
        T.grid_sample_bilinear(field, Tensor(np.full((2, 1, 1, 2), np.nan)))
    with pytest.raises(ShapeError):
        T.grid_sample_bilinear(field, Tensor(np.ones((2, 1, 3))))
    with pytest.raises(ShapeError):
        T.grid_sample_bilinear(field, Tensor(np.ones((3, 1, 1, 2))))


# -- batch norm ---------------------------------------------------------------------------


def test_batch_norm_training_normalizes_and_tracks_stats():
    rng = derive_rng(11, "tensor", "bn")
    x = rng.normal(2.0, 3.0, size=(4, 2, 3, 3))
    rm = np.zeros(2)
    rv = np.ones(2)
    out = T.batch_norm(Tensor(x), None, None, rm, rv, axes=(0, 2, 3), training=True)
    assert np.allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
    assert np.allclose(out.data.std(axis=(0, 2, 3)), 1.0, atol=1e-3)
    mean = x.mean(axis=(0, 2, 3))
    count = x.size // 2
    var_unbiased = x.var(axis=(0, 2, 3)) * count / (count - 1)
    assert np.allclose(rm, 0.9 * 0.0 + 0.1 * mean)
    assert np.allclose(rv, 0.9 * 1.0 + 0.1 * var_unbiased)


def test_batch_norm_eval_uses_running_stats():
    x = np.ones((2, 1, 2, 2))
    rm = np.array([3.0])
    rv = np.array([4.0])
    out = T.batch_norm(Tensor(x), None, None, rm.copy(), rv.copy(), axes=(0, 2, 3), training=False)
    assert np.allclose(out.data, (1.0 - 3.0) / np.sqrt(4.0 + 1e-5))
    # eval must not advance the statistics
    rm2, rv2 = rm.copy(), rv.copy()
    T.batch_norm(Tensor(x), None, None, rm2, rv2, axes=(0, 2, 3), training=False)
    assert np.array_equal(rm2, rm) and np.array_equal(rv2, rv)


def test_batch_norm_needs_two_samples_per_channel():
    with pytest.raises(UsageError):
        T.batch_norm(
            Tensor(np.ones((1, 3, 1, 1))), None, None, np.zeros(3), np.ones(3),
            axes=(0, 2, 3), training=True,
        )


def test_batch_norm_affine_scales_and_shifts():
    x = np.stack([np.zeros((3, 4)), np.ones((3, 4))])[:, None]  # [2,1,3,4]
    gamma = Tensor(np.array([2.0]), requires_grad=True)
    beta = Tensor(np.array([-1.0]), requires_grad=True)
    out = T.batch_norm(
        Tensor(x), gamma, beta, np.zeros(1), np.ones(1), axes=(0, 2, 3), training=True
    )
    # normalized x is ±1 (two-point distribution), so out is {-3, 1}
    assert np.allclose(np.unique(np.round(out.data, 6)), [-3.0, 1.0], atol=1e-4)
