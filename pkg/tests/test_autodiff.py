import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attn_asr import autodiff as ad
from attn_asr.autodiff import BackwardError, NonFiniteError, ShapeError, Tensor


def param(rng, *shape, lo=-1.0, hi=1.0, name=None):
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=True, name=name)


# --- forward examples -------------------------------------------------------


def test_affine_examples():
    x = [[1.0, 2.0]]
    np.testing.assert_array_equal(ad.affine(x, [[1, 0], [0, 1]], [0, 0]).data, [[1, 2]])
    np.testing.assert_array_equal(ad.affine(x, [[0, 0], [0, 0]], [3, 4]).data, [[3, 4]])
    np.testing.assert_array_equal(ad.affine(x, [[1, 1], [1, 1]], [0, 1]).data, [[3, 4]])


def test_affine_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(1, 2\).*\(3, 2\)"):
        ad.affine(np.ones((1, 2)), np.ones((3, 2)))


def test_elementwise_examples():
    np.testing.assert_array_equal(ad.elementwise([-1.0, 0.0, 2.0], "relu").data, [0, 0, 2])
    assert ad.elementwise([0.0], "sigmoid").data[0] == 0.5
    assert ad.elementwise([0.0], "tanh").data[0] == 0.0
    with pytest.raises(ShapeError):
        ad.elementwise(np.ones(2), "add", np.ones(3))
    with pytest.raises(ValueError):
        ad.elementwise(np.ones(2), "cube")


def test_softmax_examples():
    np.testing.assert_allclose(ad.softmax([[0.0, 0.0]]).data, [[0.5, 0.5]])
    np.testing.assert_allclose(ad.softmax([[1000.0, 1000.0]]).data, [[0.5, 0.5]])
    np.testing.assert_allclose(ad.softmax([[math.log(1), math.log(3)]]).data, [[0.25, 0.75]], atol=1e-15)


def test_conv_examples():
    x = np.arange(12.0).reshape(3, 4, 1)
    out = ad.conv2d(x, np.ones((1, 1, 1, 1)), np.array([0.5]))
    np.testing.assert_array_equal(out.data, x + 0.5)
    out = ad.conv2d(np.ones((3, 3, 1)), np.ones((1, 3, 3, 1)), padding="valid")
    np.testing.assert_array_equal(out.data, [[[9.0]]])
    out = ad.conv2d(np.zeros((41, 9, 3)), np.zeros((128, 3, 3, 3)), stride=(1, 3))
    assert out.shape == (41, 3, 128)


def test_conv_kernel_larger_than_input():
    with pytest.raises(ShapeError):
        ad.conv2d(np.ones((2, 2, 1)), np.ones((1, 3, 3, 1)), padding="valid")


def naive_conv(x, w, stride, lo):
    """Direct loop over output positions, zero padding with leading pads ``lo``."""
    F, T, C = x.shape
    K, m, n, _ = w.shape
    Fo, To = -(-F // stride[0]), -(-T // stride[1])
    out = np.zeros((Fo, To, K))
    for i in range(Fo):
        for j in range(To):
            for a in range(m):
                for b in range(n):
                    f, t = i * stride[0] + a - lo[0], j * stride[1] + b - lo[1]
                    if 0 <= f < F and 0 <= t < T:
                        out[i, j] += w[:, a, b, :] @ x[f, t]
    return out


@pytest.mark.parametrize("stride", [(1, 1), (1, 3), (2, 2)])
@pytest.mark.parametrize("T", [5, 9, 10])
def test_conv_matches_direct_loop(rng, stride, T):
    x = rng.standard_normal((7, T, 2))
    w = rng.standard_normal((3, 3, 3, 2))
    lo = (ad.same_padding(7, 3, stride[0])[1], ad.same_padding(T, 3, stride[1])[1])
    np.testing.assert_allclose(ad.conv2d(x, w, stride=stride).data, naive_conv(x, w, stride, lo), atol=1e-12)


@given(st.integers(1, 30), st.sampled_from([1, 3, 5, 7]))
def test_same_padding_preserves_extent_for_odd_kernels(size, k):
    out, lo, hi = ad.same_padding(size, k, 1)
    assert out == size and lo + hi == k - 1 and hi - lo in (0, 1)


@given(st.integers(1, 100), st.integers(1, 4))
def test_same_padding_output_is_ceil(size, stride):
    assert ad.same_padding(size, 3, stride)[0] == math.ceil(size / stride)


# --- backward ---------------------------------------------------------------


def test_backward_examples():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    ad.backward(ad.sum(x))
    np.testing.assert_array_equal(x.grad, [1, 1, 1])
    x = Tensor([2.0], requires_grad=True)
    ad.backward(ad.sum(x * x))
    np.testing.assert_array_equal(x.grad, [4])
    x = Tensor([-1.0, 2.0], requires_grad=True)
    ad.backward(ad.sum(ad.relu(x)))
    np.testing.assert_array_equal(x.grad, [0, 1])


def test_backward_errors():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(BackwardError):
        ad.backward(x * 2)
    loss = ad.sum(x * 2)
    ad.backward(loss)
    with pytest.raises(BackwardError):
        ad.backward(loss)


def test_shared_branch_gradients_add(rng):
    x = param(rng, 4)
    ad.backward(ad.sum(ad.add(ad.tanh(x), ad.tanh(x))))
    np.testing.assert_allclose(x.grad, 2 * (1 - np.tanh(x.data) ** 2), rtol=1e-14)


def test_non_finite_raises_immediately():
    with pytest.raises(NonFiniteError):
        ad.log(Tensor([0.0]))
    with pytest.raises(NonFiniteError):
        ad.mul(Tensor([np.inf]), 1.0)


def test_no_grad_records_nothing(rng):
    x = param(rng, 3)
    with ad.no_grad():
        y = ad.sum(ad.tanh(x))
    assert not y.requires_grad and ad.is_grad_enabled()


def test_softmax_rows_and_shift_invariance(rng):
    for _ in range(20):
        z = rng.uniform(-5, 5, (4, 7))
        p = ad.softmax(z).data
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
        np.testing.assert_allclose(ad.softmax(z + rng.uniform(-50, 50, (4, 1))).data, p, atol=1e-9)


def test_masked_softmax_rejects_empty_rows():
    with pytest.raises(ValueError):
        ad.masked_softmax(np.zeros((2, 3)), np.array([[1, 0, 0], [0, 0, 0]], bool))


# --- finite-difference oracle ----------------------------------------------


def test_finite_diff_examples():
    t = Tensor([3.0], requires_grad=True, name="t")
    rep = ad.finite_diff_check(lambda: ad.sum(t * t), [t])
    assert rep.worst["t"] < 1e-6
    c = Tensor([1.0, 2.0], requires_grad=True, name="c")
    rep = ad.finite_diff_check(lambda: ad.sum(ad.mul(c, 0.0)), [c])
    assert rep.worst["c"] == 0.0


def test_finite_diff_detects_wrong_rule(rng, monkeypatch):
    x = param(rng, 5, name="x")
    real = np.tanh

    def bad_tanh(a):
        out = ad._make(real(a.data), (a,), lambda g: ad._accumulate(a, g), "tanh")  # derivative 1: wrong
        return out

    monkeypatch.setattr(ad, "tanh", bad_tanh)
    rep = ad.finite_diff_check(lambda: ad.sum(ad.tanh(x)), [x])
    assert rep.failures(1e-4) == ["x"]


def case(rng, fn, *params):
    """Scalar loss sum(fn(params) * w) with w fixed once, so every output entry matters."""
    with ad.no_grad():
        w = rng.uniform(-1, 1, fn(*params).shape)
    return (lambda: ad.sum(ad.mul(fn(*params), w))), list(params)


def _bn_case(rng, masked):
    mask = (rng.random((3, 4, 1)) < 0.7) | (np.arange(4)[None, :, None] < 2) if masked else None
    return case(rng, lambda x, g, b: ad.batch_norm(x, g, b, 1e-8, mask)[0], param(rng, 3, 4, 2), param(rng, 2),
                param(rng, 2))


def _conv_case(rng, stride, padding):
    return case(rng, lambda x, k, b: ad.conv2d(x, k, b, stride, padding), param(rng, 2, 5, 7, 2),
                param(rng, 3, 3, 3, 2), param(rng, 3))


OP_CASES = {
    "add": lambda r: case(r, ad.add, param(r, 3, 4), param(r, 4)),
    "sub": lambda r: case(r, ad.sub, param(r, 3, 4), param(r, 3, 1)),
    "mul": lambda r: case(r, ad.mul, param(r, 3, 4), param(r, 3, 4)),
    "matmul": lambda r: case(r, ad.matmul, param(r, 2, 3, 4), param(r, 4, 5)),
    "affine": lambda r: case(r, ad.affine, param(r, 3, 4), param(r, 4, 2), param(r, 2)),
    "neg": lambda r: case(r, ad.neg, param(r, 3, 4)),
    "relu": lambda r: case(r, ad.relu, param(r, 3, 4)),
    "tanh": lambda r: case(r, ad.tanh, param(r, 3, 4)),
    "sigmoid": lambda r: case(r, ad.sigmoid, param(r, 3, 4)),
    "exp": lambda r: case(r, ad.exp, param(r, 3, 4)),
    "log": lambda r: case(r, ad.log, param(r, 3, 4, lo=0.5, hi=2.0)),
    "softmax": lambda r: case(r, ad.softmax, param(r, 3, 4)),
    "log_softmax": lambda r: case(r, ad.log_softmax, param(r, 3, 4)),
    "masked_softmax": lambda r: case(r, lambda x: ad.masked_softmax(x, np.array([True, False, True, True])),
                                     param(r, 3, 4)),
    "sum_axis": lambda r: case(r, lambda x: ad.sum(x, axis=1), param(r, 3, 4)),
    "mean": lambda r: case(r, lambda x: ad.mean(x, axis=0), param(r, 3, 4)),
    "reshape": lambda r: case(r, lambda x: ad.reshape(x, (4, 3)), param(r, 3, 4)),
    "transpose": lambda r: case(r, lambda x: ad.transpose(x, (1, 0)), param(r, 3, 4)),
    "index": lambda r: case(r, lambda x: x[1:, ::2], param(r, 3, 4)),
    "concat": lambda r: case(r, lambda a, b: ad.concat([a, b], axis=0), param(r, 2, 3), param(r, 2, 3)),
    "stack": lambda r: case(r, lambda a, b: ad.stack([a, b], axis=1), param(r, 2, 3), param(r, 2, 3)),
    "conv_same": lambda r: _conv_case(r, (1, 1), "same"),
    "conv_stride": lambda r: _conv_case(r, (1, 3), "same"),
    "conv_valid": lambda r: _conv_case(r, (1, 1), "valid"),
    "lstm_cell": lambda r: case(r, ad.lstm_cell, param(r, 3, 8), param(r, 3, 2), param(r, 3, 2)),
    "batch_norm": lambda r: _bn_case(r, False),
    "batch_norm_masked": lambda r: _bn_case(r, True),
}


@pytest.mark.parametrize("op", sorted(OP_CASES))
@pytest.mark.parametrize("seed", range(20))
def test_every_op_passes_gradient_check(op, seed):
    f, params = OP_CASES[op](np.random.default_rng(seed))
    rep = ad.finite_diff_check(f, params)
    assert rep.max_error < 1e-4, rep.offenders()


# --- properties -------------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
def test_broadcast_add_gradient_sums_over_broadcast_axes(n, m, seed):
    rng = np.random.default_rng(seed)
    a, b = param(rng, n, m), param(rng, m)
    ad.backward(ad.sum(ad.add(a, b)))
    np.testing.assert_array_equal(a.grad, np.ones((n, m)))
    np.testing.assert_array_equal(b.grad, np.full(m, float(n)))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=8))
def test_log_softmax_is_log_of_softmax(row):
    z = np.array([row])
    np.testing.assert_allclose(ad.log_softmax(z).data, np.log(ad.softmax(z).data), atol=1e-12)


def test_longdouble_oracle_restores_parameters(rng):
    x = param(rng, 3, name="x")
    before = x.data.copy()
    ad.finite_diff_check(lambda: ad.sum(ad.tanh(x)), [x])
    assert x.data.dtype == np.float64
    np.testing.assert_array_equal(x.data, before)
