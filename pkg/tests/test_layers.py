import math

import numpy as np
import pytest

from attn_asr import autodiff as ad
from attn_asr import layers as L
from attn_asr.autodiff import ShapeError, Tensor
from attn_asr.layers import BatchNormState, DropoutSpec, LSTMState, LSTMWeights, RunMode


def lstm_weights(rng, D, H, scale=0.5, grad=False):
    def t(*shape):
        return Tensor(rng.uniform(-scale, scale, shape), requires_grad=grad)

    return LSTMWeights(t(D, 4 * H), t(H, 4 * H), t(4 * H), t(3, H))


def zero_weights(D, H):
    return LSTMWeights(Tensor(np.zeros((D, 4 * H))), Tensor(np.zeros((H, 4 * H))), Tensor(np.zeros(4 * H)),
                       Tensor(np.zeros((3, H))))


def test_dense_examples():
    x = np.array([[0.5, 2.0]])
    np.testing.assert_array_equal(L.dense(x, np.eye(2), np.zeros(2)).data, x)
    np.testing.assert_array_equal(L.dense(np.ones((1, 2)), np.zeros((2, 1)), [1.0]).data, [[1.0]])
    np.testing.assert_array_equal(L.dense([[1.0]], [[-2.0]], [0.0]).data, [[0.0]])
    with pytest.raises(ShapeError):
        L.dense(np.ones((1, 3)), np.ones((2, 2)))


def test_lstm_step_hand_values():
    w = zero_weights(2, 3)
    out = L.lstm_peephole_step(np.zeros((1, 2)), L.zero_state(1, 3), w)
    np.testing.assert_array_equal(out.c.data, 0.0)
    np.testing.assert_array_equal(out.h.data, 0.0)
    prev = LSTMState(Tensor(np.zeros((1, 3))), Tensor(np.ones((1, 3))))
    out = L.lstm_peephole_step(np.zeros((1, 2)), prev, w)
    np.testing.assert_allclose(out.c.data, 0.5)
    np.testing.assert_allclose(out.h.data, 0.5 * math.tanh(0.5))
    assert out.h.data[0, 0] == pytest.approx(0.2311, abs=1e-4)


def test_lstm_step_shape_errors(rng):
    w = lstm_weights(rng, 2, 3)
    with pytest.raises(ShapeError):
        L.lstm_peephole_step(np.zeros((1, 5)), L.zero_state(1, 3), w)
    with pytest.raises(ShapeError):
        L.lstm_peephole_step(np.zeros((1, 2)), L.zero_state(1, 4), w)


def test_fused_cell_matches_gate_by_gate_reference(rng):
    w = lstm_weights(rng, 4, 5, scale=1.0)
    prev = LSTMState(Tensor(rng.standard_normal((3, 5))), Tensor(rng.standard_normal((3, 5))))
    x = rng.standard_normal((3, 4))
    fused = L.lstm_peephole_step(x, prev, w)
    ref = L.lstm_step_reference(x, prev, w)
    np.testing.assert_allclose(fused.h.data, ref.h.data, atol=1e-14)
    np.testing.assert_allclose(fused.c.data, ref.c.data, atol=1e-14)


def test_lstm_gradient_through_ten_steps(rng):
    w = lstm_weights(rng, 3, 4, grad=True)
    for name, t in zip(("W_x", "W_h", "b", "peep"), (w.W_x, w.W_h, w.b, w.peep)):
        t.name = name
    x = Tensor(rng.uniform(-1, 1, (2, 10, 3)), requires_grad=True, name="x")
    rep = ad.finite_diff_check(lambda: ad.sum(L.lstm(x, w)[:, -1, :]), [w.W_x, w.W_h, w.b, w.peep, x])
    assert rep.max_error < 1e-4, rep.offenders()


def test_bilstm_halves_match_unidirectional_passes(rng):
    fwd, bwd = lstm_weights(rng, 3, 4), lstm_weights(rng, 3, 4)
    x = rng.standard_normal((2, 6, 3))
    out = L.bilstm(x, fwd, bwd).data
    assert out.shape == (2, 6, 8)
    np.testing.assert_allclose(out[..., :4], L.lstm(x, fwd).data, atol=1e-14)
    np.testing.assert_allclose(out[..., 4:], L.lstm(x[:, ::-1], bwd).data[:, ::-1], atol=1e-14)


def test_bilstm_single_step_and_palindrome(rng):
    w = lstm_weights(rng, 3, 4)
    x1 = rng.standard_normal((1, 1, 3))
    out = L.bilstm(x1, w, w).data
    np.testing.assert_allclose(out[..., :4], out[..., 4:])
    half = rng.standard_normal((1, 3, 3))
    pal = np.concatenate([half, half[:, ::-1]], axis=1)
    out = L.bilstm(pal, w, w).data
    np.testing.assert_allclose(out[:, ::-1, 4:], out[:, :, :4], atol=1e-14)
    with pytest.raises(ValueError):
        L.bilstm(np.zeros((1, 0, 3)), w, w)


def test_masked_lstm_matches_unpadded_run(rng):
    fwd, bwd = lstm_weights(rng, 3, 4), lstm_weights(rng, 3, 4)
    x = rng.standard_normal((1, 4, 3))
    padded = np.concatenate([x, rng.standard_normal((1, 3, 3))], axis=1)
    mask = np.arange(7)[None] < 4
    np.testing.assert_allclose(L.bilstm(padded, fwd, bwd, mask).data[:, :4], L.bilstm(x, fwd, bwd).data, atol=1e-14)


def test_bilstm_width_for_full_size():
    assert L.bilstm(np.zeros((1, 2, 5)), zero_weights(5, 256), zero_weights(5, 256)).shape[-1] == 512


def test_batchnorm_examples():
    bn = BatchNormState.create(1)
    bn.beta.data[:] = 5.0
    train = RunMode(train=True)
    np.testing.assert_allclose(L.batchnorm(np.full((4, 1), 3.0), bn, train).data, 5.0)
    bn = BatchNormState.create(1)
    bn.eps = 1e-300
    np.testing.assert_allclose(L.batchnorm(np.array([[1.0], [3.0]]), bn, train).data, [[-1.0], [1.0]])
    bn = BatchNormState.create(3)
    x = np.random.default_rng(0).standard_normal((5, 3))
    np.testing.assert_allclose(L.batchnorm(x, bn, L.INFER).data, x, atol=1e-7)
    with pytest.raises(ValueError):
        L.batchnorm(np.ones((1, 3)), BatchNormState.create(3), train)


def test_batchnorm_running_stats_update(rng):
    bn = BatchNormState.create(2)
    x = rng.standard_normal((8, 2)) + 3
    L.batchnorm(x, bn, RunMode(train=True))
    np.testing.assert_allclose(bn.running_mean, 0.01 * x.mean(0))
    np.testing.assert_allclose(bn.running_var, 0.99 + 0.01 * x.var(0))
    frozen = RunMode(train=True, update_stats=False)
    L.batchnorm(x, bn, frozen)
    np.testing.assert_allclose(bn.running_mean, 0.01 * x.mean(0))


def test_conv_batchnorm_pools_over_spatial_positions(rng):
    x = rng.standard_normal((8, 5, 4, 3)) * 2 + 1
    out = L.batchnorm(x, BatchNormState.create(3), RunMode(train=True)).data
    flat = x.reshape(-1, 3)
    ref = (flat - flat.mean(0)) / np.sqrt(flat.var(0) + L.BN_EPS)
    np.testing.assert_allclose(out.reshape(-1, 3), ref, atol=1e-12)


def test_dropout_examples():
    x = Tensor(np.array([2.0]))
    for mode in ("train", "infer"):
        assert L.dropout(x, DropoutSpec(1.0, mode), np.random.default_rng(0)) is x
    assert L.dropout(x, DropoutSpec(0.5, "infer"), inverted=False).data[0] == 1.0
    assert L.dropout(x, DropoutSpec(0.5, "infer")).data[0] == 2.0
    with pytest.raises(ValueError):
        DropoutSpec(0.0)
    with pytest.raises(ValueError):
        DropoutSpec(0.5, "eval")


def test_dropout_mask_resampled_each_call(rng):
    x = np.ones(200)
    spec = DropoutSpec(0.5)
    a, b = L.dropout(x, spec, rng).data, L.dropout(x, spec, rng).data
    assert not np.array_equal(a, b)
    assert set(np.unique(a)) <= {0.0, 2.0}


@pytest.mark.parametrize("inverted", [True, False])
def test_inverted_and_weight_scaling_forms_agree_in_expectation(rng, inverted):
    x = rng.uniform(0.5, 1.5, 50)
    spec = DropoutSpec(0.8)
    mc = np.mean([L.dropout(x, spec, rng, inverted).data for _ in range(20000)], axis=0)
    ref = L.dropout(x, DropoutSpec(0.8, "infer"), inverted=inverted).data
    assert np.abs(mc / ref - 1).max() < 0.02


def test_apply_dropout_replays_recorded_masks(rng):
    mode = RunMode(train=True, keep_prob=0.5, rng=rng, masks={})
    x = np.ones((3, 4))
    a = L.apply_dropout(x, mode, "s").data
    b = L.apply_dropout(x, mode, "s").data
    np.testing.assert_array_equal(a, b)
    assert L.apply_dropout(x, RunMode(), "s") is x


def test_residual_block_identity_when_inner_path_zero(rng):
    bn1, bn2 = BatchNormState.create(4), BatchNormState.create(4)
    bn1.gamma.data[:] = 0
    bn2.gamma.data[:] = 0
    x = Tensor(rng.standard_normal((2, 5, 6, 4)), requires_grad=True)
    w = np.zeros((4, 3, 3, 4))
    out = L.residual_block(x, w, bn1, w, bn2, RunMode(train=True))
    np.testing.assert_array_equal(out.data, x.data)
    ad.backward(ad.sum(out))
    np.testing.assert_array_equal(x.grad, 1.0)


def test_residual_block_shape_and_channel_check(rng):
    w = rng.standard_normal((4, 3, 3, 4)) * 0.1
    x = rng.standard_normal((2, 41, 7, 4))
    out = L.residual_block(x, w, BatchNormState.create(4), w, BatchNormState.create(4), L.INFER)
    assert out.shape == x.shape
    with pytest.raises(ShapeError):
        L.residual_block(rng.standard_normal((2, 5, 5, 3)), w, BatchNormState.create(4), w, BatchNormState.create(4))
    proj = rng.standard_normal((4, 1, 1, 3))
    out = L.residual_block(rng.standard_normal((2, 5, 5, 3)), rng.standard_normal((4, 3, 3, 3)), BatchNormState.create(4),
                           w, BatchNormState.create(4), proj=proj)
    assert out.shape == (2, 5, 5, 4)


def test_rnn_fixture_step():
    h = L.rnn_step(np.zeros((1, 2)), np.zeros((1, 3)), np.zeros((2, 3)), np.zeros((3, 3)), np.ones(3))
    np.testing.assert_allclose(h.data, math.tanh(1.0))
