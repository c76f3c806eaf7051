"""Neural building blocks assembled from autodiff ops."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

BN_MOMENTUM = 0.99
BN_EPS = 1e-8


class LSTMState(NamedTuple):
    h: Tensor
    c: Tensor


@dataclass
class LSTMWeights:
    """Peephole LSTM parameters; gate blocks are ordered (input, forget, cell, output).

    ``W_x``: (D, 4H), ``W_h``: (H, 4H), ``b``: (4H,), ``peep``: (3, H) holding
    the diagonal peephole weights for the input, forget and output gates.
    """

    W_x: Tensor
    W_h: Tensor
    b: Tensor
    peep: Tensor

    @property
    def units(self) -> int:
        return self.W_h.shape[0]


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def create(cls, n: int, name: str = "bn") -> "BatchNormState":
        return cls(
            Tensor(np.ones(n), requires_grad=True, name=f"{name}.gamma"),
            Tensor(np.zeros(n), requires_grad=True, name=f"{name}.beta"),
            np.zeros(n),
            np.ones(n),
        )


@dataclass
class DropoutSpec:
    keep_prob: float = 0.5
    mode: str = "train"

    def __post_init__(self):
        if not 0.0 < self.keep_prob <= 1.0:
            raise ValueError(f"keep_prob must be in (0, 1], got {self.keep_prob}")
        if self.mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {self.mode!r}")


@dataclass
class RunMode:
    """How a forward pass treats batch norm and dropout."""

    train: bool = False
    keep_prob: float = 1.0
    rng: np.random.Generator | None = None
    update_stats: bool = True
    # per-site masks recorded/replayed for deterministic re-evaluation
    masks: dict | None = field(default=None, repr=False)

    def dropout_spec(self) -> DropoutSpec:
        return DropoutSpec(self.keep_prob, "train" if self.train else "infer")


INFER = RunMode()


def dense(x, W, b=None, activation: str | None = "relu") -> Tensor:
    out = ad.affine(x, W, b)
    if activation is None or activation == "linear":
        return out
    return ad.elementwise(out, activation)


def rnn_step(x_t, h_prev, W_x, W_h, b) -> Tensor:
    """Plain tanh RNN step; kept as a reference cell for tests."""
    return ad.tanh(ad.add(ad.affine(x_t, W_x, b), ad.matmul(h_prev, W_h)))


def lstm_step_reference(x_t, prev: LSTMState, w: LSTMWeights) -> LSTMState:
    """Peephole LSTM step written gate by gate from primitive ops.

    Numerically identical to :func:`lstm_peephole_step`; kept as a readable
    cross-check for the fused cell.
    """
    H = w.units
    z = ad.add(ad.affine(x_t, w.W_x, w.b), ad.matmul(prev.h, w.W_h))
    zi, zf, zc, zo = z[:, :H], z[:, H : 2 * H], z[:, 2 * H : 3 * H], z[:, 3 * H :]
    i = ad.sigmoid(ad.add(zi, ad.mul(w.peep[0], prev.c)))
    f = ad.sigmoid(ad.add(zf, ad.mul(w.peep[1], prev.c)))
    c = ad.add(ad.mul(f, prev.c), ad.mul(i, ad.tanh(zc)))
    o = ad.sigmoid(ad.add(zo, ad.mul(w.peep[2], c)))
    return LSTMState(ad.mul(o, ad.tanh(c)), c)


def _lstm_cell(zx: Tensor, prev: LSTMState, w: LSTMWeights) -> LSTMState:
    H = w.units
    hc = ad.lstm_cell(ad.add(zx, ad.matmul(prev.h, w.W_h)), prev.c, w.peep)
    return LSTMState(hc[:, :H], hc[:, H:])


def lstm_peephole_step(x_t, prev: LSTMState, w: LSTMWeights) -> LSTMState:
    """One step of the peephole LSTM for a batch ``x_t`` of shape (B, D)."""
    x_t = ad._as_tensor(x_t)
    if x_t.ndim != 2 or x_t.shape[1] != w.W_x.shape[0]:
        raise ad.ShapeError(f"lstm: input {x_t.shape} does not match W_x {w.W_x.shape}")
    if prev.h.shape != (x_t.shape[0], w.units) or prev.c.shape != prev.h.shape:
        raise ad.ShapeError(f"lstm: state {prev.h.shape}/{prev.c.shape} does not match {w.units} units")
    return _lstm_cell(ad.affine(x_t, w.W_x, w.b), prev, w)


def zero_state(batch: int, units: int) -> LSTMState:
    return LSTMState(Tensor(np.zeros((batch, units))), Tensor(np.zeros((batch, units))))


def lstm(x_seq, w: LSTMWeights, mask: np.ndarray | None = None, reverse: bool = False) -> Tensor:
    """Run the LSTM over (B, T, D) and return hidden states (B, T, H).

    Where ``mask`` (B, T) is false the state is carried through unchanged, so a
    reversed pass over a padded batch starts at each utterance's true end.
    """
    x_seq = ad._as_tensor(x_seq)
    if x_seq.ndim != 3 or x_seq.shape[1] == 0:
        raise ValueError(f"lstm: expected a non-empty (B, T, D) sequence, got {x_seq.shape}")
    B, T, _ = x_seq.shape
    zx = ad.affine(x_seq, w.W_x, w.b)
    state = zero_state(B, w.units)
    outs: list[Tensor | None] = [None] * T
    steps = range(T - 1, -1, -1) if reverse else range(T)
    for t in steps:
        new = _lstm_cell(zx[:, t, :], state, w)
        if mask is not None and not mask[:, t].all():
            m = mask[:, t : t + 1].astype(np.float64)
            new = LSTMState(
                ad.add(ad.mul(new.h, m), ad.mul(state.h, 1.0 - m)),
                ad.add(ad.mul(new.c, m), ad.mul(state.c, 1.0 - m)),
            )
        state = new
        outs[t] = state.h
    return ad.stack(outs, axis=1)


def bilstm(x_seq, fwd: LSTMWeights, bwd: LSTMWeights, mask: np.ndarray | None = None) -> Tensor:
    """Concatenate a forward and an independent backward LSTM pass: (B, T, 2H)."""
    return ad.concat([lstm(x_seq, fwd, mask), lstm(x_seq, bwd, mask, reverse=True)], axis=-1)


def batchnorm(x, state: BatchNormState, mode: RunMode = INFER, mask: np.ndarray | None = None) -> Tensor:
    """Batch normalisation over every axis but the last (feature/channel) one.

    For conv maps of shape (B, F, T, C) the statistics therefore pool over the
    batch and all spatial positions. ``mask`` restricts which positions count.
    """
    x = ad._as_tensor(x)
    if mode.train:
        out, mu, var = ad.batch_norm(x, state.gamma, state.beta, state.eps, mask)
        if mode.update_stats:
            m = state.momentum
            state.running_mean = m * state.running_mean + (1 - m) * mu
            state.running_var = m * state.running_var + (1 - m) * var
        return out
    scale = 1.0 / np.sqrt(state.running_var + state.eps)
    xhat = ad.mul(ad.sub(x, state.running_mean), scale)
    return ad.add(ad.mul(xhat, state.gamma), state.beta)


def dropout(x, spec: DropoutSpec, rng: np.random.Generator | None = None, inverted: bool = True,
            mask: np.ndarray | None = None) -> Tensor:
    """Bernoulli dropout.

    ``inverted=True`` rescales kept units by 1/keep_prob during training and is
    the identity at inference; ``inverted=False`` is the weight-scaling form
    (plain mask in training, multiply by keep_prob at inference). Both have the
    same expectation.
    """
    x = ad._as_tensor(x)
    p = spec.keep_prob
    if p == 1.0:
        return x
    if spec.mode == "infer":
        return x if inverted else ad.mul(x, p)
    if mask is None:
        if rng is None:
            raise ValueError("train-mode dropout needs an rng or an explicit mask")
        mask = rng.random(x.shape) < p
    scale = mask / p if inverted else mask.astype(np.float64)
    return ad.mul(x, scale)


def apply_dropout(x, mode: RunMode, site: str) -> Tensor:
    """Dropout at a named site; replays recorded masks when ``mode.masks`` holds one."""
    if not mode.train or mode.keep_prob >= 1.0:
        return x
    mask = None
    if mode.masks is not None:
        mask = mode.masks.get(site)
        if mask is None:
            mask = mode.rng.random(x.shape) < mode.keep_prob
            mode.masks[site] = mask
    return dropout(x, mode.dropout_spec(), mode.rng, mask=mask)


def conv_unit(x, w, bn: BatchNormState, mode: RunMode, site: str, stride=(1, 1),
              tmask: np.ndarray | None = None) -> Tensor:
    """conv -> batch norm -> relu -> dropout, with padded time steps zeroed."""
    h = ad.conv2d(x, w, None, stride=stride, padding="same")
    bmask = None if tmask is None else tmask[:, None, :, None]
    h = ad.relu(batchnorm(h, bn, mode, bmask))
    h = apply_dropout(h, mode, site)
    if tmask is not None and not tmask.all():
        h = ad.mul(h, tmask[:, None, :, None].astype(np.float64))
    return h


def residual_block(x, w1, bn1: BatchNormState, w2, bn2: BatchNormState, mode: RunMode = INFER,
                   site: str = "res", proj: Tensor | None = None, tmask: np.ndarray | None = None) -> Tensor:
    """``skip(x) + f(x)`` with f = two conv units (3x3, stride 1).

    ``proj`` is an optional 1x1 conv (K, 1, 1, C_in) on the skip path for when
    the input channel count differs from the block's.
    """
    x = ad._as_tensor(x)
    K = w1.shape[0]
    if proj is None and x.shape[-1] != K:
        raise ad.ShapeError(f"residual block: input has {x.shape[-1]} channels, block has {K}")
    h = conv_unit(x, w1, bn1, mode, f"{site}.1", tmask=tmask)
    h = conv_unit(h, w2, bn2, mode, f"{site}.2", tmask=tmask)
    skip = x if proj is None else ad.conv2d(x, proj, None)
    return ad.add(skip, h)
