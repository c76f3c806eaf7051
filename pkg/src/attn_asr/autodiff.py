"""Minimal reverse-mode differentiation over numpy arrays.

Every op returns a new :class:`Tensor` and, when gradients are enabled and at
least one input requires them, records a closure that maps the output
gradient onto the inputs. :func:`backward` walks the recorded graph once in
reverse topological order and then drops it.

All values are double precision. Any op producing NaN or Inf raises
:class:`NonFiniteError` on the spot.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "ShapeError",
    "BackwardError",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "backward",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "affine",
    "relu",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "elementwise",
    "softmax",
    "log_softmax",
    "masked_softmax",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "stack",
    "index",
    "conv2d",
    "batch_norm",
    "lstm_cell",
    "same_padding",
    "finite_diff_check",
    "GradCheckReport",
]


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class BackwardError(RuntimeError):
    pass


_state = threading.local()
# longdouble is accepted so the gradient oracle can evaluate in extended precision
_FLOAT_TYPES = (np.dtype(np.float64), np.dtype(np.longdouble))


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Suspend graph recording on the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """N-dimensional double array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if not isinstance(data, np.ndarray):
            data = np.asarray(data)
        self.data = data if data.dtype in _FLOAT_TYPES else data.astype(np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"
        self._consumed = False
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{label})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return sum(self, axis)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    out._op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary(fn, a: Tensor, b: Tensor, op: str) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _make(_binary(np.add, a, b, "add"), (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _make(_binary(np.subtract, a, b, "sub"), (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g * b.data)
        if b.requires_grad:
            _accumulate(b, g * a.data)

    return _make(_binary(np.multiply, a, b, "mul"), (a, b), bw, "mul")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: _accumulate(a, -g), "neg")


def matmul(a, b) -> Tensor:
    """Matrix product with numpy's batching/broadcasting rules (operands ≥ 2-D)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            _accumulate(b, np.swapaxes(a.data, -1, -2) @ g)

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def affine(x, W, b=None) -> Tensor:
    """``x @ W + b`` for x of shape (..., D_in) and W of shape (D_in, D_out)."""
    x, W = _as_tensor(x), _as_tensor(W)
    if W.ndim != 2 or x.ndim < 1 or x.shape[-1] != W.shape[0]:
        raise ShapeError(f"affine: input {x.shape} does not match weights {W.shape}")
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (W.shape[1],):
            raise ShapeError(f"affine: bias {b.shape} does not match weights {W.shape}")
    out = x.data @ W.data
    if b is not None:
        out = out + b.data
    parents = (x, W) if b is None else (x, W, b)

    def bw(g):
        if x.requires_grad:
            _accumulate(x, g @ W.data.T)
        if W.requires_grad:
            _accumulate(W, x.data.reshape(-1, W.shape[0]).T @ g.reshape(-1, W.shape[1]))
        if b is not None and b.requires_grad:
            _accumulate(b, g.reshape(-1, W.shape[1]).sum(axis=0))

    return _make(out, parents, bw, "affine")


# ---------------------------------------------------------------------------
# pointwise


def relu(x) -> Tensor:
    x = _as_tensor(x)
    out = np.maximum(x.data, 0.0)
    return _make(out, (x,), lambda g: _accumulate(x, g * (x.data > 0)), "relu")


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: _accumulate(x, g * (1.0 - out * out)), "tanh")


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    out = _sig(x.data)
    return _make(out, (x,), lambda g: _accumulate(x, g * out * (1.0 - out)), "sigmoid")


def exp(x) -> Tensor:
    x = _as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _make(out, (x,), lambda g: _accumulate(x, g * out), "exp")


def log(x) -> Tensor:
    x = _as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _make(out, (x,), lambda g: _accumulate(x, g / x.data), "log")


_UNARY = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid, "exp": exp, "log": log}
_BINARY = {"add": add, "mul": mul, "sub": sub}


def elementwise(x, kind: str, other=None) -> Tensor:
    """Dispatch a pointwise op by name; binary kinds need ``other`` of equal shape."""
    if kind in _UNARY:
        return _UNARY[kind](x)
    if kind in _BINARY:
        x, other = _as_tensor(x), _as_tensor(other)
        if x.shape != other.shape:
            raise ShapeError(f"{kind}: shapes {x.shape} and {other.shape} differ")
        return _BINARY[kind](x, other)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------------------
# normalisers


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    _check_finite(x.data, "softmax input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _accumulate(x, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _make(out, (x,), bw, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    _check_finite(x.data, "log_softmax input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        _accumulate(x, g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _make(out, (x,), bw, "log_softmax")


def masked_softmax(x, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis where ``mask`` is false counts as -inf.

    Rows with no valid entry are rejected.
    """
    x = _as_tensor(x)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not mask.any(axis=-1).all():
        raise ValueError("masked_softmax: a row has every position masked")
    z = np.where(mask, x.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        _accumulate(x, out * (g - (g * out).sum(axis=-1, keepdims=True)))

    return _make(out, (x,), bw, "masked_softmax")


# ---------------------------------------------------------------------------
# reductions and structure


def sum(x, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    x = _as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis))

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _make(out, (x,), bw, "sum")


def mean(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: _accumulate(x, g.reshape(x.shape)), "reshape")


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: _accumulate(x, g.transpose(inv)), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {[t.shape for t in ts]}: {e}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        for t, piece in zip(ts, np.split(g, bounds, axis=axis)):
            _accumulate(t, piece)

    return _make(out, ts, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def bw(g):
        for i, t in enumerate(ts):
            _accumulate(t, np.take(g, i, axis=axis))

    return _make(out, ts, bw, "stack")


def index(x, key) -> Tensor:
    """Basic (slice/integer) indexing."""
    x = _as_tensor(x)
    out = x.data[key]

    def bw(g):
        full = np.zeros_like(x.data)
        full[key] += g
        _accumulate(x, full)

    return _make(np.array(out), (x,), bw, "index")


# ---------------------------------------------------------------------------
# convolution


def same_padding(size: int, kernel: int, stride: int) -> tuple[int, int, int]:
    """Return (out, pad_lo, pad_hi) for zero padding that yields ceil(size/stride)."""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


def conv2d(x, w, b=None, stride: tuple[int, int] = (1, 1), padding: str = "same") -> Tensor:
    """2-D cross-correlation over (frequency, time).

    Args:
        x: input of shape (B, F, T, C_in), or (F, T, C_in) for a single map.
        w: filters of shape (K, m, n, C_in).
        b: optional bias of shape (K,).
        stride: (frequency, time) strides.
        padding: ``"same"`` or ``"valid"``.

    Returns:
        Tensor of shape (B, F', T', K) (batch axis dropped for 3-D input).
    """
    x, w = _as_tensor(x), _as_tensor(w)
    single = x.ndim == 3
    if single:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and filters, got {x.shape} and {w.shape}")
    B, F, T, C = x.shape
    K, m, n, Cw = w.shape
    if Cw != C:
        raise ShapeError(f"conv2d: input has {C} channels but filters expect {Cw}")
    sf, st = stride
    if sf < 1 or st < 1:
        raise ValueError(f"conv2d: strides must be >= 1, got {stride}")
    if padding == "same":
        Fo, f_lo, f_hi = same_padding(F, m, sf)
        To, t_lo, t_hi = same_padding(T, n, st)
    elif padding == "valid":
        f_lo = f_hi = t_lo = t_hi = 0
        Fo, To = (F - m) // sf + 1, (T - n) // st + 1
    else:
        raise ValueError(f"conv2d: unknown padding {padding!r}")
    if m > F + f_lo + f_hi or n > T + t_lo + t_hi:
        raise ShapeError(f"conv2d: kernel {m}x{n} larger than padded input {F}x{T}")
    xp = np.pad(x.data, ((0, 0), (f_lo, f_hi), (t_lo, t_hi), (0, 0))) if (f_lo or f_hi or t_lo or t_hi) else x.data
    # im2col: (B, Fo, To, C, m, n) strided view -> (B*Fo*To, C*m*n) patch matrix
    view = np.lib.stride_tricks.sliding_window_view(xp, (m, n), axis=(1, 2))
    view = view[:, : sf * (Fo - 1) + 1 : sf, : st * (To - 1) + 1 : st]
    cols = view.reshape(B * Fo * To, C * m * n)
    wmat = w.data.transpose(3, 1, 2, 0).reshape(C * m * n, K)
    out = (cols @ wmat).reshape(B, Fo, To, K)
    parents = [x, w]
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (K,):
            raise ShapeError(f"conv2d: bias {b.shape} does not match {K} filters")
        out += b.data
        parents.append(b)

    def bw(g):
        g2 = g.reshape(-1, K)
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(B, Fo, To, C, m, n)
            gxp = np.zeros(xp.shape, dtype=gcols.dtype)
            for i in range(m):
                for j in range(n):
                    gxp[:, i : i + sf * (Fo - 1) + 1 : sf, j : j + st * (To - 1) + 1 : st, :] += gcols[..., i, j]
            _accumulate(x, gxp[:, f_lo : f_lo + F, t_lo : t_lo + T, :])
        if w.requires_grad:
            gw = (cols.T @ g2).reshape(C, m, n, K).transpose(3, 1, 2, 0)
            _accumulate(w, gw)
        if b is not None and b.requires_grad:
            _accumulate(b, g2.sum(axis=0))

    res = _make(out, parents, bw, "conv2d")
    return reshape(res, res.shape[1:]) if single else res


def _sig(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def lstm_cell(z, c_prev, peep) -> Tensor:
    """Fused peephole LSTM update.

    ``z`` (B, 4H) holds the input+recurrent pre-activations for the (input,
    forget, cell, output) blocks; ``peep`` (3, H) the diagonal peephole weights
    of the input, forget and output gates. Returns ``[h ; c]`` of shape (B, 2H)::

        i = sig(z_i + p_i * c_prev)      f = sig(z_f + p_f * c_prev)
        c = f * c_prev + i * tanh(z_c)   o = sig(z_o + p_o * c)
        h = o * tanh(c)
    """
    z, c_prev, peep = _as_tensor(z), _as_tensor(c_prev), _as_tensor(peep)
    B, H4 = z.shape
    H = H4 // 4
    if H4 != 4 * H or c_prev.shape != (B, H) or peep.shape != (3, H):
        raise ShapeError(f"lstm_cell: z {z.shape}, c {c_prev.shape}, peep {peep.shape} are inconsistent")
    zd, cp, pw = z.data, c_prev.data, peep.data
    i = _sig(zd[:, :H] + pw[0] * cp)
    f = _sig(zd[:, H : 2 * H] + pw[1] * cp)
    g = np.tanh(zd[:, 2 * H : 3 * H])
    c = f * cp + i * g
    o = _sig(zd[:, 3 * H :] + pw[2] * c)
    tc = np.tanh(c)
    h = o * tc

    def bw(grad):
        dh, dc = grad[:, :H], grad[:, H:]
        dzo = dh * tc * o * (1.0 - o)
        dc = dc + dh * o * (1.0 - tc * tc) + dzo * pw[2]
        dzi = dc * g * i * (1.0 - i)
        dzf = dc * cp * f * (1.0 - f)
        dzg = dc * i * (1.0 - g * g)
        if z.requires_grad:
            _accumulate(z, np.concatenate([dzi, dzf, dzg, dzo], axis=1))
        if c_prev.requires_grad:
            _accumulate(c_prev, dc * f + dzi * pw[0] + dzf * pw[1])
        if peep.requires_grad:
            _accumulate(peep, np.stack([(dzi * cp).sum(0), (dzf * cp).sum(0), (dzo * c).sum(0)]))

    return _make(np.concatenate([h, c], axis=1), (z, c_prev, peep), bw, "lstm_cell")


def batch_norm(x, gamma, beta, eps: float = 1e-3, mask: np.ndarray | None = None):
    """Normalise ``x`` with statistics pooled over every axis but the last.

    ``mask`` (broadcastable to ``x[..., :1]``) selects which positions feed the
    statistics; all positions are still normalised.

    Returns:
        (output tensor, batch mean, batch variance); the statistics are plain
        arrays for running-average bookkeeping.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    D = x.shape[-1]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise ShapeError(f"batch_norm: gamma/beta {gamma.shape}/{beta.shape} vs features {D}")
    axes = tuple(range(x.ndim - 1))
    if mask is None:
        m = None
        count = x.size // D
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=np.float64), x.shape[:-1] + (1,))
        count = m.sum()
    if count < 2:
        raise ValueError("batch_norm: training statistics need at least 2 positions")
    if m is None:
        mu = x.data.mean(axis=axes)
        var = ((x.data - mu) ** 2).mean(axis=axes)
    else:
        mu = (x.data * m).sum(axis=axes) / count
        var = (m * (x.data - mu) ** 2).sum(axis=axes) / count
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gamma.data * xhat + beta.data

    def bw(g):
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=axes))
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=axes))
        if x.requires_grad:
            gh = g * gamma.data
            s1 = gh.sum(axis=axes)
            s2 = (gh * xhat).sum(axis=axes)
            w = 1.0 if m is None else m
            _accumulate(x, inv * (gh - w * (s1 + xhat * s2) / count))

    return _make(out, (x, gamma, beta), bw, "batch_norm"), mu, var


# ---------------------------------------------------------------------------
# backward


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from a scalar ``loss``.

    Leaf gradients accumulate across calls; the recorded graph is released
    afterwards, so calling this twice on the same loss is an error.
    """
    if loss.size != 1:
        raise BackwardError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise BackwardError("graph already released; run a fresh forward pass")
    if not loss.requires_grad:
        raise BackwardError("loss does not depend on any tensor requiring grad")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
        if node._parents:
            # interior node: free its gradient and detach from the graph
            node.grad = None
            node._parents = ()
            node._backward = None
            node._consumed = True
    loss._consumed = True


# ---------------------------------------------------------------------------
# gradient oracle


@dataclass
class GradCheckReport:
    """Per-tensor worst relative error between analytic and numeric gradients."""

    worst: dict[str, float] = field(default_factory=dict)
    worst_index: dict[str, tuple] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.worst.values(), default=0.0)

    def failures(self, tol: float) -> list[str]:
        return [k for k, v in self.worst.items() if not v < tol]

    def offenders(self, k: int = 5) -> list[tuple[str, float]]:
        return sorted(self.worst.items(), key=lambda kv: -kv[1])[:k]


def relative_error(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def finite_diff_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor] | Iterable[Tensor],
    h: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    extended: bool = True,
) -> GradCheckReport:
    """Compare backward gradients with central differences.

    ``f`` is re-evaluated from scratch for every perturbation and must be
    deterministic. With ``extended`` the perturbed evaluations run with the
    parameters promoted to ``np.longdouble``, which keeps round-off in
    ``f(θ+h) - f(θ-h)`` well below the gradients being checked. With
    ``max_entries`` set, a random subset of entries per tensor is probed.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if not isinstance(params, dict):
        params = {p.name or f"param{i}": p for i, p in enumerate(params)}
    for p in params.values():
        p.grad = None
    loss = f()
    backward(loss)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}

    originals = {k: p.data for k, p in params.items()}
    wide = np.longdouble if extended else np.float64
    report = GradCheckReport()
    rng = rng or np.random.default_rng(0)
    try:
        for p in params.values():
            p.data = p.data.astype(wide)
        with no_grad():
            for name, p in params.items():
                flat = p.data.reshape(-1)
                idx = np.arange(flat.size)
                if max_entries is not None and flat.size > max_entries:
                    idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
                numeric = np.empty(len(idx))
                for n, k in enumerate(idx):
                    orig = flat[k]
                    flat[k] = orig + h
                    fp = f().data
                    flat[k] = orig - h
                    fm = f().data
                    flat[k] = orig
                    numeric[n] = float((fp - fm) / (2 * h))
                err = relative_error(analytic[name].reshape(-1)[idx], numeric)
                j = int(np.argmax(err)) if len(err) else 0
                report.worst[name] = float(err[j]) if len(err) else 0.0
                report.worst_index[name] = tuple(int(v) for v in np.unravel_index(idx[j], p.shape)) if len(err) else ()
                report.checked[name] = len(idx)
    finally:
        for k, p in params.items():
            p.data = originals[k]
    return report
