"""Loss, optimisers, gradient checks and the epoch loop."""

from __future__ import annotations

import logging
import math
import os
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import GradCheckReport, NonFiniteError, Tensor
from .layers import RunMode
from .model import Encoded, Seq2Seq, init_params, load_checkpoint, save_checkpoint

__all__ = [
    "OptimizerState",
    "TrainConfig",
    "TrainingDiverged",
    "cross_entropy_loss",
    "clip_gradients",
    "sgd_step",
    "adam_step",
    "apply_weight_decay",
    "init_params",
    "batch_loss",
    "train_step",
    "gradcheck_model",
    "train_loop",
]

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_checkpoint: str | None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass
class OptimizerState:
    kind: str = "adam"  # sgd | adam
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")


@dataclass
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-3
    clip_norm: float = 1.0
    dropout: float = 0.5
    fine_tune_lr: float = 1e-4
    weight_decay: float = 1e-5
    patience: int = 5
    max_epochs: int = 100
    max_steps: int = 0
    time_limit: float = 0.0
    target_error: float = 0.0  # stop once dev error drops below this; 0 disables
    dev_beam_width: int = 10
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        for name in ("batch_size", "learning_rate", "clip_norm", "fine_tune_lr", "max_epochs", "dev_beam_width"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.patience < 0 or self.weight_decay < 0:
            raise ValueError("patience and weight_decay must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @classmethod
    def from_run_config(cls, rc) -> "TrainConfig":
        names = cls.__dataclass_fields__
        return cls(**{k: getattr(rc, k) for k in names})


# ---------------------------------------------------------------------------
# loss and updates


def cross_entropy_loss(log_probs: Tensor, targets, mask=None) -> Tensor:
    """Mean of -log P(y_t) over the valid positions of a (B, L, V) log-prob tensor."""
    targets = np.asarray(targets, dtype=int)
    V = log_probs.shape[-1]
    if targets.shape != log_probs.shape[:-1]:
        raise ad.ShapeError(f"targets {targets.shape} do not match log-probs {log_probs.shape}")
    mask = np.ones(targets.shape) if mask is None else np.asarray(mask, dtype=np.float64)
    valid = mask > 0
    if not valid.any():
        raise ValueError("cross-entropy over zero valid positions")
    if ((targets[valid] < 0) | (targets[valid] >= V)).any():
        raise IndexError(f"target id outside vocabulary of size {V}")
    pick = np.zeros(log_probs.shape)
    pick[valid, targets[valid]] = 1.0
    return ad.mul(ad.sum(ad.mul(log_probs, pick)), -1.0 / valid.sum())


def _grads(params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    missing = [k for k, p in params.items() if p.grad is None]
    if missing:
        raise ValueError(f"missing gradients for {missing[:5]}")
    return {k: p.grad for k, p in params.items()}


def global_norm(params: Mapping[str, Tensor]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in _grads(params).values()))


def clip_gradients(params: Mapping[str, Tensor], max_norm: float = 1.0) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``; returns the factor."""
    grads = _grads(params)
    for k, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient in {k}")
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm:
        return 1.0
    scale = max_norm / norm
    for p in params.values():
        p.grad = p.grad * scale
    return scale


def sgd_step(params: Mapping[str, Tensor], opt: OptimizerState) -> None:
    grads = _grads(params)
    opt.step += 1
    for k, p in params.items():
        p.data -= opt.learning_rate * grads[k]


def adam_step(params: Mapping[str, Tensor], opt: OptimizerState) -> None:
    """Adam with bias correction; the step counter is advanced before the update."""
    grads = _grads(params)
    opt.step += 1
    t, b1, b2 = opt.step, opt.beta1, opt.beta2
    for k, p in params.items():
        g = grads[k]
        m = opt.m.get(k)
        if m is None:
            m = opt.m[k] = np.zeros_like(p.data)
            opt.v[k] = np.zeros_like(p.data)
        v = opt.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p.data -= opt.learning_rate * m_hat / (np.sqrt(v_hat) + opt.eps)


def apply_weight_decay(params: Mapping[str, Tensor], alpha: float, decays: Iterable[str] | None = None) -> None:
    """Add ``alpha * w`` to the gradient of every decayed tensor (all of them when ``decays`` is None)."""
    if alpha == 0:
        return
    names = params.keys() if decays is None else decays
    for k in names:
        p = params[k]
        p.grad = alpha * p.data if p.grad is None else p.grad + alpha * p.data


# ---------------------------------------------------------------------------
# one step


def batch_loss(model: Seq2Seq, batch, mode: RunMode, enc: Encoded | None = None) -> Tensor:
    logp = model.teacher_forced_forward(batch.features, batch.lengths, batch.targets, mode, enc=enc)
    return cross_entropy_loss(logp, batch.targets, batch.target_mask)


def train_step(model: Seq2Seq, batch, opt: OptimizerState, mode: RunMode, clip_norm: float = 1.0,
               weight_decay: float = 0.0) -> tuple[float, float]:
    """Forward, backward, decay, clip, update. Returns (loss, pre-clip gradient norm)."""
    model.zero_grad()
    loss = batch_loss(model, batch, mode)
    ad.backward(loss)
    if weight_decay:
        apply_weight_decay(model.params, weight_decay, [k for k, s in model.specs.items() if s.decays])
    norm = global_norm(model.params)
    clip_gradients(model.params, clip_norm)
    (adam_step if opt.kind == "adam" else sgd_step)(model.params, opt)
    return loss.item(), norm


# ---------------------------------------------------------------------------
# gradient check


class _StageCache:
    """Memoises an encoder stage under no_grad, keyed on the exact bytes of its inputs."""

    def __init__(self, tensors: list[Tensor]):
        self.tensors = tensors
        self.key = None
        self.value = None

    def get(self, compute: Callable[[], object]):
        if ad.is_grad_enabled():
            return compute()
        key = tuple(t.data.tobytes() for t in self.tensors)
        if key != self.key:
            self.key, self.value = key, compute()
        return self.value


def gradcheck_model(model: Seq2Seq, feats, lengths, targets, mask, keep_prob: float = 0.5, seed: int = 0,
                    h: float = 1e-5, max_entries: int | None = None) -> GradCheckReport:
    """Finite-difference check of every model parameter against backprop.

    Dropout masks are sampled once and replayed, and batch-norm running
    statistics are frozen, so the loss is a deterministic function of the
    parameters. Encoder stages whose parameters are untouched by a
    perturbation are served from a cache; this only skips recomputing
    bit-identical values.
    """
    mode = RunMode(train=True, keep_prob=keep_prob, rng=np.random.default_rng(seed), update_stats=False, masks={})
    p = model.params
    conv_names = [k for k in p if k.startswith(("conv.", "res"))]
    rec_names = [k for k in p if k.startswith(("dense.", "enc."))]
    conv_cache = _StageCache([p[k] for k in conv_names])
    enc_cache = _StageCache([p[k] for k in conv_names + rec_names])
    targets = np.asarray(targets)

    def encoded():
        frames, tmask, red = conv_cache.get(lambda: model.encode_conv(feats, lengths, mode))
        return model.encode_recurrent(frames, tmask, red, mode)

    def f():
        enc = enc_cache.get(encoded)
        logp = model.teacher_forced_forward(feats, lengths, targets, mode, enc=enc)
        return cross_entropy_loss(logp, targets, mask)

    return ad.finite_diff_check(f, model.params, h=h, max_entries=max_entries, rng=np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# epoch loop

_CKPT_RE = re.compile(r"^epoch-(\d{4,})\.ckpt$")


def checkpoint_paths(run_dir: str | os.PathLike) -> list[Path]:
    d = Path(run_dir) / "checkpoints"
    if not d.is_dir():
        return []
    return sorted((p for p in d.iterdir() if _CKPT_RE.match(p.name)), key=lambda p: int(_CKPT_RE.match(p.name)[1]))


@dataclass
class _LoopState:
    epoch: int = 0
    step: int = 0
    phase: str = "train"  # train | finetune
    best_dev: float = math.inf
    best_epoch: int = 0
    bad_epochs: int = 0
    done: bool = False

    def to_meta(self) -> dict:
        return dict(self.__dict__)


def _ckpt_path(run: Path, epoch: int) -> Path:
    return run / "checkpoints" / f"epoch-{epoch:04d}.ckpt"


def _save(path: Path, model: Seq2Seq, opt: OptimizerState, st: _LoopState, extra: dict):
    tensors = dict(model.state_arrays())
    for k in model.params:
        if k in opt.m:
            tensors[f"opt.m.{k}"] = opt.m[k]
            tensors[f"opt.v.{k}"] = opt.v[k]
    meta = {"loop": st.to_meta(), "opt": {"kind": opt.kind, "learning_rate": opt.learning_rate, "step": opt.step}}
    meta.update(extra)
    save_checkpoint(path, tensors, meta)


def _restore(path: Path, model: Seq2Seq, opt: OptimizerState) -> _LoopState:
    arrays, meta = load_checkpoint(path)
    model.load_state_arrays(arrays)
    opt.m = {k[len("opt.m."):]: v.copy() for k, v in arrays.items() if k.startswith("opt.m.")}
    opt.v = {k[len("opt.v."):]: v.copy() for k, v in arrays.items() if k.startswith("opt.v.")}
    opt.step = meta["opt"]["step"]
    opt.learning_rate = meta["opt"]["learning_rate"]
    return _LoopState(**meta["loop"])


def train_loop(model: Seq2Seq, corpus, dev_corpus, config: TrainConfig, run_dir: str | os.PathLike,
               evaluate: Callable[[Seq2Seq], float] | None = None, batches: Callable[[int], list] | None = None,
               meta: dict | None = None) -> dict:
    """Train with early stopping on dev error rate and one fine-tune transition.

    ``batches(epoch)`` yields the epoch's minibatches (defaults to bucketed
    batches of ``corpus``); ``evaluate(model)`` returns the dev error rate
    (defaults to beam decoding ``dev_corpus``). Each epoch appends a
    checkpoint (never overwriting one) and one metrics line per step; the
    best model is the checkpoint of the best dev epoch. An existing run
    directory is resumed from its latest checkpoint.

    Returns a summary with the loss trajectory, dev rates and the best
    checkpoint path.
    """
    from .data import make_batches
    from .config import rng_stream

    if not len(corpus) or not len(dev_corpus):
        raise ValueError("training and dev corpora must be non-empty")
    run = Path(run_dir)
    (run / "checkpoints").mkdir(parents=True, exist_ok=True)
    metrics_path = run / "metrics.log"
    if batches is None:
        def batches(epoch):
            return make_batches(corpus, config.batch_size, rng_stream(config.seed, f"shuffle/{epoch}"), eos=model.eos)
    if evaluate is None:
        def evaluate(m):
            from .decoding import corpus_error_rate
            return corpus_error_rate(m, dev_corpus, config.dev_beam_width)

    opt = OptimizerState("adam", config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps)
    existing = checkpoint_paths(run)
    if existing:
        st = _restore(existing[-1], model, opt)
        log.info("resumed from %s (epoch %d, step %d)", existing[-1], st.epoch, st.step)
    else:
        st = _LoopState()
    losses: list[float] = []
    dev_rates: list[float] = []
    last_good = str(existing[-1]) if existing else None
    t0 = time.monotonic()

    def out_of_budget():
        return (config.max_steps and st.step >= config.max_steps) or (
            config.time_limit and time.monotonic() - t0 >= config.time_limit)

    while not st.done and st.epoch < config.max_epochs and not out_of_budget():
        epoch = st.epoch + 1
        mode = RunMode(train=True, keep_prob=1.0 - config.dropout, rng=rng_stream(config.seed, f"dropout/{epoch}"))
        wd = config.weight_decay if st.phase == "finetune" else 0.0
        with open(metrics_path, "a") as mlog:
            for batch in batches(epoch):
                if out_of_budget():
                    break
                try:
                    loss, gnorm = train_step(model, batch, opt, mode, config.clip_norm, wd)
                except NonFiniteError as e:
                    raise TrainingDiverged(f"epoch {epoch} step {st.step + 1}: {e}", last_good) from e
                st.step += 1
                losses.append(loss)
                mlog.write(f"{epoch} {st.step} {float(loss)!r} {float(gnorm)!r} {float(opt.learning_rate)!r} nan {time.time():.3f}\n")
        dev = float(evaluate(model))
        dev_rates.append(dev)
        with open(metrics_path, "a") as mlog:
            mlog.write(f"{epoch} {st.step} nan nan {float(opt.learning_rate)!r} {float(dev)!r} {time.time():.3f}\n")
        st.epoch = epoch
        if dev < st.best_dev:
            st.best_dev, st.best_epoch, st.bad_epochs = dev, epoch, 0
            if dev < config.target_error:
                st.done = True
        else:
            st.bad_epochs += 1
            if st.bad_epochs > config.patience:
                if st.phase == "train":
                    # converged: resume from the best weights at the lower rate with decay
                    model.load_state_arrays(load_checkpoint(_ckpt_path(run, st.best_epoch))[0])
                    st.phase, st.bad_epochs = "finetune", 0
                    opt.learning_rate = config.fine_tune_lr
                    log.info("epoch %d: switching to fine-tune phase", epoch)
                else:
                    st.done = True
        path = _ckpt_path(run, epoch)
        if path.exists():
            raise FileExistsError(f"refusing to overwrite {path}")
        _save(path, model, opt, st, meta or {})
        last_good = str(path)
        log.info("epoch %d step %d dev %.4f best %.4f (%s)", epoch, st.step, dev, st.best_dev, st.phase)

    return {
        "losses": losses,
        "dev": dev_rates,
        "best_dev": st.best_dev,
        "best_epoch": st.best_epoch,
        "epochs": st.epoch,
        "steps": st.step,
        "phase": st.phase,
        "best_checkpoint": str(_ckpt_path(run, st.best_epoch)) if st.best_epoch else None,
    }
