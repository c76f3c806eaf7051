"""Convolutional attention encoder-decoder.

Encoder: conv block (stride 1x3 in time) -> residual blocks -> per-frame dense
block -> stacked bidirectional peephole LSTMs. Decoder: one peephole LSTM fed
with the previous label and the previous attentional vector, general
(bilinear) attention over the top encoder layer, and a softmax output layer.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import (
    BatchNormState,
    LSTMState,
    LSTMWeights,
    RunMode,
    INFER,
    apply_dropout,
    batchnorm,
    bilstm,
    conv_unit,
    lstm_peephole_step,
    residual_block,
    zero_state,
)

N_FREQ = 41
N_CHAN = 3
TIME_STRIDE = 3


@dataclass
class EncoderConfig:
    conv_maps: int = 128
    conv_stride: tuple[int, int] = (1, TIME_STRIDE)
    residual_blocks: int = 3
    residual_maps: int = 64
    kernel: tuple[int, int] = (3, 3)
    dense_units: int = 1024
    lstm_layers: int = 3
    lstm_units: int = 256

    @property
    def output_width(self) -> int:
        return 2 * self.lstm_units


@dataclass
class DecoderConfig:
    lstm_units: int = 256
    attention_units: int = 256
    vocab_size: int = 62


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    n_freq: int = N_FREQ
    n_channels: int = N_CHAN

    @property
    def eos(self) -> int:
        return self.decoder.vocab_size - 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        enc = dict(d["encoder"])
        enc["conv_stride"] = tuple(enc["conv_stride"])
        enc["kernel"] = tuple(enc["kernel"])
        return cls(EncoderConfig(**enc), DecoderConfig(**d["decoder"]), d.get("n_freq", N_FREQ), d.get("n_channels", N_CHAN))


def tiny_config(vocab_size: int = 6) -> ModelConfig:
    """The small configuration used for gradient checks."""
    return ModelConfig(
        EncoderConfig(conv_maps=8, residual_blocks=1, residual_maps=4, dense_units=16, lstm_layers=1, lstm_units=8),
        DecoderConfig(lstm_units=8, attention_units=8, vocab_size=vocab_size),
    )


def reduced_length(T: int, stride: int = TIME_STRIDE) -> int:
    return -(-T // stride)


class Encoded(NamedTuple):
    states: Tensor  # (B, S', 2H)
    mask: np.ndarray  # (B, S') bool
    lengths: np.ndarray


# ---------------------------------------------------------------------------
# parameters


@dataclass
class ParamSpec:
    shape: tuple[int, ...]
    kind: str  # weight | lstm | bias | gamma | beta
    fan: tuple[int, int] | None = None

    @property
    def decays(self) -> bool:
        return self.kind in ("weight", "lstm")


def param_specs(cfg: ModelConfig) -> dict[str, ParamSpec]:
    """Ordered manifest of every trainable tensor."""
    e, d = cfg.encoder, cfg.decoder
    m, n = e.kernel
    specs: dict[str, ParamSpec] = {}

    def conv(name, cin, cout, km=m, kn=n):
        specs[name] = ParamSpec((cout, km, kn, cin), "weight", (km * kn * cin, km * kn * cout))

    def bn(name, c):
        specs[f"{name}.gamma"] = ParamSpec((c,), "gamma")
        specs[f"{name}.beta"] = ParamSpec((c,), "beta")

    def lstm(name, din, h):
        specs[f"{name}.W_x"] = ParamSpec((din, 4 * h), "lstm")
        specs[f"{name}.W_h"] = ParamSpec((h, 4 * h), "lstm")
        specs[f"{name}.b"] = ParamSpec((4 * h,), "bias")
        specs[f"{name}.peep"] = ParamSpec((3, h), "lstm")

    conv("conv.W", cfg.n_channels, e.conv_maps)
    bn("conv.bn", e.conv_maps)
    cin = e.conv_maps
    for r in range(e.residual_blocks):
        conv(f"res{r}.conv1.W", cin, e.residual_maps)
        bn(f"res{r}.bn1", e.residual_maps)
        conv(f"res{r}.conv2.W", e.residual_maps, e.residual_maps)
        bn(f"res{r}.bn2", e.residual_maps)
        if cin != e.residual_maps:
            conv(f"res{r}.proj.W", cin, e.residual_maps, 1, 1)
        cin = e.residual_maps
    flat = cfg.n_freq * cin
    specs["dense.W"] = ParamSpec((flat, e.dense_units), "weight", (flat, e.dense_units))
    bn("dense.bn", e.dense_units)
    din = e.dense_units
    for layer in range(e.lstm_layers):
        lstm(f"enc.lstm{layer}.fwd", din, e.lstm_units)
        lstm(f"enc.lstm{layer}.bwd", din, e.lstm_units)
        din = 2 * e.lstm_units
    E = e.output_width
    lstm("dec.lstm", d.vocab_size + d.attention_units, d.lstm_units)
    specs["att.W_a"] = ParamSpec((d.lstm_units, E), "weight", (d.lstm_units, E))
    specs["att.W_c"] = ParamSpec((E + d.lstm_units, d.attention_units), "weight", (E + d.lstm_units, d.attention_units))
    specs["out.W_s"] = ParamSpec((d.attention_units, d.vocab_size), "weight", (d.attention_units, d.vocab_size))
    return specs


def init_tensor(spec: ParamSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.kind == "weight":
        limit = np.sqrt(6.0 / (spec.fan[0] + spec.fan[1]))
        return rng.uniform(-limit, limit, spec.shape)
    if spec.kind == "lstm":
        return rng.uniform(-0.1, 0.1, spec.shape)
    return np.ones(spec.shape) if spec.kind == "gamma" else np.zeros(spec.shape)


def init_params(cfg: ModelConfig, seed: int | np.random.Generator = 0) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, U(-0.1, 0.1) for LSTM weights, zero biases, BN gamma=1, beta=0."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return {name: init_tensor(spec, rng) for name, spec in param_specs(cfg).items()}


def bn_names(cfg: ModelConfig) -> list[str]:
    return [k[: -len(".gamma")] for k, s in param_specs(cfg).items() if s.kind == "gamma"]


# ---------------------------------------------------------------------------
# model


class Seq2Seq:
    """Parameters, batch-norm state and the forward computations."""

    def __init__(self, config: ModelConfig, seed: int | np.random.Generator = 0,
                 values: dict[str, np.ndarray] | None = None):
        self.config = config
        self.specs = param_specs(config)
        values = init_params(config, seed) if values is None else values
        self.params: dict[str, Tensor] = {
            k: Tensor(np.array(values[k], dtype=np.float64), requires_grad=True, name=k) for k in self.specs
        }
        self.bn: dict[str, BatchNormState] = {}
        for name in bn_names(config):
            n = self.specs[f"{name}.gamma"].shape[0]
            self.bn[name] = BatchNormState(self.params[f"{name}.gamma"], self.params[f"{name}.beta"],
                                           np.zeros(n), np.ones(n))

    # -- bookkeeping ---------------------------------------------------------

    @property
    def eos(self) -> int:
        return self.config.eos

    @property
    def vocab_size(self) -> int:
        return self.config.decoder.vocab_size

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Every tensor needed to reproduce inference: parameters plus BN running stats."""
        out = {k: p.data for k, p in self.params.items()}
        for name, st in self.bn.items():
            out[f"{name}.running_mean"] = st.running_mean
            out[f"{name}.running_var"] = st.running_var
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        expected = self.state_arrays()
        for k, ref in expected.items():
            if k not in arrays:
                raise KeyError(f"missing tensor {k}")
            if arrays[k].shape != ref.shape:
                raise ValueError(f"tensor {k}: shape {arrays[k].shape} does not match model {ref.shape}")
        for k in self.params:
            self.params[k].data = np.array(arrays[k], dtype=np.float64)
        for name, st in self.bn.items():
            st.gamma, st.beta = self.params[f"{name}.gamma"], self.params[f"{name}.beta"]
            st.running_mean = np.array(arrays[f"{name}.running_mean"], dtype=np.float64)
            st.running_var = np.array(arrays[f"{name}.running_var"], dtype=np.float64)

    def _lstm(self, prefix: str) -> LSTMWeights:
        p = self.params
        return LSTMWeights(p[f"{prefix}.W_x"], p[f"{prefix}.W_h"], p[f"{prefix}.b"], p[f"{prefix}.peep"])

    # -- encoder -------------------------------------------------------------

    def encode(self, feats, lengths=None, mode: RunMode = INFER) -> Encoded:
        """Encode a padded batch (B, 41, T, 3) with true frame counts ``lengths``."""
        frames, tmask, red = self.encode_conv(feats, lengths, mode)
        return self.encode_recurrent(frames, tmask, red, mode)

    def encode_conv(self, feats, lengths=None, mode: RunMode = INFER):
        """Convolutional front of the encoder.

        Returns the flattened per-frame maps (B, S', F*C), the (B, S') validity
        mask and the reduced lengths.
        """
        cfg, p = self.config, self.params
        x = ad._as_tensor(feats)
        if x.ndim == 3:
            x = ad.reshape(x, (1,) + x.shape)
        B, F, T, C = x.shape
        if F != cfg.n_freq or C != cfg.n_channels:
            raise ad.ShapeError(f"encoder expects ({cfg.n_freq}, T, {cfg.n_channels}) features, got ({F}, {T}, {C})")
        lengths = np.full(B, T) if lengths is None else np.asarray(lengths, dtype=int)
        if T == 0 or (lengths <= 0).any():
            raise ValueError("zero-length utterance")
        stride = cfg.encoder.conv_stride[1]
        S = reduced_length(T, stride)
        red = -(-lengths // stride)
        tmask = np.arange(S)[None, :] < red[:, None]

        h = conv_unit(x, p["conv.W"], self.bn["conv.bn"], mode, "conv", stride=cfg.encoder.conv_stride, tmask=tmask)
        for r in range(cfg.encoder.residual_blocks):
            h = residual_block(h, p[f"res{r}.conv1.W"], self.bn[f"res{r}.bn1"], p[f"res{r}.conv2.W"],
                               self.bn[f"res{r}.bn2"], mode, f"res{r}", p.get(f"res{r}.proj.W"), tmask)
        # (B, F, S, C) -> (B, S, F*C): one flattened vector per reduced frame
        Bh, Fh, Sh, Ch = h.shape
        return ad.reshape(ad.transpose(h, (0, 2, 1, 3)), (Bh, Sh, Fh * Ch)), tmask, red

    def encode_recurrent(self, frames: Tensor, tmask: np.ndarray, red: np.ndarray, mode: RunMode = INFER) -> Encoded:
        """Dense block and the bidirectional LSTM stack."""
        cfg, p = self.config, self.params
        h = ad.affine(frames, p["dense.W"])
        h = ad.relu(batchnorm(h, self.bn["dense.bn"], mode, tmask[:, :, None]))
        h = apply_dropout(h, mode, "dense")
        if not tmask.all():
            h = ad.mul(h, tmask[:, :, None].astype(np.float64))
        for layer in range(cfg.encoder.lstm_layers):
            h = bilstm(h, self._lstm(f"enc.lstm{layer}.fwd"), self._lstm(f"enc.lstm{layer}.bwd"), tmask)
            h = apply_dropout(h, mode, f"enc.lstm{layer}")
        return Encoded(h, tmask, red)

    # -- decoder -------------------------------------------------------------

    def initial_decoder_state(self, batch: int) -> tuple[LSTMState, Tensor]:
        d = self.config.decoder
        return zero_state(batch, d.lstm_units), Tensor(np.zeros((batch, d.attention_units)))

    def one_hot(self, tokens) -> np.ndarray:
        """One-hot rows; a negative id (start of sequence) maps to the zero vector."""
        tokens = np.asarray(tokens, dtype=int)
        V = self.vocab_size
        if (tokens >= V).any():
            raise IndexError(f"token id out of vocabulary (size {V}): {tokens[tokens >= V]}")
        out = np.zeros((len(tokens), V))
        valid = tokens >= 0
        out[np.nonzero(valid)[0], tokens[valid]] = 1.0
        return out

    def align(self, dec_h: Tensor, enc: Encoded) -> Tensor:
        """Attention weights softmax_s(dec_h^T W_a h_s) over valid encoder positions, (B, S')."""
        q = ad.matmul(dec_h, self.params["att.W_a"])  # (B, E)
        B, E = q.shape
        scores = ad.reshape(ad.matmul(enc.states, ad.reshape(q, (B, E, 1))), (B, -1))
        return ad.masked_softmax(scores, enc.mask)

    @staticmethod
    def attend(a: Tensor, enc_states: Tensor) -> Tensor:
        """Context vectors: alignment-weighted average of encoder states, (B, E)."""
        B, S = a.shape
        return ad.reshape(ad.matmul(ad.reshape(a, (B, 1, S)), enc_states), (B, -1))

    def attentional_state(self, context: Tensor, dec_h: Tensor) -> Tensor:
        return ad.tanh(ad.matmul(ad.concat([context, dec_h], axis=-1), self.params["att.W_c"]))

    def decode_step(self, prev_tokens, prev_attentional: Tensor, state: LSTMState, enc: Encoded,
                    mode: RunMode = INFER, step: int = 0):
        """Advance the decoder one label.

        Args:
            prev_tokens: (B,) previous label ids; -1 marks start of sequence.
            prev_attentional: (B, A) attentional vector from the previous step.
            state: decoder LSTM state.
            enc: encoder output.

        Returns:
            (log-probs (B, V), new LSTM state, new attentional vector, alignment (B, S'))
        """
        x = ad.concat([Tensor(self.one_hot(prev_tokens)), prev_attentional], axis=-1)
        state = lstm_peephole_step(x, state, self._lstm("dec.lstm"))
        h = apply_dropout(state.h, mode, f"dec.lstm.{step}")
        a = self.align(h, enc)
        c = self.attend(a, enc.states)
        att = apply_dropout(self.attentional_state(c, h), mode, f"dec.att.{step}")
        logp = ad.log_softmax(ad.matmul(att, self.params["out.W_s"]))
        return logp, state, att, a

    def teacher_forced_forward(self, feats, lengths, targets: np.ndarray, mode: RunMode = INFER,
                               enc: Encoded | None = None) -> Tensor:
        """Log-probabilities (B, L, V) of every position of ``targets`` (B, L).

        Targets must already end in the end-of-sequence id; the decoder input at
        step t is the ground-truth label t-1 (start symbol at t=0). A
        precomputed ``enc`` skips the encoder.
        """
        targets = np.asarray(targets, dtype=int)
        if targets.ndim != 2 or targets.shape[1] == 0:
            raise ValueError("teacher forcing needs a non-empty (B, L) target matrix")
        if enc is None:
            enc = self.encode(feats, lengths, mode)
        B, L = targets.shape
        state, att = self.initial_decoder_state(B)
        prev = np.full(B, -1)
        out = []
        for t in range(L):
            logp, state, att, _ = self.decode_step(prev, att, state, enc, mode, t)
            out.append(logp)
            prev = targets[:, t]
        return ad.stack(out, axis=1)


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"CKPT"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | os.PathLike, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write tensors as: magic, version, JSON metadata, manifest, raw little-endian doubles.

    Manifest entries are (name, shape, element offset into the payload).
    """
    names = list(tensors)
    manifest = []
    offset = 0
    for k in names:
        arr = np.asarray(tensors[k])
        manifest.append((k, arr.shape, offset))
        offset += arr.size
    meta_blob = json.dumps(meta or {}, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(meta_blob)), meta_blob, struct.pack("<I", len(names))]
    for k, shape, off in manifest:
        kb = k.encode()
        parts.append(struct.pack("<H", len(kb)) + kb + struct.pack("<I", len(shape)))
        parts.append(struct.pack(f"<{len(shape)}I", *shape) + struct.pack("<Q", off))
    for k in names:
        parts.append(np.ascontiguousarray(tensors[k], dtype="<f8").tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, meta_len = struct.unpack_from("<II", blob, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    meta = json.loads(blob[pos : pos + meta_len].decode())
    pos += meta_len
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    manifest = []
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos : pos + klen].decode()
        pos += klen
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        (off,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        manifest.append((name, shape, off))
    payload = np.frombuffer(blob, dtype="<f8", offset=pos)
    out = {}
    for name, shape, off in manifest:
        n = int(np.prod(shape))
        if off + n > payload.size:
            raise CheckpointError(f"{path}: tensor {name} runs past the end of the file")
        out[name] = payload[off : off + n].reshape(shape).astype(np.float64)
    return out, meta


def check_compatible(model: Seq2Seq, arrays: dict[str, np.ndarray]) -> None:
    """Raise CheckpointError naming the first tensor that does not fit ``model``."""
    for k, ref in model.state_arrays().items():
        if k not in arrays:
            raise CheckpointError(f"checkpoint lacks tensor {k}")
        if arrays[k].shape != ref.shape:
            raise CheckpointError(f"tensor {k}: checkpoint shape {arrays[k].shape} != model shape {ref.shape}")
