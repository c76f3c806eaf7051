"""Left-to-right beam search and greedy decoding."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import INFER, LSTMState
from .model import Encoded, Seq2Seq


class DecoderState(NamedTuple):
    """Decoder recurrent state for one hypothesis (plain arrays, no graph)."""

    h: np.ndarray
    c: np.ndarray
    attentional: np.ndarray


# (previous tokens (n,), states) -> (log-probs (n, V), new states)
StepFn = Callable[[np.ndarray, Sequence[DecoderState]], tuple[np.ndarray, list[DecoderState]]]


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]
    log_prob: float
    dec_state: DecoderState | None
    finished: bool = False

    @property
    def attentional(self):
        return None if self.dec_state is None else self.dec_state.attentional


@dataclass
class DecodeResult:
    labels: list[int]  # without the end-of-sequence token
    score: float
    truncated: bool = False


class Session:
    """A model bound to one encoded utterance, exposing the step interface."""

    def __init__(self, model: Seq2Seq, enc: Encoded):
        self.model, self.enc = model, enc
        self._tiled: dict[int, Encoded] = {}

    def _encoded(self, n: int) -> Encoded:
        if n not in self._tiled:
            e = self.enc
            self._tiled[n] = Encoded(Tensor(np.repeat(e.states.data, n, axis=0)),
                                     np.repeat(e.mask, n, axis=0), np.repeat(e.lengths, n))
        return self._tiled[n]

    def initial(self) -> DecoderState:
        d = self.model.config.decoder
        return DecoderState(np.zeros(d.lstm_units), np.zeros(d.lstm_units), np.zeros(d.attention_units))

    def step(self, prev: np.ndarray, states: Sequence[DecoderState]):
        n = len(states)
        with ad.no_grad():
            lstm = LSTMState(Tensor(np.stack([s.h for s in states])), Tensor(np.stack([s.c for s in states])))
            att = Tensor(np.stack([s.attentional for s in states]))
            logp, new, att, _ = self.model.decode_step(prev, att, lstm, self._encoded(n), INFER)
        return logp.data, [DecoderState(new.h.data[i], new.c.data[i], att.data[i]) for i in range(n)]


def encode_one(model: Seq2Seq, features: np.ndarray) -> Encoded:
    """Encode a single (41, T, 3) utterance in inference mode."""
    with ad.no_grad():
        return model.encode(np.asarray(features)[None], None, INFER)


def default_max_len(enc: Encoded) -> int:
    return max(1, 2 * int(enc.lengths[0]))


def _rank(h: Hypothesis, length_norm: bool) -> float:
    return h.log_prob / len(h.tokens) if length_norm else h.log_prob


def _best(hyps: Iterable[Hypothesis], length_norm: bool) -> Hypothesis:
    # highest score; ties go to the lexicographically smaller token sequence
    return min(hyps, key=lambda h: (-_rank(h, length_norm), h.tokens))


def beam_search_steps(step: StepFn, init: DecoderState, vocab_size: int, eos: int, beam_width: int = 10,
                      max_len: int = 1, length_norm: bool = False) -> DecodeResult:
    """Beam search over an abstract decoder.

    Each step expands every live hypothesis over the whole vocabulary and
    ranks the candidates (ties: lower token id, then the better-ranked
    parent). Candidates ending in ``eos`` that rank within the top
    ``beam_width`` retire to the completed pool; the live beam is then filled
    with the best ``beam_width`` candidates that do not end in ``eos``.
    With width 1 this is greedy decoding: an arg-max ``eos`` outscores every
    live extension, which triggers the early stop. ``max_len`` bounds the
    number of emitted tokens, end-of-sequence included.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    live = [Hypothesis((), 0.0, init)]
    done: list[Hypothesis] = []
    for _ in range(max_len):
        prev = np.array([h.tokens[-1] if h.tokens else -1 for h in live])
        logp, states = step(prev, [h.dec_state for h in live])
        scores = np.array([h.log_prob for h in live])[:, None] + logp
        n = len(live)
        parent = np.repeat(np.arange(n), vocab_size)
        token = np.tile(np.arange(vocab_size), n)
        flat = scores.reshape(-1)
        order = np.lexsort((parent, token, -flat))
        nxt = []
        for rank, j in enumerate(order):
            p, v = int(parent[j]), int(token[j])
            if v == eos:
                if rank < beam_width:
                    done.append(Hypothesis(live[p].tokens + (v,), float(flat[j]), states[p], True))
            elif len(nxt) < beam_width:
                nxt.append(Hypothesis(live[p].tokens + (v,), float(flat[j]), states[p]))
            if len(nxt) == beam_width and rank >= beam_width - 1:
                break
        live = nxt
        if not live:
            break
        # log-probs are <= 0, so no live extension can overtake a better completed one
        if done and not length_norm and _best(done, False).log_prob > max(h.log_prob for h in live):
            break
    if done:
        best = _best(done, length_norm)
        return DecodeResult(list(best.tokens[:-1]), best.log_prob, False)
    best = _best(live, length_norm)
    return DecodeResult(list(best.tokens), best.log_prob, True)


def beam_search(model: Seq2Seq, features: np.ndarray, beam_width: int = 10, max_len: int | None = None,
                length_norm: bool = False) -> DecodeResult:
    """Decode one (41, T, 3) utterance; ``max_len`` defaults to twice the encoder length."""
    enc = encode_one(model, features)
    sess = Session(model, enc)
    return beam_search_steps(sess.step, sess.initial(), model.vocab_size, model.eos, beam_width,
                             max_len or default_max_len(enc), length_norm)


def greedy_decode(model: Seq2Seq, features: np.ndarray, max_len: int | None = None) -> DecodeResult:
    """Pick the arg-max label at every step until end-of-sequence."""
    enc = encode_one(model, features)
    sess = Session(model, enc)
    max_len = max_len or default_max_len(enc)
    state, tokens, score = sess.initial(), [], 0.0
    prev = -1
    for _ in range(max_len):
        logp, (state,) = sess.step(np.array([prev]), [state])
        prev = int(np.argmax(logp[0]))
        score += float(logp[0, prev])
        if prev == model.eos:
            return DecodeResult(tokens, score, False)
        tokens.append(prev)
    return DecodeResult(tokens, score, True)


def sequence_log_prob(model: Seq2Seq, features: np.ndarray, labels: Sequence[int], eos: bool = True) -> float:
    """Sum of per-step log-probabilities of ``labels`` (plus end-of-sequence) under the model."""
    sess = Session(model, encode_one(model, features))
    state, prev, total = sess.initial(), -1, 0.0
    for tok in list(labels) + ([model.eos] if eos else []):
        logp, (state,) = sess.step(np.array([prev]), [state])
        total += float(logp[0, tok])
        prev = tok
    return total


def exhaustive_search(step: StepFn, init: DecoderState, vocab_size: int, eos: int, max_len: int) -> DecodeResult:
    """Reference decoder: score every sequence of at most ``max_len`` tokens ending in eos."""
    best: Hypothesis | None = None
    frontier = [Hypothesis((), 0.0, init)]
    for _ in range(max_len):
        prev = np.array([h.tokens[-1] if h.tokens else -1 for h in frontier])
        logp, states = step(prev, [h.dec_state for h in frontier])
        nxt = []
        for i, h in enumerate(frontier):
            for v in range(vocab_size):
                cand = Hypothesis(h.tokens + (v,), h.log_prob + float(logp[i, v]), states[i], v == eos)
                if cand.finished:
                    best = cand if best is None else _best([best, cand], False)
                else:
                    nxt.append(cand)
        frontier = nxt
    if best is None:
        raise ValueError("no sequence ends within max_len")
    return DecodeResult(list(best.tokens[:-1]), best.log_prob, False)


# ---------------------------------------------------------------------------
# corpus helpers


def decode_corpus(model: Seq2Seq, examples, beam_width: int = 10) -> list[tuple[str, DecodeResult]]:
    return [(ex.id, beam_search(model, ex.features, beam_width)) for ex in examples]


def corpus_error_rate(model: Seq2Seq, examples, beam_width: int = 10) -> float:
    from .evaluation import error_rate

    hyps = decode_corpus(model, examples, beam_width)
    return error_rate([(list(ex.labels), res.labels) for ex, (_, res) in zip(examples, hyps)])


def format_decode_line(uid: str, result: DecodeResult, labels: Sequence[str]) -> str:
    return f"{uid}\t{float(result.score)!r}\t{' '.join(labels)}\n"


def write_decodes(path: str | os.PathLike, decodes: Iterable[tuple[str, DecodeResult]], vocab) -> None:
    with open(path, "w") as fh:
        for uid, res in decodes:
            fh.write(format_decode_line(uid, res, vocab.decode(res.labels)))


def read_decodes(path: str | os.PathLike) -> dict[str, list[str]]:
    """Parse a decode file into ``{utterance id: label strings}``."""
    out: dict[str, list[str]] = {}
    for lineno, line in enumerate(open(path), 1):
        line = line.rstrip("\n")
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 'id<TAB>score<TAB>labels'")
        out[parts[0]] = parts[2].split()
    return out
