"""Edit distance, error rates and phone-set folding for scoring."""

from __future__ import annotations

import os
from dataclasses import dataclass
from importlib import resources
from typing import Hashable, Iterable, Mapping, Sequence

DELETED = None


class ScoringError(ValueError):
    pass


def edit_distance(a: Sequence[Hashable], b: Sequence[Hashable]) -> int:
    """Unit-cost Levenshtein distance, using two rows of length min(|a|, |b|) + 1."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def error_rate(pairs: Iterable[tuple[Sequence, Sequence]]) -> float:
    """Total edit distance over total reference length, for (reference, prediction) pairs."""
    pairs = list(pairs)
    if not pairs:
        raise ScoringError("cannot score an empty set of pairs")
    Z = sum(len(ref) for ref, _ in pairs)
    if Z == 0:
        raise ScoringError("total reference length is zero")
    return sum(edit_distance(ref, hyp) for ref, hyp in pairs) / Z


@dataclass(frozen=True)
class PhoneMap:
    """Total map from source labels to scoring labels; ``None`` deletes the label."""

    table: Mapping[str, str | None]

    def __call__(self, seq: Iterable[str]) -> list[str]:
        return map_phones(seq, self)

    @property
    def targets(self) -> set[str]:
        return {t for t in self.table.values() if t is not DELETED}

    @classmethod
    def parse(cls, text: str, origin: str = "<phone map>") -> "PhoneMap":
        table: dict[str, str | None] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            parts = raw.split()
            # a comment starts at a token beginning with '#', so labels like "h#" survive
            cut = next((i for i, tok in enumerate(parts) if tok.startswith("#")), len(parts))
            parts = parts[:cut]
            if not parts:
                continue
            if len(parts) != 2:
                raise ScoringError(f"{origin}:{lineno}: expected 'source target' or 'source -', got {raw!r}")
            src, dst = parts
            if src in table:
                raise ScoringError(f"{origin}:{lineno}: label {src!r} mapped twice")
            table[src] = DELETED if dst == "-" else dst
        if not table:
            raise ScoringError(f"{origin}: phone map is empty")
        return cls(table)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "PhoneMap":
        with open(path) as fh:
            return cls.parse(fh.read(), str(path))

    @classmethod
    def identity(cls, labels: Iterable[str]) -> "PhoneMap":
        return cls({lab: lab for lab in labels})


def default_phone_map() -> PhoneMap:
    """The bundled 61 -> 39 folding."""
    text = resources.files("attn_asr").joinpath("data_files/phones_61_39.map").read_text()
    return PhoneMap.parse(text, "phones_61_39.map")


def map_phones(seq: Iterable[str], pm: PhoneMap) -> list[str]:
    out = []
    for lab in seq:
        if lab not in pm.table:
            raise ScoringError(f"label {lab!r} has no entry in the phone map")
        dst = pm.table[lab]
        if dst is not DELETED:
            out.append(dst)
    return out


@dataclass(frozen=True)
class ScoreReport:
    utterances: int
    reference_length: int
    edits: int

    @property
    def rate(self) -> float:
        return self.edits / self.reference_length

    def format(self) -> str:
        return (
            f"utterances: {self.utterances}\n"
            f"reference length (Z): {self.reference_length}\n"
            f"total edits: {self.edits}\n"
            f"error rate: {self.rate:.4f}\n"
        )


def score(references: Mapping[str, Sequence[str]], hypotheses: Mapping[str, Sequence[str]],
          phone_map: PhoneMap | None = None, strip: Iterable[str] = ()) -> ScoreReport:
    """Score hypotheses against references keyed by utterance id.

    Labels in ``strip`` (end-of-sequence markers) are dropped first; the phone
    map, when given, is applied to both sides.
    """
    missing = sorted(set(references) ^ set(hypotheses))
    if missing:
        raise ScoringError(f"utterance ids differ between reference and hypothesis: {', '.join(missing[:20])}")
    strip = set(strip)

    def prep(seq):
        seq = [s for s in seq if s not in strip]
        return map_phones(seq, phone_map) if phone_map is not None else seq

    ids = sorted(references)
    refs = [prep(references[u]) for u in ids]
    hyps = [prep(hypotheses[u]) for u in ids]
    Z = sum(map(len, refs))
    if Z == 0:
        raise ScoringError("total reference length is zero")
    return ScoreReport(len(ids), Z, sum(edit_distance(r, h) for r, h in zip(refs, hyps)))
