"""Corpus manifests, vocabularies, padded batches and a synthetic transduction corpus."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .config import rng_stream
from .features import N_CHANNELS, N_STATIC, NormStats, read_features, write_features

SPLITS = ("train", "dev", "test")
EOS_LABEL = "<eos>"


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    """Label inventory; the final id is reserved for end-of-sequence."""

    labels: tuple[str, ...]

    def __post_init__(self):
        if len(self.labels) < 2:
            raise DataError("vocabulary needs at least one label plus end-of-sequence")
        if len(set(self.labels)) != len(self.labels):
            raise DataError("vocabulary has duplicate labels")
        object.__setattr__(self, "_index", {lab: i for i, lab in enumerate(self.labels)})

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def eos(self) -> int:
        return len(self.labels) - 1

    def encode(self, labels: Iterable[str]) -> list[int]:
        out = []
        for lab in labels:
            i = self._index.get(lab)
            if i is None:
                raise DataError(f"unknown label {lab!r}")
            out.append(i)
        return out

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.labels[i] for i in ids]

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text("".join(f"{lab}\n" for lab in self.labels))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Vocabulary":
        labels = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
        return cls(tuple(labels))


@dataclass(frozen=True)
class Utterance:
    id: str
    path: Path
    split: str
    labels: tuple[int, ...]


@dataclass
class Manifest:
    records: list[Utterance]
    vocab: Vocabulary

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def split(self, name: str) -> list[Utterance]:
        if name not in SPLITS:
            raise DataError(f"unknown split {name!r}; expected one of {SPLITS}")
        return [r for r in self.records if r.split == name]


def load_manifest(path: str | os.PathLike, vocab: Vocabulary | str | os.PathLike, check_files: bool = True) -> Manifest:
    """Parse ``id<TAB>feature_path<TAB>split<TAB>labels`` lines.

    Relative feature paths are resolved against the manifest's directory.
    """
    path = Path(path)
    if not isinstance(vocab, Vocabulary):
        vocab = Vocabulary.load(vocab)
    base = path.parent
    records: list[Utterance] = []
    seen: set[str] = set()
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise DataError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
        uid, fpath, split, text = parts
        if uid in seen:
            raise DataError(f"{path}:{lineno}: duplicate utterance id {uid!r}")
        if split not in SPLITS:
            raise DataError(f"{path}:{lineno}: unknown split {split!r}")
        labels = text.split()
        if not labels:
            raise DataError(f"{path}:{lineno}: empty transcript for {uid!r}")
        if EOS_LABEL in labels or vocab.labels[-1] in labels:
            raise DataError(f"{path}:{lineno}: transcript contains the end-of-sequence label")
        try:
            ids = vocab.encode(labels)
        except DataError as e:
            raise DataError(f"{path}:{lineno}: {e}") from None
        fp = Path(fpath)
        fp = fp if fp.is_absolute() else base / fp
        if check_files and not fp.is_file():
            raise DataError(f"{path}:{lineno}: feature file not found: {fp}")
        seen.add(uid)
        records.append(Utterance(uid, fp, split, tuple(ids)))
    if not records:
        raise DataError(f"{path}: empty manifest")
    return Manifest(records, vocab)


def write_manifest(path: str | os.PathLike, records: Iterable[Utterance], vocab: Vocabulary) -> None:
    base = Path(path).parent
    with open(path, "w") as fh:
        for r in records:
            fp = os.path.relpath(r.path, base)
            fh.write(f"{r.id}\t{fp}\t{r.split}\t{' '.join(vocab.decode(r.labels))}\n")


# ---------------------------------------------------------------------------
# examples and batches


@dataclass
class Example:
    id: str
    features: np.ndarray  # (41, T, 3)
    labels: tuple[int, ...]

    @property
    def n_frames(self) -> int:
        return self.features.shape[1]


def load_examples(records: Sequence[Utterance], norm: NormStats | None = None) -> list[Example]:
    out = []
    for r in records:
        feats = read_features(r.path)
        if feats.shape[0] != N_STATIC or feats.shape[2] != N_CHANNELS:
            raise DataError(f"{r.path}: expected ({N_STATIC}, T, {N_CHANNELS}) features, got {feats.shape}")
        out.append(Example(r.id, norm.apply(feats) if norm is not None else feats, r.labels))
    return out


@dataclass
class Batch:
    ids: list[str]
    features: np.ndarray  # (B, 41, T_max, 3), zero padded
    lengths: np.ndarray  # (B,) frames
    targets: np.ndarray  # (B, L_max + 1) label ids with end-of-sequence appended, eos padded
    target_lengths: np.ndarray  # (B,) including the end-of-sequence
    target_mask: np.ndarray = field(repr=False)  # (B, L_max + 1) bool
    vocab_size: int = 0

    def __len__(self) -> int:
        return len(self.ids)

    def one_hot_targets(self) -> np.ndarray:
        return np.eye(self.vocab_size)[self.targets] * self.target_mask[..., None]


def collate(examples: Sequence[Example], eos: int, vocab_size: int | None = None) -> Batch:
    B = len(examples)
    T = max(e.n_frames for e in examples)
    L = max(len(e.labels) for e in examples) + 1
    feats = np.zeros((B, N_STATIC, T, N_CHANNELS))
    targets = np.full((B, L), eos, dtype=int)
    tlen = np.empty(B, dtype=int)
    for i, e in enumerate(examples):
        feats[i, :, : e.n_frames] = e.features
        targets[i, : len(e.labels)] = e.labels
        tlen[i] = len(e.labels) + 1
    mask = np.arange(L)[None, :] < tlen[:, None]
    lengths = np.array([e.n_frames for e in examples])
    return Batch([e.id for e in examples], feats, lengths, targets, tlen, mask, vocab_size or eos + 1)


def make_batches(examples: Sequence[Example], batch_size: int = 32, seed: int | np.random.Generator = 0, *,
                 eos: int) -> list[Batch]:
    """Length-bucketed minibatches in a seeded random order.

    Utterances are sorted by frame count (random tie-break), cut into
    consecutive groups of ``batch_size`` and the groups shuffled. The last
    group may be short.
    """
    if not len(examples):
        raise DataError("cannot batch an empty split")
    if batch_size < 1:
        raise DataError("batch_size must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    perm = rng.permutation(len(examples))
    order = perm[np.argsort([examples[i].n_frames for i in perm], kind="stable")]
    groups = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    return [collate([examples[i] for i in groups[g]], eos) for g in rng.permutation(len(groups))]


# ---------------------------------------------------------------------------
# synthetic corpus

FRAMES_PER_SYMBOL = 3
TASKS = ("copy", "reverse", "blockmap")


@dataclass
class SynthCorpus:
    manifest: Manifest
    patterns: np.ndarray  # (V, 41, 3, 3): one 3-frame pattern per symbol
    mapping: np.ndarray  # symbol substitution used by the blockmap task
    manifest_path: Path
    vocab_path: Path


def render(symbols: Sequence[int], patterns: np.ndarray, noise: float = 0.0,
           rng: np.random.Generator | None = None) -> np.ndarray:
    """Concatenate per-symbol patterns along time: (41, 3 * len, 3)."""
    feats = np.concatenate([patterns[s] for s in symbols], axis=1)
    if noise:
        feats = feats + noise * rng.standard_normal(feats.shape)
    return feats


def nearest_pattern_decode(feats: np.ndarray, patterns: np.ndarray) -> list[int]:
    """Invert :func:`render` by matching each 3-frame chunk to its closest pattern."""
    n = feats.shape[1] // FRAMES_PER_SYMBOL
    chunks = feats[:, : n * FRAMES_PER_SYMBOL].reshape(feats.shape[0], n, FRAMES_PER_SYMBOL, -1).transpose(1, 0, 2, 3)
    d = ((chunks[:, None] - patterns[None]) ** 2).sum(axis=(2, 3, 4))
    return [int(i) for i in d.argmin(axis=1)]


def synth_target(kind: str, source: Sequence[int], mapping: np.ndarray) -> list[int]:
    if kind == "copy":
        return list(source)
    if kind == "reverse":
        return list(source)[::-1]
    if kind == "blockmap":
        return [int(mapping[s]) for s in source]
    raise DataError(f"unknown synthetic task {kind!r}; expected one of {TASKS}")


def synth_corpus(kind: str, vocab: int, lengths: tuple[int, int], n: int | Mapping[str, int], seed: int,
                 out_dir: str | os.PathLike, noise: float = 0.05) -> SynthCorpus:
    """Generate a random-string transduction corpus as feature files plus a manifest.

    ``n`` is the number of training utterances, or a ``{split: count}`` map.
    Symbol ``i`` is labelled ``s{i}``; the vocabulary file ends with the
    end-of-sequence label.
    """
    if kind not in TASKS:
        raise DataError(f"unknown synthetic task {kind!r}; expected one of {TASKS}")
    if vocab < 2:
        raise DataError("synthetic vocabulary needs at least 2 symbols")
    lo, hi = lengths
    if not 1 <= lo <= hi:
        raise DataError(f"invalid length range {lengths}")
    counts = {"train": n} if isinstance(n, int) else dict(n)
    if sum(counts.values()) < 1 or any(k not in SPLITS for k in counts):
        raise DataError(f"invalid utterance counts {counts}")
    rng = rng_stream(seed, "synth")
    patterns = rng.standard_normal((vocab, N_STATIC, FRAMES_PER_SYMBOL, N_CHANNELS))
    mapping = rng.permutation(vocab)
    voc = Vocabulary(tuple(f"s{i}" for i in range(vocab)) + (EOS_LABEL,))

    out = Path(out_dir)
    (out / "feats").mkdir(parents=True, exist_ok=True)
    records = []
    for split in SPLITS:
        for i in range(counts.get(split, 0)):
            src = rng.integers(0, vocab, rng.integers(lo, hi + 1))
            uid = f"{split}-{i:05d}"
            fp = out / "feats" / f"{uid}.ften"
            write_features(fp, render(src, patterns, noise, rng))
            records.append(Utterance(uid, fp, split, tuple(synth_target(kind, src, mapping))))
    vocab_path, manifest_path = out / "vocab.txt", out / "manifest.tsv"
    voc.save(vocab_path)
    write_manifest(manifest_path, records, voc)
    np.save(out / "patterns.npy", patterns)
    return SynthCorpus(Manifest(records, voc), patterns, mapping, manifest_path, vocab_path)
