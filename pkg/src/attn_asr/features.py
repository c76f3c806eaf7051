"""Acoustic front end: log mel filterbank energies with deltas.

Pipeline: Hamming-windowed 25 ms frames every 10 ms, periodogram, 40
triangular mel filters, log, plus a log frame-energy term. The 41 static
coefficients get delta and delta-delta channels, giving a (41, T, 3) tensor.
"""

from __future__ import annotations

import os
import struct
import wave
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

N_MELS = 40
N_STATIC = N_MELS + 1
N_CHANNELS = 3
LOG_FLOOR = 1e-10
STD_FLOOR = 1e-8

FTEN_MAGIC = b"FTEN"
FTEN_VERSION = 1
_FTEN_HEADER = struct.Struct("<4sIIII")


class FeatureError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise FeatureError(f"sample rate must be positive, got {self.sample_rate}")


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def frame_signal(w: Waveform, frame_ms: float = 25.0, hop_ms: float = 10.0, window: bool = True) -> np.ndarray:
    """Cut the waveform into overlapping frames, shape (n_frames, frame_len)."""
    flen = int(round(w.sample_rate * frame_ms / 1000.0))
    hop = int(round(w.sample_rate * hop_ms / 1000.0))
    n = len(w.samples)
    if n < flen:
        raise FeatureError(f"audio has {n} samples, shorter than one {flen}-sample frame")
    count = 1 + (n - flen) // hop
    idx = np.arange(flen)[None, :] + hop * np.arange(count)[:, None]
    frames = w.samples[idx]
    if window:
        frames = frames * np.hamming(flen)
    return frames


def power_spectrum(frames: np.ndarray, nfft: int = 512) -> np.ndarray:
    frames = np.atleast_2d(frames)
    if nfft < frames.shape[1]:
        raise FeatureError(f"nfft={nfft} shorter than frame length {frames.shape[1]}")
    spec = np.fft.rfft(frames, n=nfft, axis=1)
    return (spec.real**2 + spec.imag**2) / nfft


def mel_filters(n_filters: int = N_MELS, nfft: int = 512, sample_rate: int = 16000,
                f_low: float = 0.0, f_high: float | None = None) -> np.ndarray:
    """Triangular filters on FFT bins, shape (n_filters, nfft//2 + 1).

    Edges are spaced uniformly in mel and snapped to bins; each filter peaks at
    1.0 on its centre bin.
    """
    f_high = sample_rate / 2 if f_high is None else f_high
    if not 0 <= f_low < f_high <= sample_rate / 2:
        raise FeatureError(f"invalid band edges f_low={f_low}, f_high={f_high} for rate {sample_rate}")
    mels = np.linspace(hz_to_mel(f_low), hz_to_mel(f_high), n_filters + 2)
    bins = np.floor((nfft + 1) * mel_to_hz(mels) / sample_rate).astype(int)
    bins = np.minimum(bins, nfft // 2)
    fb = np.zeros((n_filters, nfft // 2 + 1))
    k = np.arange(nfft // 2 + 1)
    for i in range(n_filters):
        lo, c, hi = bins[i], bins[i + 1], bins[i + 2]
        if c > lo:
            up = (k - lo) / (c - lo)
            fb[i] = np.where((k >= lo) & (k <= c), up, fb[i])
        if hi > c:
            down = (hi - k) / (hi - c)
            fb[i] = np.where((k > c) & (k <= hi), down, fb[i])
        fb[i, c] = 1.0
    return fb


def mel_filterbank(spec: np.ndarray, n_filters: int = N_MELS, f_low: float = 0.0,
                   f_high: float | None = None, sample_rate: int = 16000) -> np.ndarray:
    nfft = 2 * (spec.shape[-1] - 1)
    return spec @ mel_filters(n_filters, nfft, sample_rate, f_low, f_high).T


def log_energies(fbank: np.ndarray, spec: np.ndarray | None = None, floor: float = LOG_FLOOR) -> np.ndarray:
    """Log of filterbank energies; with ``spec`` given, append log frame power."""
    out = np.log(np.maximum(fbank, floor))
    if spec is not None:
        energy = np.log(np.maximum(spec.sum(axis=-1, keepdims=True), floor))
        out = np.concatenate([out, energy], axis=-1)
    return out


def delta(c: np.ndarray, N: int = 2) -> np.ndarray:
    """Regression deltas along axis 0 with edge-replicated padding."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape[0] < 1:
        raise FeatureError("delta needs at least one frame")
    T = c.shape[0]
    padded = np.concatenate([np.repeat(c[:1], N, axis=0), c, np.repeat(c[-1:], N, axis=0)])
    num = np.zeros_like(c)
    for n in range(1, N + 1):
        num += n * (padded[N + n : N + n + T] - padded[N - n : N - n + T])
    return num / (2 * sum(n * n for n in range(1, N + 1)))


def extract(w: Waveform, nfft: int = 512, f_low: float = 0.0, f_high: float | None = None) -> np.ndarray:
    """Full pipeline for one waveform -> (41, T, 3) feature tensor."""
    frames = frame_signal(w)
    spec = power_spectrum(frames, nfft)
    fbank = mel_filterbank(spec, N_MELS, f_low, f_high, w.sample_rate)
    static = log_energies(fbank, spec)
    d1 = delta(static)
    d2 = delta(d1)
    return np.stack([static, d1, d2], axis=-1).transpose(1, 0, 2).copy()


# ---------------------------------------------------------------------------
# normalisation


@dataclass
class NormStats:
    mean: np.ndarray  # (41, 3)
    std: np.ndarray

    def apply(self, feats: np.ndarray) -> np.ndarray:
        return (feats - self.mean[:, None, :]) / self.std[:, None, :]

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            for m, s in zip(self.mean.reshape(-1), self.std.reshape(-1)):
                fh.write(f"{float(m)!r} {float(s)!r}\n")

    @classmethod
    def load(cls, path: str | os.PathLike, shape: tuple[int, int] = (N_STATIC, N_CHANNELS)) -> "NormStats":
        rows = [line.split() for line in open(path) if line.strip()]
        arr = np.array(rows, dtype=np.float64)
        if arr.shape != (shape[0] * shape[1], 2):
            raise FeatureError(f"{path}: expected {shape[0] * shape[1]} lines of 'mean std', got {arr.shape}")
        return cls(arr[:, 0].reshape(shape), np.maximum(arr[:, 1].reshape(shape), STD_FLOOR))


def compute_norm_stats(corpus: Iterable[np.ndarray]) -> NormStats:
    """Per-(frequency, channel) population mean/std over all frames."""
    corpus = list(corpus)
    if not corpus:
        raise FeatureError("cannot compute statistics over an empty corpus")
    # fixed summation order keeps the result reproducible
    n = sum(f.shape[1] for f in corpus)
    mean = np.sum([f.sum(axis=1) for f in corpus], axis=0) / n
    # second pass keeps the variance free of cancellation error
    sq = np.sum([((f - mean[:, None, :]) ** 2).sum(axis=1) for f in corpus], axis=0)
    return NormStats(mean, np.maximum(np.sqrt(sq / n), STD_FLOOR))


# ---------------------------------------------------------------------------
# file formats


def read_wav(path: str | os.PathLike) -> Waveform:
    """Read 16-bit mono PCM WAV; NIST SPHERE files are rejected."""
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head.startswith(b"NIST_1A"):
        raise FeatureError(f"{path}: NIST SPHERE audio is not supported; convert it to WAV first")
    try:
        with wave.open(str(path), "rb") as wf:
            if wf.getnchannels() != 1 or wf.getsampwidth() != 2:
                raise FeatureError(f"{path}: need 16-bit mono PCM, got {wf.getnchannels()} ch x {8 * wf.getsampwidth()} bit")
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError) as e:
        raise FeatureError(f"{path}: not a readable WAV file ({e})") from None
    return Waveform(np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0, rate)


def write_wav(path: str | os.PathLike, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(w.sample_rate)
        wf.writeframes(pcm.tobytes())


def write_features(path: str | os.PathLike, feats: np.ndarray) -> None:
    feats = np.asarray(feats, dtype="<f8")
    if feats.ndim != 3:
        raise FeatureError(f"feature tensor must be 3-D (F, T, C), got shape {feats.shape}")
    F, T, C = feats.shape
    with open(path, "wb") as fh:
        fh.write(_FTEN_HEADER.pack(FTEN_MAGIC, FTEN_VERSION, F, T, C))
        fh.write(np.ascontiguousarray(feats).tobytes())


def read_features(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _FTEN_HEADER.size:
        raise FeatureError(f"{path}: truncated feature file")
    magic, version, F, T, C = _FTEN_HEADER.unpack_from(blob)
    if magic != FTEN_MAGIC:
        raise FeatureError(f"{path}: bad magic {magic!r}")
    if version != FTEN_VERSION:
        raise FeatureError(f"{path}: unsupported feature file version {version}")
    payload = blob[_FTEN_HEADER.size :]
    if len(payload) != 8 * F * T * C:
        raise FeatureError(f"{path}: payload size {len(payload)} does not match {F}x{T}x{C}")
    return np.frombuffer(payload, dtype="<f8").reshape(F, T, C).astype(np.float64)


def featurize_files(paths: Sequence[str | os.PathLike], **kwargs) -> list[np.ndarray]:
    return [extract(read_wav(p), **kwargs) for p in paths]
