"""Command-line entry point: ``attn-asr <command> ...``.

Exit codes: 0 success, 1 quality or threshold failure, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import features as feat
from .config import ConfigError, RunConfig, load_config, rng_stream
from .data import DataError, Vocabulary, load_examples, load_manifest, synth_corpus
from .model import CheckpointError, ModelConfig, Seq2Seq, check_compatible, load_checkpoint, tiny_config

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
GRADCHECK_TOL = 1e-4

log = logging.getLogger("attn_asr")


class UsageError(Exception):
    """Bad flags, config or inputs: exit code 2."""


def _fail_usage(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return EXIT_USAGE


# ---------------------------------------------------------------------------
# config resolution


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {}
    for flag, key in (("seed", "seed"), ("manifest", "manifest"), ("beam", "beam_width"), ("phone_map", "phone_map"),
                      ("out", "out")):
        v = getattr(args, flag, None)
        if v is not None:
            overrides[key] = v
    return cfg.with_overrides(**overrides)


def _vocab_path(cfg: RunConfig) -> Path:
    if cfg.vocab:
        return Path(cfg.vocab)
    if not cfg.manifest:
        raise UsageError("no manifest given (--manifest or 'manifest' in the config)")
    return Path(cfg.manifest).parent / "vocab.txt"


def _norm(cfg: RunConfig):
    return feat.NormStats.load(cfg.norm_stats) if cfg.norm_stats else None


# ---------------------------------------------------------------------------
# commands


def cmd_featurize(args) -> int:
    audio_dir, out = Path(args.audio_dir), Path(args.out or "features")
    wavs = sorted(audio_dir.rglob("*.wav")) if audio_dir.is_dir() else []
    if not wavs:
        print(f"no audio found in {audio_dir}", file=sys.stderr)
        return EXIT_FAIL
    out.mkdir(parents=True, exist_ok=True)
    done, errors = [], []
    for w in wavs:
        try:
            x = feat.extract(feat.read_wav(w))
        except (feat.FeatureError, OSError) as e:
            errors.append(f"{w}: {e}")
            continue
        rel = w.relative_to(audio_dir).with_suffix(".ften")
        (out / rel).parent.mkdir(parents=True, exist_ok=True)
        feat.write_features(out / rel, x)
        done.append(x)
    for e in errors:
        print(e, file=sys.stderr)
    if args.stats and done:
        feat.compute_norm_stats(done).save(args.stats)
    print(f"featurized {len(done)} of {len(wavs)} files into {out}" + (f"; stats in {args.stats}" if args.stats and done else ""))
    return EXIT_FAIL if errors else EXIT_OK


def cmd_synth(args) -> int:
    counts = {"train": args.train, "dev": args.dev, "test": args.test}
    sc = synth_corpus(args.task, args.vocab, (args.min_len, args.max_len), {k: v for k, v in counts.items() if v},
                      args.seed, args.out)
    print(f"wrote {len(sc.manifest)} utterances to {sc.manifest_path}")
    return EXIT_OK


def _model_meta(model: Seq2Seq, vocab: Vocabulary, cfg: RunConfig) -> dict:
    return {"model": model.config.to_dict(), "vocab": list(vocab.labels), "config": cfg.dumps()}


def cmd_train(args) -> int:
    from .decoding import corpus_error_rate
    from .training import TrainConfig, TrainingDiverged, train_loop

    cfg = resolve_config(args)
    if not cfg.manifest:
        raise UsageError("no manifest given (--manifest or 'manifest' in the config)")
    manifest = load_manifest(cfg.manifest, _vocab_path(cfg))
    norm = _norm(cfg)
    train, dev = load_examples(manifest.split("train"), norm), load_examples(manifest.split("dev"), norm)
    if not train or not dev:
        raise UsageError("manifest needs non-empty train and dev splits")
    run = Path(cfg.out)
    run.mkdir(parents=True, exist_ok=True)
    resolved = run / "config.txt"
    if resolved.exists() and resolved.read_text() != cfg.dumps():
        raise UsageError(f"{run} already holds a run with a different configuration")
    resolved.write_text(cfg.dumps())

    model = Seq2Seq(cfg.model_config(len(manifest.vocab)), rng_stream(cfg.seed, "init"))
    tc = TrainConfig.from_run_config(cfg)
    try:
        summary = train_loop(model, train, dev, tc, run,
                             evaluate=lambda m: corpus_error_rate(m, dev, cfg.dev_beam_width),
                             meta=_model_meta(model, manifest.vocab, cfg))
    except TrainingDiverged as e:
        print(f"training diverged: {e}; last good checkpoint: {e.last_checkpoint}", file=sys.stderr)
        return EXIT_FAIL
    print(f"trained {summary['epochs']} epochs / {summary['steps']} steps; best dev error "
          f"{summary['best_dev']:.4f} at epoch {summary['best_epoch']} ({summary['best_checkpoint']})")
    return EXIT_OK


def load_model(path: str | Path, cfg: RunConfig | None = None) -> tuple[Seq2Seq, Vocabulary]:
    """Rebuild a model from a checkpoint; with ``cfg`` its dimensions must match."""
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        arrays, meta = load_checkpoint(path)
    except (CheckpointError, ValueError, OSError) as e:
        raise UsageError(str(e)) from None
    if "model" not in meta or "vocab" not in meta:
        raise UsageError(f"{path}: checkpoint lacks model metadata")
    vocab = Vocabulary(tuple(meta["vocab"]))
    mcfg = cfg.model_config(len(vocab)) if cfg is not None else ModelConfig.from_dict(meta["model"])
    model = Seq2Seq(mcfg)
    try:
        check_compatible(model, arrays)
    except CheckpointError as e:
        raise UsageError(f"checkpoint does not fit the model: {e}") from None
    model.load_state_arrays(arrays)
    return model, vocab


def cmd_decode(args) -> int:
    from .decoding import beam_search, write_decodes

    cfg = resolve_config(args)
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    model, vocab = load_model(args.checkpoint, cfg if args.config else None)
    if not cfg.manifest:
        raise UsageError("no manifest given (--manifest or 'manifest' in the config)")
    manifest = load_manifest(cfg.manifest, vocab)
    examples = load_examples(manifest.split(args.split), _norm(cfg))
    if not examples:
        raise UsageError(f"split {args.split!r} is empty")
    width = args.beam if args.beam is not None else cfg.beam_width
    out = Path(args.out) if args.out else Path(f"{args.split}.decode")
    results = [(ex.id, beam_search(model, ex.features, width)) for ex in examples]
    write_decodes(out, results, vocab)
    truncated = sum(r.truncated for _, r in results)
    print(f"decoded {len(results)} utterances (beam {width}) into {out}" + (f"; {truncated} truncated" if truncated else ""))
    return EXIT_OK


def cmd_score(args) -> int:
    from .decoding import read_decodes
    from .evaluation import PhoneMap, ScoringError, score

    cfg = resolve_config(args)
    if not args.hyp:
        raise UsageError("--hyp is required")
    if not cfg.manifest:
        raise UsageError("no manifest given (--manifest or 'manifest' in the config)")
    manifest = load_manifest(cfg.manifest, _vocab_path(cfg), check_files=False)
    refs = {r.id: manifest.vocab.decode(r.labels) for r in manifest.split(args.split)}
    try:
        hyps = read_decodes(args.hyp)
        pm = PhoneMap.load(cfg.phone_map) if cfg.phone_map else None
        report = score(refs, hyps, pm, strip=[manifest.vocab.labels[-1]])
    except (ScoringError, ValueError, OSError) as e:
        raise UsageError(str(e)) from None
    text = report.format()
    print(text, end="")
    if args.out:
        Path(args.out).write_text(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .training import gradcheck_model

    cfg = resolve_config(args)
    mcfg = cfg.model_config(6) if args.config else tiny_config(6)
    rng = rng_stream(cfg.seed, "gradcheck")
    model = Seq2Seq(mcfg, rng_stream(cfg.seed, "init"))
    B, T = 2, 9
    feats = rng.standard_normal((B, mcfg.n_freq, T, mcfg.n_channels))
    lengths = np.array([T, T - 2])
    targets = np.full((B, 4), mcfg.eos)
    targets[0, :3] = rng.integers(0, mcfg.eos, 3)
    targets[1, :2] = rng.integers(0, mcfg.eos, 2)
    mask = np.array([[1, 1, 1, 1], [1, 1, 1, 0]], dtype=float)
    report = gradcheck_model(model, feats, lengths, targets, mask, keep_prob=cfg.keep_prob, seed=cfg.seed)
    for name, err in report.worst.items():
        flag = "" if err < GRADCHECK_TOL else "  FAIL"
        print(f"{name:24s} {err:.3e}  ({report.checked[name]} entries){flag}")
    print(f"max relative error {report.max_error:.3e} (tolerance {GRADCHECK_TOL:g})")
    bad = report.failures(GRADCHECK_TOL)
    if bad:
        print(f"gradient check failed for: {', '.join(bad)}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="attn-asr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, *flags):
        sp.add_argument("--config", help="flat 'key = value' config file")
        sp.add_argument("--seed", type=int)
        if "manifest" in flags:
            sp.add_argument("--manifest", help="tab-separated corpus manifest")
        if "split" in flags:
            sp.add_argument("--split", choices=("train", "dev", "test"), default="test")
        if "phone_map" in flags:
            sp.add_argument("--phone-map", dest="phone_map", help="'source target' phone folding file")
        sp.add_argument("--out", help="output file or directory")

    s = sub.add_parser("featurize", help="WAV files -> feature tensors (+ normalisation stats)")
    s.add_argument("audio_dir")
    s.add_argument("--out", help="output directory (default: features)")
    s.add_argument("--stats", help="write normalisation statistics here")
    s.set_defaults(func=cmd_featurize)

    s = sub.add_parser("synth", help="generate a synthetic transduction corpus")
    s.add_argument("--task", choices=("copy", "reverse", "blockmap"), default="copy")
    s.add_argument("--vocab", type=int, default=8)
    s.add_argument("--min-len", type=int, default=3)
    s.add_argument("--max-len", type=int, default=6)
    s.add_argument("--train", type=int, default=2000)
    s.add_argument("--dev", type=int, default=200)
    s.add_argument("--test", type=int, default=0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model; resumes an existing run directory")
    common(s, "manifest")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("decode", help="beam-decode a manifest split")
    common(s, "manifest", "split")
    s.add_argument("--checkpoint")
    s.add_argument("--beam", type=int)
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("score", help="error rate of a decode file against a manifest split")
    common(s, "manifest", "split", "phone_map")
    s.add_argument("--hyp", help="decode output file")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("gradcheck", help="finite-difference check of every model gradient")
    common(s)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as e:
        return _fail_usage(f"config: {e}" + (f" (key: {e.key})" if e.key else ""))
    except (UsageError, DataError, feat.FeatureError) as e:
        return _fail_usage(str(e))


if __name__ == "__main__":
    sys.exit(main())
