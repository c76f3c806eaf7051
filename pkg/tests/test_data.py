import numpy as np
import pytest

from attn_asr.data import (
    FRAMES_PER_SYMBOL,
    DataError,
    Example,
    Vocabulary,
    collate,
    load_examples,
    load_manifest,
    make_batches,
    nearest_pattern_decode,
    render,
    synth_corpus,
    write_manifest,
)
from attn_asr.features import read_features, write_features

VOCAB = Vocabulary(("a", "b", "c", "<eos>"))


@pytest.fixture
def feat_dir(tmp_path, rng):
    for name in ("x", "y"):
        write_features(tmp_path / f"{name}.ften", rng.standard_normal((41, 5, 3)))
    return tmp_path


def write(path, lines):
    path.write_text("".join(line + "\n" for line in lines))
    return path


def test_vocabulary():
    assert VOCAB.eos == 3 and len(VOCAB) == 4
    assert VOCAB.encode(["c", "a"]) == [2, 0] and VOCAB.decode([2, 0]) == ["c", "a"]
    with pytest.raises(DataError):
        VOCAB.encode(["zz"])
    with pytest.raises(DataError):
        Vocabulary(("a", "a", "<eos>"))


def test_vocabulary_file_round_trip(tmp_path):
    VOCAB.save(tmp_path / "v.txt")
    assert (tmp_path / "v.txt").read_text() == "a\nb\nc\n<eos>\n"
    assert Vocabulary.load(tmp_path / "v.txt") == VOCAB


def test_manifest_single_record(feat_dir):
    m = load_manifest(write(feat_dir / "m.tsv", ["u1\tx.ften\ttrain\ta b"]), VOCAB)
    assert len(m) == 1
    (rec,) = m
    assert rec.labels == (0, 1) and rec.path == feat_dir / "x.ften"


@pytest.mark.parametrize(
    "lines,match",
    [
        ([], "empty manifest"),
        (["u1\tmissing.ften\ttrain\ta"], "missing.ften"),
        (["u1\tx.ften\ttrain\ta", "u1\ty.ften\tdev\tb"], "duplicate"),
        (["u1\tx.ften\ttrain\tq"], "unknown label"),
        (["u1\tx.ften\tvalid\ta"], "unknown split"),
        (["u1\tx.ften\ttrain\t "], "empty transcript"),
        (["u1\tx.ften\ttrain\ta <eos>"], "end-of-sequence"),
        (["u1 x.ften train a"], "4 tab-separated"),
    ],
)
def test_manifest_errors(feat_dir, lines, match):
    with pytest.raises(DataError, match=match):
        load_manifest(write(feat_dir / "m.tsv", lines), VOCAB)


def test_manifest_write_load_round_trip(feat_dir):
    m = load_manifest(write(feat_dir / "m.tsv", ["u1\tx.ften\ttrain\ta b", "u2\ty.ften\ttest\tc"]), VOCAB)
    write_manifest(feat_dir / "again.tsv", m.records, VOCAB)
    assert load_manifest(feat_dir / "again.tsv", VOCAB).records == m.records
    assert [r.id for r in m.split("test")] == ["u2"]


def test_feature_round_trip_through_loader(feat_dir):
    m = load_manifest(write(feat_dir / "m.tsv", ["u1\tx.ften\ttrain\ta"]), VOCAB)
    (ex,) = load_examples(m.records)
    np.testing.assert_array_equal(ex.features, read_features(feat_dir / "x.ften"))


def examples(n, rng, max_t=12):
    return [Example(f"u{i}", rng.standard_normal((41, int(rng.integers(1, max_t)), 3)),
                    tuple(rng.integers(0, 3, rng.integers(1, 4)))) for i in range(n)]


@pytest.mark.parametrize("n,sizes", [(64, [32, 32]), (33, [1, 32]), (5, [5])])
def test_batch_sizes(rng, n, sizes):
    assert sorted(len(b) for b in make_batches(examples(n, rng), 32, seed=0, eos=3)) == sizes


def test_batches_cover_every_utterance_once_and_are_seeded(rng):
    exs = examples(70, rng)
    a = make_batches(exs, 16, seed=4, eos=3)
    ids = [i for b in a for i in b.ids]
    assert sorted(ids) == sorted(e.id for e in exs) and len(ids) == len(set(ids))
    b = make_batches(exs, 16, seed=4, eos=3)
    assert [x.ids for x in a] == [x.ids for x in b]
    assert [x.ids for x in make_batches(exs, 16, seed=5, eos=3)] != [x.ids for x in a]
    with pytest.raises(DataError):
        make_batches([], 16, eos=3)


def test_collate_padding(rng):
    exs = examples(5, rng)
    b = collate(exs, eos=3)
    for i, e in enumerate(exs):
        assert b.lengths[i] == e.n_frames <= b.features.shape[2]
        assert not b.features[i, :, e.n_frames :].any()
        assert b.target_lengths[i] == len(e.labels) + 1
        assert b.targets[i, len(e.labels)] == 3
        assert b.target_mask[i].sum() == b.target_lengths[i]
    oh = b.one_hot_targets()
    assert oh.shape[-1] == 4 and (oh.sum(-1) == b.target_mask).all()


def test_synth_copy_example(tmp_path):
    sc = synth_corpus("copy", 8, (5, 5), 3, 0, tmp_path)
    (ex,) = load_examples(sc.manifest.records[:1])
    assert len(ex.labels) == 5 and ex.n_frames == 3 * 5
    assert len(collate([ex], eos=8).targets[0]) == 6
    assert Vocabulary.load(sc.vocab_path).labels[-1] == "<eos>"


def test_synth_is_seeded(tmp_path):
    a = synth_corpus("reverse", 4, (2, 5), {"train": 4, "dev": 2}, 9, tmp_path / "a")
    b = synth_corpus("reverse", 4, (2, 5), {"train": 4, "dev": 2}, 9, tmp_path / "b")
    assert [r.labels for r in a.manifest] == [r.labels for r in b.manifest]
    for ra, rb in zip(a.manifest, b.manifest):
        assert ra.path.read_bytes() == rb.path.read_bytes()
    assert (tmp_path / "a/manifest.tsv").read_text() == (tmp_path / "b/manifest.tsv").read_text()


@pytest.mark.parametrize("kind", ["copy", "reverse", "blockmap"])
def test_noiseless_rendering_decodes_to_source(tmp_path, rng, kind):
    sc = synth_corpus(kind, 6, (1, 7), 2, 1, tmp_path)
    for _ in range(50):
        src = list(rng.integers(0, 6, rng.integers(1, 8)))
        feats = render(src, sc.patterns)
        assert feats.shape[1] == FRAMES_PER_SYMBOL * len(src)
        assert nearest_pattern_decode(feats, sc.patterns) == src


def test_noisy_corpus_labels_match_rendered_symbols(copy_corpus, copy_examples):
    for ex in copy_examples["train"]:
        assert tuple(nearest_pattern_decode(ex.features, copy_corpus.patterns)) == ex.labels


def test_synth_errors(tmp_path):
    with pytest.raises(DataError):
        synth_corpus("sort", 4, (1, 2), 1, 0, tmp_path)
    with pytest.raises(DataError):
        synth_corpus("copy", 1, (1, 2), 1, 0, tmp_path)
    with pytest.raises(DataError):
        synth_corpus("copy", 4, (3, 2), 1, 0, tmp_path)
