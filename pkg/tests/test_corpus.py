from collections import Counter

import numpy as np
import pytest
from scipy.stats import binom

from sacnmt.checkpoint import load_arrays, save_arrays
from sacnmt.corpus import (ParallelCorpus, SynthTaskSpec, batch_iter, load_parallel, split_corpus, synth_corpus,
                           write_parallel)
from sacnmt.metrics import dominant_translations, lta, load_mlt, write_mlt
from sacnmt.vocab import BOS, EOS, PAD, UNK, Vocabulary, build_vocab


# --- vocabulary ---------------------------------------------------------------------

def test_min_freq_maps_rare_to_unk():
    v = build_vocab([["a", "a", "b"]], min_freq=2)
    assert v.words == ["a"]
    assert v.encode(["b"]) == [UNK]


def test_reserved_ids():
    v = build_vocab([["x"]])
    assert (v.stoi["<pad>"], v.stoi["<s>"], v.stoi["</s>"], v.stoi["<unk>"]) == (PAD, BOS, EOS, UNK)


def test_frequency_then_lexicographic_order():
    v = build_vocab([["c", "b", "a", "b", "c", "d"]])
    assert v.words == ["b", "c", "a", "d"]


def test_max_size():
    v = build_vocab([["c", "b", "a", "b", "c", "c"]], max_size=2)
    assert v.words == ["c", "b"]


def test_deterministic_and_full_coverage(rng):
    sents = [[f"t{int(i)}" for i in rng.integers(0, 30, size=6)] for _ in range(50)]
    v1, v2 = build_vocab(sents), build_vocab(sents)
    assert v1 == v2
    assert all(UNK not in v1.encode(s) for s in sents)


def test_decode_stops_at_eos():
    v = Vocabulary(["a", "b"])
    assert v.decode([BOS, 4, PAD, 5, EOS, 4]) == ["a", "b"]


def test_vocab_file_round_trip(tmp_path):
    v = build_vocab([["x", "y", "y"]])
    v.save(tmp_path / "v.txt")
    assert Vocabulary.load(tmp_path / "v.txt") == v


def test_empty_vocab_rejected():
    with pytest.raises(ValueError):
        build_vocab([])


# --- files ------------------------------------------------------------------------------

def test_load_three_lines(tmp_path):
    (tmp_path / "s").write_text("a b\nc\nd e f\n")
    (tmp_path / "t").write_text("x\ny z\nw\n")
    c = load_parallel(tmp_path / "s", tmp_path / "t")
    assert len(c) == 3
    assert c.src[2] == ["d", "e", "f"]


def test_mismatched_counts_named(tmp_path):
    (tmp_path / "s").write_text("a\nb\nc\n")
    (tmp_path / "t").write_text("x\ny\n")
    with pytest.raises(ValueError, match="3 lines.*2"):
        load_parallel(tmp_path / "s", tmp_path / "t")


def test_empty_line_reports_line_number(tmp_path):
    (tmp_path / "s").write_text("a\n\nc\n")
    (tmp_path / "t").write_text("x\ny\nz\n")
    with pytest.raises(ValueError, match=":2: empty line"):
        load_parallel(tmp_path / "s", tmp_path / "t")


def test_write_read_round_trip(tmp_path, rng):
    corpus, _ = synth_corpus(SynthTaskSpec(kind="reverse", n_pairs=30), rng)
    write_parallel(corpus, tmp_path / "s", tmp_path / "t")
    back = load_parallel(tmp_path / "s", tmp_path / "t")
    assert back.src == corpus.src and back.tgt == corpus.tgt


def test_corpus_rejects_empty_sentence():
    with pytest.raises(ValueError, match="empty sentence"):
        ParallelCorpus([["a"], []], [["x"], ["y"]])


# --- batching ----------------------------------------------------------------------------

def _toy():
    corpus, _ = synth_corpus(SynthTaskSpec(kind="copy", n_pairs=23), np.random.default_rng(3))
    return corpus, build_vocab(corpus.src), build_vocab(corpus.tgt)


def test_each_sentence_once_per_epoch():
    corpus, sv, tv = _toy()
    seen = np.concatenate([b.indices for b in batch_iter(corpus, sv, tv, 5, np.random.default_rng(0))])
    assert sorted(seen.tolist()) == list(range(len(corpus)))


def test_last_batch_smaller_never_empty():
    corpus, sv, tv = _toy()
    sizes = [len(b) for b in batch_iter(corpus, sv, tv, 5)]
    assert sizes == [5, 5, 5, 5, 3]


def test_padding_and_framing_round_trip():
    corpus, sv, tv = _toy()
    for b in batch_iter(corpus, sv, tv, 4, np.random.default_rng(1)):
        for row, i in enumerate(b.indices):
            assert sv.decode(b.src[row]) == corpus.src[i]
            assert tv.decode(b.tgt[row]) == corpus.tgt[i]
            n = len(corpus.tgt[i])
            assert b.tgt[row, n] == EOS and np.all(b.tgt[row, n + 1:] == PAD)


def test_shuffle_is_seeded():
    corpus, sv, tv = _toy()
    a = [b.indices.tolist() for b in batch_iter(corpus, sv, tv, 4, np.random.default_rng(9))]
    b = [b.indices.tolist() for b in batch_iter(corpus, sv, tv, 4, np.random.default_rng(9))]
    assert a == b


def test_batch_size_must_be_positive():
    corpus, sv, tv = _toy()
    with pytest.raises(ValueError):
        next(batch_iter(corpus, sv, tv, 0))


# --- synthetic tasks ---------------------------------------------------------------------

def test_copy_and_reverse():
    c, _ = synth_corpus(SynthTaskSpec(kind="copy", n_pairs=10), np.random.default_rng(0))
    r, _ = synth_corpus(SynthTaskSpec(kind="reverse", n_pairs=10), np.random.default_rng(0))
    for s, t in zip(c.src, c.tgt):
        assert [w.replace("w", "v") for w in s] == t
    for s, t in zip(r.src, r.tgt):
        assert [w.replace("w", "v") for w in s][::-1] == t


def test_generation_is_pure():
    spec = SynthTaskSpec(kind="ambiguous-lexicon", n_pairs=50)
    a = synth_corpus(spec, np.random.default_rng(5))
    b = synth_corpus(spec, np.random.default_rng(5))
    assert a[0].src == b[0].src and a[0].tgt == b[0].tgt and a[1] == b[1]


def test_rare_sense_count_within_binomial_bound():
    spec = SynthTaskSpec(kind="ambiguous-lexicon", n_pairs=1000, n_ambiguous=1, sense_skew=(0.8, 0.2))
    _, records = synth_corpus(spec, np.random.default_rng(11))
    rare = sum("amb0.s1" in r.correct for r in records)
    lo, hi = binom.ppf(0.0005, 1000, 0.2), binom.ppf(0.9995, 1000, 0.2)
    assert lo <= rare <= hi
    assert abs(rare - 200) <= 40


def _trigger_oracle(src):
    """Translate by following the trigger token; needs no knowledge of the generator's draws."""
    out = []
    sense = {}
    for w in src:
        if w.startswith("ctx"):
            k, j, _ = w[3:].split(".")
            sense[k] = j
    for w in src:
        if w.startswith("amb"):
            out.append(f"{w}.s{sense[w[3:]]}")
        elif w.startswith("ctx"):
            out.append(w + "t")
        else:
            out.append("v" + w[1:])
    return out


def test_trigger_following_oracle_scores_perfect_lta():
    spec = SynthTaskSpec(kind="ambiguous-lexicon", n_pairs=300)
    corpus, records = synth_corpus(spec, np.random.default_rng(2))
    outputs = [_trigger_oracle(s) for s in corpus.src]
    assert outputs == corpus.tgt
    assert lta(outputs, records) == 1.0


def test_majority_sense_translator_scores_dominant_frequency():
    spec = SynthTaskSpec(kind="ambiguous-lexicon", n_pairs=2000, sense_skew=(0.8, 0.2))
    corpus, records = synth_corpus(spec, np.random.default_rng(4))
    dominant = dominant_translations(records)
    outputs = [[dominant[w] if w in dominant else w for w in s] for s in corpus.src]
    observed = lta(outputs, records)
    # analytic expectation 0.8 with binomial standard error sqrt(0.16 / n)
    assert abs(observed - 0.8) < 4 * np.sqrt(0.16 / len(records))
    assert dominant == {f"amb{k}": f"amb{k}.s0" for k in range(spec.n_ambiguous)}


def test_emitted_records_parse_back(tmp_path):
    _, records = synth_corpus(SynthTaskSpec(kind="ambiguous-lexicon", n_pairs=40), np.random.default_rng(0))
    write_mlt(tmp_path / "m.tsv", records)
    assert load_mlt(tmp_path / "m.tsv") == records


@pytest.mark.parametrize("bad", [
    dict(kind="nope"),
    dict(kind="ambiguous-lexicon", senses_per_word=1, sense_skew=(1.0,)),
    dict(kind="ambiguous-lexicon", sense_skew=(0.7, 0.2)),
    dict(kind="ambiguous-lexicon", min_len=1, max_len=1),
    dict(kind="ambiguous-lexicon", vocab_size=0),
    dict(min_len=5, max_len=3),
])
def test_infeasible_specs_rejected(bad):
    with pytest.raises(ValueError):
        SynthTaskSpec(**bad).validate()


def test_split_reindexes_records():
    spec = SynthTaskSpec(kind="ambiguous-lexicon", n_pairs=30)
    corpus, records = synth_corpus(spec, np.random.default_rng(0))
    parts = split_corpus(corpus, records, {"train": 20, "valid": 10})
    valid, vrec = parts["valid"]
    assert len(valid) == 10 and len(vrec) == 10
    for r in vrec:
        assert r.word in valid.src[r.sentence_id]
        assert next(iter(r.correct)) in valid.tgt[r.sentence_id]


def test_split_sizes_checked():
    corpus, _ = synth_corpus(SynthTaskSpec(n_pairs=5), np.random.default_rng(0))
    with pytest.raises(ValueError):
        split_corpus(corpus, [], {"train": 6})


# --- checkpoints -----------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, rng):
    arrays = {"w": rng.normal(size=(3, 2)), "b": rng.normal(size=4)}
    save_arrays(tmp_path / "c.npz", arrays, {"k": 1})
    back, meta = load_arrays(tmp_path / "c.npz")
    assert meta == {"k": 1}
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])


def test_checkpoint_version_required(tmp_path):
    np.savez(tmp_path / "c.npz", w=np.zeros(2))
    with pytest.raises(ValueError, match="version"):
        load_arrays(tmp_path / "c.npz")
