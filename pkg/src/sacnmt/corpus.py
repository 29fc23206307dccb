"""Parallel corpora: file I/O, padded batching and synthetic desk-scale tasks."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .metrics import MltRecord
from .vocab import EOS, PAD, Vocabulary


@dataclass
class ParallelCorpus:
    src: list[list[str]]
    tgt: list[list[str]]
    split: str = "train"

    def __post_init__(self):
        if len(self.src) != len(self.tgt):
            raise ValueError(f"source has {len(self.src)} sentences but target has {len(self.tgt)}")
        for i, (s, t) in enumerate(zip(self.src, self.tgt)):
            if not s or not t:
                raise ValueError(f"empty sentence at example {i}")

    def __len__(self) -> int:
        return len(self.src)

    def subset(self, indices: Sequence[int], split: str | None = None) -> ParallelCorpus:
        return ParallelCorpus([self.src[i] for i in indices], [self.tgt[i] for i in indices],
                              split or self.split)


def read_sentences(path: str | Path, allow_empty: bool = False) -> list[list[str]]:
    """Whitespace-tokenized lines. Empty lines are an error unless ``allow_empty``."""
    sents = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            toks = line.split()
            if not toks and not allow_empty:
                raise ValueError(f"{path}:{lineno}: empty line")
            sents.append(toks)
    return sents



def load_parallel(src_path: str | Path, tgt_path: str | Path, split: str = "train") -> ParallelCorpus:
    src = read_sentences(Path(src_path))
    tgt = read_sentences(Path(tgt_path))
    if len(src) != len(tgt):
        raise ValueError(f"line count mismatch: {src_path} has {len(src)} lines, {tgt_path} has {len(tgt)}")
    return ParallelCorpus(src, tgt, split)


def write_sentences(path: str | Path, sentences: Sequence[Sequence[str]]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in sentences:
            fh.write(" ".join(s) + "\n")


def write_parallel(corpus: ParallelCorpus, src_path: str | Path, tgt_path: str | Path) -> None:
    write_sentences(src_path, corpus.src)
    write_sentences(tgt_path, corpus.tgt)


# --- batching ----------------------------------------------------------------

@dataclass
class Batch:
    src: np.ndarray        # (B, S) right-padded source ids
    tgt: np.ndarray        # (B, T) right-padded target ids, each ending with EOS
    indices: np.ndarray    # corpus positions of the rows

    def __len__(self) -> int:
        return len(self.indices)


def pad_ids(seqs: Sequence[Sequence[int]], pad: int = PAD) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


def encode_batch(src_sents, tgt_sents, src_vocab: Vocabulary, tgt_vocab: Vocabulary, indices=None) -> Batch:
    src = pad_ids([src_vocab.encode(s) for s in src_sents])
    tgt = pad_ids([tgt_vocab.encode(t) + [EOS] for t in tgt_sents])
    idx = np.arange(len(src_sents)) if indices is None else np.asarray(indices)
    return Batch(src, tgt, idx)


def batch_iter(corpus: ParallelCorpus, src_vocab: Vocabulary, tgt_vocab: Vocabulary, batch_size: int,
               rng: np.random.Generator | None = None) -> Iterator[Batch]:
    """One epoch of padded batches; shuffled when ``rng`` is given."""
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")
    order = rng.permutation(len(corpus)) if rng is not None else np.arange(len(corpus))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield encode_batch([corpus.src[i] for i in idx], [corpus.tgt[i] for i in idx],
                           src_vocab, tgt_vocab, idx)


# --- synthetic tasks ---------------------------------------------------------

@dataclass
class SynthTaskSpec:
    kind: str = "copy"                  # copy | reverse | ambiguous-lexicon
    vocab_size: int = 20                # plain (unambiguous) source words
    min_len: int = 1
    max_len: int = 8
    n_pairs: int = 2000
    n_ambiguous: int = 4
    senses_per_word: int = 2
    triggers_per_sense: int = 3
    sense_skew: tuple[float, ...] = field(default=(0.8, 0.2))

    def validate(self) -> None:
        if self.kind not in ("copy", "reverse", "ambiguous-lexicon"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.vocab_size < 1 or self.n_pairs < 1:
            raise ValueError("vocab_size and n_pairs must be positive")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError(f"invalid length range [{self.min_len}, {self.max_len}]")
        if self.kind != "ambiguous-lexicon":
            return
        if self.senses_per_word < 2:
            raise ValueError("senses_per_word must be >= 2")
        if len(self.sense_skew) != self.senses_per_word:
            raise ValueError(f"sense_skew has {len(self.sense_skew)} entries for {self.senses_per_word} senses")
        if abs(sum(self.sense_skew) - 1.0) > 1e-9 or min(self.sense_skew) <= 0:
            raise ValueError(f"sense_skew must be positive and sum to 1, got {self.sense_skew}")
        if self.n_ambiguous < 1 or self.triggers_per_sense < 1:
            raise ValueError("need at least one ambiguous word and one trigger per sense")
        if self.max_len < 2:
            raise ValueError("ambiguous-lexicon sentences need max_len >= 2 (word + trigger)")
        if self.max_len > 2 and self.vocab_size < 2:
            raise ValueError("vocab_size too small to fill sentence context")


def plain_word(i: int) -> tuple[str, str]:
    return f"w{i}", f"v{i}"


def ambiguous_word(k: int) -> str:
    return f"amb{k}"


def sense_word(k: int, j: int) -> str:
    return f"amb{k}.s{j}"


def trigger_word(k: int, j: int, m: int) -> tuple[str, str]:
    return f"ctx{k}.{j}.{m}", f"ctx{k}.{j}.{m}t"


def synth_corpus(spec: SynthTaskSpec, rng: np.random.Generator, split: str = "train",
                 ) -> tuple[ParallelCorpus, list[MltRecord]]:
    """Generate a synthetic corpus; a pure function of ``spec`` and the rng state.

    Copy and reverse tasks map source word ``w{i}`` to ``v{i}``. In the
    ambiguous-lexicon task every sentence holds one ambiguous word ``amb{k}``
    and one trigger token of a sense drawn with ``sense_skew``; the ambiguous
    word must be translated to that sense (``amb{k}.s{j}``). One MLT record is
    emitted per sentence.
    """
    spec.validate()
    # ambiguous sentences always hold the word and its trigger
    min_len = spec.min_len if spec.kind != "ambiguous-lexicon" else max(spec.min_len, 2)
    src, tgt, records = [], [], []
    for sid in range(spec.n_pairs):
        length = int(rng.integers(min_len, spec.max_len + 1))
        if spec.kind in ("copy", "reverse"):
            ids = rng.integers(0, spec.vocab_size, size=length)
            s = [plain_word(i)[0] for i in ids]
            t = [plain_word(i)[1] for i in ids]
            if spec.kind == "reverse":
                t = t[::-1]
            src.append(s)
            tgt.append(t)
            continue

        k = int(rng.integers(spec.n_ambiguous))
        j = int(rng.choice(spec.senses_per_word, p=np.asarray(spec.sense_skew)))
        m = int(rng.integers(spec.triggers_per_sense))
        ids = rng.integers(0, spec.vocab_size, size=length - 2)
        pairs = [plain_word(i) for i in ids]
        pos_amb, pos_trig = rng.choice(length, size=2, replace=False)
        slots: list[tuple[str, str] | None] = [None] * length
        slots[pos_amb] = (ambiguous_word(k), sense_word(k, j))
        slots[pos_trig] = trigger_word(k, j, m)
        fill = iter(pairs)
        slots = [p if p is not None else next(fill) for p in slots]
        src.append([p[0] for p in slots])
        tgt.append([p[1] for p in slots])
        records.append(MltRecord(
            sentence_id=sid,
            word=ambiguous_word(k),
            correct=frozenset({sense_word(k, j)}),
            incorrect=frozenset(sense_word(k, o) for o in range(spec.senses_per_word) if o != j),
        ))
    return ParallelCorpus(src, tgt, split), records


def split_corpus(corpus: ParallelCorpus, records: list[MltRecord], sizes: dict[str, int],
                 ) -> dict[str, tuple[ParallelCorpus, list[MltRecord]]]:
    """Cut a generated corpus into consecutive named splits, re-indexing MLT records."""
    if sum(sizes.values()) > len(corpus):
        raise ValueError(f"split sizes {sizes} exceed corpus size {len(corpus)}")
    by_sid = {r.sentence_id: r for r in records}
    out, start = {}, 0
    for name, n in sizes.items():
        idx = list(range(start, start + n))
        recs = [MltRecord(i - start, r.word, r.correct, r.incorrect)
                for i in idx if (r := by_sid.get(i)) is not None]
        out[name] = (corpus.subset(idx, name), recs)
        start += n
    return out
