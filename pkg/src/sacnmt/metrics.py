"""MT evaluation: corpus BLEU, TER, lexical translation accuracy (LTA),
ambiguous lexical index (ALI), paired bootstrap significance and the
training-frequency analysis of output words.

All sentence inputs are token lists (whitespace tokenization happens at the
file boundary).
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

MAX_ORDER = 4

Tokens = Sequence[str]


# --- MLT annotations ---------------------------------------------------------

@dataclass(frozen=True)
class MltRecord:
    sentence_id: int
    word: str
    correct: frozenset[str]
    incorrect: frozenset[str]

    def __post_init__(self):
        if not self.correct:
            raise ValueError(f"record for {self.word!r} (sentence {self.sentence_id}) has no correct translation")
        if self.correct & self.incorrect:
            raise ValueError(f"record for {self.word!r}: correct and incorrect candidates overlap")


def write_mlt(path: str | Path, records: Sequence[MltRecord]) -> None:
    """TSV: sentence_id, ambiguous word, correct candidates, incorrect candidates (comma separated)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(f"{r.sentence_id}\t{r.word}\t{','.join(sorted(r.correct))}\t{','.join(sorted(r.incorrect))}\n")


def load_mlt(path: str | Path) -> list[MltRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(fields)}")
            sid, word, good, bad = fields
            records.append(MltRecord(int(sid), word,
                                     frozenset(c for c in good.split(",") if c),
                                     frozenset(c for c in bad.split(",") if c)))
    return records


# --- BLEU --------------------------------------------------------------------

def ngram_counts(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_stats(hyp: Tokens, ref: Tokens, max_order: int = MAX_ORDER) -> np.ndarray:
    """[hyp_len, ref_len, match_1, total_1, ..., match_N, total_N]."""
    stats = [len(hyp), len(ref)]
    for n in range(1, max_order + 1):
        h = ngram_counts(hyp, n)
        r = ngram_counts(ref, n)
        stats.append(sum(min(c, r[g]) for g, c in h.items()))
        stats.append(max(len(hyp) - n + 1, 0))
    return np.array(stats, dtype=np.float64)


def bleu_from_stats(stats: np.ndarray, smooth: bool = False) -> float:
    """BLEU in [0, 1] from (summed) statistics.

    With ``smooth`` the precisions for n >= 2 get add-one smoothing
    (Lin & Och style, "method 2" in Chen & Cherry).
    """
    hyp_len, ref_len = stats[0], stats[1]
    if hyp_len == 0:
        return 0.0
    log_p = 0.0
    order = (len(stats) - 2) // 2
    for n in range(1, order + 1):
        m, t = stats[2 * n], stats[2 * n + 1]
        if smooth and n > 1:
            m, t = m + 1.0, t + 1.0
        if m == 0:
            return 0.0
        log_p += math.log(m / t)
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(log_p / order)


def corpus_bleu(hypotheses: Sequence[Tokens], references: Sequence[Tokens]) -> float:
    """Corpus BLEU-4 (single reference), scaled to [0, 100]."""
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses but {len(references)} references")
    if not references:
        raise ValueError("empty corpus")
    total = np.zeros(2 + 2 * MAX_ORDER)
    for h, r in zip(hypotheses, references):
        total += bleu_stats(h, r)
    return 100.0 * bleu_from_stats(total)


# --- TER ---------------------------------------------------------------------

_MAX_SHIFT_SIZE = 10
_MAX_SHIFT_DIST = 50
_MAX_SHIFT_CANDIDATES = 1000


def _edit_distance(hyp: Tokens, ref: Tokens) -> tuple[int, str]:
    """Word-level Levenshtein distance and its trace (' ' match, 's', 'i' hyp-only, 'd' ref-only)."""
    n, m = len(hyp), len(ref)
    cost = np.zeros((n + 1, m + 1), dtype=np.int64)
    cost[:, 0] = np.arange(n + 1)
    cost[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            diag = cost[i - 1, j - 1] + (hyp[i - 1] != ref[j - 1])
            cost[i, j] = min(diag, cost[i - 1, j] + 1, cost[i, j - 1] + 1)
    trace = []
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and cost[i, j] == cost[i - 1, j - 1] + (hyp[i - 1] != ref[j - 1]):
            trace.append(" " if hyp[i - 1] == ref[j - 1] else "s")
            i, j = i - 1, j - 1
        elif i > 0 and cost[i, j] == cost[i - 1, j] + 1:
            trace.append("i")
            i -= 1
        else:
            trace.append("d")
            j -= 1
    return int(cost[n, m]), "".join(reversed(trace))


def _alignment(trace: str) -> tuple[dict[int, int], list[int], list[int]]:
    pos_h = pos_r = -1
    align: dict[int, int] = {}
    hyp_err: list[int] = []
    ref_err: list[int] = []
    for op in trace:
        if op in " s":
            pos_h += 1
            pos_r += 1
            align[pos_r] = pos_h
            err = int(op == "s")
            hyp_err.append(err)
            ref_err.append(err)
        elif op == "i":
            pos_h += 1
            hyp_err.append(1)
        else:
            pos_r += 1
            align[pos_r] = pos_h
            ref_err.append(1)
    return align, ref_err, hyp_err


def _perform_shift(words: list[str], start: int, length: int, target: int) -> list[str]:
    block = words[start:start + length]
    if target < start:
        return words[:target] + block + words[target:start] + words[start + length:]
    if target > start + length:
        return words[:start] + words[start + length:target] + block + words[target:]
    return words[:start] + words[start + length:length + target] + block + words[length + target:]


def _matching_blocks(hyp: Tokens, ref: Tokens):
    for start_h in range(len(hyp)):
        for start_r in range(len(ref)):
            if abs(start_r - start_h) > _MAX_SHIFT_DIST:
                continue
            length = 0
            while (start_h + length < len(hyp) and start_r + length < len(ref)
                   and hyp[start_h + length] == ref[start_r + length] and length < _MAX_SHIFT_SIZE):
                length += 1
                yield start_h, start_r, length


def _best_shift(hyp: list[str], ref: Tokens, checked: int):
    score, trace = _edit_distance(hyp, ref)
    align, ref_err, hyp_err = _alignment(trace)
    best = None
    for start_h, start_r, length in _matching_blocks(hyp, ref):
        # only move blocks that are misaligned on both sides
        if not any(hyp_err[start_h:start_h + length]) or not any(ref_err[start_r:start_r + length]):
            continue
        if start_h <= align[start_r] < start_h + length:
            continue
        prev = -1
        for offset in range(-1, length):
            if start_r + offset == -1:
                idx = 0
            elif start_r + offset in align:
                idx = align[start_r + offset] + 1
            else:
                break
            if idx == prev:
                continue
            prev = idx
            shifted = _perform_shift(hyp, start_h, length, idx)
            cand = (score - _edit_distance(shifted, ref)[0], length, -start_h, -idx, shifted)
            checked += 1
            if best is None or cand[:4] > best[:4]:
                best = cand
        if checked >= _MAX_SHIFT_CANDIDATES:
            break
    if best is None:
        return 0, hyp, checked
    return best[0], best[4], checked


def ter_stats(hyp: Tokens, ref: Tokens) -> tuple[int, int]:
    """(edits + shifts, reference length) with the greedy TERCOM shift search."""
    words = list(hyp)
    shifts = 0
    checked = 0
    while True:
        delta, shifted, checked = _best_shift(words, ref, checked)
        if checked >= _MAX_SHIFT_CANDIDATES or delta <= 0:
            break
        shifts += 1
        words = shifted
    return shifts + _edit_distance(words, ref)[0], len(ref)


def ter(hypothesis: Tokens, reference: Tokens) -> float:
    edits, ref_len = ter_stats(hypothesis, reference)
    if ref_len == 0:
        raise ValueError("TER needs a non-empty reference")
    return edits / ref_len


def corpus_ter(hypotheses: Sequence[Tokens], references: Sequence[Tokens]) -> float:
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses but {len(references)} references")
    edits = ref_len = 0
    for h, r in zip(hypotheses, references):
        e, n = ter_stats(h, r)
        edits += e
        ref_len += n
    return edits / ref_len


# --- lexical choice ------------------------------------------------------------

def _lexical_scores(outputs: Sequence[Tokens], records: Sequence[MltRecord]) -> list[int]:
    """Per-record +1 (correct found), -1 (only a known-incorrect found), 0 (neither)."""
    if not records:
        raise ValueError("no MLT records")
    scores = []
    for r in records:
        if not 0 <= r.sentence_id < len(outputs):
            raise ValueError(f"record sentence id {r.sentence_id} outside 0..{len(outputs) - 1}")
        words = {w.lower() for w in outputs[r.sentence_id]}
        if any(c.lower() in words for c in r.correct):
            scores.append(1)
        elif any(c.lower() in words for c in r.incorrect):
            scores.append(-1)
        else:
            scores.append(0)
    return scores


def lta(outputs: Sequence[Tokens], records: Sequence[MltRecord]) -> float:
    return float(np.mean([s == 1 for s in _lexical_scores(outputs, records)]))


def ali(outputs: Sequence[Tokens], records: Sequence[MltRecord]) -> float:
    return float(np.mean(_lexical_scores(outputs, records)))


def dominant_translations(records: Sequence[MltRecord]) -> dict[str, str]:
    """Most frequent correct translation per ambiguous word (ties: lexicographic)."""
    counts: dict[str, Counter] = {}
    for r in records:
        counts.setdefault(r.word, Counter()).update(r.correct)
    return {w: min(c, key=lambda t: (-c[t], t)) for w, c in counts.items()}


def rare_records(records: Sequence[MltRecord], train_records: Sequence[MltRecord]) -> list[MltRecord]:
    """Records whose gold translation is not the word's most frequent training translation."""
    dominant = dominant_translations(train_records)
    return [r for r in records if dominant.get(r.word) not in r.correct]


# --- significance --------------------------------------------------------------

@dataclass
class Metric:
    name: str
    stats: Callable[[Tokens, Tokens], np.ndarray]
    score: Callable[[np.ndarray], float]
    higher_is_better: bool = True


BLEU = Metric("bleu", bleu_stats, lambda s: 100.0 * bleu_from_stats(s))
TER = Metric("ter", lambda h, r: np.array(ter_stats(h, r), dtype=np.float64),
             lambda s: 100.0 * s[0] / s[1], higher_is_better=False)
METRICS = {"bleu": BLEU, "ter": TER}


@dataclass
class BootstrapResult:
    score_a: float
    score_b: float
    p_value: float
    no_difference: bool

    @property
    def significant(self) -> bool:
        return not self.no_difference and self.p_value < 0.05


def bootstrap_significance(sys_a: Sequence[Tokens], sys_b: Sequence[Tokens], references: Sequence[Tokens],
                           metric: Metric | str = "bleu", resamples: int = 1000,
                           rng: np.random.Generator | None = None) -> BootstrapResult:
    """Paired bootstrap over sentence indices.

    The p-value is the fraction of resamples in which the system that wins on
    the full test set does not strictly win; identical scores are reported as
    "no difference" with p = 1.
    """
    if isinstance(metric, str):
        metric = METRICS[metric]
    n = len(references)
    if len(sys_a) != n or len(sys_b) != n:
        raise ValueError(f"misaligned inputs: {len(sys_a)}, {len(sys_b)} outputs for {n} references")
    if n < 10:
        raise ValueError(f"bootstrap needs at least 10 sentences, got {n}")
    rng = rng if rng is not None else np.random.default_rng(0)
    stats_a = np.stack([metric.stats(h, r) for h, r in zip(sys_a, references)])
    stats_b = np.stack([metric.stats(h, r) for h, r in zip(sys_b, references)])
    score_a, score_b = metric.score(stats_a.sum(0)), metric.score(stats_b.sum(0))
    sign = 1.0 if metric.higher_is_better else -1.0
    observed = sign * (score_a - score_b)
    if observed == 0.0:
        return BootstrapResult(score_a, score_b, 1.0, True)
    winner = 1.0 if observed > 0 else -1.0
    losses = 0
    for _ in range(resamples):
        w = np.bincount(rng.integers(0, n, size=n), minlength=n).astype(np.float64)
        d = sign * (metric.score(w @ stats_a) - metric.score(w @ stats_b))
        if winner * d <= 0:
            losses += 1
    return BootstrapResult(score_a, score_b, losses / resamples, False)


# --- output-word frequency analysis ---------------------------------------------

PERCENTILES = tuple(range(0, 101, 10))
FREQ_HEADER_PREFIX = "percentile"
EVAL_HEADER = ("metric", "value", "baseline", "p_value", "significant")


def word_frequencies(outputs: Sequence[Tokens], training: Sequence[Tokens]) -> list[int]:
    counts = Counter(tok for sent in training for tok in sent)
    return [counts[tok] for sent in outputs for tok in sent]


def frequency_report(systems: dict[str, Sequence[Tokens]], training: Sequence[Tokens],
                     percentiles: Sequence[float] = PERCENTILES) -> list[dict[str, float]]:
    """Training-frequency percentiles of the words each system outputs."""
    table = [{"percentile": float(p)} for p in percentiles]
    for name, outputs in systems.items():
        freqs = word_frequencies(outputs, training)
        values = np.percentile(freqs, percentiles) if freqs else np.zeros(len(percentiles))
        for row, v in zip(table, values):
            row[name] = float(v)
    return table


def write_csv(path: str | Path, rows: Sequence[dict], header: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(header), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
