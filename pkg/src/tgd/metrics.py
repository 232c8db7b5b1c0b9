"""Decoding objectives and evaluation diagnostics.

BLEU here works on integer token sequences; a trailing end-of-sentence id
(2) is stripped before counting.  Scores are on the 0-1 scale.
"""
from __future__ import annotations

import itertools
import math
from collections import Counter
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

EOS = 2
MAX_N = 4
INFLUENCE_THRESHOLD = 1e-3


def _strip(seq) -> list[int]:
    seq = [int(t) for t in seq]
    if seq and seq[-1] == EOS:
        seq = seq[:-1]
    return seq


def _ngrams(seq: Sequence[int], n: int) -> Counter:
    return Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def bleu_stats(hypothesis, reference, max_n: int = MAX_N) -> np.ndarray:
    """Sufficient statistics ``[matches_1..n, totals_1..n, hyp_len, ref_len]``."""
    hyp, ref = _strip(hypothesis), _strip(reference)
    stats = np.zeros(2 * max_n + 2, dtype=np.int64)
    for n in range(1, max_n + 1):
        h, r = _ngrams(hyp, n), _ngrams(ref, n)
        stats[n - 1] = sum(min(c, r[g]) for g, c in h.items())
        stats[max_n + n - 1] = max(len(hyp) - n + 1, 0)
    stats[-2], stats[-1] = len(hyp), len(ref)
    return stats


def _brevity(hyp_len: float, ref_len: float) -> float:
    if hyp_len <= 0:
        return 0.0
    return 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)


def bleu_from_stats(stats, max_n: int = MAX_N, smooth: bool = False) -> float:
    """BLEU from (pooled) statistics.

    With ``smooth`` the n > 1 precisions get add-one counts.  Orders with no
    hypothesis n-grams are left out of the geometric mean.
    """
    stats = np.asarray(stats, dtype=np.float64)
    matches, totals = stats[:max_n], stats[max_n : 2 * max_n]
    hyp_len, ref_len = stats[-2], stats[-1]
    if hyp_len == 0 or matches[0] == 0:
        return 0.0
    logs = []
    for n in range(max_n):
        if totals[n] == 0:
            continue
        m, t = matches[n], totals[n]
        if smooth and n > 0:
            m, t = m + 1.0, t + 1.0
        if m == 0:
            return 0.0
        logs.append(math.log(m / t))
    return _brevity(hyp_len, ref_len) * math.exp(sum(logs) / len(logs))


def sentence_bleu_smoothed(hypothesis, reference, max_n: int = MAX_N) -> float:
    """Sentence BLEU with add-one smoothing on 2..max_n-gram counts.

    Degenerate inputs (empty hypothesis or reference) score 0.
    """
    if not _strip(reference):
        return 0.0
    return bleu_from_stats(bleu_stats(hypothesis, reference, max_n), max_n, smooth=True)


def corpus_bleu(hypotheses, references, max_n: int = MAX_N) -> float:
    """Unsmoothed BLEU from n-gram counts pooled over the corpus."""
    if len(hypotheses) != len(references):
        raise ValueError(f"corpus_bleu: {len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ValueError("corpus_bleu: empty corpus")
    total = sum(bleu_stats(h, r, max_n) for h, r in zip(hypotheses, references))
    return bleu_from_stats(total, max_n)


def neg_perplexity(step_logprobs) -> float:
    """Length-normalized log-probability ``sum(log p_t) / T``."""
    lp = np.asarray(step_logprobs, dtype=np.float64)
    if lp.size == 0:
        raise ValueError("neg_perplexity: empty sequence")
    return float(lp.sum() / lp.size)


def perplexity(step_logprobs) -> float:
    return math.exp(-neg_perplexity(step_logprobs))


def influence_kl(logp_without, logp_with, atol: float = 1e-4) -> float:
    """``KL(p_without || p_with)`` from two log-probability vectors."""
    p = np.asarray(logp_without, dtype=np.float64)
    q = np.asarray(logp_with, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"influence_kl: shape mismatch {p.shape} vs {q.shape}")
    for name, v in (("without", p), ("with", q)):
        if abs(logsumexp(v)) > atol:
            raise ValueError(f"influence_kl: distribution {name!r} is not normalized (logsumexp={logsumexp(v):.3g})")
    kl = float(np.sum(np.exp(p) * (p - q)))
    return max(kl, 0.0)


def _aggregate(rows: np.ndarray, kind: str) -> np.ndarray:
    """Corpus metric for each resample; ``rows`` is (R, N) or (R, N, k)."""
    if kind == "mean":
        return rows.mean(axis=1)
    if kind == "bleu":
        pooled = rows.sum(axis=1)
        return np.array([bleu_from_stats(s) for s in pooled])
    raise ValueError(f"unknown aggregate {kind!r}")


def paired_bootstrap_test(
    scores_a,
    scores_b,
    resamples: int | None = 1000,
    seed: int = 0,
    aggregate: str = "mean",
) -> float:
    """Paired bootstrap p-value that system A is not better than system B.

    Returns the fraction of resampled test sets on which A's corpus metric is
    ``<=`` B's.  ``scores_*`` are per-sentence scores (``aggregate="mean"``)
    or per-sentence BLEU statistics rows (``aggregate="bleu"``).  With
    ``resamples=None`` all ``N**N`` resamples are enumerated (small N only);
    sampled mode needs at least 10 sentences.
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"paired_bootstrap_test: length mismatch {a.shape[0]} vs {b.shape[0]}")
    n = a.shape[0]
    if n == 0:
        raise ValueError("paired_bootstrap_test: empty score lists")
    if resamples is not None and n < 10:
        raise ValueError(f"paired_bootstrap_test: need at least 10 sentences, got {n}")
    if resamples is None:
        if n > 7:
            raise ValueError("exhaustive enumeration is limited to 7 sentences")
        idx = np.array(list(itertools.product(range(n), repeat=n)), dtype=np.int64)
    else:
        idx = np.random.default_rng(seed).integers(0, n, size=(resamples, n))
    ma = _aggregate(a[idx], aggregate)
    mb = _aggregate(b[idx], aggregate)
    return float(np.mean(ma <= mb))
