"""Model-free scoring: BLEU-4 and pointing accuracy."""

from __future__ import annotations

import math
from collections import Counter
from typing import Iterable, Sequence

import numpy as np

MAX_ORDER = 4


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_length(cand_len: int, refs: Sequence[Sequence]) -> int:
    # ties go to the shorter reference
    return min((abs(len(r) - cand_len), len(r)) for r in refs)[1]


def ngram_statistics(candidate: Sequence, references: Sequence[Sequence], max_order: int = MAX_ORDER):
    """Clipped matches and totals per order, plus (candidate, closest reference) lengths."""
    matches = [0] * max_order
    totals = [0] * max_order
    for n in range(1, max_order + 1):
        cand = _ngrams(candidate, n)
        limit: Counter = Counter()
        for ref in references:
            limit |= _ngrams(ref, n)
        matches[n - 1] = sum(min(c, limit[g]) for g, c in cand.items())
        totals[n - 1] = max(len(candidate) - n + 1, 0)
    return matches, totals, len(candidate), _closest_ref_length(len(candidate), references)


def _combine(matches, totals, cand_len, ref_len, smooth: bool) -> float:
    if cand_len == 0:
        return 0.0
    log_p = 0.0
    for n, (m, t) in enumerate(zip(matches, totals), start=1):
        if smooth and n > 1:
            m, t = m + 1, t + 1
        if m == 0 or t == 0:
            return 0.0
        log_p += math.log(m / t)
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return float(min(1.0, bp * math.exp(log_p / len(matches))))


def bleu4(candidates: Sequence[Sequence], references: Sequence[Sequence[Sequence]]) -> float:
    """Corpus-level BLEU-4 with uniform weights and no smoothing.

    ``references[i]`` is the list of reference token sequences for
    ``candidates[i]``.  Clipped n-gram counts and lengths are summed over the
    corpus before the precisions are combined.
    """
    if len(candidates) == 0:
        raise ValueError("BLEU needs a non-empty corpus")
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates but {len(references)} reference sets")
    matches = np.zeros(MAX_ORDER, dtype=np.int64)
    totals = np.zeros(MAX_ORDER, dtype=np.int64)
    cand_len = ref_len = 0
    for cand, refs in zip(candidates, references):
        if len(refs) == 0:
            raise ValueError("every candidate needs at least one reference")
        m, t, c, r = ngram_statistics(list(cand), [list(x) for x in refs])
        matches += m
        totals += t
        cand_len += c
        ref_len += r
    return _combine(matches.tolist(), totals.tolist(), cand_len, ref_len, smooth=False)


def sentence_bleu_smoothed(candidate: Sequence, references: Sequence[Sequence]) -> float:
    """Per-sentence diagnostic BLEU-4 with add-one smoothing on orders 2-4.

    Not comparable with :func:`bleu4`; meant for inspecting single captions.
    """
    if len(references) == 0:
        raise ValueError("need at least one reference")
    return _combine(*ngram_statistics(list(candidate), [list(r) for r in references]), smooth=True)


def argmax_cell(gamma: np.ndarray) -> int:
    """Index of the largest weight; np.argmax already returns the first maximum."""
    return int(np.argmax(np.asarray(gamma).reshape(-1)))


def pointing_hit(gamma: np.ndarray, footprint: Iterable[tuple[int, int]], grid_w: int) -> bool:
    row, col = divmod(argmax_cell(gamma), grid_w)
    return (row, col) in set(map(tuple, footprint))


def pointing_accuracy(gammas: Sequence[np.ndarray], footprints: Sequence[Iterable[tuple[int, int]]],
                      grid_w: int) -> float:
    """Share of maps whose peak cell lies in the matching footprint.

    Callers pass only changed samples, with the map taken from the frame
    the footprint is expressed in.
    """
    if len(gammas) != len(footprints):
        raise ValueError("one footprint per map is required")
    if len(gammas) == 0:
        return float("nan")
    hits = [pointing_hit(g, f, grid_w) for g, f in zip(gammas, footprints)]
    return float(np.mean(hits))
