"""Independent reference implementations used to check the production code."""

from __future__ import annotations

import math
from itertools import combinations
from typing import Sequence


def brute_novelty(reference: Sequence[str], hypothesis: Sequence[str]) -> tuple[int, int]:
    """Best (total edits, insertions + substitutions) over every edit alignment.

    An alignment is a monotone matching between reference and hypothesis
    positions: matched unequal pairs are substitutions, unmatched reference
    tokens deletions, unmatched hypothesis tokens insertions.
    """
    m, n = len(reference), len(hypothesis)
    best = None
    for k in range(min(m, n) + 1):
        for ri in combinations(range(m), k):
            for hi in combinations(range(n), k):
                subs = sum(reference[a] != hypothesis[b] for a, b in zip(ri, hi))
                cand = ((m - k) + (n - k) + subs, (n - k) + subs)
                if best is None or cand < best:
                    best = cand
    return best


def brute_wnr(reference, hypothesis):
    if not reference:
        return None
    return brute_novelty(reference, hypothesis)[1] / len(reference)


def binomial_two_sided(k_pos: int, k_neg: int) -> float:
    n = k_pos + k_neg
    k = min(k_pos, k_neg)
    return min(1.0, 2 * sum(math.comb(n, i) for i in range(k + 1)) / 2 ** n)


def mean_vector(tokens, table):
    hits = [table[t] for t in tokens if t in table]
    if not hits:
        return None
    dim = len(hits[0])
    return [sum(v[d] for v in hits) / len(hits) for d in range(dim)]


def cosine(a, b):
    dot = sum(x * y for x, y in zip(a, b))
    return dot / (math.sqrt(sum(x * x for x in a)) * math.sqrt(sum(y * y for y in b)))
