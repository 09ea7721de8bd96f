"""Corpus BLEU (B@1..B@4) and ROUGE-L for caption evaluation.

BLEU is corpus-level: clipped n-gram matches and candidate n-gram counts
are summed over all pairs before dividing, the geometric mean of the
precisions is taken up to each n, and a single brevity penalty
exp(min(0, 1 - r/c)) applies, r being the sum of closest-reference
lengths. No smoothing: a zero numerator at any order zeroes that B@n.
Comparison is exact string equality; tokenize upstream.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

from .errors import DomainError


@dataclass(frozen=True)
class EvalPair:
    candidate: tuple
    references: tuple

    def __post_init__(self):
        if not self.references:
            raise DomainError("EvalPair needs at least one reference")


def make_pair(candidate, references):
    return EvalPair(tuple(candidate), tuple(tuple(r) for r in references))


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_length(cand_len, references):
    # nearest reference length; ties go to the shorter reference
    return min((abs(len(r) - cand_len), len(r)) for r in references)[1]


def clipped_precisions(corpus, max_n=4):
    """Corpus-summed (clipped matches, candidate count) per n-gram order."""
    if not corpus:
        raise DomainError("empty corpus")
    sums = []
    for n in range(1, max_n + 1):
        matched = 0
        total = 0
        for pair in corpus:
            cand = _ngrams(pair.candidate, n)
            total += sum(cand.values())
            best = Counter()
            for ref in pair.references:
                ref_counts = _ngrams(ref, n)
                for gram, count in ref_counts.items():
                    if count > best[gram]:
                        best[gram] = count
            matched += sum(min(count, best[gram]) for gram, count in cand.items())
        sums.append((matched, total))
    return sums


def brevity_penalty(corpus):
    c = sum(len(p.candidate) for p in corpus)
    r = sum(_closest_ref_length(len(p.candidate), p.references) for p in corpus)
    if c == 0:
        return 0.0
    return math.exp(min(0.0, 1.0 - r / c))


def bleu(corpus, max_n=4):
    """Corpus BLEU at orders 1..max_n; returns a tuple of max_n floats."""
    corpus = list(corpus)
    sums = clipped_precisions(corpus, max_n)
    bp = brevity_penalty(corpus)
    scores = []
    log_sum = 0.0
    dead = False
    for n, (matched, total) in enumerate(sums, start=1):
        if matched == 0 or total == 0:
            dead = True
        else:
            log_sum += math.log(matched / total)
        scores.append(0.0 if dead else bp * math.exp(log_sum / n))
    return tuple(scores)


def lcs_length(a, b):
    """Longest common subsequence length by dynamic programming."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(pair, beta=1.2):
    """LCS F-measure, maximized over the references; 0 for an empty candidate."""
    cand = pair.candidate
    if not cand:
        return 0.0
    best = 0.0
    for ref in pair.references:
        if not ref:
            continue
        lcs = lcs_length(cand, ref)
        if lcs == 0:
            continue
        r = lcs / len(ref)
        p = lcs / len(cand)
        f = (1.0 + beta * beta) * r * p / (r + beta * beta * p)
        best = max(best, f)
    return best


def corpus_rouge_l(corpus, beta=1.2):
    corpus = list(corpus)
    if not corpus:
        raise DomainError("empty corpus")
    return sum(rouge_l(p, beta) for p in corpus) / len(corpus)
