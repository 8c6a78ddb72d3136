"""BLEU-1..4 and ROUGE-L over whitespace-tokenised, single-reference corpora."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

from .errors import UsageError

Tokens = Sequence[str]


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def clipped_matches(candidate: Tokens, reference: Tokens, n: int) -> tuple[int, int]:
    """``(matched, total)`` candidate n-grams, each count clipped by the reference count."""
    cand = ngrams(candidate, n)
    ref = ngrams(reference, n)
    matched = sum(min(c, ref[g]) for g, c in cand.items())
    return matched, max(len(candidate) - n + 1, 0)


def brevity_penalty(cand_len: int, ref_len: int) -> float:
    if cand_len == 0:
        return 0.0
    return 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / cand_len)


def bleu(candidates: Sequence[Tokens], references: Sequence[Tokens], max_n: int = 4,
         smooth: bool = False, epsilon: float = 0.1) -> float:
    """Corpus BLEU with counts pooled over all sentences.

    Without smoothing any zero n-gram precision gives 0. With ``smooth`` a zero
    match count is replaced by ``epsilon`` (for sentence-level reporting).
    """
    if len(candidates) != len(references):
        raise UsageError(f"{len(candidates)} candidates for {len(references)} references")
    if not candidates:
        raise UsageError("BLEU of an empty corpus")
    if not 1 <= max_n <= 4:
        raise UsageError("max_n must be between 1 and 4")
    matched = [0] * max_n
    total = [0] * max_n
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        c_len += len(cand)
        r_len += len(ref)
        for n in range(1, max_n + 1):
            m, t = clipped_matches(cand, ref, n)
            matched[n - 1] += m
            total[n - 1] += t
    log_p = 0.0
    for m, t in zip(matched, total):
        if t == 0:
            return 0.0
        if m == 0:
            if not smooth:
                return 0.0
            m = epsilon
        log_p += math.log(m / t)
    return brevity_penalty(c_len, r_len) * math.exp(log_p / max_n)


def sentence_bleu(candidate: Tokens, reference: Tokens, max_n: int = 4, smooth: bool = True) -> float:
    return bleu([candidate], [reference], max_n, smooth)


def lcs_length(a: Tokens, b: Tokens) -> int:
    """Length of the longest common subsequence (O(len(a) * len(b)) DP)."""
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Tokens, reference: Tokens, beta: float = 1.2) -> float:
    """LCS-based F-measure ``(1 + b^2) P R / (R + b^2 P)``; 0 for an empty candidate."""
    if not candidate or not reference:
        return 0.0
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p = lcs / len(candidate)
    r = lcs / len(reference)
    return (1 + beta ** 2) * p * r / (r + beta ** 2 * p)


@dataclass
class ScoreReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    rouge_l: float
    n_sentences: int
    per_sentence: list[dict] = field(default_factory=list, repr=False)

    def to_json(self) -> str:
        d = asdict(self)
        d.pop("per_sentence")
        return json.dumps(d, sort_keys=True)


def score_corpus(candidates: Sequence[Tokens], references: Sequence[Tokens], beta: float = 1.2,
                 per_sentence: bool = False) -> ScoreReport:
    """Corpus BLEU-1..4 and mean sentence ROUGE-L."""
    b = [bleu(candidates, references, n) for n in range(1, 5)]
    rl = [rouge_l(c, r, beta) for c, r in zip(candidates, references)]
    rows = []
    if per_sentence:
        for c, r, score in zip(candidates, references, rl):
            row = {f"bleu{n}": sentence_bleu(c, r, n) for n in range(1, 5)}
            row["rouge_l"] = score
            rows.append(row)
    return ScoreReport(*b, sum(rl) / len(rl), len(candidates), rows)
