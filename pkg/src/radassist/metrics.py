"""BLEU-1..4 and ROUGE-L with normal/abnormal stratification.

BLEU is corpus-level with clipped modified n-gram precisions and no smoothing
(zero precision hard-zeroes the score); a separate per-sentence diagnostic adds
a tiny epsilon and is explicitly non-canonical. ROUGE-L is the LCS F1 with
beta = 1, averaged per case at the dataset level.
"""
from __future__ import annotations

import math
import string
from collections import Counter
from dataclasses import dataclass
from enum import Enum

from .errors import RadAssistError


class MetricsError(RadAssistError):
    pass


class LengthMismatch(MetricsError):
    pass


class EmptyCorpus(MetricsError):
    pass


class EmptyText(MetricsError):
    pass


class Stratum(str, Enum):
    All = "All"
    Normal = "Normal"
    Abnormal = "Abnormal"


@dataclass(frozen=True)
class EvalResult:
    bleu: tuple[float, float, float, float]
    rouge_l: tuple[float, float, float]  # precision, recall, f1
    n_cases: int
    stratum: Stratum

    def to_dict(self) -> dict:
        b1, b2, b3, b4 = self.bleu
        p, r, f1 = self.rouge_l
        return {
            "stratum": self.stratum.value,
            "n_cases": self.n_cases,
            "bleu1": b1,
            "bleu2": b2,
            "bleu3": b3,
            "bleu4": b4,
            "rougeL_p": p,
            "rougeL_r": r,
            "rougeL_f1": f1,
        }


_STRIP = string.punctuation


def tokenize_eval(text: str) -> list[str]:
    """Lowercase, whitespace-split, strip edge ASCII punctuation per token."""
    tokens = []
    for raw in text.lower().split():
        tok = raw.strip(_STRIP)
        if tok:
            tokens.append(tok)
    return tokens


def _ngram_counts(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(
    candidates: list[list[str]],
    references: list[list[str]],
    max_n: int = 4,
) -> tuple[float, ...]:
    """Corpus-level BLEU-1..max_n over pre-tokenized candidate/reference pairs."""
    if len(candidates) != len(references):
        raise LengthMismatch(f"{len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        raise EmptyCorpus("at least one candidate/reference pair is required")

    matches = [0] * max_n
    possible = [0] * max_n
    cand_len = 0
    ref_len = 0
    for cand, ref in zip(candidates, references):
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            cand_counts = _ngram_counts(cand, n)
            if not cand_counts:
                continue
            ref_counts = _ngram_counts(ref, n)
            overlap = cand_counts & ref_counts  # clipped counts
            matches[n - 1] += sum(overlap.values())
            possible[n - 1] += max(0, len(cand) - n + 1)

    if cand_len == 0:
        return tuple(0.0 for _ in range(max_n))
    # vacuous precision (no candidate n-grams anywhere at this order) counts
    # as perfect so that identity corpora score 1.0 at every order
    precisions = [
        (matches[i] / possible[i]) if possible[i] > 0 else 1.0 for i in range(max_n)
    ]
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)

    scores = []
    for k in range(1, max_n + 1):
        if any(precisions[i] == 0.0 for i in range(k)):
            scores.append(0.0)
            continue
        log_sum = sum(math.log(precisions[i]) for i in range(k)) / k
        scores.append(bp * math.exp(log_sum))
    return tuple(scores)


def sentence_bleu(
    candidate: list[str],
    reference: list[str],
    max_n: int = 4,
    eps: float = 1e-9,
) -> tuple[float, ...]:
    """Per-sentence diagnostic: zero precisions are floored at ``eps``.

    Non-canonical; never used for reported scores.
    """
    if not candidate or not reference:
        raise EmptyText("sentence BLEU needs non-empty candidate and reference")
    matches = [0] * max_n
    possible = [0] * max_n
    for n in range(1, max_n + 1):
        overlap = _ngram_counts(candidate, n) & _ngram_counts(reference, n)
        matches[n - 1] = sum(overlap.values())
        possible[n - 1] = max(0, len(candidate) - n + 1)
    precisions = [
        max(matches[i] / possible[i], eps) if possible[i] > 0 else 1.0 for i in range(max_n)
    ]
    bp = 1.0 if len(candidate) > len(reference) else math.exp(1.0 - len(reference) / len(candidate))
    return tuple(
        bp * math.exp(sum(math.log(precisions[i]) for i in range(k)) / k)
        for k in range(1, max_n + 1)
    )


def lcs_length(a: list[str], b: list[str]) -> int:
    """Longest common subsequence length, O(len(a)*len(b)) dynamic program."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: list[str], reference: list[str]) -> tuple[float, float, float]:
    """ROUGE-L precision, recall, and F1 (beta = 1) for one pair."""
    if not candidate or not reference:
        raise EmptyText("ROUGE-L needs non-empty candidate and reference")
    lcs = lcs_length(candidate, reference)
    p = lcs / len(candidate)
    r = lcs / len(reference)
    f1 = 0.0 if lcs == 0 else 2.0 * p * r / (p + r)
    return p, r, f1


def evaluate_dataset(pairs: list[tuple[str, str, str]]) -> list[EvalResult]:
    """Evaluate (candidate text, reference text, label) pairs.

    Labels are "Normal"/"Abnormal" (anything else lands only in the All
    stratum). BLEU is corpus-level per stratum; ROUGE-L components are
    per-case means. Strata with no cases are omitted.
    """
    if not pairs:
        raise EmptyCorpus("no pairs to evaluate")
    tokenized = [(tokenize_eval(c), tokenize_eval(r), label) for c, r, label in pairs]

    results = []
    for stratum in (Stratum.All, Stratum.Normal, Stratum.Abnormal):
        if stratum is Stratum.All:
            subset = tokenized
        else:
            subset = [t for t in tokenized if t[2] == stratum.value]
        if not subset:
            continue
        cands = [c for c, _, _ in subset]
        refs = [r for _, r, _ in subset]
        bleu_scores = bleu(cands, refs)
        rouge_parts = [
            rouge_l(c, r) if c and r else (0.0, 0.0, 0.0) for c, r in zip(cands, refs)
        ]
        n = len(subset)
        rouge_mean = tuple(sum(part[i] for part in rouge_parts) / n for i in range(3))
        results.append(EvalResult(bleu=bleu_scores, rouge_l=rouge_mean, n_cases=n, stratum=stratum))
    return results
