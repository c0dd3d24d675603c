"""Rule-based caption metrics: sentence BLEU-n, ROUGE-L and plain CIDEr.

Candidates and references may be :class:`~capcritic.corpus.Caption` objects
(their valid token ids are used) or plain token sequences.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Hashable, Iterable, Sequence

import numpy as np

from .corpus import Caption

BLEU_EPS = 1e-9
ROUGE_BETA = 1.2


def _tokens(x) -> tuple[Hashable, ...]:
    return tuple(x.tokens) if isinstance(x, Caption) else tuple(x)


def ngrams(tokens: Sequence[Hashable], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate, references: Sequence, n_max: int = 4) -> float:
    """Sentence BLEU with clipped precisions, add-epsilon smoothing and brevity penalty."""
    cand = _tokens(candidate)
    refs = [_tokens(r) for r in references]
    if not refs:
        raise ValueError("bleu needs at least one reference")
    if not cand:
        raise ValueError("bleu needs a non-empty candidate")
    log_sum = 0.0
    for n in range(1, n_max + 1):
        counts = ngrams(cand, n)
        max_ref: Counter = Counter()
        for r in refs:
            max_ref |= ngrams(r, n)
        clipped = sum(min(c, max_ref[g]) for g, c in counts.items())
        total = sum(counts.values())
        p = clipped / total if clipped > 0 else BLEU_EPS / max(total, 1)
        log_sum += math.log(p)
    c = len(cand)
    r = min((len(x) for x in refs), key=lambda L: (abs(L - c), L))
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return bp * math.exp(log_sum / n_max)


def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, references: Sequence, beta: float = ROUGE_BETA) -> float:
    """LCS F-measure, best over references."""
    cand = _tokens(candidate)
    refs = [_tokens(r) for r in references]
    if not refs:
        raise ValueError("rouge_l needs at least one reference")
    if not cand:
        raise ValueError("rouge_l needs a non-empty candidate")
    best = 0.0
    for ref in refs:
        lcs = lcs_length(cand, ref)
        if lcs == 0:
            continue
        prec, rec = lcs / len(cand), lcs / len(ref)
        best = max(best, (1 + beta ** 2) * prec * rec / (rec + beta ** 2 * prec))
    return best


@dataclass
class CiderCorpusStats:
    """Document frequencies of 1..4-grams over per-image reference sets."""

    doc_freq: Counter
    corpus_size: int
    n_max: int = 4

    @classmethod
    def from_references(cls, reference_sets: Iterable[Sequence], n_max: int = 4) -> "CiderCorpusStats":
        df: Counter = Counter()
        size = 0
        for refs in reference_sets:
            seen = set()
            for r in refs:
                toks = _tokens(r)
                for n in range(1, n_max + 1):
                    seen.update(ngrams(toks, n))
            df.update(seen)
            size += 1
        if size == 0:
            raise ValueError("CIDEr statistics need at least one reference set")
        return cls(df, size, n_max)

    def idf(self, gram: tuple) -> float:
        return math.log(self.corpus_size / max(1, self.doc_freq.get(gram, 0)))


def _tfidf(tokens: Sequence, n: int, stats: CiderCorpusStats) -> dict:
    return {g: c * stats.idf(g) for g, c in ngrams(tokens, n).items()}


def _cosine(u: dict, v: dict) -> float:
    nu = math.sqrt(sum(x * x for x in u.values()))
    nv = math.sqrt(sum(x * x for x in v.values()))
    if nu == 0 or nv == 0:
        return 0.0
    return sum(x * v.get(g, 0.0) for g, x in u.items()) / (nu * nv)


def cider(candidate, references: Sequence, stats: CiderCorpusStats) -> float:
    """Plain CIDEr: per-n TF-IDF cosine averaged over references, then over n.

    No length penalty and no x10 scaling.
    """
    if stats is None or stats.corpus_size == 0:
        raise ValueError("cider needs corpus statistics")
    cand = _tokens(candidate)
    refs = [_tokens(r) for r in references]
    if not refs:
        raise ValueError("cider needs at least one reference")
    total = 0.0
    for n in range(1, stats.n_max + 1):
        cv = _tfidf(cand, n, stats)
        total += sum(_cosine(cv, _tfidf(r, n, stats)) for r in refs) / len(refs)
    return total / stats.n_max


def normalize_scores(scores: Sequence[float], human_scores: Sequence[float]) -> np.ndarray:
    """Divide by the mean human score so human captions average to 1."""
    ref = float(np.mean(human_scores)) if len(human_scores) else 0.0
    if not ref > 0:
        raise ValueError(f"cannot normalise by a non-positive human mean ({ref})")
    return np.asarray(scores, dtype=np.float64) / ref


BASELINE_NAMES = ("bleu1", "bleu2", "bleu3", "bleu4", "rougeL", "cider")


def baseline_metric(name: str, stats: CiderCorpusStats | None = None):
    """Batch metric ``items -> scores`` over ``(image, references, candidate)`` items."""
    if name.startswith("bleu") and name[4:].isdigit():
        n = int(name[4:])
        fn = lambda refs, cand: bleu(cand, refs, n)  # noqa: E731
    elif name == "rougeL":
        fn = lambda refs, cand: rouge_l(cand, refs)  # noqa: E731
    elif name == "cider":
        if stats is None:
            raise ValueError("cider needs corpus statistics")
        fn = lambda refs, cand: cider(cand, refs, stats)  # noqa: E731
    else:
        raise ValueError(f"unknown baseline metric {name!r}; choose from {BASELINE_NAMES}")

    def metric(items) -> np.ndarray:
        return np.array([fn(refs, cand) for _, refs, cand in items], dtype=np.float64)

    metric.__name__ = name
    return metric
