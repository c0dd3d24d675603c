"""Critic performance, robustness curves, correlation statistics, word frequencies."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .baselines import normalize_scores
from .corpus import Caption, Dataset, ImageRecord, Vocabulary
from .critic import GENERATED, HUMAN

# a metric maps (image, references, candidate) items to one score per item
Metric = Callable[[Sequence[tuple[ImageRecord, list[Caption], Caption]]], np.ndarray]


@dataclass(frozen=True)
class ScoredPair:
    image_id: str
    caption: str
    score: float
    label: int  # HUMAN or GENERATED


def pair_performance(pair: ScoredPair) -> float:
    return pair.score if pair.label == HUMAN else 1.0 - pair.score


def dataset_performance(pairs: Sequence[ScoredPair]) -> float:
    if not pairs:
        raise ValueError("dataset_performance needs at least one pair")
    return float(np.mean([pair_performance(p) for p in pairs]))


# ---------------------------------------------------------------------------
# robustness


def trapezoid_auc(gammas: Sequence[float], values: Sequence[float]) -> float:
    g = np.asarray(gammas, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    return float(np.sum((g[1:] - g[:-1]) * (v[1:] + v[:-1]) / 2.0))


@dataclass
class RobustnessCurve:
    metric: str
    transform: str
    gammas: list[float]
    mean_scores: list[float]
    auc: float
    human_mean: float = float("nan")
    n_pairs: int = 0


DEFAULT_ROBUSTNESS_GRID = tuple(round(0.1 * k, 1) for k in range(11))


def check_gamma_grid(gamma_grid: Sequence[float]) -> list[float]:
    grid = [float(g) for g in gamma_grid]
    if len(grid) < 2 or grid[0] != 0.0 or grid[-1] != 1.0 or any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("gamma grid must be strictly increasing from 0 to 1 with at least two points")
    return grid


def base_pairs(dataset: Dataset, seed: int = 0) -> list[tuple[int, int]]:
    """One ``(image index, candidate reference index)`` per image, chosen by seed."""
    rng = np.random.default_rng(seed)
    return [(i, int(rng.integers(len(refs)))) for i, refs in enumerate(dataset.references)]


def robustness_auc(metric: Metric, dataset: Dataset, kind: str,
                   gamma_grid: Sequence[float] = DEFAULT_ROBUSTNESS_GRID, seed: int = 0,
                   metric_name: str = "metric") -> RobustnessCurve:
    """Mean normalised score of transformed captions as a function of gamma.

    Each image contributes one held-out human caption (scored against the
    image's remaining references).  Every gamma transforms the same base
    pairs with the same seed, so differences along the curve come from gamma
    alone.  Lower area means a more robust metric.
    """
    from .augment import NeighborIndex, transform_caption, wp_applicable

    grid = check_gamma_grid(gamma_grid)
    pairs = base_pairs(dataset, seed)
    refs = dataset.references
    if kind == "WP":
        pairs = [(i, j) for i, j in pairs if wp_applicable(refs[i][j])]
    elif kind == "RW":
        pairs = [(i, j) for i, j in pairs if refs[i][j].valid_len >= 2]
    elif kind != "RC":
        raise ValueError(f"unknown transform {kind!r}")
    if not pairs:
        raise ValueError(f"no caption in the dataset is eligible for transform {kind}")

    def context(i, j):
        return [r for q, r in enumerate(refs[i]) if q != j] or list(refs[i])

    human = metric([(dataset.images[i], context(i, j), refs[i][j]) for i, j in pairs])
    human_mean = float(np.mean(human))
    index = NeighborIndex(dataset.features()) if kind == "RC" else None
    means = []
    for gamma in grid:
        rng = np.random.default_rng(seed + 1)
        items = []
        for i, j in pairs:
            if kind == "RC":
                k = int(rng.choice(index.pool(i, gamma)))
                cand = refs[k][int(rng.integers(len(refs[k])))]
            else:
                cand = transform_caption(kind, refs[i][j], gamma, dataset.vocab, rng)
            items.append((dataset.images[i], context(i, j), cand))
        means.append(float(np.mean(normalize_scores(metric(items), human))))
    return RobustnessCurve(metric_name, kind, grid, means, trapezoid_auc(grid, means), human_mean, len(pairs))


ROBUSTNESS_COLUMNS = ("metric", "transform", "gamma", "mean_score")


def write_robustness_csv(curves: Sequence[RobustnessCurve], path: str | Path) -> None:
    """One row per (metric, transform, gamma) plus an ``AUC`` summary row each."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ROBUSTNESS_COLUMNS)
        for c in curves:
            for g, s in zip(c.gammas, c.mean_scores):
                w.writerow([c.metric, c.transform, repr(g), repr(s)])
            w.writerow([c.metric, c.transform, "AUC", repr(c.auc)])


# ---------------------------------------------------------------------------
# correlation


@dataclass
class CorrelationReport:
    method: str
    coefficient: float
    p_value: float
    n: int
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        out = {"method": self.method, "coefficient": self.coefficient, "p_value": self.p_value, "n": self.n}
        out.update(self.extra)
        return out


def annotation_pairs(units: Mapping[object, tuple[Sequence[float], Sequence[float]]]) -> list[tuple[float, float]]:
    """All ``(human, metric)`` combinations within each (image, caption) unit."""
    return [(h, s) for human, metric in units.values() for h in human for s in metric]


def _inversions(values: list) -> int:
    """Pairs ``i < j`` with ``values[i] > values[j]`` (bottom-up merge sort)."""
    a = list(values)
    n = len(a)
    count = 0
    width = 1
    buf = [None] * n
    while width < n:
        for lo in range(0, n, 2 * width):
            mid = min(lo + width, n)
            hi = min(lo + 2 * width, n)
            i, j, k = lo, mid, lo
            while i < mid and j < hi:
                if a[j] < a[i]:
                    buf[k] = a[j]
                    count += mid - i
                    j += 1
                else:
                    buf[k] = a[i]
                    i += 1
                k += 1
            buf[k:hi] = a[i:mid] + a[j:hi]
        a, buf = buf, a
        width *= 2
    return count


def _tie_sums(values) -> tuple[int, int, int]:
    """Sums of t(t-1)/2, t(t-1)(t-2) and t(t-1)(2t+5) over tie groups."""
    _, counts = np.unique(np.asarray(values), return_counts=True)
    t = [int(c) for c in counts if c > 1]
    return (sum(c * (c - 1) // 2 for c in t), sum(c * (c - 1) * (c - 2) for c in t),
            sum(c * (c - 1) * (2 * c + 5) for c in t))


def kendall_counts(x: Sequence[float], y: Sequence[float]) -> tuple[int, int, int, int]:
    """``(C - D, n0, n1, n2)``: score difference, total pairs, x-tied and y-tied pairs."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(x)
    order = np.lexsort((y, x))
    xs, ys = x[order], y[order]
    n0 = n * (n - 1) // 2
    n1 = _tie_sums(xs)[0]
    n2 = _tie_sums(ys)[0]
    joint = 0
    start = 0
    for k in range(1, n + 1):
        if k == n or xs[k] != xs[start] or ys[k] != ys[start]:
            t = k - start
            joint += t * (t - 1) // 2
            start = k
    swaps = _inversions(ys.tolist())
    return n0 - n1 - n2 + joint - 2 * swaps, n0, n1, n2


def kendall_tau(pairs: Sequence[tuple[float, float]]) -> CorrelationReport:
    """Kendall's tau-b with a tie-corrected normal approximation for p."""
    if len(pairs) < 2:
        raise ValueError("kendall_tau needs at least two pairs")
    x = [p[0] for p in pairs]
    y = [p[1] for p in pairs]
    s, n0, n1, n2 = kendall_counts(x, y)
    if n0 == n1 or n0 == n2:
        raise ValueError("kendall_tau undefined: one variable is constant")
    tau = s / math.sqrt((n0 - n1) * (n0 - n2))
    n = len(pairs)
    _, tx2, tx5 = _tie_sums(x)
    _, ty2, ty5 = _tie_sums(y)
    tx1 = 2 * _tie_sums(x)[0]
    ty1 = 2 * _tie_sums(y)[0]
    var = (n * (n - 1) * (2 * n + 5) - tx5 - ty5) / 18.0
    var += tx1 * ty1 / (2.0 * n * (n - 1))
    if n > 2:
        var += tx2 * ty2 / (9.0 * n * (n - 1) * (n - 2))
    p = math.erfc(abs(s) / math.sqrt(2 * var)) if var > 0 else 1.0
    return CorrelationReport("kendall_tau_b", float(min(1.0, max(-1.0, tau))), min(1.0, p), n)


def betainc_regularized(a: float, b: float, x: float) -> float:
    """``I_x(a, b)`` by the modified Lentz continued fraction.

    The fraction converges quickly for ``x < (a + 1) / (a + b + 2)``; other
    arguments use the symmetry ``I_x(a, b) = 1 - I_{1-x}(b, a)``.
    """
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    if x > (a + 1.0) / (a + b + 2.0):
        return 1.0 - betainc_regularized(b, a, 1.0 - x)
    tiny, eps = 1e-300, 1e-15
    c, d = 1.0, 1.0 - (a + b) * x / (a + 1.0)
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, 1000):
        m2 = 2 * m
        for num in (m * (b - m) * x / ((a + m2 - 1) * (a + m2)),
                    -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1))):
            d = 1.0 + num * d
            d = 1.0 / (d if abs(d) > tiny else tiny)
            c = 1.0 + num / c
            c = c if abs(c) > tiny else tiny
            h *= d * c
        if abs(d * c - 1.0) < eps:
            break
    return math.exp(log_front) * h / a


def student_t_two_sided(t: float, df: float) -> float:
    if math.isinf(t):
        return 0.0
    return betainc_regularized(df / 2.0, 0.5, df / (df + t * t))


def pearson_rho(x: Sequence[float], y: Sequence[float]) -> CorrelationReport:
    """Sample Pearson correlation with a two-sided Student-t p-value."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson_rho needs two equal-length 1-d sequences")
    n = len(x)
    if n < 3:
        raise ValueError("pearson_rho needs at least three points")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise ValueError("pearson_rho undefined: zero variance")
    r = float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))
    df = n - 2
    p = 0.0 if abs(r) == 1.0 else student_t_two_sided(r * math.sqrt(df / (1.0 - r * r)), df)
    return CorrelationReport("pearson_rho", r, p, n)


# ---------------------------------------------------------------------------
# word frequencies


def word_counts(captions: Iterable[Caption], vocab: Vocabulary) -> np.ndarray:
    counts = np.zeros(len(vocab))
    for cap in captions:
        np.add.at(counts, np.asarray(cap.tokens, dtype=np.int64), 1)
    return counts


def word_frequency_profile(captions: Sequence[Caption], vocab: Vocabulary) -> dict[str, float]:
    """Relative frequency of each used word, in vocabulary (corpus rank) order."""
    if not captions:
        raise ValueError("word_frequency_profile needs at least one caption")
    counts = word_counts(captions, vocab)
    freq = counts / counts.sum()
    return {vocab.itos[k]: float(freq[k]) for k in np.flatnonzero(counts)}


def total_variation(p: Mapping[str, float], q: Mapping[str, float]) -> float:
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)
