"""Negative examples: pathological transforms, Monte-Carlo captions, mixing.

Transforms:

* ``RC`` pairs an image with a human caption of another image drawn from its
  nearest neighbours (cosine similarity of features).
* ``WP`` permutes at least two words of a caption.
* ``RW`` replaces from two to all words with random vocabulary words.

``gamma`` in ``[0, 1]`` sets the strength of each transform.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import Caption, Dataset, ImageRecord, Vocabulary, encode_caption
from .critic import GENERATED, LabeledExample
from .errors import ConfigError, DataError

TRANSFORMS = ("RC", "WP", "RW")
SOURCES = ("generator", "pathological", "monte_carlo")
DEFAULT_GAMMA_GRID = tuple(round(0.1 * k, 1) for k in range(1, 11))


def as_rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _check_gamma(gamma: float) -> None:
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")


def _retokened(caption: Caption, tokens: Sequence[int], vocab: Vocabulary | None) -> Caption:
    ids = tuple(tokens) + caption.ids[len(tokens):]
    text = " ".join(vocab.decode(tokens)) if vocab is not None else " ".join(map(str, tokens))
    return Caption(text, ids, len(tokens))


# ---------------------------------------------------------------------------
# RC


class NeighborIndex:
    """Images ranked by cosine similarity of their features (ties by index)."""

    def __init__(self, features: np.ndarray):
        feats = np.asarray(features, dtype=np.float64)
        if feats.shape[0] < 2:
            raise DataError("random-caption transform needs at least two images")
        norms = np.linalg.norm(feats, axis=1, keepdims=True)
        unit = feats / np.where(norms > 0, norms, 1.0)
        sim = unit @ unit.T
        n = len(feats)
        np.fill_diagonal(sim, -np.inf)
        # stable sort on negated similarity keeps lower indices first on ties
        self.order = np.argsort(-sim, axis=1, kind="stable")[:, : n - 1]
        self.n = n

    def pool_size(self, gamma: float) -> int:
        _check_gamma(gamma)
        return max(1, math.ceil(gamma * (self.n - 1) - 1e-9))

    def pool(self, i: int, gamma: float) -> np.ndarray:
        return self.order[i, : self.pool_size(gamma)]


def transform_rc(dataset: Dataset, gamma: float, seed=0,
                 index: NeighborIndex | None = None) -> list[tuple[Caption, ImageRecord]]:
    """One foreign human caption per image, taken from its gamma-neighbourhood."""
    index = index or NeighborIndex(dataset.features())
    rng = as_rng(seed)
    out = []
    for i, img in enumerate(dataset.images):
        j = int(rng.choice(index.pool(i, gamma)))
        refs = dataset.references[j]
        out.append((refs[int(rng.integers(len(refs)))], img))
    return out


# ---------------------------------------------------------------------------
# WP / RW


def transform_wp(caption: Caption, gamma: float, seed=0, vocab: Vocabulary | None = None) -> Caption:
    """Permute ``max(2, round(gamma * len))`` words at random positions.

    The result always differs from the input.
    """
    _check_gamma(gamma)
    tokens = list(caption.tokens)
    n = len(tokens)
    if n < 2:
        raise DataError("word permutation needs at least two words")
    if len(set(tokens)) == 1:
        raise DataError("word permutation impossible: all words are identical")
    rng = as_rng(seed)
    k = min(n, max(2, round_half_up(gamma * n)))
    for _ in range(16):
        pos = rng.choice(n, size=k, replace=False)
        perm = rng.permutation(k)
        if np.all(perm == np.arange(k)):
            continue
        out = tokens[:]
        for dst, src in zip(pos, pos[perm]):
            out[dst] = tokens[src]
        if out != tokens:
            return _retokened(caption, out, vocab)
    # the sampled positions kept hitting equal words: swap two that differ
    a = int(rng.integers(n))
    b = int(rng.choice([j for j in range(n) if tokens[j] != tokens[a]]))
    out = tokens[:]
    out[a], out[b] = out[b], out[a]
    return _retokened(caption, out, vocab)


def transform_rw(caption: Caption, gamma: float, vocab: Vocabulary, seed=0) -> Caption:
    """Replace ``clamp(round(gamma * len), 2, len)`` words by other random words."""
    _check_gamma(gamma)
    if vocab.n_real < 2:
        raise DataError("random-word transform needs at least two real vocabulary words")
    tokens = list(caption.tokens)
    n = len(tokens)
    if n < 2:
        raise DataError("random-word transform needs at least two words")
    rng = as_rng(seed)
    k = min(n, max(2, round_half_up(gamma * n)))
    out = tokens[:]
    for p in rng.choice(n, size=k, replace=False):
        w = int(rng.integers(vocab.n_real - 1))
        # skip over the current word so the draw is uniform over the others
        if tokens[p] < vocab.n_real and w >= tokens[p]:
            w += 1
        elif tokens[p] >= vocab.n_real:
            w = int(rng.integers(vocab.n_real))
        out[p] = w
    return _retokened(caption, out, vocab)


def transform_caption(kind: str, caption: Caption, gamma: float, vocab: Vocabulary, seed=0) -> Caption:
    if kind == "WP":
        return transform_wp(caption, gamma, seed, vocab)
    if kind == "RW":
        return transform_rw(caption, gamma, vocab, seed)
    raise ValueError(f"{kind!r} is not a per-caption transform")


def wp_applicable(caption: Caption) -> bool:
    return caption.valid_len >= 2 and len(set(caption.tokens)) > 1


@dataclass(frozen=True)
class TransformSpec:
    kind: str
    gamma: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TRANSFORMS:
            raise ConfigError(f"unknown transform {self.kind!r}")
        _check_gamma(self.gamma)

    def apply(self, dataset: Dataset) -> list[tuple[Caption, ImageRecord]]:
        """Transform every (reference, image) pair; gamma = 0 is the identity."""
        pairs = [(c, img) for img, refs in zip(dataset.images, dataset.references) for c in refs]
        if self.gamma == 0:
            return pairs
        rng = as_rng(self.seed)
        if self.kind == "RC":
            index = NeighborIndex(dataset.features())
            out = []
            for i, (img, refs) in enumerate(zip(dataset.images, dataset.references)):
                for _ in refs:
                    j = int(rng.choice(index.pool(i, self.gamma)))
                    other = dataset.references[j]
                    out.append((other[int(rng.integers(len(other)))], img))
            return out
        out = []
        for c, img in pairs:
            if self.kind == "WP" and not wp_applicable(c):
                continue
            out.append((transform_caption(self.kind, c, self.gamma, dataset.vocab, rng), img))
        return out


# ---------------------------------------------------------------------------
# Monte-Carlo captions


class BigramLM:
    """Add-one smoothed bigram model over real words, with start/end states."""

    def __init__(self, vocab: Vocabulary, counts: np.ndarray):
        self.vocab = vocab
        self.counts = counts
        smoothed = counts + 1.0
        self.probs = smoothed / smoothed.sum(axis=1, keepdims=True)

    @property
    def n_words(self) -> int:
        return self.vocab.n_real

    @classmethod
    def fit(cls, captions: Sequence[Caption], vocab: Vocabulary) -> "BigramLM":
        v = vocab.n_real
        if v == 0 or not captions:
            raise DataError("cannot fit a language model on an empty corpus")
        # rows: previous word 0..v-1, start state v; columns: next word 0..v-1, end state v
        counts = np.zeros((v + 1, v + 1))
        for cap in captions:
            prev = v
            for tok in cap.tokens:
                if tok >= v:       # UNK breaks the chain
                    prev = None
                    continue
                if prev is not None:
                    counts[prev, tok] += 1
                prev = tok
            if prev is not None:
                counts[prev, v] += 1
        return cls(vocab, counts)


def mc_sample_caption(lm: BigramLM, length: int, seed=0, argmax: bool = False) -> Caption:
    """Sample words until the end state or ``length`` words; never empty."""
    v = lm.n_words
    rng = as_rng(seed)
    prev, words = v, []
    while len(words) < length:
        p = lm.probs[prev].copy()
        if not words:
            p[v] = 0.0
            p /= p.sum()
        nxt = int(np.argmax(p)) if argmax else int(rng.choice(v + 1, p=p))
        if nxt == v:
            break
        words.append(nxt)
        prev = nxt
    return encode_caption(lm.vocab.decode(words), lm.vocab, length)


# ---------------------------------------------------------------------------
# mixing negative sources


@dataclass(frozen=True)
class NegativeMixer:
    sources: tuple[str, ...] = SOURCES
    source_probs: tuple[float, ...] | None = None
    transforms: tuple[str, ...] = TRANSFORMS
    transform_probs: tuple[float, ...] | None = None
    gamma_grid: tuple[float, ...] = DEFAULT_GAMMA_GRID

    def __post_init__(self):
        if not self.sources:
            raise ConfigError("at least one negative source must be enabled")
        for s in self.sources:
            if s not in SOURCES:
                raise ConfigError(f"unknown negative source {s!r}")
        for t in self.transforms:
            if t not in TRANSFORMS:
                raise ConfigError(f"unknown transform {t!r}")
        if "pathological" in self.sources and not self.transforms:
            raise ConfigError("pathological source enabled without transforms")
        for probs, items in ((self.source_probs, self.sources), (self.transform_probs, self.transforms)):
            if probs is not None and (len(probs) != len(items) or abs(sum(probs) - 1) > 1e-9
                                      or min(probs) < 0):
                raise ConfigError("probabilities must match their items and sum to 1")
        if not self.gamma_grid or any(not 0 <= g <= 1 for g in self.gamma_grid):
            raise ConfigError("gamma grid values must lie in [0, 1]")

    def p_sources(self) -> np.ndarray:
        return np.full(len(self.sources), 1 / len(self.sources)) if self.source_probs is None \
            else np.asarray(self.source_probs)

    def p_transforms(self) -> np.ndarray:
        return np.full(len(self.transforms), 1 / len(self.transforms)) if self.transform_probs is None \
            else np.asarray(self.transform_probs)


@dataclass
class Negative:
    example: LabeledExample
    source: str
    transform: str | None = None
    gamma: float | None = None


def _other_index(rng: np.random.Generator, n: int, exclude: int) -> int:
    if n == 1:
        return 0
    k = int(rng.integers(n - 1))
    return k + 1 if k >= exclude else k


@dataclass
class NegativeSampler:
    """Draws negatives for one dataset; caches neighbour ranks and the bigram LM.

    ``generator=None`` pools the captions of every generator in the dataset.
    """

    dataset: Dataset
    mixer: NegativeMixer = field(default_factory=NegativeMixer)
    generator: str | None = None

    def __post_init__(self):
        ds = self.dataset
        if "generator" in self.mixer.sources:
            names = [self.generator] if self.generator is not None else ds.generator_names
            if self.generator is not None and self.generator not in ds.generated:
                raise ConfigError(f"generator source enabled but no captions for {self.generator!r}")
            self._generated = [[c for name in names for c in ds.generated[name][k]] for k in range(len(ds))]
            self._gen_images = [k for k, caps in enumerate(self._generated) if caps]
            if not self._gen_images:
                raise ConfigError("generator source enabled but the dataset has no generated captions")
        self._index = NeighborIndex(ds.features()) if "RC" in self.mixer.transforms \
            and "pathological" in self.mixer.sources else None
        self._eligible = {}
        if "pathological" in self.mixer.sources:
            for kind, ok in (("WP", wp_applicable), ("RW", lambda c: c.valid_len >= 2)):
                if kind not in self.mixer.transforms:
                    continue
                per_image = [[k for k, c in enumerate(refs) if ok(c)] for refs in ds.references]
                images = [k for k, refs in enumerate(per_image) if refs]
                if not images:
                    raise DataError(f"no caption in the dataset is eligible for transform {kind}")
                self._eligible[kind] = (per_image, images)
        self._lm = BigramLM.fit([c for refs in ds.references for c in refs], ds.vocab) \
            if "monte_carlo" in self.mixer.sources else None

    def _context(self, rng, i: int, avoid: int = -1) -> Caption:
        refs = self.dataset.references[i]
        k = _other_index(rng, len(refs), avoid) if avoid >= 0 else int(rng.integers(len(refs)))
        return refs[k]

    def draw(self, seed=None) -> Negative:
        rng = as_rng(seed)
        ds = self.dataset
        source = self.mixer.sources[int(rng.choice(len(self.mixer.sources), p=self.mixer.p_sources()))]
        if source == "generator":
            i = self._gen_images[int(rng.integers(len(self._gen_images)))]
            caps = self._generated[i]
            cand = caps[int(rng.integers(len(caps)))]
            return Negative(self._example(i, self._context(rng, i), cand), source)
        if source == "monte_carlo":
            i = int(rng.integers(len(ds)))
            cand = mc_sample_caption(self._lm, ds.t_max, rng)
            return Negative(self._example(i, self._context(rng, i), cand), source)
        kind = self.mixer.transforms[int(rng.choice(len(self.mixer.transforms), p=self.mixer.p_transforms()))]
        gamma = float(self.mixer.gamma_grid[int(rng.integers(len(self.mixer.gamma_grid)))])
        if kind == "RC":
            i = int(rng.integers(len(ds)))
            j = int(rng.choice(self._index.pool(i, gamma)))
            other = ds.references[j]
            cand = other[int(rng.integers(len(other)))]
            return Negative(self._example(i, self._context(rng, i), cand), source, kind, gamma)
        per_image, images = self._eligible[kind]
        i = images[int(rng.integers(len(images)))]
        b = per_image[i][int(rng.integers(len(per_image[i])))]
        cand = transform_caption(kind, ds.references[i][b], gamma, ds.vocab, rng)
        return Negative(self._example(i, self._context(rng, i, avoid=b), cand), source, kind, gamma)

    def _example(self, i: int, context: Caption, candidate: Caption) -> LabeledExample:
        return LabeledExample(self.dataset.images[i], context, candidate, GENERATED)


def draw_negative(mixer: NegativeMixer, dataset: Dataset, generator_name: str | None = None,
                  seed=0) -> LabeledExample:
    return NegativeSampler(dataset, mixer, generator_name).draw(seed).example
