"""Mini-batch Adam training of the critic and the two-fold scoring protocol."""
from __future__ import annotations

import csv
import hashlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .augment import DEFAULT_GAMMA_GRID, SOURCES, TRANSFORMS, NegativeMixer, NegativeSampler, as_rng
from .corpus import Dataset
from .critic import (GENERATED, HUMAN, CriticModel, LabeledExample, build_model, loss_and_grad,
                     score_many)
from .encoder import load_embeddings
from .errors import ConfigError, DataError
from .evalstats import ScoredPair

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 100
    epochs: int = 30
    learning_rate: float = 1e-3
    lr_decay: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    context: str = "image+caption"
    fusion: str = "concat_mlp"
    embed_dim: int = 300
    hidden_size: int = 512
    num_layers: int = 1
    mlp_hidden: int = 512
    cbp_dim: int = 8192
    cbp_normalize: bool = True
    negative_sources: tuple[str, ...] = SOURCES
    transforms: tuple[str, ...] = TRANSFORMS
    gamma_grid: tuple[float, ...] = DEFAULT_GAMMA_GRID
    generator: str | None = None
    embeddings_path: str | None = None

    def __post_init__(self):
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError("batch_size must be even (half positive, half negative) and >= 2")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if min(self.learning_rate, self.lr_decay, self.adam_eps) <= 0:
            raise ConfigError("learning rate, decay and Adam epsilon must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        # tuples survive JSON round trips as lists
        for name in ("negative_sources", "transforms", "gamma_grid"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        self.mixer()

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Default optimisation settings with small layers for CPU-sized runs."""
        base = dict(embed_dim=32, hidden_size=64, mlp_hidden=64, cbp_dim=512)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def generator_evaluation(cls, **overrides) -> "TrainConfig":
        """Preset for scoring a caption generator: 10 epochs."""
        base = dict(epochs=10)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}

    def mixer(self) -> NegativeMixer:
        return NegativeMixer(sources=self.negative_sources, transforms=self.transforms,
                             gamma_grid=self.gamma_grid)

    def model_kwargs(self) -> dict:
        return dict(embed_dim=self.embed_dim, hidden_size=self.hidden_size, num_layers=self.num_layers,
                    context=self.context, fusion=self.fusion, mlp_hidden=self.mlp_hidden,
                    cbp_dim=self.cbp_dim, cbp_normalize=self.cbp_normalize)

    def lr_at(self, epoch: int) -> float:
        """Learning rate used during 1-based ``epoch``."""
        return self.learning_rate * self.lr_decay ** (epoch - 1)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    state.t += 1
    c1 = 1 - beta1 ** state.t
    c2 = 1 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"adam_step: parameter {p.shape} vs gradient {g.shape}")
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# batches


def make_positive(dataset: Dataset, rng: np.random.Generator) -> LabeledExample:
    """Random image; one reference as context and a different one as candidate.

    Images with a single reference use it for both roles.
    """
    i = int(rng.integers(len(dataset)))
    refs = dataset.references[i]
    a = int(rng.integers(len(refs)))
    b = a
    if len(refs) > 1:
        b = int(rng.integers(len(refs) - 1))
        b += b >= a
    return LabeledExample(dataset.images[i], refs[a], refs[b], HUMAN)


def make_batch(dataset: Dataset, mixer: NegativeMixer, batch_size: int, seed=0,
               sampler: NegativeSampler | None = None, generator: str | None = None) -> list[LabeledExample]:
    if len(dataset) == 0:
        raise DataError("cannot draw a batch from an empty dataset")
    rng = as_rng(seed)
    sampler = sampler or NegativeSampler(dataset, mixer, generator)
    half = batch_size // 2
    positives = [make_positive(dataset, rng) for _ in range(half)]
    return positives + [sampler.draw(rng).example for _ in range(half)]


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    lr: float
    val_human_mean: float = float("nan")
    val_generated_mean: float = float("nan")


HISTORY_COLUMNS = ("epoch", "mean_loss", "lr", "val_human_mean", "val_generated_mean")


def write_history(history: Sequence[EpochRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for rec in history:
            w.writerow([rec.epoch] + [repr(float(getattr(rec, c))) for c in HISTORY_COLUMNS[1:]])


def heldout_scores(model: CriticModel, dataset: Dataset, generator: str | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Scores of held-out human and generated captions.

    A human candidate is scored against the image's other references; a
    generated caption against all references.
    """
    human_items, gen_items = [], []
    names = [generator] if generator is not None else dataset.generator_names
    for k, (img, refs) in enumerate(zip(dataset.images, dataset.references)):
        for j, cand in enumerate(refs):
            ctx = [r for q, r in enumerate(refs) if q != j] or list(refs)
            human_items.append((img, ctx, cand))
        for name in names:
            for cand in dataset.generated[name][k]:
                gen_items.append((img, list(refs), cand))
    return score_many(model, human_items), score_many(model, gen_items)


def _seed_of(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def train(dataset: Dataset, config: TrainConfig, validation: Dataset | None = None) -> tuple[CriticModel, list[EpochRecord]]:
    """Train a critic; one epoch is ``ceil(#references / (batch_size / 2))`` batches."""
    if len(dataset) == 0:
        raise DataError("empty training set")
    model = build_model(dataset.vocab, dataset.image_dim, seed=_seed_of(config.seed, 1), **config.model_kwargs())
    if config.embeddings_path:
        loaded = load_embeddings(config.embeddings_path, dataset.vocab, config.embed_dim, _seed_of(config.seed, 3))
        model.embedding.weight.data[...] = loaded.weight.data
    sampler = NegativeSampler(dataset, config.mixer(), config.generator)
    rng = np.random.default_rng(_seed_of(config.seed, 2))
    params = model.parameters()
    state = AdamState.zeros_like([p.data for p in params])
    pad = dataset.vocab.pad_id
    n_batches = math.ceil(dataset.n_references() / (config.batch_size // 2))
    history = []
    for epoch in range(1, config.epochs + 1):
        lr = config.lr_at(epoch)
        losses = []
        for _ in range(n_batches):
            batch = make_batch(dataset, sampler.mixer, config.batch_size, rng, sampler=sampler)
            losses.append(loss_and_grad(model, model.examples_to_batch(batch)))
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
            grads[0][pad] = 0.0  # PAD embedding stays at zero
            adam_step([p.data for p in params], grads, state, lr, config.beta1, config.beta2, config.adam_eps)
        rec = EpochRecord(epoch, float(np.mean(losses)), lr)
        if validation is not None:
            hum, gen = heldout_scores(model, validation, config.generator)
            rec.val_human_mean = float(hum.mean()) if hum.size else float("nan")
            rec.val_generated_mean = float(gen.mean()) if gen.size else float("nan")
        log.info("epoch %d loss %.4f lr %.2e", epoch, rec.mean_loss, lr)
        history.append(rec)
    return model, history


# ---------------------------------------------------------------------------
# two-fold protocol


def fold_of(image_id: str) -> int:
    """Stable fold (0 or 1) from the parity of a 64-bit hash of the id."""
    digest = hashlib.blake2b(image_id.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") & 1


@dataclass
class FoldRun:
    replica: int
    train_fold: int
    train_image_ids: frozenset[str]
    scored_image_ids: list[str]
    scores: np.ndarray


@dataclass
class TwoFoldResult:
    generator: str
    pairs: list[ScoredPair]
    runs: list[FoldRun] = field(default_factory=list)

    @property
    def mean_score(self) -> float:
        return float(np.mean([p.score for p in self.pairs]))


def two_fold_score(dataset: Dataset, generator_name: str, config: TrainConfig, replicas: int = 1,
                   threads: int = 1) -> TwoFoldResult:
    """Score every generated caption with a critic trained on the other fold.

    Only ``generator_name`` supplies generator negatives.  With several
    replicas each caption's score is the mean over replicas.
    """
    if generator_name not in dataset.generated:
        raise DataError(f"no generated captions for generator {generator_name!r}")
    if replicas < 1:
        raise ConfigError("replicas must be >= 1")
    ds = dataset.only_generator(generator_name)
    folds = np.array([fold_of(img.id) for img in ds.images])
    members = [np.flatnonzero(folds == f) for f in (0, 1)]
    if min(len(m) for m in members) == 0:
        raise DataError("both folds need at least one image")
    items = [(k, img, list(ds.references[k]), cap)
             for k, img in enumerate(ds.images) for cap in ds.generated[generator_name][k]]

    def job(replica: int, train_fold: int) -> FoldRun:
        train_set = ds.subset(members[train_fold])
        cfg = replace(config, generator=generator_name, seed=_seed_of(config.seed, replica, train_fold))
        model, _ = train(train_set, cfg)
        mine = [it for it in items if folds[it[0]] != train_fold]
        scores = score_many(model, [(img, refs, cap) for _, img, refs, cap in mine])
        return FoldRun(replica, train_fold, frozenset(im.id for im in train_set.images),
                       [img.id for _, img, _, _ in mine], scores)

    jobs = [(r, f) for r in range(replicas) for f in (0, 1)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            runs = list(pool.map(lambda rf: job(*rf), jobs))
    else:
        runs = [job(r, f) for r, f in jobs]

    total = np.zeros(len(items))
    for run in runs:
        idx = [k for k, it in enumerate(items) if folds[it[0]] != run.train_fold]
        total[idx] += run.scores
    mean = total / replicas
    pairs = [ScoredPair(img.id, cap.text, float(s), GENERATED) for (_, img, _, cap), s in zip(items, mean)]
    return TwoFoldResult(generator_name, pairs, runs)


def config_to_dict(config: TrainConfig) -> dict:
    return asdict(config)
