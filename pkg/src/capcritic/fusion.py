"""Combining the context vector with the candidate-caption vector."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ConfigError, ShapeError

STRATEGIES = ("concat_linear", "concat_mlp", "cbp_linear")


@dataclass(frozen=True, eq=False)
class CountSketchPlan:
    """Fixed random hash ``h: [m] -> [0, D)`` and signs ``s: [m] -> {+1, -1}``."""

    input_dim: int
    output_dim: int
    seed: int
    hashes: np.ndarray
    signs: np.ndarray

    @classmethod
    def create(cls, input_dim: int, output_dim: int, seed: int) -> "CountSketchPlan":
        rng = np.random.default_rng(seed)
        hashes = rng.integers(0, output_dim, size=input_dim)
        signs = rng.choice(np.array([-1.0, 1.0]), size=input_dim)
        return cls(input_dim, output_dim, seed, hashes, signs)

    def matrix(self) -> np.ndarray:
        """Dense ``[m, D]`` equivalent of the sketch (for inspection and tests)."""
        m = np.zeros((self.input_dim, self.output_dim))
        m[np.arange(self.input_dim), self.hashes] = self.signs
        return m


def count_sketch(x, plan: CountSketchPlan) -> Tensor:
    return dc.sketch(x, plan.hashes, plan.signs, plan.output_dim)


@dataclass(frozen=True)
class FusionConfig:
    strategy: str = "concat_mlp"
    mlp_hidden: int = 512
    cbp_dim: int = 8192
    cbp_normalize: bool = True

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown fusion strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.strategy == "concat_mlp" and self.mlp_hidden < 1:
            raise ConfigError("mlp_hidden must be positive")
        if self.strategy == "cbp_linear" and not dc.is_power_of_two(self.cbp_dim):
            raise ConfigError(f"cbp_dim must be a power of two, got {self.cbp_dim}")

    def output_dim(self, context_dim: int, candidate_dim: int) -> int:
        if self.strategy == "concat_linear":
            return context_dim + candidate_dim
        if self.strategy == "concat_mlp":
            return self.mlp_hidden
        return self.cbp_dim


@dataclass
class FusionParams:
    mlp_w: Tensor | None = None
    mlp_b: Tensor | None = None
    context_plan: CountSketchPlan | None = None
    candidate_plan: CountSketchPlan | None = None

    def tensors(self) -> list[Tensor]:
        return [self.mlp_w, self.mlp_b] if self.mlp_w is not None else []


def init_fusion(cfg: FusionConfig, context_dim: int, candidate_dim: int, seed: int,
                rng: np.random.Generator) -> FusionParams:
    if cfg.strategy == "concat_mlp":
        n_in = context_dim + candidate_dim
        bound = np.sqrt(6.0 / (n_in + cfg.mlp_hidden))
        return FusionParams(dc.parameter(rng.uniform(-bound, bound, (n_in, cfg.mlp_hidden)), "mlp.w"),
                            dc.parameter(np.zeros(cfg.mlp_hidden), "mlp.b"))
    if cfg.strategy == "cbp_linear":
        if context_dim == 0:
            raise ConfigError("compact bilinear pooling needs a non-empty context")
        seeds = np.random.SeedSequence(seed).generate_state(2)
        return FusionParams(context_plan=CountSketchPlan.create(context_dim, cfg.cbp_dim, int(seeds[0])),
                            candidate_plan=CountSketchPlan.create(candidate_dim, cfg.cbp_dim, int(seeds[1])))
    return FusionParams()


def cbp_pool(context, candidate, context_plan: CountSketchPlan, candidate_plan: CountSketchPlan) -> Tensor:
    """``sketch(context) (*) sketch(candidate)`` with ``(*)`` circular convolution."""
    return dc.circular_convolve(count_sketch(context, context_plan), count_sketch(candidate, candidate_plan))


def fuse(context: Tensor, candidate: Tensor, cfg: FusionConfig, params: FusionParams) -> Tensor:
    if context.shape[0] != candidate.shape[0]:
        raise ShapeError(f"fuse: batch sizes differ {context.shape} vs {candidate.shape}")
    if cfg.strategy == "cbp_linear":
        if context.shape[1] == 0:
            raise ConfigError("compact bilinear pooling needs a non-empty context")
        v = cbp_pool(context, candidate, params.context_plan, params.candidate_plan)
        if cfg.cbp_normalize:
            v = dc.l2_normalize_rows(dc.signed_sqrt(v))
        return v
    joint = candidate if context.shape[1] == 0 else dc.concat([context, candidate])
    if cfg.strategy == "concat_linear":
        return joint
    return dc.relu(dc.add_bias(dc.matmul(joint, params.mlp_w), params.mlp_b))
