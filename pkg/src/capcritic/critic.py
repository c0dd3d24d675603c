"""The learned critic: (context, candidate caption) -> P(candidate is human written)."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .corpus import Caption, ImageRecord, Vocabulary
from .diffcore import Tensor
from .encoder import (CONTEXT_MODES, ContextEncoder, EmbeddingTable, LstmParams, encode_context,
                      encode_sequence, init_context, init_embeddings, init_lstm)
from .errors import ConfigError, DataError, ShapeError
from .fusion import FusionConfig, FusionParams, fuse, init_fusion

GENERATED, HUMAN = 0, 1
MODEL_MAGIC = b"CRT1"
MODEL_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    image_dim: int
    embed_dim: int = 300
    hidden_size: int = 512
    num_layers: int = 1
    context: str = "image+caption"
    fusion: str = "concat_mlp"
    mlp_hidden: int = 512
    cbp_dim: int = 8192
    cbp_normalize: bool = True
    seed: int = 0
    vocab_digest: str = ""

    def __post_init__(self):
        if self.context not in CONTEXT_MODES:
            raise ConfigError(f"unknown context mode {self.context!r}")
        if self.num_layers not in (1, 2, 3):
            raise ConfigError("num_layers must be 1, 2 or 3")
        if min(self.embed_dim, self.hidden_size, self.vocab_size) < 1:
            raise ConfigError("embed_dim, hidden_size and vocab_size must be positive")
        if self.fusion == "cbp_linear" and self.context == "none":
            raise ConfigError("cbp_linear fusion needs an image and/or caption context")
        self.fusion_config()

    def fusion_config(self) -> FusionConfig:
        return FusionConfig(self.fusion, self.mlp_hidden, self.cbp_dim, self.cbp_normalize)


@dataclass
class LabeledExample:
    image: ImageRecord | None
    reference: Caption | None
    candidate: Caption
    label: int  # HUMAN or GENERATED


@dataclass
class CaptionBatch:
    """Array view of a list of (image, reference, candidate[, label]) rows."""

    features: np.ndarray | None
    ref_ids: np.ndarray | None
    ref_lens: np.ndarray | None
    cand_ids: np.ndarray
    cand_lens: np.ndarray
    labels: np.ndarray | None = None

    def __len__(self) -> int:
        return self.cand_ids.shape[0]

    @classmethod
    def from_rows(cls, images: Sequence[ImageRecord | None], references: Sequence[Caption | None],
                  candidates: Sequence[Caption], labels: Sequence[int] | None = None,
                  use_image: bool = True, use_caption: bool = True) -> "CaptionBatch":
        def ids(caps):
            return (np.array([c.ids for c in caps], dtype=np.int64),
                    np.array([c.valid_len for c in caps], dtype=np.int64))

        feats = ref_ids = ref_lens = None
        if use_image:
            if any(im is None for im in images):
                raise ConfigError("this model's context needs an image for every row")
            feats = np.stack([np.asarray(im.feature, dtype=np.float64) for im in images])
        if use_caption:
            if any(r is None for r in references):
                raise ConfigError("this model's context needs a reference caption for every row")
            ref_ids, ref_lens = ids(references)
        cand_ids, cand_lens = ids(candidates)
        lab = None if labels is None else np.asarray(labels, dtype=np.int64)
        return cls(feats, ref_ids, ref_lens, cand_ids, cand_lens, lab)


class CriticModel:
    """All trainable parameters plus the architecture configuration.

    Parameter order (also the model-file payload order): ``embedding``,
    ``lstm{k}.w_x``, ``lstm{k}.w_h``, ``lstm{k}.b`` per layer, then
    ``image_proj.w``, ``image_proj.b`` (image contexts), ``mlp.w``, ``mlp.b``
    (concat_mlp), ``classifier.w``, ``classifier.b``.
    """

    def __init__(self, config: ModelConfig, vocab: Vocabulary | None = None):
        if vocab is not None:
            if len(vocab) != config.vocab_size:
                raise ShapeError(f"vocabulary size {len(vocab)} != model vocab_size {config.vocab_size}")
            if config.vocab_digest and config.vocab_digest != vocab.digest():
                raise DataError("vocabulary does not match the one the model was built with")
        self.config = config
        self.vocab = vocab
        rng = np.random.default_rng(config.seed)
        pad_id = vocab.pad_id if vocab is not None else config.vocab_size - 2
        emb = init_embeddings(_SizedVocab(config.vocab_size, pad_id), config.embed_dim, rng)
        self.embedding: EmbeddingTable = emb
        self.lstm: LstmParams = init_lstm(config.embed_dim, config.hidden_size, config.num_layers, rng)
        self.context: ContextEncoder = init_context(config.context, config.image_dim, config.hidden_size, rng)
        ctx_dim = self.context.output_dim(config.hidden_size)
        fcfg = config.fusion_config()
        self.fusion: FusionParams = init_fusion(fcfg, ctx_dim, config.hidden_size, config.seed, rng)
        fused = fcfg.output_dim(ctx_dim, config.hidden_size)
        bound = np.sqrt(6.0 / (fused + 2))
        self.cls_w = dc.parameter(rng.uniform(-bound, bound, (fused, 2)), "classifier.w")
        self.cls_b = dc.parameter(np.zeros(2), "classifier.b")

    def parameters(self) -> list[Tensor]:
        return ([self.embedding.weight] + self.lstm.tensors() + self.context.tensors()
                + self.fusion.tensors() + [self.cls_w, self.cls_b])

    def named_parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.parameters()}

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def batch(self, images, references, candidates, labels=None) -> CaptionBatch:
        return CaptionBatch.from_rows(images, references, candidates, labels,
                                      use_image=self.context.uses_image, use_caption=self.context.uses_caption)

    def examples_to_batch(self, examples: Sequence[LabeledExample]) -> CaptionBatch:
        return self.batch([e.image for e in examples], [e.reference for e in examples],
                          [e.candidate for e in examples], [e.label for e in examples])

    # -- forward ------------------------------------------------------------

    def logits(self, batch: CaptionBatch) -> Tensor:
        n = len(batch)
        if self.context.uses_caption:
            if batch.ref_ids is None:
                raise ConfigError(f"context mode {self.config.context!r} needs reference captions")
            # one pass through the shared LSTM for references and candidates
            both = encode_sequence(np.concatenate([batch.cand_ids, batch.ref_ids]),
                                   np.concatenate([batch.cand_lens, batch.ref_lens]),
                                   self.embedding, self.lstm)
            cand, ref = dc.slice_rows(both, 0, n), dc.slice_rows(both, n, 2 * n)
        else:
            cand, ref = encode_sequence(batch.cand_ids, batch.cand_lens, self.embedding, self.lstm), None
        feats = batch.features if self.context.uses_image else None
        if self.context.uses_image and feats is None:
            raise ConfigError(f"context mode {self.config.context!r} needs image features")
        ctx = encode_context(self.context, feats, ref, n)
        v = fuse(ctx, cand, self.config.fusion_config(), self.fusion)
        return dc.add_bias(dc.matmul(v, self.cls_w), self.cls_b)

    def predict_proba(self, batch: CaptionBatch, chunk: int = 512) -> np.ndarray:
        """``[n, 2]`` class probabilities (column ``HUMAN`` is the score)."""
        out = []
        for lo in range(0, len(batch), chunk):
            part = _slice_batch(batch, lo, lo + chunk)
            out.append(dc.softmax(self.logits(part).data))
        return np.concatenate(out) if out else np.zeros((0, 2))


class _SizedVocab:
    """Minimal stand-in so the embedding initialiser can run without a Vocabulary."""

    def __init__(self, size: int, pad_id: int):
        self._size, self.pad_id = size, pad_id

    def __len__(self) -> int:
        return self._size


def _slice_batch(b: CaptionBatch, lo: int, hi: int) -> CaptionBatch:
    def cut(a):
        return None if a is None else a[lo:hi]
    return CaptionBatch(cut(b.features), cut(b.ref_ids), cut(b.ref_lens), b.cand_ids[lo:hi],
                        b.cand_lens[lo:hi], cut(b.labels))


def build_model(vocab: Vocabulary, image_dim: int, **kwargs) -> CriticModel:
    cfg = ModelConfig(vocab_size=len(vocab), image_dim=image_dim, vocab_digest=vocab.digest(), **kwargs)
    return CriticModel(cfg, vocab)


# ---------------------------------------------------------------------------
# scoring and loss


def score(model: CriticModel, image: ImageRecord | None, reference: Caption | None, candidate: Caption) -> float:
    """Probability that ``candidate`` is human written given the context."""
    return float(model.predict_proba(model.batch([image], [reference], [candidate]))[0, HUMAN])


def score_with_all_references(model: CriticModel, image: ImageRecord | None, references: Sequence[Caption],
                              candidate: Caption) -> float:
    if not references:
        raise ValueError("at least one reference caption is required")
    return float(score_many(model, [(image, list(references), candidate)])[0])


def score_many(model: CriticModel, items: Sequence[tuple], chunk: int = 1024) -> np.ndarray:
    """Reference-averaged scores for ``(image, references, candidate)`` items.

    Each reference serves once as the context caption and the scores are
    averaged.  Without a caption context a single call per item suffices.
    """
    rows_img, rows_ref, rows_cand, owner = [], [], [], []
    for k, (image, refs, cand) in enumerate(items):
        contexts = list(refs) if model.context.uses_caption else [None]
        if not contexts:
            raise ValueError("at least one reference caption is required")
        for ref in contexts:
            rows_img.append(image)
            rows_ref.append(ref)
            rows_cand.append(cand)
            owner.append(k)
    if not owner:
        return np.zeros(0)
    probs = model.predict_proba(model.batch(rows_img, rows_ref, rows_cand), chunk=chunk)[:, HUMAN]
    owner = np.asarray(owner)
    sums = np.bincount(owner, weights=probs, minlength=len(items))
    counts = np.bincount(owner, minlength=len(items))
    return sums / counts


def one_hot(labels: np.ndarray) -> np.ndarray:
    q = np.zeros((len(labels), 2))
    q[np.arange(len(labels)), labels] = 1.0
    return q


def loss_tensor(model: CriticModel, batch: CaptionBatch) -> Tensor:
    if batch.labels is None or len(batch) == 0:
        raise ValueError("loss needs a non-empty labeled batch")
    return dc.softmax_cross_entropy(model.logits(batch), one_hot(batch.labels))


def loss(model: CriticModel, examples: Sequence[LabeledExample]) -> float:
    return float(loss_tensor(model, model.examples_to_batch(examples)).data)


def loss_and_grad(model: CriticModel, batch: CaptionBatch) -> float:
    """Mean cross-entropy; gradients are left in each parameter's ``grad``."""
    model.zero_grad()
    with dc.Tape() as tape:
        value = loss_tensor(model, batch)
    tape.backward(value)
    return float(value.data)


# ---------------------------------------------------------------------------
# serialization


def save_model(model: CriticModel, path: str | Path) -> None:
    params = model.parameters()
    header = {
        "format_version": MODEL_FORMAT_VERSION,
        "config": asdict(model.config),
        "parameters": [[p.name, list(p.shape)] for p in params],
    }
    block = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(p.data, dtype="<f8").tobytes() for p in params)
    Path(path).write_bytes(MODEL_MAGIC + struct.pack("<I", len(block)) + block + payload)


def load_model(path: str | Path, vocab: Vocabulary | None = None) -> CriticModel:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != MODEL_MAGIC:
        raise DataError(f"{path}: not a critic model file")
    (n,) = struct.unpack_from("<I", raw, 4)
    if 8 + n > len(raw):
        raise DataError(f"{path}: truncated header")
    try:
        header = json.loads(raw[8:8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: corrupt header ({exc})") from exc
    if header.get("format_version") != MODEL_FORMAT_VERSION:
        raise DataError(f"{path}: unsupported model format version {header.get('format_version')}")
    known = {f.name for f in fields(ModelConfig)}
    cfg_dict = header["config"]
    if set(cfg_dict) - known:
        raise DataError(f"{path}: unknown config keys {sorted(set(cfg_dict) - known)}")
    config = ModelConfig(**cfg_dict)
    if vocab is not None and len(vocab) != config.vocab_size:
        raise ShapeError(f"{path}: model expects a vocabulary of {config.vocab_size} entries, got {len(vocab)}")
    model = CriticModel(config, vocab)
    params = model.parameters()
    expected = [[p.name, list(p.shape)] for p in params]
    if header["parameters"] != expected:
        raise ShapeError(f"{path}: parameter layout does not match the configuration")
    pos = 8 + n
    for p in params:
        nbytes = 8 * p.data.size
        if pos + nbytes > len(raw):
            raise DataError(f"{path}: truncated parameter payload at {p.name!r}")
        p.data[...] = np.frombuffer(raw, dtype="<f8", count=p.data.size, offset=pos).reshape(p.shape)
        pos += nbytes
    if pos != len(raw):
        raise DataError(f"{path}: {len(raw) - pos} trailing bytes")
    return model


def critic_metric(model: CriticModel):
    """Adapter giving the critic the batch-metric interface used by robustness studies."""
    def metric(items) -> np.ndarray:
        return score_many(model, items)
    metric.__name__ = "critic"
    return metric
