"""Word embeddings, the shared LSTM caption encoder and the context encoder."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .corpus import Vocabulary
from .diffcore import Tensor
from .errors import ConfigError, DataError, ShapeError

CONTEXT_MODES = ("none", "image", "caption", "image+caption")

LSTM_INIT = 0.08
EMBED_INIT = 0.05


@dataclass
class EmbeddingTable:
    weight: Tensor
    pad_id: int
    trainable: bool = True

    @property
    def dim(self) -> int:
        return self.weight.shape[1]

    def lookup(self, ids) -> Tensor:
        return dc.embedding(self.weight, ids)


def init_embeddings(vocab: Vocabulary, dim: int, rng: np.random.Generator) -> EmbeddingTable:
    w = rng.uniform(-EMBED_INIT, EMBED_INIT, size=(len(vocab), dim))
    w[vocab.pad_id] = 0.0
    return EmbeddingTable(dc.parameter(w, "embedding"), vocab.pad_id)


def load_embeddings(path: str | Path, vocab: Vocabulary, dim: int = 300,
                    seed: int | np.random.Generator = 0) -> EmbeddingTable:
    """Initialise an embedding table from a ``word v1 ... vd`` text file.

    Words missing from the file (and the special tokens) keep their random
    initialisation; the PAD row is zeroed last.
    """
    table = init_embeddings(vocab, dim, np.random.default_rng(seed))
    w = table.weight.data
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) - 1 != dim:
                raise DataError(f"{path}:{lineno}: expected {dim} values, got {len(parts) - 1}")
            k = vocab.stoi.get(parts[0])
            if k is not None and k < vocab.n_real:
                w[k] = np.array(parts[1:], dtype=np.float64)
    w[vocab.pad_id] = 0.0
    return table


@dataclass
class LstmLayer:
    w_x: Tensor  # [in, 4H], gate blocks ordered input, forget, output, candidate
    w_h: Tensor  # [H, 4H]
    b: Tensor    # [4H]

    @property
    def hidden_size(self) -> int:
        return self.w_h.shape[0]


@dataclass
class LstmParams:
    layers: list[LstmLayer]

    @property
    def hidden_size(self) -> int:
        return self.layers[0].hidden_size

    def tensors(self) -> list[Tensor]:
        return [t for layer in self.layers for t in (layer.w_x, layer.w_h, layer.b)]


def init_lstm(input_size: int, hidden_size: int, num_layers: int, rng: np.random.Generator) -> LstmParams:
    layers = []
    for k in range(num_layers):
        n_in = input_size if k == 0 else hidden_size
        b = np.zeros(4 * hidden_size)
        b[hidden_size:2 * hidden_size] = 1.0
        layers.append(LstmLayer(
            dc.parameter(rng.uniform(-LSTM_INIT, LSTM_INIT, (n_in, 4 * hidden_size)), f"lstm{k}.w_x"),
            dc.parameter(rng.uniform(-LSTM_INIT, LSTM_INIT, (hidden_size, 4 * hidden_size)), f"lstm{k}.w_h"),
            dc.parameter(b, f"lstm{k}.b"),
        ))
    return LstmParams(layers)


def lstm_step(x_t, state: tuple, layer: LstmLayer) -> tuple[Tensor, Tensor]:
    """One LSTM cell update for a batch ``x_t[B, in]`` and state ``(h, c)``."""
    x_t = dc._as_tensor(x_t)
    h, c = (dc._as_tensor(s) for s in state)
    hidden = layer.hidden_size
    if x_t.shape[-1] != layer.w_x.shape[0] or h.shape[-1] != hidden or c.shape != h.shape:
        raise ShapeError(f"lstm_step: x {x_t.shape}, h {h.shape}, c {c.shape} "
                         f"for layer {layer.w_x.shape[0]}->{hidden}")
    pre = dc.add_bias(dc.add(dc.matmul(x_t, layer.w_x), dc.matmul(h, layer.w_h)), layer.b)
    hc = dc.lstm_cell(pre, dc.concat([h, c]))
    return dc.slice_cols(hc, 0, hidden), dc.slice_cols(hc, hidden, 2 * hidden)


def encode_sequence(ids: np.ndarray, lengths: np.ndarray, emb: EmbeddingTable, params: LstmParams) -> Tensor:
    """Hidden state of the top layer at step ``length - 1`` for each row.

    Steps at or beyond a row's length leave its state untouched, so padded
    positions never influence the encoding.
    """
    ids = np.asarray(ids, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    if ids.ndim != 2 or lengths.shape != (ids.shape[0],):
        raise ShapeError(f"encode_sequence: ids {ids.shape}, lengths {lengths.shape}")
    if np.any(lengths < 1) or np.any(lengths > ids.shape[1]):
        raise ShapeError("encode_sequence: lengths must lie in [1, T]")
    n, steps = ids.shape[0], int(lengths.max())
    hidden = params.hidden_size
    first = params.layers[0]
    x = emb.lookup(ids[:, :steps])                                   # [B, T, d]
    xw = dc.matmul(dc.reshape(x, (n * steps, emb.dim)), first.w_x)  # [B*T, 4H]
    xw = dc.reshape(dc.add_bias(xw, first.b), (n, steps * 4 * hidden))
    # per-layer state is packed as [h, c]
    states = [Tensor(np.zeros((n, 2 * hidden))) for _ in params.layers]
    for t in range(steps):
        live = t < lengths
        inp = None
        for k, layer in enumerate(params.layers):
            h = dc.slice_cols(states[k], 0, hidden)
            if k == 0:
                gates = dc.add(dc.slice_cols(xw, 4 * hidden * t, 4 * hidden * (t + 1)), dc.matmul(h, layer.w_h))
            else:
                gates = dc.add_bias(dc.add(dc.matmul(inp, layer.w_x), dc.matmul(h, layer.w_h)), layer.b)
            hc = dc.lstm_cell(gates, states[k])
            states[k] = hc if live.all() else dc.where_rows(live, hc, states[k])
            inp = dc.slice_cols(states[k], 0, hidden)
    return dc.slice_cols(states[-1], 0, hidden)


@dataclass
class ContextEncoder:
    mode: str
    proj_w: Tensor | None = None  # [D_img, H]
    proj_b: Tensor | None = None

    def __post_init__(self):
        if self.mode not in CONTEXT_MODES:
            raise ConfigError(f"unknown context mode {self.mode!r}; choose from {CONTEXT_MODES}")
        if self.uses_image != (self.proj_w is not None):
            raise ConfigError("image projection must be present iff the context uses the image")

    @property
    def uses_image(self) -> bool:
        return "image" in self.mode

    @property
    def uses_caption(self) -> bool:
        return "caption" in self.mode

    def output_dim(self, hidden: int) -> int:
        return hidden * (int(self.uses_image) + int(self.uses_caption))

    def tensors(self) -> list[Tensor]:
        return [self.proj_w, self.proj_b] if self.uses_image else []


def init_context(mode: str, image_dim: int, hidden: int, rng: np.random.Generator) -> ContextEncoder:
    if "image" in mode:
        w = dc.parameter(rng.uniform(-LSTM_INIT, LSTM_INIT, (image_dim, hidden)), "image_proj.w")
        return ContextEncoder(mode, w, dc.parameter(np.zeros(hidden), "image_proj.b"))
    return ContextEncoder(mode)


def encode_context(cfg: ContextEncoder, image_features: np.ndarray | None, reference: Tensor | None,
                   batch: int) -> Tensor:
    """Concatenate ``[projected image, reference encoding]`` per the mode.

    ``reference`` is the already-encoded reference caption (same LSTM as the
    candidate).  Mode ``none`` yields a ``[batch, 0]`` tensor.
    """
    if cfg.uses_image != (image_features is not None) or cfg.uses_caption != (reference is not None):
        raise ConfigError(f"context mode {cfg.mode!r} does not match the supplied context")
    parts = []
    if cfg.uses_image:
        feats = np.asarray(image_features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] != cfg.proj_w.shape[0]:
            raise ShapeError(f"image features {feats.shape} do not match projection {cfg.proj_w.shape}")
        parts.append(dc.add_bias(dc.matmul(Tensor(feats), cfg.proj_w), cfg.proj_b))
    if cfg.uses_caption:
        parts.append(reference)
    if not parts:
        return Tensor(np.zeros((batch, 0)))
    return parts[0] if len(parts) == 1 else dc.concat(parts)
