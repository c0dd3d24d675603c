"""Small reverse-mode autodiff over dense float64 arrays.

Only the operations the critic needs are provided.  Operations executed while
a :class:`Tape` is active are recorded; ``tape.backward(loss)`` replays their
backward rules in reverse order and accumulates into ``Tensor.grad``.  Outside
a tape the same functions run forward only.

All batched operations treat axis 0 as the batch axis; there is no general
broadcasting.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError

_local = threading.local()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "is_leaf")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.is_leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class Tape:
    """Ordered record of executed operations for one forward/backward pass."""

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Tensor, parents: Sequence[Tensor], backward: Callable) -> None:
        self._records.append((out, tuple(parents), backward))

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> None:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf on the tape."""
        if seed is None:
            if loss.data.size != 1:
                raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
            seed = np.ones_like(loss.data)
        seed = np.asarray(seed, dtype=np.float64)
        if loss.is_leaf:
            if loss.requires_grad:
                _accumulate(loss, seed)
            return
        grads: dict[int, np.ndarray] = {id(loss): seed}
        owned: set[int] = set()  # buffers created here, safe to update in place
        for out, parents, fn in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            owned.discard(id(out))
            for parent, pg in zip(parents, fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if isinstance(pg, _Block):
                    if pg.shape != parent.shape:
                        raise ShapeError(f"gradient shape {pg.shape} != {parent.shape}")
                elif parent.shape != pg.shape:
                    raise ShapeError(f"gradient shape {pg.shape} != {parent.shape}")
                if parent.is_leaf:
                    _accumulate(parent, pg.dense() if isinstance(pg, _Block) else pg)
                    continue
                key = id(parent)
                if key in grads and key not in owned:
                    grads[key] = np.array(grads[key], dtype=np.float64, copy=True)
                    owned.add(key)
                if isinstance(pg, _Block):
                    if key not in grads:
                        grads[key] = np.zeros(pg.shape)
                        owned.add(key)
                    grads[key][pg.index] += pg.values
                elif key in grads:
                    grads[key] += pg
                else:
                    grads[key] = pg


class _Block:
    """Gradient that is zero outside ``index`` (from slicing ops)."""

    __slots__ = ("index", "values", "shape")

    def __init__(self, index: tuple, values: np.ndarray, shape: tuple):
        self.index, self.values, self.shape = index, values, shape

    def dense(self) -> np.ndarray:
        full = np.zeros(self.shape)
        full[self.index] = self.values
        return full


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    t.grad = g.copy() if t.grad is None else t.grad + g


def _active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    tape = _active_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out.is_leaf = False
        tape.record(out, parents, backward)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementary ops


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def add_bias(x, bias) -> Tensor:
    """``x[n, k] + bias[k]`` row-wise."""
    x, bias = _as_tensor(x), _as_tensor(bias)
    if x.data.ndim != 2 or bias.shape != (x.shape[1],):
        raise ShapeError(f"add_bias: shapes {x.shape} and {bias.shape}")
    return _result(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=0)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same("mul", a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))  # never overflows
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    s = _sigmoid(x.data)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    t = np.tanh(x.data)
    return _result(t, (x,), lambda g: (g * (1.0 - t * t),))


def lstm_cell(gates, hc) -> Tensor:
    """Fused LSTM update on packed state.

    ``gates[B, 4H]`` holds pre-activations in the order input, forget, output,
    candidate; ``hc[B, 2H]`` is ``[h, c]``.  Returns the new ``[h, c]``.  The
    ``h`` half of the input state only enters through ``gates``.
    """
    gates, hc = _as_tensor(gates), _as_tensor(hc)
    n, four_h = gates.shape
    hidden = four_h // 4
    if four_h != 4 * hidden or hc.shape != (n, 2 * hidden):
        raise ShapeError(f"lstm_cell: gates {gates.shape} vs state {hc.shape}")
    a = gates.data
    ifo = _sigmoid(a[:, :3 * hidden])
    i, f, o = ifo[:, :hidden], ifo[:, hidden:2 * hidden], ifo[:, 2 * hidden:]
    g = np.tanh(a[:, 3 * hidden:])
    c = hc.data[:, hidden:]
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    out = np.concatenate([o * tc, c_new], axis=1)

    def backward(grad):
        gh, gc = grad[:, :hidden], grad[:, hidden:]
        dc = gc + gh * o * (1.0 - tc * tc)
        d_gates = np.concatenate([dc * g * i * (1.0 - i), dc * c * f * (1.0 - f),
                                  gh * tc * o * (1.0 - o), dc * i * (1.0 - g * g)], axis=1)
        return d_gates, np.concatenate([np.zeros_like(gh), dc * f], axis=1)

    return _result(out, (gates, hc), backward)


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat: nothing to concatenate")
    ax = axis % parts[0].data.ndim
    for p in parts[1:]:
        if p.data.ndim != parts[0].data.ndim or any(
                p.shape[d] != parts[0].shape[d] for d in range(p.data.ndim) if d != ax):
            raise ShapeError(f"concat: incompatible shapes {[q.shape for q in parts]}")
    bounds = np.cumsum([0] + [p.shape[ax] for p in parts])

    def backward(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _result(np.concatenate([p.data for p in parts], axis=ax), parts, backward)


def slice_cols(x, start: int, stop: int) -> Tensor:
    """Columns ``start:stop`` of a 2-d tensor (or entries of a 1-d one)."""
    x = _as_tensor(x)
    if not 0 <= start <= stop <= x.shape[-1]:
        raise ShapeError(f"slice: [{start}:{stop}] out of range for shape {x.shape}")

    def backward(g):
        return (_Block((Ellipsis, slice(start, stop)), g, x.shape),)

    return _result(x.data[..., start:stop], (x,), backward)


def slice_rows(x, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    if not 0 <= start <= stop <= x.shape[0]:
        raise ShapeError(f"slice_rows: [{start}:{stop}] out of range for shape {x.shape}")

    def backward(g):
        return (_Block((slice(start, stop),), g, x.shape),)

    return _result(x.data[start:stop], (x,), backward)


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from exc
    return _result(out, (x,), lambda g: (g.reshape(x.shape),))


def embedding(table, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; ids may have any shape."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: id out of range for table with {table.shape[0]} rows")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _result(table.data[ids], (table,), backward)


def where_rows(mask: np.ndarray, a, b) -> Tensor:
    """Row ``n`` of ``a`` where ``mask[n]`` else row ``n`` of ``b``."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same("where_rows", a, b)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (a.shape[0],):
        raise ShapeError(f"where_rows: mask shape {mask.shape} for rows {a.shape[0]}")
    m = mask[:, None]
    return _result(np.where(m, a.data, b.data), (a, b), lambda g: (g * m, g * ~m))


def scale(x, c: float) -> Tensor:
    x = _as_tensor(x)
    return _result(x.data * c, (x,), lambda g: (g * c,))


def total(x) -> Tensor:
    """Sum of all entries, as a 0-d tensor."""
    x = _as_tensor(x)
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.full_like(x.data, g),))


def signed_sqrt(x, eps: float = 1e-4) -> Tensor:
    """``sign(x) * (sqrt(|x| + eps) - sqrt(eps))``: continuous, finite slope at 0."""
    x = _as_tensor(x)
    root = np.sqrt(np.abs(x.data) + eps)
    out = np.sign(x.data) * (root - np.sqrt(eps))
    return _result(out, (x,), lambda g: (g * 0.5 / root,))


def l2_normalize_rows(x, eps: float = 1e-12) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"l2_normalize_rows: expected 2-d input, got {x.shape}")
    norm = np.sqrt((x.data ** 2).sum(axis=1, keepdims=True) + eps)
    y = x.data / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=1, keepdims=True)) / norm,)

    return _result(y, (x,), backward)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits, labels: np.ndarray) -> Tensor:
    """Mean over rows of ``-sum(q * log softmax(logits))`` for one-hot ``q``."""
    logits = _as_tensor(logits)
    q = np.asarray(labels, dtype=np.float64)
    if q.shape != logits.shape or q.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {q.shape}")
    if not (np.all((q == 0) | (q == 1)) and np.all(q.sum(axis=1) == 1)):
        raise ValueError("softmax_cross_entropy: labels must be one-hot rows")
    n = q.shape[0]
    loss = -(q * log_softmax(logits.data)).sum() / n
    p = softmax(logits.data)
    return _result(np.asarray(loss), (logits,), lambda g: (g * (p - q) / n,))


# ---------------------------------------------------------------------------
# FFT and circular convolution

_bitrev_cache: dict[int, np.ndarray] = {}


def _bit_reversal(n: int) -> np.ndarray:
    perm = _bitrev_cache.get(n)
    if perm is None:
        bits = n.bit_length() - 1
        idx = np.arange(n)
        perm = np.zeros(n, dtype=np.int64)
        for b in range(bits):
            perm |= ((idx >> b) & 1) << (bits - 1 - b)
        _bitrev_cache[n] = perm
    return perm


def is_power_of_two(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


def fft(x: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Iterative radix-2 FFT along the last axis (length must be a power of 2)."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    if not is_power_of_two(n):
        raise ShapeError(f"fft: length {n} is not a power of two")
    lead = x.shape[:-1]
    x = x[..., _bit_reversal(n)]
    sign = 1.0 if inverse else -1.0
    size = 2
    while size <= n:
        half = size // 2
        twiddle = np.exp(sign * 2j * np.pi * np.arange(half) / size)
        blocks = x.reshape(lead + (n // size, size))
        even = blocks[..., :half]
        odd = blocks[..., half:] * twiddle
        x = np.concatenate([even + odd, even - odd], axis=-1).reshape(lead + (n,))
        size *= 2
    return x / n if inverse else x


def _circ_conv(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = fft(fft(a) * fft(b), inverse=True)
    return out.real


def _reverse_index(x: np.ndarray) -> np.ndarray:
    """``y[k] = x[-k mod D]`` along the last axis."""
    return np.roll(x[..., ::-1], 1, axis=-1)


def circular_convolve(a, b) -> Tensor:
    """``out[k] = sum_j a[j] * b[(k - j) mod D]`` along the last axis, via FFT."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"circular_convolve: length mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return _circ_conv(g, _reverse_index(bd)), _circ_conv(g, _reverse_index(ad))

    return _result(_circ_conv(ad, bd), (a, b), backward)


def sketch(x, hashes: np.ndarray, signs: np.ndarray, out_dim: int) -> Tensor:
    """Count sketch along the last axis: ``out[..., h[j]] += s[j] * x[..., j]``."""
    x = _as_tensor(x)
    if x.shape[-1] != len(hashes):
        raise ShapeError(f"count_sketch: input dim {x.shape[-1]} != plan dim {len(hashes)}")
    signs = np.asarray(signs, dtype=np.float64)
    lead = x.shape[:-1]
    flat = (x.data * signs).reshape(-1, x.shape[-1])
    out = np.zeros((out_dim, flat.shape[0]))
    np.add.at(out, hashes, flat.T)

    def backward(g):
        return (g[..., hashes] * signs,)

    return _result(out.T.reshape(lead + (out_dim,)), (x,), backward)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_parameter: dict[str, float] = field(default_factory=dict)
    n_checked: int = 0
    tol_rel: float | None = None

    @property
    def ok(self) -> bool:
        return self.tol_rel is None or self.max_rel_error < self.tol_rel


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor], epsilon: float = 1e-5,
                    tol_rel: float | None = None, max_entries: int | None = None,
                    seed: int = 0) -> GradCheckReport:
    """Compare tape gradients of ``fn()`` with central differences.

    The step for entry ``x`` is ``epsilon * max(1, |x|)``; the error measure
    is ``|a - b| / max(1, |a|, |b|)``.  ``max_entries`` limits the check to a
    random subset of entries per parameter.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        out = fn()
    tape.backward(out)
    rng = np.random.default_rng(seed)
    report = GradCheckReport(0.0, tol_rel=tol_rel)
    for k, p in enumerate(params):
        analytic = (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        worst = 0.0
        for j in idx:
            orig = flat[j]
            h = epsilon * max(1.0, abs(orig))
            flat[j] = orig + h
            up = float(fn().data)
            flat[j] = orig - h
            down = float(fn().data)
            flat[j] = orig
            numeric = (up - down) / (2 * h)
            a = float(analytic[j])
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a), abs(numeric)))
        worst = float(worst)
        report.per_parameter[p.name or f"param{k}"] = worst
        report.max_rel_error = max(report.max_rel_error, worst)
        report.n_checked += len(idx)
    return report
