"""Captions, vocabulary, image features and dataset I/O.

Caption text is tokenized by a fixed rule, encoded against a frequency
ranked :class:`Vocabulary` and padded/truncated to a fixed number of LSTM
steps.  Image content is represented only by precomputed feature vectors.
"""
from __future__ import annotations

import hashlib
import json
import math
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError

PAD = "<pad>"
UNK = "<unk>"
DEFAULT_T_MAX = 15
FEATURE_MAGIC = b"CFV1"

_NON_WORD = re.compile(r"[^a-z0-9']")


def tokenize(text: str) -> list[str]:
    """Lowercase, turn everything outside ``[a-z0-9']`` into spaces and split."""
    return _NON_WORD.sub(" ", text.lower()).split()


class Vocabulary:
    """Word <-> id mapping; real words first (by rank), then PAD and UNK."""

    def __init__(self, words: Sequence[str]):
        words = list(words)
        if PAD in words or UNK in words:
            raise DataError("special tokens must not be passed as real words")
        if len(set(words)) != len(words):
            raise DataError("duplicate words in vocabulary")
        self.itos: list[str] = words + [PAD, UNK]
        self.stoi: dict[str, int] = {w: i for i, w in enumerate(self.itos)}
        self.pad_id = len(words)
        self.unk_id = len(words) + 1

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def __repr__(self) -> str:
        return f"Vocabulary(n_real={self.n_real}, size={len(self)})"

    @property
    def n_real(self) -> int:
        return self.pad_id

    @property
    def real_words(self) -> list[str]:
        return self.itos[: self.pad_id]

    def lookup(self, word: str) -> int:
        return self.stoi.get(word, self.unk_id)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def digest(self) -> str:
        """Stable hash of the id assignment, stored in model files."""
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if len(lines) < 2 or lines[-2:] != [PAD, UNK]:
            raise DataError(f"{path}: vocabulary must end with {PAD!r}, {UNK!r} lines")
        return cls(lines[:-2])


def build_vocabulary(captions: Iterable[str], max_vocab: int = 10000, min_freq: int = 5) -> Vocabulary:
    """Keep the ``max_vocab`` most frequent words seen at least ``min_freq`` times.

    Frequency ties are broken lexicographically so the id assignment only
    depends on the corpus contents.
    """
    counts: Counter[str] = Counter()
    n = 0
    for text in captions:
        counts.update(tokenize(text))
        n += 1
    if n == 0:
        raise DataError("cannot build a vocabulary from an empty corpus")
    ranked = sorted((w for w, c in counts.items() if c >= min_freq), key=lambda w: (-counts[w], w))
    return Vocabulary(ranked[:max_vocab])


@dataclass(frozen=True)
class Caption:
    text: str
    ids: tuple[int, ...]
    valid_len: int

    @property
    def tokens(self) -> tuple[int, ...]:
        return self.ids[: self.valid_len]

    @property
    def t_max(self) -> int:
        return len(self.ids)


def encode_caption(tokens: Sequence[str], vocab: Vocabulary, t_max: int = DEFAULT_T_MAX,
                   text: str | None = None) -> Caption:
    if t_max < 1:
        raise ValueError("t_max must be >= 1")
    if not tokens:
        raise DataError("a caption must contain at least one token")
    kept = [vocab.lookup(w) for w in tokens[:t_max]]
    ids = tuple(kept + [vocab.pad_id] * (t_max - len(kept)))
    return Caption(text if text is not None else " ".join(tokens), ids, len(kept))


def caption_from_text(text: str, vocab: Vocabulary, t_max: int = DEFAULT_T_MAX) -> Caption:
    return encode_caption(tokenize(text), vocab, t_max, text=text)


def caption_from_ids(ids: Sequence[int], vocab: Vocabulary, t_max: int = DEFAULT_T_MAX) -> Caption:
    """Build a caption from already-encoded ids (text is the decoded words)."""
    return encode_caption(vocab.decode(ids), vocab, t_max)


@dataclass(frozen=True, eq=False)
class ImageRecord:
    id: str
    feature: np.ndarray

    def __eq__(self, other: object) -> bool:
        return (isinstance(other, ImageRecord) and self.id == other.id
                and self.feature.shape == other.feature.shape
                and bool(np.array_equal(self.feature, other.feature)))

    def __hash__(self) -> int:
        return hash(self.id)


@dataclass(frozen=True)
class Dataset:
    """Images with their human references and optional generator outputs.

    ``generated[name][k]`` holds the captions generator ``name`` produced for
    ``images[k]`` (possibly an empty list).
    """

    images: tuple[ImageRecord, ...]
    references: tuple[tuple[Caption, ...], ...]
    vocab: Vocabulary
    generated: dict[str, tuple[tuple[Caption, ...], ...]] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.images) != len(self.references):
            raise DataError("images and reference lists differ in length")
        for img, refs in zip(self.images, self.references):
            if not refs:
                raise DataError(f"image {img.id!r} has no reference captions")
        for name, per_image in self.generated.items():
            if len(per_image) != len(self.images):
                raise DataError(f"generator {name!r} does not cover every image")
        dims = {img.feature.shape for img in self.images}
        if len(dims) > 1:
            raise DataError(f"inconsistent feature dimensions {sorted(dims)}")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_dim(self) -> int:
        return int(self.images[0].feature.shape[0]) if self.images else 0

    @property
    def t_max(self) -> int:
        return self.references[0][0].t_max

    @property
    def generator_names(self) -> list[str]:
        return sorted(self.generated)

    def n_references(self) -> int:
        return sum(len(r) for r in self.references)

    def features(self) -> np.ndarray:
        return np.stack([img.feature for img in self.images]).astype(np.float64)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = list(indices)
        return Dataset(
            images=tuple(self.images[i] for i in idx),
            references=tuple(self.references[i] for i in idx),
            vocab=self.vocab,
            generated={k: tuple(v[i] for i in idx) for k, v in self.generated.items()},
        )

    def only_generator(self, name: str) -> "Dataset":
        if name not in self.generated:
            raise DataError(f"no generated captions for generator {name!r}")
        return Dataset(self.images, self.references, self.vocab, {name: self.generated[name]})


# ---------------------------------------------------------------------------
# file formats


def write_features(path: str | Path, images: Sequence[ImageRecord]) -> None:
    dim = int(images[0].feature.shape[0]) if images else 0
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC + struct.pack("<II", len(images), dim))
        for img in images:
            key = img.id.encode("utf-8")
            fh.write(struct.pack("<I", len(key)) + key)
            fh.write(np.asarray(img.feature, dtype="<f4").tobytes())


def read_features(path: str | Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != FEATURE_MAGIC or len(raw) < 12:
        raise DataError(f"{path}: not a feature file (bad magic)")
    count, dim = struct.unpack_from("<II", raw, 4)
    pos = 12
    out: dict[str, np.ndarray] = {}
    for rec in range(count):
        if pos + 4 > len(raw):
            raise DataError(f"{path}: truncated at record {rec}")
        (klen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        key = raw[pos:pos + klen].decode("utf-8")
        pos += klen
        nbytes = 4 * dim
        if pos + nbytes > len(raw):
            raise DataError(f"{path}: truncated feature vector for image {key!r}")
        vec = np.frombuffer(raw, dtype="<f4", count=dim, offset=pos).astype(np.float32)
        pos += nbytes
        if not np.all(np.isfinite(vec)):
            raise DataError(f"{path}: non-finite feature for image {key!r}")
        out[key] = vec
    return out


def write_dataset(dataset: Dataset, captions_path: str | Path, features_path: str | Path) -> None:
    records = []
    for k, (img, refs) in enumerate(zip(dataset.images, dataset.references)):
        rec: dict = {"image_id": img.id, "references": [c.text for c in refs]}
        gen = {name: [c.text for c in per[k]] for name, per in dataset.generated.items()}
        if gen:
            rec["generated"] = gen
        records.append(rec)
    Path(captions_path).write_text(json.dumps(records, indent=1), encoding="utf-8")
    write_features(features_path, dataset.images)


def read_caption_records(captions_path: str | Path) -> list[dict]:
    try:
        records = json.loads(Path(captions_path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{captions_path}: invalid JSON ({exc})") from exc
    if not isinstance(records, list):
        raise DataError(f"{captions_path}: top level must be a list")
    for n, rec in enumerate(records):
        if not isinstance(rec, dict) or not isinstance(rec.get("image_id"), str):
            raise DataError(f"{captions_path}: record {n} lacks a string image_id")
        refs = rec.get("references")
        if not isinstance(refs, list) or not refs or not all(isinstance(r, str) for r in refs):
            raise DataError(f"{captions_path}: image {rec['image_id']!r} needs a non-empty references list")
        gen = rec.get("generated", {})
        if not isinstance(gen, dict) or not all(
                isinstance(v, list) and all(isinstance(s, str) for s in v) for v in gen.values()):
            raise DataError(f"{captions_path}: image {rec['image_id']!r} has malformed 'generated'")
    return records


def load_dataset(captions_path: str | Path, features_path: str | Path, vocab: Vocabulary,
                 t_max: int = DEFAULT_T_MAX) -> Dataset:
    records = read_caption_records(captions_path)
    feats = read_features(features_path)
    dims = {v.shape[0] for v in feats.values()}
    if len(dims) > 1:
        raise DataError(f"{features_path}: dimension mismatch {sorted(dims)}")
    names = sorted({name for rec in records for name in rec.get("generated", {})})
    images, refs = [], []
    gen: dict[str, list[tuple[Caption, ...]]] = {name: [] for name in names}

    def encode_all(texts, image_id):
        out = []
        for text in texts:
            try:
                out.append(caption_from_text(text, vocab, t_max))
            except DataError as exc:
                raise DataError(f"image {image_id!r}: {exc} ({text!r})") from exc
        return tuple(out)

    for rec in records:
        key = rec["image_id"]
        if key not in feats:
            raise DataError(f"caption record references unknown image id {key!r}")
        images.append(ImageRecord(key, feats[key]))
        refs.append(encode_all(rec["references"], key))
        for name in names:
            gen[name].append(encode_all(rec.get("generated", {}).get(name, []), key))
    return Dataset(tuple(images), tuple(refs), vocab, {k: tuple(v) for k, v in gen.items()})


# ---------------------------------------------------------------------------
# synthetic data

_FUNCTION_WORDS = ["a", "the", "on", "in", "near", "with", "is", "of"]
_CATEGORIES = ["adj", "noun", "verb", "place", "obj"]
_TOPIC_BOUND = ("noun", "place")


def _zipf(n: int, exponent: float) -> np.ndarray:
    p = 1.0 / np.arange(1, n + 1) ** exponent
    return p / p.sum()


def synth_dataset(seed: int, n_images: int, vocab_size: int = 60, d_img: int = 64,
                  n_references: int = 5, t_max: int = DEFAULT_T_MAX,
                  generator_name: str = "synth") -> Dataset:
    """Deterministic toy corpus with a learnable caption/image relationship.

    Each image belongs to one latent topic; its feature vector is the topic
    centroid plus noise.  Human captions follow a small slot grammar whose
    content words are drawn from a topic-specific Zipf distribution, so rare
    words appear regularly.  The generator draws from a flattened distribution
    over each topic's few most common words and rarely uses optional phrases.
    """
    if n_images < 2:
        raise ValueError("n_images must be >= 2")
    if vocab_size < 20:
        raise ValueError("vocab_size must be >= 20")
    rng = np.random.default_rng(seed)
    n_topics = max(2, min(8, n_images // 4))

    n_content = vocab_size - len(_FUNCTION_WORDS)
    per_cat = [n_content // len(_CATEGORIES)] * len(_CATEGORIES)
    for k in range(n_content % len(_CATEGORIES)):
        per_cat[k] += 1
    words = {cat: [f"{cat}{j}" for j in range(n)] for cat, n in zip(_CATEGORIES, per_cat)}

    # Each topic prefers its own ordering of every category; nouns and places
    # are split between topics so the image largely determines them.
    pools = {}
    for cat in _CATEGORIES:
        n = len(words[cat])
        shared = rng.permutation(n)
        for t in range(n_topics):
            if cat in _TOPIC_BOUND:
                own = [int(w) for j, w in enumerate(shared) if j % n_topics == t]
                pools[t, cat] = own or [int(shared[t % n])]
            else:
                pools[t, cat] = [int(j) for j in rng.permutation(n)[:max(2, n // 2)]]
    centroids = rng.normal(size=(n_topics, d_img))

    def human_word(t, cat):
        pool = pools[t, cat]
        return words[cat][pool[rng.choice(len(pool), p=_zipf(len(pool), 1.1))]]

    def generated_word(t, cat):
        pool = pools[t, cat]
        top = min(len(pool), max(2, math.ceil(len(words[cat]) / 5)))
        return words[cat][pool[rng.integers(top)]]

    def sentence(t, pick, p_adj, p_obj, preps):
        toks = ["a"]
        if rng.random() < p_adj:
            toks.append(pick(t, "adj"))
        toks += [pick(t, "noun"), pick(t, "verb"), preps[rng.integers(len(preps))], "the", pick(t, "place")]
        if rng.random() < p_obj:
            toks += ["with", "a", pick(t, "obj")]
        return toks

    topics = rng.integers(n_topics, size=n_images)
    topics[:n_topics] = np.arange(min(n_topics, n_images))
    image_texts, gen_texts, images = [], [], []
    for k in range(n_images):
        t = int(topics[k])
        feat = centroids[t] + 0.5 * rng.normal(size=d_img)
        images.append(ImageRecord(f"img{k:05d}", feat.astype(np.float32)))
        image_texts.append([" ".join(sentence(t, human_word, 0.8, 0.85, ["on", "in", "near"]))
                            for _ in range(n_references)])
        gen_texts.append([" ".join(sentence(t, generated_word, 0.1, 0.05, ["on"]))
                          for _ in range(n_references)])

    vocab = build_vocabulary([s for refs in image_texts for s in refs], max_vocab=vocab_size, min_freq=1)
    refs = tuple(tuple(caption_from_text(s, vocab, t_max) for s in texts) for texts in image_texts)
    gen = tuple(tuple(caption_from_text(s, vocab, t_max) for s in texts) for texts in gen_texts)
    return Dataset(tuple(images), refs, vocab, {generator_name: gen})
