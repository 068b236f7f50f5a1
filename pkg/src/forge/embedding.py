"""Encoder plugins, embedding arithmetic and the embedding cache format.

Text encoders return float64 numpy vectors. Image encoders take a
``(H, W, 3)`` torch tensor and return a ``(D,)`` torch tensor so that they can
sit inside the autograd graph of the style optimization.
"""

from __future__ import annotations

import hashlib
import json
import re
from pathlib import Path
from typing import Protocol, Sequence, runtime_checkable

import numpy as np
import torch
import torch.nn.functional as F

DEFAULT_DIM = 512
NORM_EPS = 1e-12
TOKEN_BUCKETS = 4096


class EmbeddingError(ValueError):
    """Raised for invalid embedding arithmetic (shape mismatch, zero norm)."""


class EncoderError(RuntimeError):
    """Raised when an encoder cannot produce an embedding for an input."""


@runtime_checkable
class TextEncoder(Protocol):
    id: str
    dimension: int

    def encode(self, text: str) -> np.ndarray: ...


@runtime_checkable
class ImageEncoder(Protocol):
    id: str
    dimension: int
    differentiable: bool

    def encode(self, image: torch.Tensor) -> torch.Tensor: ...


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------


def _as_vector(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise EmbeddingError(f"expected a 1-D embedding, got shape {arr.shape}")
    return arr


def cosine_similarity(x, y) -> float:
    x, y = _as_vector(x), _as_vector(y)
    if x.shape != y.shape:
        raise EmbeddingError(f"dimension mismatch: {x.shape[0]} vs {y.shape[0]}")
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx <= NORM_EPS or ny <= NORM_EPS:
        raise EmbeddingError("cosine similarity of a zero-norm vector is undefined")
    return float(np.clip(x @ y / (nx * ny), -1.0, 1.0))


def cosine_scores(table: np.ndarray, query) -> np.ndarray:
    """Cosine similarity of every row of ``table`` against ``query``."""
    table = np.asarray(table, dtype=np.float64)
    query = _as_vector(query)
    if table.ndim != 2 or table.shape[1] != query.shape[0]:
        raise EmbeddingError(
            f"dimension mismatch: table {table.shape} vs query {query.shape}"
        )
    row_norms = np.linalg.norm(table, axis=1)
    qn = np.linalg.norm(query)
    if qn <= NORM_EPS or np.any(row_norms <= NORM_EPS):
        raise EmbeddingError("cosine similarity of a zero-norm vector is undefined")
    return np.clip(table @ query / (row_norms * qn), -1.0, 1.0)


def normalize(x) -> np.ndarray:
    x = _as_vector(x)
    n = np.linalg.norm(x)
    if not n > NORM_EPS:
        raise EmbeddingError(f"cannot normalize vector with norm {n:g}")
    return x / n


def top_k(scores: Sequence[float], k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices and values of the ``k`` largest scores.

    Ties are broken by ascending original index, so the result is always a
    prefix of a stable descending sort.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    if k > scores.shape[0]:
        raise ValueError(f"k={k} exceeds number of scores ({scores.shape[0]})")
    order = np.argsort(-scores, kind="stable")[:k]
    return order, scores[order]


# ---------------------------------------------------------------------------
# toy encoders
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(r"[\w']+", re.UNICODE)


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def token_bucket(token: str, buckets: int = TOKEN_BUCKETS) -> int:
    # Python's hash() is salted per process, so use a fixed digest
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % buckets


class ToyTextEncoder:
    """Hashed bag-of-words followed by a fixed Gaussian projection."""

    def __init__(self, dimension: int = DEFAULT_DIM, seed: int = 0, id: str | None = None):
        self.dimension = int(dimension)
        self.seed = int(seed)
        self.id = id or f"toy-text-d{self.dimension}-s{self.seed}"
        rng = np.random.default_rng(self.seed)
        self._proj = rng.standard_normal((TOKEN_BUCKETS, self.dimension)) / np.sqrt(
            self.dimension
        )

    def bag_of_words(self, text: str) -> np.ndarray:
        counts = np.zeros(TOKEN_BUCKETS)
        for tok in tokenize(text):
            counts[token_bucket(tok)] += 1.0
        return counts

    def encode(self, text: str) -> np.ndarray:
        counts = self.bag_of_words(text)
        if not counts.any():
            raise EncoderError(f"no tokens in text {text!r}")
        return counts @ self._proj


class ToyImageEncoder:
    """8x8 average-pooled RGB grid, flattened and linearly projected.

    The encoder is linear in the pixel values and therefore exactly
    differentiable.
    """

    differentiable = True
    grid = 8

    def __init__(self, dimension: int = DEFAULT_DIM, seed: int = 0, id: str | None = None):
        self.dimension = int(dimension)
        self.seed = int(seed)
        self.id = id or f"toy-image-d{self.dimension}-s{self.seed}"
        rng = np.random.default_rng(self.seed + 7919)
        n_in = self.grid * self.grid * 3
        self._proj = torch.from_numpy(rng.standard_normal((n_in, self.dimension)) / np.sqrt(n_in))

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        if image.ndim != 3 or image.shape[-1] != 3:
            raise EncoderError(f"expected (H, W, 3) image, got {tuple(image.shape)}")
        pooled = F.adaptive_avg_pool2d(image.permute(2, 0, 1)[None], self.grid)
        return pooled.reshape(-1) @ self._proj.to(image.dtype)


# ---------------------------------------------------------------------------
# pretrained adapters (loaded lazily; never required by the test-suite)
# ---------------------------------------------------------------------------


class SentenceTransformerTextEncoder:
    """Text encoder backed by a ``sentence-transformers`` checkpoint."""

    def __init__(self, model_name: str, dimension: int, id: str | None = None):
        self.model_name = model_name
        self.dimension = dimension
        self.id = id or f"st:{model_name}"
        self._model = None

    def _load(self):
        if self._model is None:
            try:
                from sentence_transformers import SentenceTransformer
            except ImportError as exc:  # pragma: no cover - optional dependency
                raise EncoderError("sentence-transformers is not installed") from exc
            try:
                self._model = SentenceTransformer(self.model_name, device="cpu")
            except Exception as exc:
                raise EncoderError(f"could not load {self.model_name}: {exc}") from exc
        return self._model

    def encode(self, text: str) -> np.ndarray:
        vec = self._load().encode([text], convert_to_numpy=True, normalize_embeddings=False)
        return np.asarray(vec[0], dtype=np.float64)

    def encode_batch(self, texts: Sequence[str]) -> np.ndarray:
        vecs = self._load().encode(list(texts), convert_to_numpy=True, normalize_embeddings=False)
        return np.asarray(vecs, dtype=np.float64)


# ---------------------------------------------------------------------------
# registry
# ---------------------------------------------------------------------------

_REGISTRY: dict[str, object] = {}


def register_encoder(plugin) -> object:
    if not isinstance(plugin.dimension, int) or plugin.dimension <= 0:
        raise ValueError(f"encoder {plugin.id!r} has invalid dimension {plugin.dimension!r}")
    if plugin.id in _REGISTRY:
        raise ValueError(f"encoder id {plugin.id!r} is already registered")
    _REGISTRY[plugin.id] = plugin
    return plugin


def get_encoder(encoder_id: str):
    try:
        return _REGISTRY[encoder_id]
    except KeyError:
        known = ", ".join(sorted(_REGISTRY)) or "<none>"
        raise KeyError(f"unknown encoder {encoder_id!r}; registered: {known}") from None


def registered_encoders() -> list[str]:
    return sorted(_REGISTRY)


def _register_builtins() -> None:
    register_encoder(ToyTextEncoder(id="toy-text"))
    register_encoder(ToyTextEncoder(seed=1, id="toy-text-alt"))
    register_encoder(ToyImageEncoder(id="toy-image"))
    register_encoder(SentenceTransformerTextEncoder("clip-ViT-B-32", 512, id="clip-text"))
    register_encoder(SentenceTransformerTextEncoder("all-mpnet-base-v2", 768, id="mpnet"))


_register_builtins()


def encode_texts(encoder, texts: Sequence[str]) -> np.ndarray:
    """Encode ``texts`` into an ``(n, D)`` table, naming the label that fails."""
    batch = getattr(encoder, "encode_batch", None)
    if batch is not None:
        return np.asarray(batch(texts), dtype=np.float64).reshape(len(texts), encoder.dimension)
    rows = []
    for text in texts:
        try:
            vec = np.asarray(encoder.encode(text), dtype=np.float64)
        except Exception as exc:
            raise EncoderError(f"encoder {encoder.id!r} failed on {text!r}: {exc}") from exc
        if vec.shape != (encoder.dimension,) or not np.all(np.isfinite(vec)):
            raise EncoderError(f"encoder {encoder.id!r} returned an invalid vector for {text!r}")
        rows.append(vec)
    return np.stack(rows) if rows else np.zeros((0, encoder.dimension))


# ---------------------------------------------------------------------------
# cache files: <stem>.f32 (little-endian float32, shape (n, D)) + <stem>.json
# ---------------------------------------------------------------------------


def save_embedding_cache(stem: str | Path, table: np.ndarray, encoder_id: str, item_ids: Sequence[str]) -> None:
    stem = Path(stem)
    table = np.asarray(table)
    if table.ndim != 2 or table.shape[0] != len(item_ids):
        raise ValueError(f"table shape {table.shape} does not match {len(item_ids)} items")
    stem.parent.mkdir(parents=True, exist_ok=True)
    table.astype("<f4").tofile(stem.with_suffix(".f32"))
    sidecar = {"encoder_id": encoder_id, "dimension": int(table.shape[1]), "item_ids": list(item_ids)}
    stem.with_suffix(".json").write_text(json.dumps(sidecar, indent=1))


def load_embedding_cache(stem: str | Path) -> tuple[np.ndarray, dict]:
    stem = Path(stem)
    meta = json.loads(stem.with_suffix(".json").read_text())
    n, d = len(meta["item_ids"]), int(meta["dimension"])
    raw = np.fromfile(stem.with_suffix(".f32"), dtype="<f4")
    if raw.size != n * d:
        raise ValueError(f"{stem}.f32 holds {raw.size} floats, expected {n}x{d}")
    return raw.reshape(n, d).astype(np.float32), meta
