"""Deterministic sentence embedder and the composite item-embedding matrix.

Text is lowercased, split on non-alphanumerics, feature-hashed into a count
vector and projected through a seeded Gaussian matrix, then L2-normalized.
Precomputed vectors (e.g. from a real sentence encoder) can be imported
from a plain-text file instead.
"""

from __future__ import annotations

import functools
import hashlib
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import make_rng
from .data import HistoryItem, UserHistory, render_history_item

_TOKEN_RE = re.compile(r"[a-z0-9]+")
FILE_MAGIC = "UEMEMB"
FILE_VERSION = "v1"


class EmbeddingFileError(ValueError):
    """Base class for embedding-file load failures."""


class EmbeddingHeaderError(EmbeddingFileError):
    pass


class EmbeddingShapeError(EmbeddingFileError):
    pass


class EmbeddingValueError(EmbeddingFileError):
    pass


@dataclass(frozen=True)
class EmbedderConfig:
    s: int = 64
    seed: int = 1234
    vocab_hash_buckets: int = 4096

    def __post_init__(self):
        if self.s < 8:
            raise ValueError(f"embedder dimension s must be >= 8, got {self.s}")
        if self.vocab_hash_buckets < self.s:
            raise ValueError("vocab_hash_buckets must be >= s")


@dataclass(frozen=True)
class ItemEmbeddingMatrix:
    data: np.ndarray
    s: int
    imported: bool = field(default=False)

    @property
    def p(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


def _bucket(token: str, buckets: int) -> int:
    h = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(h, "little") % buckets


@functools.lru_cache(maxsize=8)
def _projection(seed: int, buckets: int, s: int) -> np.ndarray:
    m = make_rng(seed).standard_normal((buckets, s))
    m.setflags(write=False)
    return m


def embed_text(text: str, cfg: EmbedderConfig) -> np.ndarray:
    tokens = _TOKEN_RE.findall(text.lower())
    if not tokens:
        return np.zeros(cfg.s)
    counts = np.zeros(cfg.vocab_hash_buckets)
    for tok in tokens:
        counts[_bucket(tok, cfg.vocab_hash_buckets)] += 1.0
    nz = np.flatnonzero(counts)
    vec = counts[nz] @ _projection(cfg.seed, cfg.vocab_hash_buckets, cfg.s)[nz]
    norm = math.sqrt(float(vec @ vec))
    if norm == 0.0:
        return np.zeros(cfg.s)
    return vec / norm


@functools.lru_cache(maxsize=65536)
def _embed_cached(text: str, cfg: EmbedderConfig) -> np.ndarray:
    v = embed_text(text, cfg)
    v.setflags(write=False)
    return v


def embed_history_item(item: HistoryItem, cfg: EmbedderConfig) -> np.ndarray:
    """``[e_title_genre ; e_rating ; e_description]``, length ``3 * s``."""
    return np.concatenate([_embed_cached(t, cfg) for t in render_history_item(item)])


def embed_history(history: UserHistory, cfg: EmbedderConfig) -> ItemEmbeddingMatrix:
    if not history.items:
        return ItemEmbeddingMatrix(np.zeros((0, 3 * cfg.s)), cfg.s)
    return ItemEmbeddingMatrix(np.stack([embed_history_item(it, cfg) for it in history.items]), cfg.s)


def save_embedding_file(path, matrix: np.ndarray) -> None:
    matrix = np.asarray(matrix, dtype=np.float64)
    lines = [f"{FILE_MAGIC} {FILE_VERSION} p={matrix.shape[0]} dim={matrix.shape[1]}"]
    lines += [" ".join(repr(float(x)) for x in row) for row in matrix]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


_HEADER_RE = re.compile(rf"^{FILE_MAGIC} {FILE_VERSION} p=(\d+) dim=(\d+)$")


def load_embedding_file(path, expected_p: int | None = None, expected_3s: int | None = None) -> ItemEmbeddingMatrix:
    """Read a ``UEMEMB v1`` file; segment norms are not validated for imports."""
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise EmbeddingHeaderError(f"{path}: empty file")
    m = _HEADER_RE.match(lines[0])
    if not m:
        raise EmbeddingHeaderError(f"{path}: malformed header {lines[0]!r}")
    p, dim = int(m.group(1)), int(m.group(2))
    if expected_p is not None and p != expected_p:
        raise EmbeddingShapeError(f"{path}: header p={p}, expected {expected_p}")
    if expected_3s is not None and dim != expected_3s:
        raise EmbeddingShapeError(f"{path}: header dim={dim}, expected {expected_3s}")
    if dim % 3:
        raise EmbeddingShapeError(f"{path}: dim={dim} is not a multiple of 3")
    body = lines[1:]
    if len(body) != p:
        raise EmbeddingShapeError(f"{path}: header says p={p} but found {len(body)} rows")
    data = np.zeros((p, dim))
    for i, line in enumerate(body):
        fields = line.split(" ")
        if len(fields) != dim:
            raise EmbeddingShapeError(f"{path}:{i + 2}: expected {dim} values, got {len(fields)}")
        try:
            data[i] = [float(x) for x in fields]
        except ValueError:
            raise EmbeddingValueError(f"{path}:{i + 2}: unparseable value") from None
    if not np.all(np.isfinite(data)):
        raise EmbeddingValueError(f"{path}: non-finite entries")
    return ItemEmbeddingMatrix(data, dim // 3, imported=True)
