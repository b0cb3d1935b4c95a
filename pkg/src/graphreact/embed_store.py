"""Dense per-node embeddings with exact cosine top-M retrieval."""
from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

HEADER_RE = re.compile(rb"^EMB v1 rows=(\d+) dim=(\d+) dtype=f32$")


class EmbeddingFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    """Row-major float32 matrix, one row per node."""

    data: np.ndarray
    _f64: np.ndarray = field(init=False, repr=False)
    _norms: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        arr = np.array(self.data, dtype=np.float32, order="C", copy=True)
        if arr.ndim != 2:
            raise EmbeddingFormatError(f"embedding matrix must be 2-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise EmbeddingFormatError("embedding matrix contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        # float64 copies for retrieval scoring
        f64 = arr.astype(np.float64)
        norms = np.sqrt(np.einsum("ij,ij->i", f64, f64))
        f64.setflags(write=False)
        norms.setflags(write=False)
        object.__setattr__(self, "_f64", f64)
        object.__setattr__(self, "_norms", norms)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def row(self, v: int) -> np.ndarray:
        return self.data[v]


def cosine(a: Sequence[float], b: Sequence[float]) -> float:
    """Cosine similarity; 0.0 when either vector has zero norm."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = math.sqrt(float(a @ a))
    nb = math.sqrt(float(b @ b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b) / (na * nb)


def cosine_scores(e: EmbeddingMatrix, v: int) -> np.ndarray:
    """Cosine of row ``v`` against every row (including itself)."""
    x = e._f64
    q = x[v]
    dots = x @ q
    norms = e._norms
    denom = norms * norms[v]
    with np.errstate(invalid="ignore", divide="ignore"):
        scores = np.where(denom > 0, dots / np.where(denom > 0, denom, 1.0), 0.0)
    return scores


def top_m_similar(e: EmbeddingMatrix, v: int, m: int) -> list[tuple[int, float]]:
    """The ``m`` rows most cosine-similar to row ``v``, excluding ``v``.

    Exact brute force. Ordered by score descending, ties by ascending id.
    """
    if m <= 0 or e.rows <= 1:
        return []
    scores = cosine_scores(e, v)
    ids = np.arange(e.rows)
    mask = ids != v
    ids, scores = ids[mask], scores[mask]
    # lexsort uses the last key as primary
    order = np.lexsort((ids, -scores))[:m]
    return [(int(ids[i]), float(scores[i])) for i in order]


def save_embeddings(e: EmbeddingMatrix, path: str | Path) -> None:
    header = f"EMB v1 rows={e.rows} dim={e.dim} dtype=f32\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(e.data.astype("<f4").tobytes(order="C"))


def load_embeddings(path: str | Path) -> EmbeddingMatrix:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise EmbeddingFormatError(f"{path}: missing header line")
    m = HEADER_RE.match(raw[:nl])
    if not m:
        raise EmbeddingFormatError(f"{path}: bad header {raw[:nl][:80]!r}")
    rows, dim = int(m.group(1)), int(m.group(2))
    payload = raw[nl + 1 :]
    expected = rows * dim * 4
    if len(payload) != expected:
        raise EmbeddingFormatError(
            f"{path}: size mismatch, header says {rows}x{dim} ({expected} bytes), payload has {len(payload)}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(rows, dim)
    if not np.all(np.isfinite(data)):
        raise EmbeddingFormatError(f"{path}: non-finite value in payload")
    return EmbeddingMatrix(data)


def _token_vector(token: str, dim: int) -> np.ndarray:
    seed = int.from_bytes(hashlib.sha256(token.encode("utf-8")).digest()[:8], "little")
    return np.random.default_rng(seed).standard_normal(dim)


def hashed_bow_embeddings(texts: Sequence[str], dim: int) -> EmbeddingMatrix:
    """Unit-length mean of per-token gaussian vectors seeded by the token's hash.

    A stand-in text encoder: deterministic across machines, no model download.
    Empty texts map to the zero vector.
    """
    if dim < 1:
        raise ValueError("dim must be positive")
    cache: dict[str, np.ndarray] = {}
    out = np.zeros((len(texts), dim))
    for i, text in enumerate(texts):
        toks = text.lower().split()
        if not toks:
            continue
        for t in toks:
            if t not in cache:
                cache[t] = _token_vector(t, dim)
            out[i] += cache[t]
        norm = np.linalg.norm(out[i])
        if norm > 0:
            out[i] /= norm
    return EmbeddingMatrix(out)
