"""Vocabulary embeddings on a fixed-radius sphere.

The embedding table is the only bridge between discrete token ids and the
continuous vectors the rest of the system works with. Rows are kept at a
fixed Euclidean norm R so that inner-product ranking and cosine ranking
agree, and so that distances in embedding space are comparable across the
vocabulary. Commitment (continuous vector -> token id) is an argmax of
inner products over all rows; no approximate index is used.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "EmbeddingTable",
    "CandidateRanking",
    "normalize_to_sphere",
    "random_table",
    "commit",
    "top_k_candidates",
    "implicit_entropy",
]

# Relative slack allowed on row norms (float32 storage).
_NORM_RTOL = 1e-5


@dataclass(frozen=True)
class EmbeddingTable:
    """Immutable |V| x d matrix with every row at norm `radius`."""

    vectors: np.ndarray
    radius: float

    def __post_init__(self) -> None:
        v = np.asarray(self.vectors)
        if v.ndim != 2:
            raise ValueError(f"embedding matrix must be 2-D, got shape {v.shape}")
        if v.shape[0] < 2 or v.shape[1] < 2:
            raise ValueError(f"need at least 2 tokens and 2 dims, got shape {v.shape}")
        if not np.isfinite(v).all():
            raise ValueError("embedding matrix contains non-finite entries")
        if self.radius <= 0:
            raise ValueError(f"radius must be positive, got {self.radius}")
        norms = np.linalg.norm(v.astype(np.float64), axis=1)
        bad = np.abs(norms - self.radius) > _NORM_RTOL * self.radius
        if bad.any():
            idx = int(np.argmax(bad))
            raise ValueError(
                f"row {idx} has norm {norms[idx]:.6g}, expected {self.radius:.6g}"
            )
        object.__setattr__(self, "vectors", v.astype(np.float32, copy=True))
        self.vectors.setflags(write=False)

    @property
    def vocab_size(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def row(self, token_id: int) -> np.ndarray:
        """Embedding of one token as float64."""
        if not 0 <= token_id < self.vocab_size:
            raise ValueError(f"token id {token_id} out of range [0, {self.vocab_size})")
        return self.vectors[token_id].astype(np.float64)

    def as_float64(self) -> np.ndarray:
        return self.vectors.astype(np.float64)


@dataclass(frozen=True)
class CandidateRanking:
    """Token ids ranked by inner product with a query vector, best first."""

    token_ids: list[int] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)


def normalize_to_sphere(vectors: np.ndarray, radius: float) -> EmbeddingTable:
    """Rescale every row of `vectors` to norm `radius`, preserving direction.

    Raises ValueError naming the row index if any row has zero norm.
    """
    v = np.asarray(vectors, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {v.shape}")
    norms = np.linalg.norm(v, axis=1)
    if (norms == 0.0).any():
        idx = int(np.argmax(norms == 0.0))
        raise ValueError(f"row {idx} has zero norm and no direction to preserve")
    scaled = v * (radius / norms)[:, None]
    return EmbeddingTable(vectors=scaled, radius=radius)


def random_table(
    vocab_size: int, dim: int, radius: float, rng: np.random.Generator
) -> EmbeddingTable:
    """Embeddings with uniformly random directions at norm `radius`."""
    raw = rng.standard_normal((vocab_size, dim))
    return normalize_to_sphere(raw, radius)


def _check_query(z: np.ndarray, table: EmbeddingTable) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    if z.shape[0] != table.dim:
        raise ValueError(f"query has dim {z.shape[0]}, table has dim {table.dim}")
    finite = np.isfinite(z)
    if not finite.all():
        idx = int(np.argmax(~finite))
        raise ValueError(f"query component {idx} is non-finite ({z[idx]})")
    return z


def commit(z: np.ndarray, table: EmbeddingTable) -> int:
    """Discretize a vector: argmax over inner products with all rows.

    Ties break toward the lowest token id, which keeps generations
    reproducible bit-for-bit.
    """
    z = _check_query(z, table)
    scores = table.as_float64() @ z
    return int(np.argmax(scores))  # argmax returns the first (lowest) max index


def top_k_candidates(z: np.ndarray, table: EmbeddingTable, k: int) -> CandidateRanking:
    """Top-k token ids by inner product, scores descending.

    The first entry always agrees with commit(); equal scores are ordered
    by ascending token id.
    """
    if not 1 <= k <= table.vocab_size:
        raise ValueError(f"k={k} out of range [1, {table.vocab_size}]")
    z = _check_query(z, table)
    scores = table.as_float64() @ z
    order = np.argsort(-scores, kind="stable")[:k]
    return CandidateRanking(
        token_ids=[int(i) for i in order],
        scores=[float(scores[i]) for i in order],
    )


def implicit_entropy(z: np.ndarray, table: EmbeddingTable, temperature: float = 1.0) -> float:
    """Entropy (nats) of softmax(cos(z, e_i) / temperature) over the vocabulary.

    This is the instrument used to watch uncertainty during maturation: it
    reads the whole similarity profile of a tail vector, not just its
    nearest row. Always in [0, ln |V|].
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = _check_query(z, table)
    norm = np.linalg.norm(z)
    if norm == 0.0:
        raise ValueError("zero vector has no direction; cosine entropy undefined")
    cos = (table.as_float64() @ z) / (norm * table.radius)
    logits = cos / temperature
    logits -= logits.max()
    p = np.exp(logits)
    p /= p.sum()
    nz = p > 0.0  # exp can underflow at extreme temperatures; lim x*ln(x) = 0
    return float(-np.sum(p[nz] * np.log(p[nz])))
