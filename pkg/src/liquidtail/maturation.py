"""The liquid tail: delayed commitment via continuous vector maturation.

A generation session holds a committed prefix (vectors pinned to embedding
rows) followed by K uncommitted vectors, each with a noise level alpha that
fades linearly from alpha_max at the front to alpha_max/K at the back. One
step of generation runs the backbone over the whole window (a conditional
pass with the full causal mask and, when the guidance scale is not 1, an
unconditional pass with the tail-only mask), blends the two predictions,
moves every tail vector a fraction alpha toward its prediction, commits the
front vector by projection onto the vocabulary, and appends a fresh low-norm
embryo at the back. Commitment is irreversible; all stochasticity enters
through embryo initialization.

Tail state is kept in float64 so that the geometric convergence of the
update rule is observable to tight tolerances; the backbone runs in its own
(float32) precision and predictions are widened at the boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

from .backbone import Backbone, MaskKind
from .embeddings import EmbeddingTable, commit

__all__ = [
    "MaturationConfig",
    "TailState",
    "GenerationSession",
    "alpha_profile",
    "init_tail",
    "maturation_step",
    "cfg_combine",
    "new_session",
    "step_once",
    "generate",
    "intervene_noise",
    "intervene_ema",
    "restore_session",
]


@dataclass(frozen=True)
class MaturationConfig:
    """Knobs of the generation loop."""

    tail_len: int = 16
    alpha_max: float = 0.9
    embryo_scale: float = 0.01  # embryo norm as a fraction of the embedding radius
    guidance: float = 1.0
    max_tokens: int = 80
    stop_token: int | None = None

    def __post_init__(self) -> None:
        if self.tail_len < 1:
            raise ValueError(f"tail_len must be >= 1, got {self.tail_len}")
        if not 0.0 < self.alpha_max <= 1.0:
            raise ValueError(f"alpha_max must be in (0, 1], got {self.alpha_max}")
        if not 0.0 < self.embryo_scale < 1.0:
            raise ValueError(f"embryo_scale must be in (0, 1), got {self.embryo_scale}")
        if self.guidance < 0.0:
            raise ValueError(f"guidance must be >= 0, got {self.guidance}")
        if self.max_tokens < 0:
            raise ValueError(f"max_tokens must be >= 0, got {self.max_tokens}")


@dataclass
class TailState:
    """K uncommitted vectors (oldest first) and their noise levels."""

    vectors: np.ndarray  # [K, d] float64
    alphas: np.ndarray  # [K] float64, non-increasing front to back

    def __post_init__(self) -> None:
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.alphas = np.asarray(self.alphas, dtype=np.float64)
        if self.vectors.ndim != 2 or self.alphas.shape != (self.vectors.shape[0],):
            raise ValueError("tail vectors must be [K, d] with K alphas")
        if (self.alphas < 0).any() or (self.alphas > 1).any():
            raise ValueError("tail alphas must lie in [0, 1]")
        if (np.diff(self.alphas) > 1e-12).any():
            raise ValueError("tail alphas must be non-increasing from front to back")

    def __len__(self) -> int:
        return self.vectors.shape[0]


@dataclass
class GenerationSession:
    """Single-owner state of one generation: prefix + tail + RNG."""

    committed_ids: list[int]
    committed_vectors: np.ndarray  # [n, d] float64, always rows of the table
    tail: TailState
    config: MaturationConfig
    seed: int
    rng: np.random.Generator
    steps: int = 0
    terminated: bool = False
    trace: list[dict] | None = None

    def enable_trace(self) -> None:
        if self.trace is None:
            self.trace = []

    def snapshot(self) -> dict:
        """JSON-serializable snapshot (restorable via `restore_session`)."""
        return {
            "committed_ids": list(self.committed_ids),
            "tail_vectors": self.tail.vectors.tolist(),
            "alphas": self.tail.alphas.tolist(),
            "config": {
                "tail_len": self.config.tail_len,
                "alpha_max": self.config.alpha_max,
                "embryo_scale": self.config.embryo_scale,
                "guidance": self.config.guidance,
                "max_tokens": self.config.max_tokens,
                "stop_token": self.config.stop_token,
            },
            "seed": self.seed,
            "rng_state": self.rng.bit_generator.state,
            "steps": self.steps,
            "terminated": self.terminated,
        }


def alpha_profile(tail_len: int, alpha_max: float) -> np.ndarray:
    """Linear fade alpha_max * (1 - j/K) for tail slots j = 0..K-1."""
    if tail_len < 1:
        raise ValueError(f"tail_len must be >= 1, got {tail_len}")
    j = np.arange(tail_len, dtype=np.float64)
    return alpha_max * (1.0 - j / tail_len)


def _unit_direction(dim: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal(dim)
    n = np.linalg.norm(v)
    while n == 0.0:  # essentially impossible, but keeps the norm contract exact
        v = rng.standard_normal(dim)
        n = np.linalg.norm(v)
    return v / n


def init_tail(
    config: MaturationConfig, dim: int, radius: float, rng: np.random.Generator
) -> TailState:
    """Fresh tail: K embryos of norm embryo_scale * radius, faded alphas."""
    k = config.tail_len
    vectors = np.stack([_unit_direction(dim, rng) for _ in range(k)])
    vectors *= config.embryo_scale * radius
    return TailState(vectors=vectors, alphas=alpha_profile(k, config.alpha_max))


def maturation_step(tail: TailState, predictions: np.ndarray) -> TailState:
    """Move each tail vector a fraction alpha toward its prediction."""
    preds = np.asarray(predictions, dtype=np.float64)
    if preds.shape != tail.vectors.shape:
        raise ValueError(f"predictions shape {preds.shape} != tail {tail.vectors.shape}")
    if not np.isfinite(preds).all():
        raise ValueError("non-finite prediction in maturation step")
    moved = tail.vectors + tail.alphas[:, None] * (preds - tail.vectors)
    return TailState(vectors=moved, alphas=tail.alphas.copy())


def cfg_combine(z_cond: np.ndarray, z_uncond: np.ndarray, s: float) -> np.ndarray:
    """Guided prediction: uncond + s * (cond - uncond).

    s=1 and s=0 return exact copies of the corresponding branch so the
    identities hold bitwise, not just to round-off.
    """
    z_cond = np.asarray(z_cond, dtype=np.float64)
    z_uncond = np.asarray(z_uncond, dtype=np.float64)
    if z_cond.shape != z_uncond.shape:
        raise ValueError(f"shape mismatch: cond {z_cond.shape} vs uncond {z_uncond.shape}")
    if s == 1.0:
        return z_cond.copy()
    if s == 0.0:
        return z_uncond.copy()
    return z_uncond + s * (z_cond - z_uncond)


def new_session(
    prompt_ids: Sequence[int],
    table: EmbeddingTable,
    config: MaturationConfig,
    seed: int,
    trace: bool = False,
) -> GenerationSession:
    """Session with the prompt committed and a fresh random tail."""
    ids = [int(i) for i in prompt_ids]
    if not ids:
        raise ValueError("prompt must contain at least one token")
    rng = np.random.default_rng(seed)
    vectors = np.stack([table.row(i) for i in ids])
    session = GenerationSession(
        committed_ids=ids,
        committed_vectors=vectors,
        tail=init_tail(config, table.dim, table.radius, rng),
        config=config,
        seed=seed,
        rng=rng,
    )
    if trace:
        session.enable_trace()
    return session


def _predict_tail(
    session: GenerationSession, model: Backbone, mask: MaskKind
) -> np.ndarray:
    """Backbone predictions for the K tail slots under the given mask.

    The prediction for tail slot j is the model output at the preceding
    position (next-step convention), so slot 0 is predicted from the last
    committed position.
    """
    k = len(session.tail)
    max_committed = model.config.max_seq - k
    if max_committed < 1:
        raise ValueError(
            f"model max_seq={model.config.max_seq} leaves no room for a length-{k} tail"
        )
    window = session.committed_vectors[-max_committed:]
    c = window.shape[0]
    x = np.concatenate([window, session.tail.vectors], axis=0)
    alphas = np.concatenate([np.ones(c), session.tail.alphas])
    with torch.no_grad():
        out = model(
            torch.from_numpy(x).to(torch.float32),
            torch.from_numpy(alphas).to(torch.float32),
            k,
            mask,
        )
    return out.numpy().astype(np.float64)[c - 1 : c - 1 + k]


def step_once(
    session: GenerationSession, model: Backbone, table: EmbeddingTable
) -> int:
    """One full iteration: predict, guide, mature, commit, spawn an embryo.

    Mutates the session in place and returns the newly committed token id.
    """
    if session.terminated:
        raise RuntimeError("session is terminated; no further commitments possible")
    if len(session.committed_ids) < 1:
        raise ValueError("session needs a non-empty committed prefix")
    s = session.config.guidance
    preds_cond = _predict_tail(session, model, MaskKind.FULL_CAUSAL)
    if s == 1.0:
        guided = cfg_combine(preds_cond, preds_cond, 1.0)
    else:
        preds_uncond = _predict_tail(session, model, MaskKind.TAIL_ONLY)
        guided = cfg_combine(preds_cond, preds_uncond, s)
    session.tail = maturation_step(session.tail, guided)

    token = commit(session.tail.vectors[0], table)
    if session.trace is not None:
        session.trace.append(
            {
                "step": session.steps,
                "committed_before": len(session.committed_ids),
                "tail_vectors": session.tail.vectors.copy(),
                "alphas": session.tail.alphas.copy(),
                "committed_id": token,
            }
        )
    session.committed_ids.append(token)
    session.committed_vectors = np.concatenate(
        [session.committed_vectors, table.row(token)[None, :]], axis=0
    )
    embryo = _unit_direction(table.dim, session.rng)
    embryo *= session.config.embryo_scale * table.radius
    session.tail = TailState(
        vectors=np.concatenate([session.tail.vectors[1:], embryo[None, :]], axis=0),
        alphas=alpha_profile(len(session.tail), session.config.alpha_max),
    )
    session.steps += 1
    if session.config.stop_token is not None and token == session.config.stop_token:
        session.terminated = True
    return token


def generate(
    session: GenerationSession,
    model: Backbone,
    table: EmbeddingTable,
    max_tokens: int | None = None,
) -> list[int]:
    """Commit tokens until the stop token or the length budget; returns them."""
    if len(session.committed_ids) < 1:
        raise ValueError("prompt must be non-empty")
    budget = session.config.max_tokens if max_tokens is None else max_tokens
    out: list[int] = []
    for _ in range(budget):
        if session.terminated:
            break
        out.append(step_once(session, model, table))
    return out


def intervene_noise(
    session: GenerationSession,
    magnitude: float,
    positions: Iterable[int],
    rng: np.random.Generator | None = None,
) -> GenerationSession:
    """Displace selected tail vectors by a random vector of exact `magnitude`.

    Committed tokens are untouched; alphas are left as they are. Draws come
    from the session RNG unless one is supplied.
    """
    if magnitude < 0:
        raise ValueError(f"magnitude must be >= 0, got {magnitude}")
    rng = session.rng if rng is None else rng
    k = len(session.tail)
    pos = sorted({int(p) for p in positions})
    for p in pos:
        if not 0 <= p < k:
            raise ValueError(f"tail position {p} out of range [0, {k})")
    if magnitude == 0.0:
        return session
    for p in pos:
        session.tail.vectors[p] += magnitude * _unit_direction(
            session.tail.vectors.shape[1], rng
        )
    return session


def intervene_ema(session: GenerationSession, coefficient: float) -> GenerationSession:
    """Smooth the tail front-to-back: m_j = c*m_{j-1} + (1-c)*z_j, m_0 = z_0."""
    if not 0.0 <= coefficient <= 1.0:
        raise ValueError(f"coefficient must be in [0, 1], got {coefficient}")
    if len(session.tail) < 2:
        raise ValueError("EMA smoothing needs a tail of at least 2 positions")
    c = coefficient
    vecs = session.tail.vectors
    smoothed = vecs.copy()
    for j in range(1, vecs.shape[0]):
        smoothed[j] = c * smoothed[j - 1] + (1.0 - c) * vecs[j]
    session.tail = TailState(vectors=smoothed, alphas=session.tail.alphas.copy())
    return session


def restore_session(snapshot: dict, table: EmbeddingTable) -> GenerationSession:
    """Rebuild a session from `GenerationSession.snapshot()` output."""
    cfg = MaturationConfig(**snapshot["config"])
    rng = np.random.default_rng(snapshot["seed"])
    rng.bit_generator.state = snapshot["rng_state"]
    ids = [int(i) for i in snapshot["committed_ids"]]
    if not ids:
        raise ValueError("snapshot has an empty committed prefix")
    return GenerationSession(
        committed_ids=ids,
        committed_vectors=np.stack([table.row(i) for i in ids]),
        tail=TailState(
            vectors=np.asarray(snapshot["tail_vectors"], dtype=np.float64),
            alphas=np.asarray(snapshot["alphas"], dtype=np.float64),
        ),
        config=cfg,
        seed=int(snapshot["seed"]),
        rng=rng,
        steps=int(snapshot["steps"]),
        terminated=bool(snapshot["terminated"]),
    )
