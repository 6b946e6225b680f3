"""Training with simulated maturation.

Each training sequence gets its last K positions corrupted toward embryo
state: position with level alpha becomes alpha * e + c * (1 - alpha) * R * u
for a random unit direction u, so alpha=1 is the clean embedding and alpha=0
matches the low-norm embryos used at inference. The model predicts the next
position's clean embedding from the corrupted sequence, and the loss at each
predicted position is weighted by (1 - alpha) of that position: fully clean
positions contribute nothing, the most immature positions the most.

The objective per position is squared distance to the target embedding plus
a contrastive term that scores the target row against sampled negatives
under scaled cosine similarity; the contrastive pressure is what keeps
predictions anchored to token identities instead of averaging into the
mean of plausible continuations.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
import torch

from .backbone import Backbone, MaskKind
from .corpus import BOS_ID, batches, save_checkpoint
from .embeddings import EmbeddingTable
from .maturation import alpha_profile

__all__ = [
    "LossConfig",
    "CorruptionPlan",
    "TrainConfig",
    "TrainingDiverged",
    "corrupt_suffix",
    "mse_loss",
    "infonce_loss",
    "sample_negatives",
    "batch_loss",
    "train",
    "table_tensor",
]

# Per-sequence training profiles draw alpha_max uniformly from this range,
# exposing the model to both shallow and deep maturation states.
ALPHA_MAX_RANGE = (0.5, 1.0)


@dataclass(frozen=True)
class LossConfig:
    contrast_weight: float = 0.5  # weight of the contrastive term
    temperature: float = 1.0
    logit_scale: float = 20.0
    negatives: int = 16
    weight_by_alpha: bool = True

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.negatives < 1:
            raise ValueError(f"negatives must be >= 1, got {self.negatives}")
        if self.contrast_weight < 0:
            raise ValueError(f"contrast_weight must be >= 0, got {self.contrast_weight}")


@dataclass
class CorruptionPlan:
    """How to corrupt one sequence's suffix: target noise levels + noise size."""

    suffix_len: int
    alphas: np.ndarray  # [suffix_len] in [0, 1]
    noise_scale: float = 0.01  # embryo-norm fraction of the embedding radius

    def __post_init__(self) -> None:
        self.alphas = np.asarray(self.alphas, dtype=np.float64)
        if self.alphas.shape != (self.suffix_len,):
            raise ValueError("plan alphas must have length suffix_len")
        if (self.alphas < 0).any() or (self.alphas > 1).any():
            raise ValueError("plan alphas must lie in [0, 1]")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    grad_accum: int = 1
    lr: float = 3e-4
    lr_schedule: str = "cosine"  # "cosine" | "constant"
    seed: int = 0
    seq_len: int = 64
    checkpoint_every: int = 500
    finetune_embeddings: bool = False
    tail_only_fraction: float = 0.1  # share of batches trained with the tail-only mask

    def __post_init__(self) -> None:
        for name in ("steps", "batch_size", "grad_accum", "seq_len", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if not 0.0 <= self.tail_only_fraction <= 1.0:
            raise ValueError("tail_only_fraction must be in [0, 1]")


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite."""


def _suffix_noise(
    plan: CorruptionPlan, dim: int, radius: float, rng: np.random.Generator
) -> np.ndarray:
    """Additive noise for the suffix: c * (1 - alpha) * R * u per position."""
    dirs = rng.standard_normal((plan.suffix_len, dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return plan.noise_scale * (1.0 - plan.alphas)[:, None] * radius * dirs


def corrupt_suffix(
    embeddings: np.ndarray,
    plan: CorruptionPlan,
    rng: np.random.Generator,
    radius: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Corrupt the last `plan.suffix_len` positions of a clean sequence.

    Returns (corrupted vectors, per-position alphas). The prefix keeps
    alpha=1 and its exact embeddings.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    t = emb.shape[0]
    if plan.suffix_len > t:
        raise ValueError(f"suffix_len={plan.suffix_len} exceeds sequence length {t}")
    alphas = np.ones(t)
    alphas[t - plan.suffix_len :] = plan.alphas
    noise = _suffix_noise(plan, emb.shape[1], radius, rng)
    corrupted = emb.copy()
    suffix = slice(t - plan.suffix_len, t)
    corrupted[suffix] = plan.alphas[:, None] * emb[suffix] + noise
    return corrupted, alphas


def table_tensor(table: EmbeddingTable | torch.Tensor) -> torch.Tensor:
    if isinstance(table, torch.Tensor):
        return table
    return torch.from_numpy(table.vectors.copy())


def mse_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Squared Euclidean distance, summed over vector components."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    return ((pred - target) ** 2).sum(dim=-1)


def _contrastive_logits(
    pred: torch.Tensor, candidate_vecs: torch.Tensor, config: LossConfig
) -> torch.Tensor:
    """Scaled cosine similarities; candidates axis second-to-last of vecs."""
    pred_n = pred / pred.norm(dim=-1, keepdim=True)
    cand_n = candidate_vecs / candidate_vecs.norm(dim=-1, keepdim=True)
    sims = (cand_n * pred_n.unsqueeze(-2)).sum(dim=-1)
    return sims * (config.logit_scale / config.temperature)


def infonce_loss(
    pred: torch.Tensor,
    positive: int,
    negatives: np.ndarray | list[int],
    table: EmbeddingTable | torch.Tensor,
    config: LossConfig,
) -> torch.Tensor:
    """-log softmax probability of the positive among positive + negatives."""
    negs = np.asarray(negatives, dtype=np.int64)
    if (negs == positive).any():
        raise ValueError(f"positive id {positive} appears among the negatives")
    e = table_tensor(table).to(pred.dtype)
    if positive < 0 or positive >= e.shape[0] or (negs < 0).any() or (negs >= e.shape[0]).any():
        raise ValueError("candidate id out of vocabulary range")
    ids = torch.from_numpy(np.concatenate([[positive], negs]))
    logits = _contrastive_logits(pred, e[ids], config)
    return -torch.log_softmax(logits, dim=-1)[0]


def sample_negatives(
    positive: int, vocab_size: int, n: int, rng: np.random.Generator
) -> np.ndarray:
    """n distinct ids uniform over the vocabulary minus the positive."""
    if n > vocab_size - 1:
        raise ValueError(f"cannot draw {n} negatives from vocab of {vocab_size}")
    draws = rng.choice(vocab_size - 1, size=n, replace=False)
    draws[draws >= positive] += 1
    return draws.astype(np.int64)


def batch_loss(
    outputs: torch.Tensor,
    target_ids: torch.Tensor,
    alphas: torch.Tensor,
    negatives: torch.Tensor,
    table: EmbeddingTable | torch.Tensor,
    config: LossConfig,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Mean over positions of (1 - alpha) * (mse + lambda * infonce).

    Positions whose alpha is exactly 1 contribute nothing, gradient
    included. Returns the scalar loss and a detached breakdown with the
    weighted regression and contrastive means.
    """
    p = outputs.shape[0]
    if not (target_ids.shape[0] == alphas.shape[0] == negatives.shape[0] == p):
        raise ValueError(
            "misaligned batch: "
            f"outputs {p}, targets {target_ids.shape[0]}, alphas {alphas.shape[0]}, "
            f"negatives {negatives.shape[0]}"
        )
    if bool((negatives == target_ids.unsqueeze(1)).any()):
        raise ValueError("a target id appears among its own negatives")
    e = table_tensor(table).to(outputs.dtype)
    targets = e[target_ids]
    reg = mse_loss(outputs, targets)
    cand_ids = torch.cat([target_ids.unsqueeze(1), negatives], dim=1)  # [P, 1+N]
    logits = _contrastive_logits(outputs, e[cand_ids], config)
    nce = -torch.log_softmax(logits, dim=-1)[:, 0]
    if config.weight_by_alpha:
        w = (1.0 - alphas).to(outputs.dtype)
    else:
        w = torch.ones_like(alphas, dtype=outputs.dtype)
    total = (w * (reg + config.contrast_weight * nce)).mean()
    parts = {
        "reg": float((w * reg).mean().detach()),
        "nce": float((w * nce).mean().detach()),
    }
    return total, parts


def _lr_at(step: int, cfg: TrainConfig) -> float:
    if cfg.lr_schedule == "constant":
        return cfg.lr
    min_lr = cfg.lr / 10.0
    progress = step / max(1, cfg.steps)
    return min_lr + 0.5 * (cfg.lr - min_lr) * (1.0 + math.cos(math.pi * progress))


def _assemble_batch(
    ids: np.ndarray,
    emb: torch.Tensor,
    radius: float,
    tail_len: int,
    noise_scale: float,
    rng: np.random.Generator,
) -> tuple[torch.Tensor, torch.Tensor, np.ndarray]:
    """BOS-prefix a batch of id rows and corrupt each row's suffix.

    Returns (corrupted vectors [B,T,d], alphas [B,T] float32, padded ids
    [B,T]). Differentiable w.r.t. `emb` so embedding fine-tuning sees the
    corruption path.
    """
    b, s = ids.shape
    full = np.concatenate([np.full((b, 1), BOS_ID, dtype=np.int64), ids], axis=1)
    t = s + 1
    alphas = np.ones((b, t))
    noise = np.zeros((b, t, emb.shape[1]))
    for r in range(b):
        a_max = rng.uniform(*ALPHA_MAX_RANGE)
        plan = CorruptionPlan(
            suffix_len=tail_len,
            alphas=alpha_profile(tail_len, a_max),
            noise_scale=noise_scale,
        )
        alphas[r, t - tail_len :] = plan.alphas
        noise[r, t - tail_len :] = _suffix_noise(plan, emb.shape[1], radius, rng)
    ids_t = torch.from_numpy(full)
    alphas_t = torch.from_numpy(alphas).to(emb.dtype)
    vectors = alphas_t.unsqueeze(-1) * emb[ids_t] + torch.from_numpy(noise).to(emb.dtype)
    return vectors, alphas_t, full


def train(
    corpus: np.ndarray | Iterator[np.ndarray],
    model: Backbone,
    table: EmbeddingTable,
    train_cfg: TrainConfig,
    loss_cfg: LossConfig,
    tail_len: int,
    embryo_scale: float = 0.01,
    out_dir: str | Path | None = None,
    config_snapshot: dict | None = None,
    log_every: int = 50,
    log_fn: Callable[[str], None] | None = None,
) -> tuple[Backbone, EmbeddingTable, list[dict]]:
    """Run the optimization loop; returns (model, table, logged history).

    The table is returned unchanged unless embedding fine-tuning is on, in
    which case a new table (rows re-normalized to the radius after every
    update) replaces it. Checkpoints land in out_dir as ckpt-<step>.tmck
    plus final.tmck; a key=value line per `log_every` steps goes to
    out_dir/train.log and the returned history.
    """
    if isinstance(corpus, np.ndarray):
        if corpus.size == 0:
            raise ValueError("corpus is empty")
        stream = batches(corpus, train_cfg.seq_len, train_cfg.batch_size, train_cfg.seed)
    else:
        stream = iter(corpus)
    rng = np.random.default_rng([train_cfg.seed, 0xA11CE])
    radius = table.radius
    emb_param = torch.nn.Parameter(
        table_tensor(table).clone(), requires_grad=train_cfg.finetune_embeddings
    )
    params = list(model.parameters())
    if train_cfg.finetune_embeddings:
        params = params + [emb_param]
    opt = torch.optim.AdamW(params, lr=train_cfg.lr, weight_decay=0.01)

    out_path = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        log_file = (out_path / "train.log").open("a")

    def emit(record: dict) -> None:
        line = " ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in record.items())
        if log_file is not None:
            log_file.write(line + "\n")
            log_file.flush()
        if log_fn is not None:
            log_fn(line)

    def checkpoint_tensors() -> dict[str, np.ndarray]:
        tensors = {
            f"backbone.{name}": p.detach().numpy()
            for name, p in model.named_parameters()
        }
        tensors["embeddings"] = emb_param.detach().numpy()
        return tensors

    def write_checkpoint(name: str, step: int) -> None:
        if out_path is None:
            return
        save_checkpoint(checkpoint_tensors(), config_snapshot or {}, step, out_path / name)

    history: list[dict] = []
    model.train()
    started = time.monotonic()
    try:
        for step in range(train_cfg.steps):
            lr = _lr_at(step, train_cfg)
            for group in opt.param_groups:
                group["lr"] = lr
            opt.zero_grad(set_to_none=True)
            step_loss = step_reg = step_nce = 0.0
            for _ in range(train_cfg.grad_accum):
                ids = np.asarray(next(stream))
                mask = (
                    MaskKind.TAIL_ONLY
                    if rng.random() < train_cfg.tail_only_fraction
                    else MaskKind.FULL_CAUSAL
                )
                vectors, alphas_t, full_ids = _assemble_batch(
                    ids, emb_param, radius, tail_len, embryo_scale, rng
                )
                out = model(vectors, alphas_t, tail_len, mask)
                b, t, d = out.shape
                preds = out[:, :-1].reshape(-1, d)
                target_ids = torch.from_numpy(full_ids[:, 1:].reshape(-1))
                pos_alphas = alphas_t[:, 1:].reshape(-1)
                negs = np.stack(
                    [
                        sample_negatives(int(tid), emb_param.shape[0], loss_cfg.negatives, rng)
                        for tid in target_ids.numpy()
                    ]
                )
                loss, parts = batch_loss(
                    preds,
                    target_ids,
                    pos_alphas,
                    torch.from_numpy(negs),
                    emb_param,
                    loss_cfg,
                )
                if not torch.isfinite(loss):
                    raise TrainingDiverged(
                        f"non-finite loss at step {step}: total={float(loss.detach())} parts={parts}"
                    )
                (loss / train_cfg.grad_accum).backward()
                step_loss += float(loss.detach()) / train_cfg.grad_accum
                step_reg += parts["reg"] / train_cfg.grad_accum
                step_nce += parts["nce"] / train_cfg.grad_accum
            opt.step()
            if train_cfg.finetune_embeddings and train_cfg.lr > 0:
                with torch.no_grad():
                    norms = emb_param.norm(dim=1, keepdim=True)
                    emb_param.mul_(radius / norms)
            if (step + 1) % log_every == 0 or step == 0:
                record = {
                    "step": step + 1,
                    "loss": step_loss,
                    "reg": step_reg,
                    "nce": step_nce,
                    "lr": lr,
                }
                history.append(record)
                emit(record)
            if (step + 1) % train_cfg.checkpoint_every == 0:
                write_checkpoint(f"ckpt-{step + 1:06d}.tmck", step + 1)
        write_checkpoint("final.tmck", train_cfg.steps)
        emit(
            {
                "step": train_cfg.steps,
                "done": 1,
                "seconds": time.monotonic() - started,
            }
        )
    finally:
        if log_file is not None:
            log_file.close()
    model.eval()
    new_table = EmbeddingTable(vectors=emb_param.detach().numpy(), radius=radius)
    return model, new_table, history
