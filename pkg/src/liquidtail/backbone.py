"""Causal transformer operating directly in embedding space.

The network maps a sequence of d-dimensional token vectors to a sequence of
predicted d-dimensional vectors (the prediction at position t is for the
token at t+1). Two conditioning signals distinguish stable context from the
maturing suffix: a per-position noise level alpha in [0, 1] injected
additively through a sinusoidal embedding + MLP, and the tail length K
applied once as feature-wise linear modulation (FiLM) after the alpha
conditioning.

Two attention masks are supported: the ordinary full causal mask, and a
tail-only mask in which suffix positions cannot see committed history (the
"unconditional" pass used for guidance). Outputs are unconstrained vectors;
nothing renormalizes them to the embedding radius.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

__all__ = [
    "BackboneConfig",
    "MaskKind",
    "Backbone",
    "sin_embed_alpha",
    "apply_film",
    "attention_mask",
    "backward",
]

_FREQ_MIN = 1.0
_FREQ_MAX = 1000.0


class MaskKind(enum.Enum):
    FULL_CAUSAL = "full_causal"
    TAIL_ONLY = "tail_only"


@dataclass(frozen=True)
class BackboneConfig:
    dim: int = 64
    hidden: int = 128
    layers: int = 4
    heads: int = 4
    max_seq: int = 256
    k_max: int = 16
    alpha_freqs: int = 16

    def __post_init__(self) -> None:
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden={self.hidden} not divisible by heads={self.heads}")
        if self.k_max < 1:
            raise ValueError(f"k_max must be >= 1, got {self.k_max}")
        for name in ("dim", "hidden", "layers", "heads", "max_seq", "alpha_freqs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


def _frequency_ladder(count: int, device=None, dtype=None) -> torch.Tensor:
    """Geometric ladder of angular frequencies from _FREQ_MIN to _FREQ_MAX."""
    if count == 1:
        return torch.tensor([_FREQ_MIN], device=device, dtype=dtype)
    exponents = torch.linspace(0.0, 1.0, count, device=device, dtype=dtype)
    return _FREQ_MIN * (_FREQ_MAX / _FREQ_MIN) ** exponents


def _sin_embed(alphas: torch.Tensor, frequencies: int) -> torch.Tensor:
    """Interleaved [sin(w_i a), cos(w_i a), ...] over the frequency ladder."""
    if bool((alphas < 0).any()) or bool((alphas > 1).any()):
        raise ValueError("alpha values must lie in [0, 1]")
    freqs = _frequency_ladder(frequencies, device=alphas.device, dtype=alphas.dtype)
    angles = alphas[..., None] * freqs  # [..., F]
    out = torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1)
    return out.reshape(*alphas.shape, 2 * frequencies)


def sin_embed_alpha(alpha: float, frequencies: int) -> np.ndarray:
    """Sinusoidal embedding of a single noise level; length 2*frequencies."""
    t = torch.tensor(float(alpha), dtype=torch.float64)
    return _sin_embed(t, frequencies).numpy()


def apply_film(hidden: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    """(1 + gamma) * hidden + beta, broadcast over positions."""
    width = hidden.shape[-1]
    if gamma.shape[-1] != width or beta.shape[-1] != width:
        raise ValueError(
            f"FiLM width mismatch: hidden {width}, gamma {gamma.shape[-1]}, beta {beta.shape[-1]}"
        )
    return (1.0 + gamma) * hidden + beta


def attention_mask(
    seq_len: int, tail_len: int, kind: MaskKind, device=None
) -> torch.Tensor:
    """Boolean [T, T] matrix, True where position i may attend to j.

    TAIL_ONLY removes the committed history (the first T - tail_len
    positions) from the view of every tail position; committed positions
    keep their ordinary causal view.
    """
    if not 0 <= tail_len <= seq_len:
        raise ValueError(f"tail_len={tail_len} out of range for seq_len={seq_len}")
    allowed = torch.tril(torch.ones(seq_len, seq_len, dtype=torch.bool, device=device))
    if kind is MaskKind.TAIL_ONLY:
        committed = seq_len - tail_len
        allowed[committed:, :committed] = False
    return allowed


class _Attention(nn.Module):
    def __init__(self, hidden: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(hidden, 3 * hidden)
        self.proj = nn.Linear(hidden, hidden)

    def forward(self, x: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
        b, t, c = x.shape
        hd = c // self.heads
        q, k, v = self.qkv(x).split(c, dim=2)
        q = q.view(b, t, self.heads, hd).transpose(1, 2)
        k = k.view(b, t, self.heads, hd).transpose(1, 2)
        v = v.view(b, t, self.heads, hd).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
        att = att.masked_fill(~allowed, float("-inf"))
        att = F.softmax(att, dim=-1)
        y = att @ v
        y = y.transpose(1, 2).contiguous().view(b, t, c)
        return self.proj(y)


class _MLP(nn.Module):
    def __init__(self, hidden: int):
        super().__init__()
        self.fc = nn.Linear(hidden, 4 * hidden)
        self.act = nn.GELU()
        self.proj = nn.Linear(4 * hidden, hidden)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj(self.act(self.fc(x)))


class _Block(nn.Module):
    """Pre-norm residual block."""

    def __init__(self, hidden: int, heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(hidden)
        self.attn = _Attention(hidden, heads)
        self.ln2 = nn.LayerNorm(hidden)
        self.mlp = _MLP(hidden)

    def forward(self, x: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x), allowed)
        x = x + self.mlp(self.ln2(x))
        return x


class Backbone(nn.Module):
    """The vector-to-vector predictor; its parameter set is the model state.

    Construction is deterministic given the numpy Generator: all weights are
    drawn from it, so a seed pins the full initialization independent of
    torch's global RNG.
    """

    def __init__(self, config: BackboneConfig, rng: np.random.Generator | None = None):
        super().__init__()
        self.config = config
        self.in_proj = nn.Linear(config.dim, config.hidden)
        self.pos_emb = nn.Parameter(torch.zeros(config.max_seq, config.hidden))
        self.alpha_mlp = nn.Sequential(
            nn.Linear(2 * config.alpha_freqs, config.hidden),
            nn.GELU(),
            nn.Linear(config.hidden, config.hidden),
        )
        self.film = nn.Embedding(config.k_max, 2 * config.hidden)
        self.blocks = nn.ModuleList(
            _Block(config.hidden, config.heads) for _ in range(config.layers)
        )
        self.ln_f = nn.LayerNorm(config.hidden)
        self.out_proj = nn.Linear(config.hidden, config.dim)
        if rng is not None:
            self.init_weights(rng)

    @torch.no_grad()
    def init_weights(self, rng: np.random.Generator) -> None:
        ln_weights = {
            f"{mod_name}.weight"
            for mod_name, mod in self.named_modules()
            if isinstance(mod, nn.LayerNorm)
        }
        for name, p in self.named_parameters():
            if name == "film.weight":
                p.zero_()  # neutral modulation at init
            elif name.endswith("bias"):
                p.zero_()
            elif name in ln_weights:
                p.fill_(1.0)
            else:
                vals = rng.standard_normal(tuple(p.shape)) * 0.02
                p.copy_(torch.from_numpy(vals).to(p.dtype))

    def forward(
        self,
        vectors: torch.Tensor,
        alphas: torch.Tensor,
        tail_len: int,
        mask: MaskKind = MaskKind.FULL_CAUSAL,
    ) -> torch.Tensor:
        """Predicted vectors, same shape as `vectors` ([T, d] or [B, T, d])."""
        cfg = self.config
        squeeze = vectors.dim() == 2
        if squeeze:
            vectors = vectors.unsqueeze(0)
            alphas = alphas.unsqueeze(0)
        if vectors.dim() != 3 or vectors.shape[-1] != cfg.dim:
            raise ValueError(f"expected [B, T, {cfg.dim}] vectors, got {tuple(vectors.shape)}")
        b, t, _ = vectors.shape
        if t > cfg.max_seq:
            raise ValueError(f"sequence length {t} exceeds max_seq={cfg.max_seq}")
        if alphas.shape != (b, t):
            raise ValueError(f"alphas shape {tuple(alphas.shape)} does not match [B={b}, T={t}]")
        if not 1 <= tail_len <= cfg.k_max:
            raise ValueError(f"tail_len={tail_len} out of range [1, {cfg.k_max}]")
        if tail_len > t:
            raise ValueError(f"tail_len={tail_len} exceeds sequence length {t}")

        h = self.in_proj(vectors) + self.pos_emb[:t]
        h = h + self.alpha_mlp(_sin_embed(alphas, cfg.alpha_freqs))
        gamma, beta = self.film.weight[tail_len - 1].chunk(2)
        h = apply_film(h, gamma, beta)
        allowed = attention_mask(t, tail_len, mask, device=vectors.device)
        for block in self.blocks:
            h = block(h, allowed)
        out = self.out_proj(self.ln_f(h))
        return out.squeeze(0) if squeeze else out


def backward(
    model: Backbone,
    vectors: torch.Tensor,
    alphas: torch.Tensor,
    tail_len: int,
    mask: MaskKind,
    upstream: torch.Tensor,
) -> tuple[dict[str, torch.Tensor], torch.Tensor]:
    """Gradients of sum(upstream * forward(...)) for every parameter and input.

    Parameters the output does not depend on get zero gradients (e.g. unused
    FiLM rows), so the returned dict always covers the full parameter set.
    """
    x = vectors.detach().clone().requires_grad_(True)
    out = model(x, alphas, tail_len, mask)
    if upstream.shape != out.shape:
        raise ValueError(f"upstream shape {tuple(upstream.shape)} != output {tuple(out.shape)}")
    names = [n for n, _ in model.named_parameters()]
    params = [p for _, p in model.named_parameters()]
    grads = torch.autograd.grad(out, [x, *params], grad_outputs=upstream, allow_unused=True)
    input_grad = grads[0] if grads[0] is not None else torch.zeros_like(x)
    param_grads = {
        n: (g if g is not None else torch.zeros_like(p))
        for n, p, g in zip(names, params, grads[1:])
    }
    return param_grads, input_grad
