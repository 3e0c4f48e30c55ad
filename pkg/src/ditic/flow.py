"""Latent diffusion transformer with variance-derived per-position timesteps.

Tokens are the 1x1 latent vectors; no positional information is injected
anywhere, so the same weights run at any latent resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .tensor import MultiHeadAttention, NonFiniteError

LN_EPS = 1e-6


@dataclass
class ConditionEmbedding:
    c: torch.Tensor | None
    source: str = "latent"


class TimestepMapper(nn.Module):
    """sigma -> t in (0, 1): 1x1 projection of log-sigma across channels, then a logistic."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.mode = cfg.timestep_mode
        self.constant = cfg.constant_t
        self.detach = cfg.detach_timestep
        self.proj = nn.Conv2d(cfg.channels, 1, 1)
        nn.init.constant_(self.proj.weight, 1.0 / cfg.channels)
        nn.init.zeros_(self.proj.bias)

    def forward(self, sigma: torch.Tensor) -> torch.Tensor:
        if self.mode == "constant":
            return torch.full((*sigma.shape[:-3], *sigma.shape[-2:]), self.constant,
                              dtype=sigma.dtype)
        if self.detach:
            sigma = sigma.detach()
        return torch.sigmoid(self.proj(torch.log(sigma))).squeeze(-3)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype) / half)
    args = (t * 1000.0)[..., None] * freqs
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class DiTBlock(nn.Module):
    def __init__(self, width: int, heads: int, cond_dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(width, eps=LN_EPS)
        self.attn = MultiHeadAttention(width, heads)
        self.norm2 = nn.LayerNorm(width, eps=LN_EPS)
        self.cross = MultiHeadAttention(width, heads, kv_dim=cond_dim)
        self.norm3 = nn.LayerNorm(width, eps=LN_EPS)
        self.mlp = nn.Sequential(nn.Linear(width, 4 * width), nn.GELU(), nn.Linear(4 * width, width))

    def forward(self, x, cond):
        x = x + self.attn(self.norm1(x))
        if cond is not None:
            x = x + self.cross(self.norm2(x), cond)
        return x + self.mlp(self.norm3(x))


class DiT(nn.Module):
    def __init__(self, cfg: ModelConfig, freq_dim: int = 64):
        super().__init__()
        self.cfg = cfg
        self.freq_dim = freq_dim
        w = cfg.dit_width
        self.embed = nn.Linear(cfg.channels, w)
        self.t_embed = nn.Sequential(nn.Linear(freq_dim, w), nn.SiLU(), nn.Linear(w, w))
        self.blocks = nn.ModuleList(
            DiTBlock(w, cfg.dit_heads, cfg.cond_dim) for _ in range(cfg.dit_depth)
        )
        self.norm = nn.LayerNorm(w, eps=LN_EPS)
        self.head = nn.Linear(w, cfg.channels)
        # untrained flow is the identity map
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def velocity(self, y_hat: torch.Tensor, t: torch.Tensor, cond: ConditionEmbedding | None):
        if not torch.isfinite(y_hat).all():
            raise NonFiniteError("non-finite latent fed to the flow")
        B, C, h, w = y_hat.shape
        tokens = y_hat.flatten(2).transpose(1, 2)
        x = self.embed(tokens)
        x = x + self.t_embed(timestep_embedding(t.reshape(B, h * w), self.freq_dim))
        c = None
        if cond is not None and cond.c is not None:
            c = cond.c.reshape(B, 1, -1)
        for blk in self.blocks:
            x = blk(x, c)
        v = self.head(self.norm(x))
        return v.transpose(1, 2).reshape(B, C, h, w)

    def one_step_reconstruct(self, y_hat, t, cond, mode: str | None = None):
        mode = mode or self.cfg.flow_mode
        v = self.velocity(y_hat, t, cond)
        if mode == "literal":
            return y_hat - v
        if mode == "tscaled":
            return y_hat - t.unsqueeze(-3) * v
        raise ValueError(f"unknown flow mode {mode!r}")


class LatentConditioner(nn.Module):
    """Global-average-pool -> 2-layer MLP -> unit vector."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(cfg.channels, cfg.cond_dim), nn.GELU(), nn.Linear(cfg.cond_dim, cfg.cond_dim)
        )

    def forward(self, y_hat: torch.Tensor) -> ConditionEmbedding:
        pooled = y_hat.mean(dim=(-2, -1))
        return ConditionEmbedding(F.normalize(self.mlp(pooled), dim=-1, eps=1e-12), "latent")
