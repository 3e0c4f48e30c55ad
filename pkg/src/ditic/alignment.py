"""Self-distillation and contrastive co-alignment losses, plus synthetic text embeddings."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .flow import ConditionEmbedding


@dataclass
class LossBreakdown:
    rate_bits: float
    bpp: float
    distortion: float
    distill: float
    cond: float
    total: float
    weights: dict = field(default_factory=dict)

    def weighted_sum(self) -> float:
        w = self.weights
        return (w["lambda"] * self.bpp + self.distortion
                + w["distill"] * self.distill + w["cond"] * self.cond)


def distill_loss(y_pred: torch.Tensor, y_ref: torch.Tensor, m: float = 0.1) -> torch.Tensor:
    """Hinged marginal cosine loss ``max(0, 1 - m - cos(y_pred, y_ref))``, batch-averaged.

    The leading dim is the batch when inputs have more than one dim per sample;
    pass unbatched tensors with a leading singleton.
    """
    if y_pred.shape != y_ref.shape:
        raise ValueError(f"shape mismatch {tuple(y_pred.shape)} vs {tuple(y_ref.shape)}")
    y_ref = y_ref.detach()
    a = y_pred.reshape(y_pred.shape[0], -1)
    b = y_ref.reshape(y_ref.shape[0], -1)
    na = a.norm(dim=1)
    nb = b.norm(dim=1)
    if (na == 0).any() or (nb == 0).any():
        raise ValueError("zero-norm latent in distillation loss")
    cos = (a * b).sum(dim=1) / (na * nb)
    return torch.clamp(1.0 - m - cos, min=0.0).mean()


def contrastive_loss(c_lat: torch.Tensor, c_text: torch.Tensor, tau: float = 0.07,
                     symmetric: bool = False) -> torch.Tensor:
    """InfoNCE of latent embeddings against their matched text embeddings."""
    if c_lat.shape[0] == 0:
        raise ValueError("empty batch")
    if c_lat.shape != c_text.shape:
        raise ValueError(f"shape mismatch {tuple(c_lat.shape)} vs {tuple(c_text.shape)}")
    if tau <= 0:
        raise ValueError("temperature must be positive")
    logits = c_lat @ c_text.T / tau
    target = torch.arange(c_lat.shape[0])
    loss = F.cross_entropy(logits, target)
    if symmetric:
        loss = 0.5 * (loss + F.cross_entropy(logits.T, target))
    return loss


def text_embed_provider(caption_key: str, d_c: int = 64) -> ConditionEmbedding:
    """Deterministic pseudo-random unit vector keyed by the caption string."""
    seed = int.from_bytes(hashlib.sha256(caption_key.encode("utf-8")).digest()[:8], "little")
    v = np.random.default_rng(seed).standard_normal(d_c)
    v /= np.linalg.norm(v)
    return ConditionEmbedding(torch.from_numpy(v.astype(np.float32)), "text")


def text_embeddings(keys, d_c: int, dtype=torch.float32) -> torch.Tensor:
    return torch.stack([text_embed_provider(k, d_c).c for k in keys]).to(dtype)


def edge_distortion(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference of horizontal and vertical image gradients."""
    dx = lambda t: t[..., :, 1:] - t[..., :, :-1]
    dy = lambda t: t[..., 1:, :] - t[..., :-1, :]
    return (dx(x) - dx(x_hat)).abs().mean() + (dy(x) - dy(x_hat)).abs().mean()
