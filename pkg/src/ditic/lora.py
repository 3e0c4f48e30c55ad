"""Low-rank adapters for linear and 1x1 convolution layers."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class LoraAdapter(nn.Module):
    """``base(x) + (alpha / r) * B A x`` with the base layer frozen.

    ``B`` starts at zero so the adapted layer initially equals the base.
    """

    def __init__(self, base: nn.Module, rank: int, alpha: float | None = None,
                 generator: torch.Generator | None = None):
        super().__init__()
        if isinstance(base, nn.Linear):
            d_in, d_out = base.in_features, base.out_features
        elif isinstance(base, nn.Conv2d) and base.kernel_size == (1, 1) and base.groups == 1:
            d_in, d_out = base.in_channels, base.out_channels
        else:
            raise TypeError(f"LoRA supports Linear and 1x1 Conv2d, got {type(base).__name__}")
        if rank < 1:
            raise ValueError("LoRA rank must be >= 1")
        if rank > min(d_in, d_out):
            raise ValueError(f"rank {rank} exceeds min(d_in, d_out) = {min(d_in, d_out)}")
        self.base = base
        for p in base.parameters():
            p.requires_grad_(False)
        self.rank = rank
        self.scale = (alpha if alpha is not None else rank) / rank
        w = base.weight
        self.lora_A = nn.Parameter(
            torch.randn(rank, d_in, generator=generator, dtype=w.dtype) / math.sqrt(d_in))
        self.lora_B = nn.Parameter(torch.zeros(d_out, rank, dtype=w.dtype))

    def delta(self) -> torch.Tensor:
        return self.scale * self.lora_B @ self.lora_A

    def forward(self, x):
        out = self.base(x)
        if isinstance(self.base, nn.Linear):
            return out + self.scale * F.linear(F.linear(x, self.lora_A), self.lora_B)
        a = F.conv2d(x, self.lora_A[:, :, None, None])
        return out + self.scale * F.conv2d(a, self.lora_B[:, :, None, None])


def lora_attach(base: nn.Module, rank: int, alpha: float | None = None,
                generator: torch.Generator | None = None) -> LoraAdapter:
    return LoraAdapter(base, rank, alpha, generator)


def attach_all(module: nn.Module, rank: int, generator: torch.Generator | None = None,
               predicate=None) -> int:
    """Wrap every eligible child layer in place; returns the number wrapped.

    Layers whose dims are smaller than ``rank`` get ``min(d_in, d_out)``.
    """
    count = 0
    for name, child in list(module.named_children()):
        if isinstance(child, LoraAdapter):
            continue
        eligible = isinstance(child, nn.Linear) or (
            isinstance(child, nn.Conv2d) and child.kernel_size == (1, 1) and child.groups == 1)
        if eligible and (predicate is None or predicate(name, child)):
            w = child.weight
            r = min(rank, w.shape[0], w.shape[1])
            setattr(module, name, LoraAdapter(child, r, alpha=float(rank), generator=generator))
            count += 1
        else:
            count += attach_all(child, rank, generator, predicate)
    return count
