"""Analysis/synthesis transforms, hyper transforms and the latent quantizer."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .config import ModelConfig
from .tensor import DepthConvBlock, hard_round, ste_round


@dataclass
class LatentBundle:
    y: torch.Tensor
    mu: torch.Tensor | None = None
    sigma: torch.Tensor | None = None
    y_hat: torch.Tensor | None = None
    down_factor: int = 8
    height: int = 0
    width: int = 0

    @property
    def pad_bottom(self) -> int:
        return self.y.shape[-2] * self.down_factor - self.height

    @property
    def pad_right(self) -> int:
        return self.y.shape[-1] * self.down_factor - self.width


@dataclass
class HyperBundle:
    z: torch.Tensor
    z_hat: torch.Tensor
    hyper_features: torch.Tensor


def _reflect_index(n: int, total: int) -> torch.Tensor:
    i = torch.arange(total)
    if n == 1:
        return torch.zeros(total, dtype=torch.long)
    period = 2 * n - 2
    m = i % period
    return torch.where(m < n, m, period - m)


def pad_to_multiple(x: torch.Tensor, factor: int) -> torch.Tensor:
    """Reflection-pad the trailing two dims up to a multiple of ``factor``.

    Works for any extent >= 1 (reflection repeats for pads wider than the image).
    """
    H, W = x.shape[-2:]
    if H == 0 or W == 0:
        raise ValueError("empty image")
    Hp = math.ceil(H / factor) * factor
    Wp = math.ceil(W / factor) * factor
    if (Hp, Wp) == (H, W):
        return x
    x = x.index_select(-2, _reflect_index(H, Hp))
    return x.index_select(-1, _reflect_index(W, Wp))


def strip_padding(x: torch.Tensor, height: int, width: int) -> torch.Tensor:
    if x.shape[-2] < height or x.shape[-1] < width:
        raise ValueError(f"cannot strip {tuple(x.shape[-2:])} down to {(height, width)}")
    return x[..., :height, :width]


def quantize(y: torch.Tensor, mu: torch.Tensor | None, mode: str,
             generator: torch.Generator | None = None,
             straight_through: bool = True) -> torch.Tensor:
    """Mean-centred rounding (``round``) or additive uniform noise (``noise``)."""
    if mode == "noise":
        u = torch.rand(y.shape, generator=generator, dtype=y.dtype, device=y.device) - 0.5
        return y + u
    if mode != "round":
        raise ValueError(f"unknown quantization mode {mode!r}")
    rnd = ste_round if straight_through else hard_round
    if mu is None:
        return rnd(y)
    return rnd(y - mu) + mu


def _down_stages(factor: int) -> int:
    return int(round(math.log2(factor)))


class AnalysisTransform(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        n = _down_stages(cfg.down_factor)
        layers: list[nn.Module] = []
        cin = 3
        for i in range(n):
            last = i == n - 1
            cout = cfg.channels if last else cfg.width
            layers.append(nn.Conv2d(cin, cout, 5, stride=2, padding=2))
            if not last:
                layers.append(DepthConvBlock(cout))
            cin = cout
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class SynthesisTransform(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        n = _down_stages(cfg.down_factor)
        layers: list[nn.Module] = []
        cin = cfg.channels
        for i in range(n):
            last = i == n - 1
            cout = 3 if last else cfg.width
            layers.append(nn.ConvTranspose2d(cin, cout, 5, stride=2, padding=2, output_padding=1))
            if not last:
                layers.append(DepthConvBlock(cout))
            cin = cout
        self.net = nn.Sequential(*layers)

    def forward(self, y):
        return self.net(y)


class HyperAnalysis(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(cfg.channels, cfg.hyper_width, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(cfg.hyper_width, cfg.hyper_channels, 3, stride=2, padding=1),
        )

    def forward(self, y):
        return self.net(y)


class HyperSynthesis(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.out_channels = cfg.hyper_width
        self.net = nn.Sequential(
            nn.ConvTranspose2d(cfg.hyper_channels, cfg.hyper_width, 3, stride=2,
                               padding=1, output_padding=1),
            nn.GELU(),
            DepthConvBlock(cfg.hyper_width),
        )

    def forward(self, z_hat):
        return self.net(z_hat)


def hyper_roundtrip(ha: HyperAnalysis, hs: HyperSynthesis, y: torch.Tensor,
                    training: bool, generator: torch.Generator | None = None) -> HyperBundle:
    h, w = y.shape[-2:]
    yp = pad_to_multiple(y, 2)
    z = ha(yp)
    if training:
        z_hat = quantize(z, None, "noise", generator)
    else:
        z_hat = quantize(z, None, "round")
    feats = hs(z_hat)[..., :h, :w]
    return HyperBundle(z=z, z_hat=z_hat, hyper_features=feats)
