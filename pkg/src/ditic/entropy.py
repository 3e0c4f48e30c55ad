"""Entropy models: factorized prior over z and a 4-step context model over y."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig

PROB_FLOOR = 2.0 ** -48
N_STEPS = 4
# (row parity, col parity) of each decoding step
GROUP_ORDER = ((0, 0), (1, 1), (0, 1), (1, 0))


class MonotonicityError(RuntimeError):
    pass


@dataclass
class GaussianParams:
    mu: torch.Tensor
    sigma: torch.Tensor


class ContextSchedule:
    """Four 2x2 sub-lattice masks partitioning an ``h x w`` grid."""

    def __init__(self, h: int, w: int):
        rows = torch.arange(h).remainder(2).view(h, 1)
        cols = torch.arange(w).remainder(2).view(1, w)
        self.groups = [((rows == r) & (cols == c)) for r, c in GROUP_ORDER]

    def mask(self, step: int, like: torch.Tensor) -> torch.Tensor:
        return self.groups[step - 1].to(like.dtype)

    def decoded_mask(self, step: int, like: torch.Tensor) -> torch.Tensor:
        """Positions decoded before ``step``."""
        m = torch.zeros_like(self.groups[0], dtype=like.dtype)
        for s in range(1, step):
            m = m + self.groups[s - 1].to(like.dtype)
        return m


def _std_cdf(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * torch.erfc(-x / math.sqrt(2.0))


def gaussian_likelihood(y_hat, mu, sigma):
    r = (y_hat - mu).abs()
    upper = _std_cdf((0.5 - r) / sigma)
    lower = _std_cdf((-0.5 - r) / sigma)
    return torch.clamp(upper - lower, min=PROB_FLOOR)


def rate_estimate(y_hat: torch.Tensor, params: GaussianParams, sigma_floor: float = 0.11) -> torch.Tensor:
    """Total code length in bits of ``y_hat`` under per-element Gaussians."""
    if float(params.sigma.detach().min()) < sigma_floor - 1e-12:
        raise ValueError(f"sigma below floor {sigma_floor}: {float(params.sigma.detach().min())}")
    p = gaussian_likelihood(y_hat, params.mu, params.sigma)
    return -torch.log2(p).sum()


class ContextModel(nn.Module):
    """Predicts (mu, sigma) group by group from hyper features and decoded groups."""

    def __init__(self, cfg: ModelConfig, hyper_features: int):
        super().__init__()
        C, hidden = cfg.channels, cfg.context_width
        self.sigma_floor = cfg.sigma_floor
        self.first = nn.Sequential(
            nn.Conv2d(hyper_features, hidden, 1), nn.GELU(), nn.Conv2d(hidden, 2 * C, 1)
        )
        self.spatial = nn.ModuleList(
            nn.Conv2d(C, C, 5, padding=2, groups=C) for _ in range(N_STEPS - 1)
        )
        self.fuse = nn.ModuleList(
            nn.Sequential(nn.Conv2d(C + hyper_features, hidden, 1), nn.GELU(),
                          nn.Conv2d(hidden, 2 * C, 1))
            for _ in range(N_STEPS - 1)
        )

    def _split(self, out):
        mu, raw = out.chunk(2, dim=-3)
        return GaussianParams(mu, self.sigma_floor + F.softplus(raw))

    def context_params(self, y_hat_partial, hyper_features, step: int,
                       schedule: ContextSchedule) -> GaussianParams:
        """Parameters over the whole grid; only ``schedule.groups[step-1]`` is meaningful."""
        if not 1 <= step <= N_STEPS:
            raise ValueError(f"context step must be in 1..{N_STEPS}, got {step}")
        if step == 1:
            return self._split(self.first(hyper_features))
        visible = y_hat_partial * schedule.decoded_mask(step, y_hat_partial)
        ctx = self.spatial[step - 2](visible)
        return self._split(self.fuse[step - 2](torch.cat([ctx, hyper_features], dim=-3)))

    def sweep(self, y, hyper_features, quantizer):
        """Run all four steps, quantizing each group with ``quantizer(y, mu)``.

        Returns (y_hat, GaussianParams) with every position filled.
        """
        h, w = y.shape[-2:]
        schedule = ContextSchedule(h, w)
        y_hat = torch.zeros_like(y)
        mu = torch.zeros_like(y)
        sigma = torch.zeros_like(y)
        for step in range(1, N_STEPS + 1):
            p = self.context_params(y_hat, hyper_features, step, schedule)
            m = schedule.mask(step, y)
            y_hat = y_hat + m * quantizer(y, p.mu)
            mu = mu + m * p.mu
            sigma = sigma + m * p.sigma
        return y_hat, GaussianParams(mu, sigma)


class FactorizedPrior(nn.Module):
    """Per-channel learned CDF built from monotone elementwise layers.

    Matrices pass through softplus and gates through tanh, so each channel's
    cumulative is monotone non-decreasing by construction.
    """

    def __init__(self, channels: int, filters=(3, 3, 3), init_scale: float = 10.0):
        super().__init__()
        self.channels = channels
        dims = (1, *filters, 1)
        scale = init_scale ** (1.0 / (len(filters) + 1))
        self.matrices = nn.ParameterList()
        self.biases = nn.ParameterList()
        self.factors = nn.ParameterList()
        for i in range(len(filters) + 1):
            init = math.log(math.expm1(1.0 / scale / dims[i + 1]))
            self.matrices.append(nn.Parameter(torch.full((channels, dims[i + 1], dims[i]), init)))
            self.biases.append(nn.Parameter(torch.rand(channels, dims[i + 1], 1) - 0.5))
            if i < len(filters):
                self.factors.append(nn.Parameter(torch.zeros(channels, dims[i + 1], 1)))

    def logits_cumulative(self, x: torch.Tensor) -> torch.Tensor:
        """``x`` is ``[channels, 1, n]``; returns logits of the CDF, same shape."""
        logits = x
        for i, (m, b) in enumerate(zip(self.matrices, self.biases)):
            logits = torch.matmul(F.softplus(m), logits) + b
            if i < len(self.factors):
                logits = logits + torch.tanh(self.factors[i]) * torch.tanh(logits)
        return logits

    def _per_channel(self, z):
        # [..., C, h, w] -> [C, 1, n]
        C = z.shape[-3]
        return z.transpose(0, -3).reshape(C, 1, -1) if z.dim() == 4 else z.reshape(C, 1, -1)

    def likelihood(self, z_hat: torch.Tensor) -> torch.Tensor:
        v = self._per_channel(z_hat)
        lower = self.logits_cumulative(v - 0.5)
        upper = self.logits_cumulative(v + 0.5)
        sign = -torch.sign(lower + upper).detach()
        p = (torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower)).abs()
        return torch.clamp(p, min=PROB_FLOOR)

    def factorized_rate(self, z_hat: torch.Tensor) -> torch.Tensor:
        return -torch.log2(self.likelihood(z_hat)).sum()

    @torch.no_grad()
    def cdf(self, points: torch.Tensor) -> torch.Tensor:
        """CDF of every channel at 1-D ``points``: ``[channels, n]``."""
        v = points.to(self.matrices[0].dtype).view(1, 1, -1).expand(self.channels, 1, -1)
        return torch.sigmoid(self.logits_cumulative(v)).squeeze(1)

    def check_monotone(self, lo: float = -64, hi: float = 64, n: int = 1025) -> None:
        grid = torch.linspace(lo, hi, n)
        c = self.cdf(grid)
        if (c[:, 1:] < c[:, :-1]).any() or (c < 0).any() or (c > 1).any():
            raise MonotonicityError("factorized prior CDF is not monotone in [0, 1]")

    @torch.no_grad()
    def pmf_tables(self, max_support: int = 255):
        """Integer PMF per channel over a window covering all but < 2^-16 tail mass.

        Returns a list of ``(offset, pmf, tail_low, tail_high)`` as float64 numpy.
        """
        k = torch.arange(-max_support, max_support + 2, dtype=torch.float64) - 0.5
        edges = self.cdf(k).double().numpy()
        tables = []
        for c in range(self.channels):
            e = edges[c]
            lo_idx = int(np.searchsorted(e, 2.0 ** -18, side="right")) - 1
            hi_idx = int(np.searchsorted(e, 1 - 2.0 ** -18, side="left"))
            lo_idx = max(lo_idx, 0)
            hi_idx = min(max(hi_idx, lo_idx + 1), len(e) - 1)
            pmf = np.diff(e[lo_idx:hi_idx + 1])
            tables.append((lo_idx - max_support, pmf, float(e[lo_idx]), float(1 - e[hi_idx])))
        return tables
