"""Autodiff utilities and neural primitives shared by the codec.

Tensors are plain ``torch.Tensor`` objects and the autograd graph plays the
role of the tape. What lives here is the part torch does not give us in the
shape we need: a named-leaf gradient evaluator, an independent central
finite-difference checker, an explicit multi-head attention, and rounding
nodes that declare how they should be differentiated.
"""

from __future__ import annotations

import contextlib
import math
import os
import threading
from dataclasses import dataclass, field
from typing import Callable, Mapping

import torch
import torch.nn as nn
import torch.nn.functional as F


class TapeError(RuntimeError):
    """Raised when a recorded op fails or the loss is not a scalar."""


class NonFiniteError(ValueError):
    pass


def set_deterministic(flag: bool | None = None) -> bool:
    """Force single-threaded, deterministic kernels.

    With ``flag=None`` the ``DITIC_DETERMINISTIC`` environment variable decides.
    """
    if flag is None:
        flag = os.environ.get("DITIC_DETERMINISTIC", "0") == "1"
    if flag:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    return flag


# ---------------------------------------------------------------------------
# rounding nodes

_state = threading.local()


def _gradcheck_active() -> bool:
    return getattr(_state, "gradcheck", None) is not None


def _flag_nondiff(name: str) -> None:
    report = getattr(_state, "gradcheck", None)
    if report is not None and name not in report:
        report.append(name)


class _StraightThroughRound(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        return round_half_away(x)

    @staticmethod
    def backward(ctx, grad):
        return grad


class _HardRound(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        return round_half_away(x)

    @staticmethod
    def backward(ctx, grad):
        return torch.zeros_like(grad)


def round_half_away(x: torch.Tensor) -> torch.Tensor:
    # torch.round is half-to-even; the coder needs a platform-stable rule
    return torch.sign(x) * torch.floor(torch.abs(x) + 0.5)


def ste_round(x: torch.Tensor) -> torch.Tensor:
    """Round with identity gradient.

    Under :func:`finite_diff_gradcheck` the node is skipped (acts as identity)
    so both gradient routes see the same surrogate function.
    """
    if _gradcheck_active():
        return x
    return _StraightThroughRound.apply(x)


def hard_round(x: torch.Tensor) -> torch.Tensor:
    """Round with zero gradient; flagged by the gradient checker."""
    _flag_nondiff("round")
    return _HardRound.apply(x)


# ---------------------------------------------------------------------------
# gradient evaluation

def autodiff_eval(
    fn: Callable[..., torch.Tensor],
    inputs: Mapping[str, torch.Tensor],
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Evaluate ``fn(**inputs)`` and return the loss and d(loss)/d(input).

    Leaves that do not participate in the graph get zero gradients.
    """
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in inputs.items()}
    try:
        loss = fn(**leaves)
    except RuntimeError as exc:
        shapes = {k: tuple(v.shape) for k, v in leaves.items()}
        raise TapeError(f"op failed with input shapes {shapes}: {exc}") from exc
    if loss.numel() != 1:
        raise TapeError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    loss = loss.reshape(())
    names = list(leaves)
    if loss.requires_grad:
        raw = torch.autograd.grad(loss, [leaves[n] for n in names], allow_unused=True)
    else:
        raw = [None] * len(names)
    grads = {
        n: (torch.zeros_like(leaves[n]) if g is None else g.detach())
        for n, g in zip(names, raw)
    }
    return loss.detach(), grads


@dataclass
class GradcheckReport:
    max_rel_err: float
    worst_index: tuple[int, ...]
    nondifferentiable: list[str] = field(default_factory=list)

    @property
    def flagged(self) -> bool:
        return bool(self.nondifferentiable)


@contextlib.contextmanager
def _gradcheck_scope():
    prev = getattr(_state, "gradcheck", None)
    _state.gradcheck = []
    try:
        yield _state.gradcheck
    finally:
        _state.gradcheck = prev


def finite_diff_gradcheck(
    f: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    eps: float = 1e-4,
    atol_frac: float = 1e-2,
) -> GradcheckReport:
    """Compare autograd against central differences, elementwise.

    The per-element error is ``|a - n| / max(|a|, |n|, atol_frac * max|n|)``,
    so entries far below the gradient's scale are judged absolutely.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    with _gradcheck_scope() as flags:
        _, grads = autodiff_eval(lambda x: f(x), {"x": x})
        analytic = grads["x"].reshape(-1)
        base = x.detach().clone()
        flat = base.reshape(-1)
        numeric = torch.empty_like(flat)
        with torch.no_grad():
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                hi = f(base)
                flat[i] = orig - eps
                lo = f(base)
                flat[i] = orig
                hi, lo = float(hi), float(lo)
                if not (math.isfinite(hi) and math.isfinite(lo)):
                    idx = tuple(int(j) for j in torch.unravel_index(torch.tensor(i), x.shape))
                    raise NonFiniteError(f"f is non-finite when perturbing index {idx}")
                numeric[i] = (hi - lo) / (2 * eps)
    scale = max(float(numeric.abs().max()) if numeric.numel() else 0.0, 1e-300)
    denom = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()),
                          torch.full_like(numeric, atol_frac * scale))
    err = (analytic - numeric).abs() / denom
    worst = int(torch.argmax(err)) if err.numel() else 0
    idx = tuple(int(j) for j in torch.unravel_index(torch.tensor(worst), x.shape))
    return GradcheckReport(float(err.max()) if err.numel() else 0.0, idx, list(flags))


# ---------------------------------------------------------------------------
# layers

def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int) -> torch.Tensor:
    """Multi-head scaled dot-product attention over ``[..., L, d]`` inputs.

    No positional term of any kind is added.
    """
    *lead, L, d = q.shape
    if L == 0 or k.shape[-2] == 0:
        raise ValueError("attention over an empty sequence")
    if d % heads:
        raise ValueError(f"width {d} not divisible by {heads} heads")
    for name, t in (("q", q), ("k", k), ("v", v)):
        if not torch.isfinite(t).all():
            raise NonFiniteError(f"non-finite values in {name}")
    dh = d // heads
    Lk = k.shape[-2]
    qh = q.reshape(*lead, L, heads, dh).transpose(-3, -2)
    kh = k.reshape(*lead, Lk, heads, dh).transpose(-3, -2)
    vh = v.reshape(*lead, Lk, heads, dh).transpose(-3, -2)
    scores = qh @ kh.transpose(-2, -1) / math.sqrt(dh)
    weights = torch.softmax(scores, dim=-1)
    out = weights @ vh
    return out.transpose(-3, -2).reshape(*lead, L, d)


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int, kv_dim: int | None = None):
        super().__init__()
        if dim % heads:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        kv_dim = kv_dim or dim
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(kv_dim, dim)
        self.v = nn.Linear(kv_dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, context=None):
        context = x if context is None else context
        return self.out(attention(self.q(x), self.k(context), self.v(context), self.heads))


class DepthConvBlock(nn.Module):
    """Pointwise -> depthwise 3x3 -> pointwise residual block, plus a pointwise FFN."""

    def __init__(self, channels: int, expansion: int = 2):
        super().__init__()
        hidden = channels * expansion
        self.pw_in = nn.Conv2d(channels, channels, 1)
        self.dw = nn.Conv2d(channels, channels, 3, padding=1, groups=channels)
        self.pw_out = nn.Conv2d(channels, channels, 1)
        self.ffn_in = nn.Conv2d(channels, hidden, 1)
        self.ffn_out = nn.Conv2d(hidden, channels, 1)

    def forward(self, x):
        x = x + self.pw_out(self.dw(F.gelu(self.pw_in(x))))
        return x + self.ffn_out(F.gelu(self.ffn_in(x)))
