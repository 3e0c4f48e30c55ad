import numpy as np
import pytest
import torch
from torch.func import functional_call

from ditic.config import ModelConfig


def tiny_model_config(**kw) -> ModelConfig:
    """Small enough for finite-difference checks over every parameter."""
    base = dict(channels=4, width=8, hyper_channels=4, hyper_width=8, context_width=8,
                dit_depth=1, dit_width=16, dit_heads=2, cond_dim=8)
    base.update(kw)
    return ModelConfig(**base)


def flat_params(module: torch.nn.Module):
    """Flatten trainable parameters into one vector plus a loader for ``functional_call``."""
    named = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    shapes = [(n, p.shape, p.numel()) for n, p in named]
    vec = torch.cat([p.detach().reshape(-1) for _, p in named])

    def unflatten(v):
        out, i = {}, 0
        for n, shape, k in shapes:
            out[n] = v[i:i + k].reshape(shape)
            i += k
        return out

    def call(v, *args, **kw):
        return functional_call(module, unflatten(v), args, kw)

    return vec, call


def projected(out: torch.Tensor, seed: int) -> torch.Tensor:
    """A generic scalar of ``out``: inner product with a fixed random tensor."""
    g = torch.Generator().manual_seed(10_000 + seed)
    r = torch.randn(out.shape, generator=g, dtype=out.dtype)
    return (out * r).sum()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def small_checkpoint(tmp_path_factory):
    """A tiny model trained for a few seconds, saved with its sidecar."""
    from ditic.config import TrainConfig
    from ditic.trainer import Trainer

    cfg = TrainConfig(iters=200, batch_size=4, patch=32, lr=1e-3, model=tiny_model_config())
    tr = Trainer(cfg)
    tr.fit()
    path = tmp_path_factory.mktemp("ckpt") / "small.dtck"
    tr.save(path)
    return path


# one line per acceptance criterion, echoed again in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture
def report(capsys):
    def record(n: int, name: str, passed: bool, detail: str):
        line = f"criterion {n} {name}: {'PASS' if passed else 'FAIL'} ({detail})"
        ACCEPTANCE_LINES[n] = line
        with capsys.disabled():
            print("\n" + line)
        return passed
    return record
