"""The toy experimental protocol and a content-addressed cache of its trained artifacts.

Everything the acceptance suite needs from training lives here so scripts and
tests share one definition. Each run is keyed by a hash of its config text and
its parent checkpoint, so editing a config retrains exactly what changed.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass
from pathlib import Path

from .config import TrainConfig, dump_config
from .harness import ABLATIONS, EvalResult, evaluate_checkpoint
from .data import gen_dataset
from .trainer import Trainer

log = logging.getLogger(__name__)

# lr 1e-3 rather than the 1e-4 default: at 3000 iterations the smaller rate leaves
# the toy model far from converged
TOY_LR = 1e-3
STAGE1_ITERS = 3000
STAGE2_ITERS = 2000
ABLATION_ITERS = 1000
IBP_LAMBDAS = (0.5, 2.0, 4.0, 8.0, 16.0)
ABLATION_SEEDS = (0, 1, 2)
HELDOUT_SEED = 999
HELDOUT_N = 24


def cache_root() -> Path:
    return Path(os.environ.get("DITIC_CACHE", Path.cwd() / ".cache" / "acceptance"))


def stage1_config() -> TrainConfig:
    return TrainConfig(stage=1, iters=STAGE1_ITERS, lr=TOY_LR)


def stage2_config(lambda_target: float = 4.0, **model_kw) -> TrainConfig:
    cfg = TrainConfig(stage=2, iters=STAGE2_ITERS, lr=TOY_LR, lambda_target=lambda_target)
    for k, v in model_kw.items():
        setattr(cfg.model, k, v)
    return cfg


def ablation_config(suite: str, variant: str, seed: int) -> TrainConfig:
    """Stage-2 fine-tune with a re-initialized DiT; ``variant`` is 'reference' or 'ablated'."""
    cfg = stage2_config()
    cfg.iters = ABLATION_ITERS
    cfg.reset_dit = True
    cfg.seed = seed
    if variant == "ablated":
        ABLATIONS[suite][2](cfg)
    elif variant != "reference":
        raise ValueError(f"unknown variant {variant!r}")
    return cfg


def heldout_images(size: int = 64, n: int = HELDOUT_N):
    images, _ = gen_dataset(HELDOUT_SEED, n, size)
    return list(images)


def run_key(cfg: TrainConfig, parent: Path | None) -> str:
    h = hashlib.sha256(dump_config(cfg).encode())
    if parent is not None:
        h.update(Path(parent).read_bytes())
    return h.hexdigest()[:16]


@dataclass
class Run:
    name: str
    path: Path
    seconds: float
    history_total: list
    trained_now: bool

    def eval(self, images=None) -> EvalResult:
        """Evaluation through the real coder, cached next to the checkpoint."""
        key = "heldout" if images is None else None
        cache = self.path.with_suffix(".eval.json")
        if key and cache.exists():
            return EvalResult(**json.loads(cache.read_text()))
        res = evaluate_checkpoint(self.path, heldout_images() if images is None else images)
        if key:
            d = asdict(res)
            d["per_image"] = [list(r) for r in res.per_image]
            cache.write_text(json.dumps(d))
        return res


def train_cached(name: str, cfg: TrainConfig, parent: Path | None = None, root: Path | None = None) -> Run:
    root = Path(root or cache_root())
    key = run_key(cfg, parent)
    d = root / f"{name}-{key}"
    path = d / "model.dtck"
    info = d / "run.json"
    if path.exists() and info.exists():
        meta = json.loads(info.read_text())
        return Run(name, path, meta["seconds"], meta["history_total"], False)
    d.mkdir(parents=True, exist_ok=True)
    log.info("training %s (%s, %d iters)", name, key, cfg.iters)
    t0 = time.time()
    tr = Trainer(copy.deepcopy(cfg), parent)
    tr.fit(log_path=d / "log.csv")
    seconds = time.time() - t0
    tr.save(path)
    hist = [bd.total for bd in tr.history]
    info.write_text(json.dumps({"seconds": seconds, "history_total": hist}))
    return Run(name, path, seconds, hist, True)


# ---------------------------------------------------------------------------
# artifacts per criterion

def stage1(root=None) -> Run:
    return train_cached("stage1", stage1_config(), root=root)


def ibp_sweep(root=None) -> dict[float, Run]:
    parent = stage1(root).path
    return {lam: train_cached(f"ibp-l{lam:g}", stage2_config(lam), parent, root)
            for lam in IBP_LAMBDAS}


def ablation_runs(suite: str, seeds=ABLATION_SEEDS, root=None) -> list[tuple[Run, Run]]:
    parent = stage1(root).path
    out = []
    for s in seeds:
        ref = train_cached(f"abl-reference-s{s}", ablation_config(suite, "reference", s), parent, root)
        abl = train_cached(f"abl-{suite}-s{s}", ablation_config(suite, "ablated", s), parent, root)
        out.append((ref, abl))
    return out


def gradient_block_runs(root=None) -> tuple[Run, Run]:
    """Stage-2 retraining with and without the sigma -> t branch detached."""
    parent = stage1(root).path
    base = train_cached("ibp-l4", stage2_config(4.0), parent, root)
    blocked = train_cached("detach-l4", stage2_config(4.0, detach_timestep=True), parent, root)
    return base, blocked


def build_all(root=None) -> None:
    stage1(root)
    ibp_sweep(root)
    for suite in ABLATIONS:
        ablation_runs(suite, root=root)
    gradient_block_runs(root)
