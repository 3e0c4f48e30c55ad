"""File-level encode/decode, dataset evaluation, RD sweeps and ablation drivers."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import codec
from .config import TrainConfig
from .data import gen_dataset, read_dataset, read_image, to_uint8, write_image
from .metrics import RDCurve, curves_from_rows, msssim, psnr, write_rd_csv
from .trainer import Trainer, load_model

log = logging.getLogger(__name__)


@dataclass
class EncodeStats:
    bpp_actual: float
    bpp_estimated: float
    n_bytes: int


def encode_file(image_path, ckpt_path, out_path) -> EncodeStats:
    img = read_image(image_path)
    model, meta, digest = load_model(ckpt_path)
    res = codec.encode_image(model, torch.from_numpy(img), digest, float(meta.get("lambda", "nan")))
    data = res.container.to_bytes()
    Path(out_path).write_bytes(data)
    return EncodeStats(res.bpp_actual, res.bpp_estimated, len(data))


def decode_file(container_path, ckpt_path, out_path=None) -> np.ndarray:
    container = codec.BitstreamContainer.from_bytes(Path(container_path).read_bytes())
    model, _, digest = load_model(ckpt_path)
    img = codec.decode_image(model, container, digest).image.numpy()
    if out_path is not None:
        write_image(out_path, img)
    return img


@dataclass
class EvalResult:
    bpp: float
    psnr: float
    msssim: float
    bpp_estimated: float
    per_image: list = field(default_factory=list)


def evaluate(model, images, model_hash: int = 0, quantize_output: bool = True) -> EvalResult:
    """Mean actual bpp, PSNR and MS-SSIM over the real encode/decode path."""
    rows = []
    for img in images:
        x = torch.from_numpy(np.asarray(img, dtype=np.float32))
        enc = codec.encode_image(model, x, model_hash)
        out = codec.decode_image(model, enc.container, model_hash).image.double().numpy()
        if quantize_output:
            out = to_uint8(out).transpose(2, 0, 1) / 255.0
        ref = x.double().numpy()
        rows.append((enc.bpp_actual, enc.bpp_estimated, psnr(ref, out), msssim(ref, out)))
    a = np.array(rows)
    return EvalResult(bpp=float(a[:, 0].mean()), bpp_estimated=float(a[:, 1].mean()),
                      psnr=float(a[:, 2].mean()), msssim=float(a[:, 3].mean()), per_image=rows)


def evaluate_checkpoint(ckpt_path, images) -> EvalResult:
    model, _, digest = load_model(ckpt_path)
    return evaluate(model, images, digest)


def load_images(dataset) -> list[np.ndarray]:
    if isinstance(dataset, (str, Path)):
        _, images = read_dataset(dataset)
        return list(images)
    return list(dataset)


def rd_sweep(checkpoints: dict, dataset, csv_path=None, method: str = "ditic") -> dict[str, RDCurve]:
    """``checkpoints`` maps lambda to checkpoint path; rows come out in ascending lambda."""
    missing = [lam for lam, p in checkpoints.items() if not Path(p).exists()]
    if missing:
        raise FileNotFoundError(f"missing checkpoints for lambda {sorted(missing)}")
    images = load_images(dataset)
    rows = []
    for lam in sorted(checkpoints):
        r = evaluate_checkpoint(checkpoints[lam], images)
        rows.append(dict(method=method, **{"lambda": float(lam)}, bpp=r.bpp, psnr=r.psnr,
                         msssim=r.msssim))
    if csv_path is not None:
        write_rd_csv(csv_path, rows)
    return curves_from_rows(rows)


# ---------------------------------------------------------------------------
# ablations

# suite -> (name of the reference variant, name of the ablated variant, config edit)
ABLATIONS = {
    "flow": ("variance_t", "constant_t", lambda c: setattr(c.model, "timestep_mode", "constant")),
    "distill": ("with_distill", "no_distill", lambda c: setattr(c.align, "w_distill", 0.0)),
    "cond": ("latent_cond", "null_cond", lambda c: setattr(c.model, "condition", "null")),
}


def stage2_config(base: TrainConfig, seed: int, iters: int | None = None) -> TrainConfig:
    cfg = copy.deepcopy(base)
    cfg.stage = 2
    cfg.reset_dit = True
    cfg.seed = seed
    if iters is not None:
        cfg.iters = iters
    return cfg


def ablation_variants(suite: str, base: TrainConfig, seed: int, iters: int | None = None):
    if suite not in ABLATIONS:
        raise ValueError(f"unknown ablation suite {suite!r}; choose from {sorted(ABLATIONS)}")
    ref_name, abl_name, edit = ABLATIONS[suite]
    ref = stage2_config(base, seed, iters)
    abl = stage2_config(base, seed, iters)
    edit(abl)
    return {ref_name: ref, abl_name: abl}


@dataclass
class AblationOutcome:
    suite: str
    seed: int
    reference: EvalResult
    ablated: EvalResult

    @property
    def psnr_gain(self) -> float:
        return self.reference.psnr - self.ablated.psnr

    @property
    def rate_ratio(self) -> float:
        return self.ablated.bpp / self.reference.bpp

    @property
    def matched(self) -> bool:
        return abs(self.rate_ratio - 1.0) <= 0.05


def run_ablation(suite: str, parent, base: TrainConfig, images, seeds=(0, 1, 2),
                 iters: int | None = None, out_dir=None) -> list[AblationOutcome]:
    """Fine-tune both variants of ``suite`` from a shared Stage-1 parent for each seed."""
    outcomes = []
    for seed in seeds:
        results = []
        for name, cfg in ablation_variants(suite, base, seed, iters).items():
            tr = Trainer(cfg, parent)
            tr.fit()
            if out_dir is not None:
                tr.save(Path(out_dir) / f"{suite}_{name}_s{seed}.dtck")
            results.append(evaluate(tr.eval_model(), images))
            log.info("%s/%s seed %d: bpp %.4f psnr %.3f", suite, name, seed,
                     results[-1].bpp, results[-1].psnr)
        outcomes.append(AblationOutcome(suite, seed, *results))
    return outcomes


def default_test_images(n: int = 24, size: int = 64, seed: int = 999):
    images, _ = gen_dataset(seed, n, size)
    return list(images)
