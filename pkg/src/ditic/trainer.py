"""Two-stage training: loose-rate Stage 1, then a tighter-rate Stage 2 with a frozen encoder."""

from __future__ import annotations

import copy
import csv
import logging
import time
from pathlib import Path

import torch

from . import checkpoint as ckpt
from .alignment import LossBreakdown, contrastive_loss, distill_loss, edge_distortion, text_embeddings
from .codec import DiTIC
from .config import TrainConfig, dump_config, model_config_from_meta
from .data import training_batch
from .tensor import set_deterministic

log = logging.getLogger(__name__)

FROZEN_IN_STAGE2 = ("ga.", "ha.")
LOG_COLUMNS = ("iter", "stage", "rate_bits", "distortion", "distill", "cond", "total")


class NonFiniteLossError(FloatingPointError):
    pass


def lr_schedule(it: int, total: int, cfg: TrainConfig) -> float:
    """Piecewise-constant: multiply by the decay factor at each decay fraction."""
    lr = cfg.lr
    for frac in cfg.lr_decay_points:
        if it >= frac * total:
            lr *= cfg.lr_decay_factor
    return lr


@torch.no_grad()
def ema_update(shadow: dict, live: dict, decay: float) -> dict:
    if shadow.keys() != live.keys():
        missing = set(shadow) ^ set(live)
        raise KeyError(f"parameter trees differ: {sorted(missing)[:5]}")
    for k, s in shadow.items():
        l = live[k]
        if s.shape != l.shape:
            raise KeyError(f"shape mismatch for {k}: {tuple(s.shape)} vs {tuple(l.shape)}")
        s.copy_(torch.lerp(s, l.to(s.dtype), 1.0 - decay))
    return shadow


def cond_weight(cfg: TrainConfig, it: int) -> float:
    if cfg.stage == 2 and it >= cfg.cond_window * cfg.iters:
        return 0.0
    return cfg.align.w_cond


def adv_weight(cfg: TrainConfig, it: int) -> float:
    """Adversarial term hook; the term itself is not part of this build."""
    if cfg.stage == 1 or it < cfg.adv_start * cfg.iters:
        return 0.0
    return cfg.lambda_adv


def compute_losses(model: DiTIC, x: torch.Tensor, keys, cfg: TrainConfig, it: int,
                   generator: torch.Generator | None = None):
    """Forward pass and the weighted objective. Returns (total tensor, LossBreakdown)."""
    out = model(x, training=True, generator=generator)
    a = cfg.align
    n_pix = x.shape[0] * x.shape[-2] * x.shape[-1]
    rate_bits = out.rate_y + out.rate_z
    bpp = rate_bits / n_pix
    mse = torch.mean((out.x_hat - x) ** 2)
    distortion = a.w_mse * a.distortion_scale * mse
    if a.w_lpips:
        raise NotImplementedError("LPIPS needs a pretrained network and is not available")
    if a.w_edge:
        distortion = distortion + a.w_edge * edge_distortion(x, out.x_hat)
    distill = distill_loss(out.y_rec, out.y, a.margin)
    w_cond = cond_weight(cfg, it)
    if out.cond is not None and keys is not None:
        c_text = text_embeddings(keys, model.cfg.cond_dim, dtype=x.dtype)
        cond = contrastive_loss(out.cond.c, c_text, a.tau, a.symmetric_contrastive)
    else:
        cond = torch.zeros((), dtype=x.dtype)
    if adv_weight(cfg, it):
        raise NotImplementedError("adversarial loss is not available in this build")
    lam = cfg.rate_lambda
    total = lam * bpp + distortion + a.w_distill * distill + w_cond * cond
    parts = dict(rate=rate_bits, distortion=distortion, distill=distill, cond=cond)
    if not torch.isfinite(total):
        bad = [k for k, v in parts.items() if not torch.isfinite(v)]
        raise NonFiniteLossError(f"non-finite loss at iter {it}; components: {bad or ['total']}")
    bd = LossBreakdown(
        rate_bits=rate_bits.item(), bpp=bpp.item(), distortion=distortion.item(),
        distill=distill.item(), cond=cond.item(), total=total.item(),
        weights={"lambda": lam, "distill": a.w_distill, "cond": w_cond},
    )
    return total, bd


def _decay_mask(name: str, p: torch.Tensor) -> bool:
    return p.ndim >= 2 and "lora_" not in name and ".prior." not in name


class Trainer:
    def __init__(self, cfg: TrainConfig, parent: str | Path | None = None):
        set_deterministic()
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        self.gen = torch.Generator().manual_seed(cfg.seed)
        mcfg = cfg.model
        if parent is not None:
            meta_file = ckpt.meta_path(parent)
            if meta_file.exists():
                base = model_config_from_meta(ckpt.read_meta(meta_file))
                # switches that may legitimately differ between parent and child
                for k in ("timestep_mode", "constant_t", "condition", "detach_timestep",
                          "flow_mode", "lora", "lora_rank_decoder", "lora_rank_dit"):
                    setattr(base, k, getattr(mcfg, k))
                mcfg = base
                cfg.model = mcfg
        self.model = DiTIC(mcfg)
        if parent is not None:
            state = ckpt.load(parent)
            self.model.load_state_dict(state, strict=True)
        elif cfg.stage == 2:
            raise ValueError("stage 2 requires a stage-1 checkpoint (--resume)")
        if cfg.stage == 2:
            if cfg.reset_dit:
                fresh = DiTIC(mcfg)
                self.model.dit.load_state_dict(fresh.dit.state_dict())
            for name, p in self.model.named_parameters():
                if name.startswith(FROZEN_IN_STAGE2):
                    p.requires_grad_(False)
            if mcfg.lora:
                self.model.attach_lora(self.gen)
        self.shadow = copy.deepcopy(self.model)
        for p in self.shadow.parameters():
            p.requires_grad_(False)
        named = [(n, p) for n, p in self.model.named_parameters() if p.requires_grad]
        groups = [
            {"params": [p for n, p in named if _decay_mask(n, p)], "weight_decay": cfg.weight_decay},
            {"params": [p for n, p in named if not _decay_mask(n, p)], "weight_decay": 0.0},
        ]
        self.opt = torch.optim.AdamW(groups, lr=cfg.lr, betas=tuple(cfg.betas))
        self.history: list[LossBreakdown] = []
        self.it = 0

    def trainable_names(self):
        return [n for n, p in self.model.named_parameters() if p.requires_grad]

    def batch(self, it: int):
        imgs, keys = training_batch(self.cfg.data_seed, it, self.cfg.batch_size, self.cfg.patch)
        return torch.from_numpy(imgs), keys

    def train_step(self, x: torch.Tensor, keys) -> LossBreakdown:
        cfg = self.cfg
        self.model.train()
        for g in self.opt.param_groups:
            g["lr"] = lr_schedule(self.it, cfg.iters, cfg)
        total, bd = compute_losses(self.model, x, keys, cfg, self.it, self.gen)
        self.opt.zero_grad(set_to_none=True)
        total.backward()
        self.opt.step()
        # warm-started decay so short runs are not dominated by the initial weights
        decay = min(cfg.ema_decay, (1.0 + self.it) / (10.0 + self.it))
        live = {n: p for n, p in self.model.named_parameters() if p.requires_grad}
        shadow = {n: p for n, p in self.shadow.named_parameters() if n in live}
        ema_update(shadow, live, decay)
        self.history.append(bd)
        self.it += 1
        return bd

    def fit(self, fixed_batch=None, log_path: str | Path | None = None, progress: bool = False):
        cfg = self.cfg
        writer = None
        fh = None
        if log_path is not None:
            Path(log_path).parent.mkdir(parents=True, exist_ok=True)
            fh = open(log_path, "w", newline="")
            writer = csv.writer(fh)
            writer.writerow(LOG_COLUMNS)
        t0 = time.time()
        try:
            while self.it < cfg.iters:
                x, keys = fixed_batch if fixed_batch is not None else self.batch(self.it)
                it = self.it
                bd = self.train_step(x, keys)
                if writer is not None:
                    writer.writerow((it, cfg.stage, repr(bd.rate_bits),
                                     repr(bd.distortion), repr(bd.distill), repr(bd.cond),
                                     repr(bd.total)))
                if progress and (it % cfg.log_every == 0 or it == cfg.iters - 1):
                    log.info("it %d bpp %.4f D %.3f distill %.4f cond %.3f total %.4f (%.1fs)",
                             it, bd.bpp, bd.distortion, bd.distill, bd.cond, bd.total,
                             time.time() - t0)
        finally:
            if fh is not None:
                fh.close()
        return self.history

    def eval_model(self) -> DiTIC:
        """The EMA shadow (with LoRA adapters, if any)."""
        self.shadow.eval()
        return self.shadow

    def metadata(self) -> dict:
        cfg = self.cfg
        meta = {
            "stage": cfg.stage,
            "lambda": cfg.rate_lambda,
            "iter": self.it,
            "flow_mode": cfg.model.flow_mode,
            "seed": cfg.seed,
        }
        for k, v in vars(cfg.model).items():
            meta[f"model.{k}"] = v
        return meta

    def save(self, path: str | Path) -> bytes:
        data = ckpt.save(path, self.eval_model().state_dict(), self.metadata())
        Path(str(path) + ".cfg").write_text(dump_config(self.cfg))
        return data


def load_model(path: str | Path, dtype=torch.float32) -> tuple[DiTIC, dict, int]:
    """Rebuild a model from a checkpoint and its sidecar; returns (model, meta, hash)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    meta = ckpt.read_meta(ckpt.meta_path(path)) if ckpt.meta_path(path).exists() else {}
    mcfg = model_config_from_meta(meta)
    if meta.get("flow_mode", mcfg.flow_mode) != mcfg.flow_mode:
        raise ValueError("flow_mode in checkpoint header disagrees with model config")
    model = DiTIC(mcfg)
    if mcfg.lora:
        model.attach_lora()
    state = {k: torch.from_numpy(v) for k, v in ckpt.loads(data).items()}
    model.load_state_dict(state, strict=True)
    model = model.to(dtype).eval()
    return model, meta, ckpt.digest(data)


def train(cfg: TrainConfig, parent=None, out: str | Path | None = None, progress=True) -> Path:
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(cfg, parent)
    trainer.fit(log_path=out / f"stage{cfg.stage}_log.csv", progress=progress)
    path = out / f"stage{cfg.stage}.dtck"
    trainer.save(path)
    return path
