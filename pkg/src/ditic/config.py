"""Configuration dataclasses and the flat ``key=value`` config format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class ModelConfig:
    down_factor: int = 8
    channels: int = 8
    width: int = 32
    hyper_channels: int = 8
    hyper_width: int = 32
    context_width: int = 48
    sigma_floor: float = 0.11
    dit_depth: int = 4
    dit_width: int = 128
    dit_heads: int = 4
    cond_dim: int = 64
    # literal: y - v ; tscaled: y - t * v
    flow_mode: str = "literal"
    # variance: per-position t from sigma ; constant: one global t
    timestep_mode: str = "variance"
    constant_t: float = 0.5
    # latent | null
    condition: str = "latent"
    detach_timestep: bool = False
    lora: bool = False
    lora_rank_decoder: int = 32
    lora_rank_dit: int = 64

    def __post_init__(self):
        if self.dit_width % self.dit_heads:
            raise ValueError("dit_width must be divisible by dit_heads")
        if self.down_factor < 2 or self.down_factor & (self.down_factor - 1):
            raise ValueError("down_factor must be a power of two >= 2")
        if self.flow_mode not in ("literal", "tscaled"):
            raise ValueError(f"unknown flow_mode {self.flow_mode!r}")
        if self.timestep_mode not in ("variance", "constant"):
            raise ValueError(f"unknown timestep_mode {self.timestep_mode!r}")
        if self.condition not in ("latent", "null"):
            raise ValueError(f"unknown condition {self.condition!r}")


@dataclass
class AlignConfig:
    margin: float = 0.1
    tau: float = 0.07
    w_mse: float = 1.0
    w_lpips: float = 0.0
    w_edge: float = 0.0
    w_distill: float = 1.0
    w_cond: float = 0.1
    # distortion = w_mse * distortion_scale * MSE on [0, 1] pixels
    distortion_scale: float = 255.0 ** 2 / 100.0
    symmetric_contrastive: bool = False

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0 <= self.margin < 1:
            raise ValueError("margin must lie in [0, 1)")


@dataclass
class TrainConfig:
    stage: int = 1
    lambda_base: float = 0.5
    lambda_target: float = 4.0
    iters: int = 3000
    batch_size: int = 8
    patch: int = 64
    lr: float = 1e-4
    lr_decay_points: tuple = (0.5, 0.8, 0.9)
    lr_decay_factor: float = 0.5
    ema_decay: float = 0.999
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    cond_window: float = 0.3
    adv_start: float = 0.3
    lambda_adv: float = 0.0
    reset_dit: bool = False
    seed: int = 0
    data_seed: int = 1234
    log_every: int = 50
    out: str = "runs/default"
    model: ModelConfig = field(default_factory=ModelConfig)
    align: AlignConfig = field(default_factory=AlignConfig)

    def __post_init__(self):
        pts = tuple(self.lr_decay_points)
        if any(not 0 < p < 1 for p in pts) or any(b <= a for a, b in zip(pts, pts[1:])):
            raise ValueError("lr decay points must be strictly increasing in (0, 1)")
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if self.model.lora_rank_decoder < 1 or self.model.lora_rank_dit < 1:
            raise ValueError("LoRA ranks must be >= 1")

    @property
    def rate_lambda(self) -> float:
        return self.lambda_base if self.stage == 1 else self.lambda_target


def _coerce(value: str, like):
    if isinstance(like, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        return tuple(type(like[0])(v) for v in value.split(","))
    return value


def _assign(obj, key: str, value: str) -> bool:
    names = {f.name for f in dataclasses.fields(obj)}
    if key in names:
        setattr(obj, key, _coerce(value, getattr(obj, key)))
        return True
    return False


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse flat ``key=value`` lines.

    Keys may be written bare (searched in train, model, align order) or with
    a ``model.`` / ``align.`` prefix.
    """
    cfg = base or TrainConfig()
    model_kw = dataclasses.asdict(cfg.model)
    align_kw = dataclasses.asdict(cfg.align)
    train_kw = {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)
                if f.name not in ("model", "align")}
    pending = [dict(train_kw), dict(model_kw), dict(align_kw)]
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        scope = None
        if key.startswith("model."):
            scope, key = 1, key[6:]
        elif key.startswith("align."):
            scope, key = 2, key[6:]
        targets = [scope] if scope is not None else [0, 1, 2]
        for t in targets:
            if key in pending[t]:
                pending[t][key] = _coerce(value, pending[t][key])
                break
        else:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
    return TrainConfig(**pending[0], model=ModelConfig(**pending[1]),
                       align=AlignConfig(**pending[2]))


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text())


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        if f.name in ("model", "align"):
            continue
        v = getattr(cfg, f.name)
        lines.append(f"{f.name}={','.join(map(str, v)) if isinstance(v, tuple) else v}")
    for prefix, sub in (("model", cfg.model), ("align", cfg.align)):
        for f in dataclasses.fields(sub):
            lines.append(f"{prefix}.{f.name}={getattr(sub, f.name)}")
    return "\n".join(lines) + "\n"


def model_config_from_meta(meta: dict) -> ModelConfig:
    cfg = ModelConfig()
    for k, v in meta.items():
        if k.startswith("model."):
            _assign(cfg, k[6:], v)
    cfg.__post_init__()
    return cfg
