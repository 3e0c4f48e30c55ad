"""The full codec: transforms, entropy model and one-step flow, plus bit-exact coding."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from . import rangecoder as rc
from .config import ModelConfig
from .entropy import N_STEPS, ContextModel, ContextSchedule, FactorizedPrior, GaussianParams, rate_estimate
from .flow import DiT, LatentConditioner, TimestepMapper
from .lora import attach_all
from .tensor import round_half_away
from .transforms import (AnalysisTransform, HyperAnalysis, HyperSynthesis, LatentBundle,
                         SynthesisTransform, hyper_roundtrip, pad_to_multiple, quantize,
                         strip_padding)


class EntropyModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.context = ContextModel(cfg, cfg.hyper_width)
        self.prior = FactorizedPrior(cfg.hyper_channels)


class Flow(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.timestep = TimestepMapper(cfg)
        self.net = DiT(cfg)
        self.conditioner = LatentConditioner(cfg)

    def condition(self, y_hat):
        return self.conditioner(y_hat) if self.net.cfg.condition == "latent" else None

    def forward(self, y_hat, sigma):
        t = self.timestep(sigma)
        cond = self.condition(y_hat)
        return self.net.one_step_reconstruct(y_hat, t, cond), t, cond


@dataclass
class ForwardOut:
    x_hat: torch.Tensor
    y: torch.Tensor
    y_hat: torch.Tensor
    y_rec: torch.Tensor
    params: GaussianParams
    t: torch.Tensor
    cond: object
    rate_y: torch.Tensor
    rate_z: torch.Tensor
    hyper: object


class DiTIC(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        self.ga = AnalysisTransform(cfg)
        self.gs = SynthesisTransform(cfg)
        self.ha = HyperAnalysis(cfg)
        self.hs = HyperSynthesis(cfg)
        self.em = EntropyModel(cfg)
        self.dit = Flow(cfg)

    def attach_lora(self, generator: torch.Generator | None = None) -> None:
        """Adapters on the decoder's pointwise layers and every DiT linear."""
        attach_all(self.gs, self.cfg.lora_rank_decoder, generator)
        attach_all(self.dit.net.blocks, self.cfg.lora_rank_dit, generator)

    def analysis_encode(self, x: torch.Tensor) -> LatentBundle:
        if x.numel() == 0:
            raise ValueError("empty image")
        H, W = x.shape[-2:]
        f = self.cfg.down_factor
        return LatentBundle(y=self.ga(pad_to_multiple(x, f)), down_factor=f, height=H, width=W)

    def synthesis_decode(self, y_rec: torch.Tensor, height: int, width: int) -> torch.Tensor:
        f = self.cfg.down_factor
        h, w = y_rec.shape[-2:]
        if not (h * f - f < height <= h * f and w * f - f < width <= w * f):
            raise ValueError(f"latent {h}x{w} inconsistent with image {height}x{width}")
        return strip_padding(self.gs(y_rec), height, width).clamp(0.0, 1.0)

    def forward(self, x: torch.Tensor, training: bool = True,
                generator: torch.Generator | None = None) -> ForwardOut:
        """Training uses noise for the rate terms and straight-through rounding
        on the decoding path; evaluation rounds everywhere."""
        bundle = self.analysis_encode(x)
        y = bundle.y
        hyper = hyper_roundtrip(self.ha, self.hs, y, training, generator)
        y_hat, params = self.em.context.sweep(
            y, hyper.hyper_features, lambda v, mu: quantize(v, mu, "round"))
        y_for_rate = quantize(y, None, "noise", generator) if training else y_hat
        rate_y = rate_estimate(y_for_rate, params, self.cfg.sigma_floor)
        rate_z = self.em.prior.factorized_rate(hyper.z_hat)
        y_rec, t, cond = self.dit(y_hat, params.sigma)
        x_hat = self.gs(y_rec)
        x_hat = strip_padding(x_hat, bundle.height, bundle.width)
        if not training:
            x_hat = x_hat.clamp(0.0, 1.0)
        return ForwardOut(x_hat, y, y_hat, y_rec, params, t, cond, rate_y, rate_z, hyper)


# ---------------------------------------------------------------------------
# bit-exact coding

HEADER = struct.Struct("<4sBBHHBBBI")
CONTAINER_MAGIC = b"DITC"
CONTAINER_VERSION = 1
FLAG_TSCALED = 0x01
LAMBDA_GRID = (0.5, 1.0, 2.0, 4.0, 8.0, 16.0)


class ContainerError(ValueError):
    pass


class UnknownVersionError(ContainerError):
    pass


class ModelMismatchError(ContainerError):
    pass


class TruncatedContainerError(ContainerError):
    pass


@dataclass
class BitstreamContainer:
    width: int
    height: int
    pad_right: int
    pad_bottom: int
    model_hash: int
    z_bytes: bytes
    y_bytes: bytes
    flags: int = 0
    lambda_index: int = 255
    version: int = CONTAINER_VERSION

    def to_bytes(self) -> bytes:
        head = HEADER.pack(CONTAINER_MAGIC, self.version, self.flags, self.width, self.height,
                           self.pad_right, self.pad_bottom, self.lambda_index, self.model_hash)
        return (head + struct.pack("<I", len(self.z_bytes)) + self.z_bytes
                + struct.pack("<I", len(self.y_bytes)) + self.y_bytes)

    @classmethod
    def from_bytes(cls, data: bytes) -> "BitstreamContainer":
        if len(data) < HEADER.size:
            raise TruncatedContainerError("container shorter than its header")
        magic, version, flags, W, H, pr, pb, li, mh = HEADER.unpack_from(data, 0)
        if magic != CONTAINER_MAGIC:
            raise ContainerError("not a DITC container")
        if version != CONTAINER_VERSION:
            raise UnknownVersionError(f"unknown container version {version}")
        pos = HEADER.size
        streams = []
        for _ in range(2):
            if pos + 4 > len(data):
                raise TruncatedContainerError("container truncated in stream length")
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            if pos + n > len(data):
                raise TruncatedContainerError("container truncated in stream payload")
            streams.append(bytes(data[pos:pos + n]))
            pos += n
        return cls(W, H, pr, pb, mh, streams[0], streams[1], flags, li, version)


def lambda_index(lam: float) -> int:
    for i, v in enumerate(LAMBDA_GRID):
        if abs(v - lam) < 1e-9:
            return i
    return 255


def _z_tables(model: DiTIC):
    return [rc.table_from_pmf(pmf, off, lo, hi) for off, pmf, lo, hi in model.em.prior.pmf_tables()]


def _y_tables(sigma: np.ndarray, floor: float):
    return [rc.gaussian_cdf_table(0.0, float(s), floor) for s in sigma]


def _group_indices(schedule: ContextSchedule, step: int, C: int):
    """Flat (c, i, j) indices of one group, channel-major."""
    mask = schedule.groups[step - 1].numpy()
    pos = np.flatnonzero(mask.reshape(-1))
    hw = mask.size
    return (np.arange(C)[:, None] * hw + pos[None, :]).reshape(-1)


@dataclass
class EncodeResult:
    container: BitstreamContainer
    y_hat: torch.Tensor
    residuals: np.ndarray
    z_symbols: np.ndarray
    bits_estimated: float

    @property
    def n_pixels(self) -> int:
        return self.container.width * self.container.height

    @property
    def bpp_actual(self) -> float:
        return 8.0 * (len(self.container.z_bytes) + len(self.container.y_bytes)) / self.n_pixels

    @property
    def bpp_estimated(self) -> float:
        return self.bits_estimated / self.n_pixels


@torch.no_grad()
def encode_image(model: DiTIC, x: torch.Tensor, model_hash: int = 0, lam: float = float("nan")) -> EncodeResult:
    """``x`` is ``[3, H, W]`` in [0, 1]."""
    model.eval()
    x = x.unsqueeze(0).to(next(model.parameters()).dtype)
    bundle = model.analysis_encode(x)
    y = bundle.y
    hyper = hyper_roundtrip(model.ha, model.hs, y, False)
    z_sym = hyper.z_hat[0].numpy().astype(np.int64)
    C_z = z_sym.shape[0]
    z_tables = _z_tables(model)
    z_stream = rc.encode_symbols(z_sym.reshape(-1),
                                 [z_tables[c] for c in range(C_z) for _ in range(z_sym[c].size)])

    C, h, w = y.shape[-3:]
    schedule = ContextSchedule(h, w)
    enc = rc.RangeEncoder()
    y_hat = torch.zeros_like(y)
    residual = np.zeros((C, h, w), dtype=np.int64)
    mu_all = torch.zeros_like(y)
    sigma_all = torch.zeros_like(y)
    for step in range(1, N_STEPS + 1):
        p = model.em.context.context_params(y_hat, hyper.hyper_features, step, schedule)
        m = schedule.mask(step, y)
        r_int = round_half_away(y - p.mu)
        y_hat = y_hat + m * (r_int + p.mu)
        mu_all = mu_all + m * p.mu
        sigma_all = sigma_all + m * p.sigma
        idx = _group_indices(schedule, step, C)
        syms = r_int[0].numpy().reshape(-1)[idx].astype(np.int64)
        residual.reshape(-1)[idx] = syms
        tables = _y_tables(p.sigma[0].numpy().reshape(-1)[idx], model.cfg.sigma_floor)
        _encode_into(enc, syms, tables)
    y_bytes = enc.finish()

    bits = float(rate_estimate(y_hat, GaussianParams(mu_all, sigma_all), model.cfg.sigma_floor)
                 + model.em.prior.factorized_rate(hyper.z_hat))
    container = BitstreamContainer(
        width=bundle.width, height=bundle.height, pad_right=bundle.pad_right,
        pad_bottom=bundle.pad_bottom, model_hash=model_hash, z_bytes=z_stream.data,
        y_bytes=y_bytes, flags=FLAG_TSCALED if model.cfg.flow_mode == "tscaled" else 0,
        lambda_index=lambda_index(lam))
    return EncodeResult(container, y_hat[0], residual, z_sym, bits)


def _encode_into(enc: rc.RangeEncoder, symbols, tables):
    for i, (v, t) in enumerate(zip(symbols, tables)):
        b, raw = rc._bin_of(t, int(v))
        if raw == -1:
            raise rc.CoderError(f"latent symbol {int(v)} at index {i} is outside the coder support")
        enc.encode(t.cum[b], t.cum[b + 1] - t.cum[b])
        if raw is not None:
            enc.encode(raw, 1)


def _decode_from(dec: rc.RangeDecoder, tables):
    out = []
    for t in tables:
        cum = t.cum
        b = rc.bisect_right(cum, dec.target()) - 1
        dec.consume(cum[b], cum[b + 1] - cum[b])
        n = len(cum) - 3
        if 0 < b <= n:
            out.append(t.offset + b - 1)
        else:
            raw = dec.target()
            dec.consume(raw, 1)
            out.append(t.offset - 1 - raw if b == 0 else t.offset + n + raw)
    return out


@dataclass
class DecodeResult:
    image: torch.Tensor
    y_hat: torch.Tensor
    residuals: np.ndarray


@torch.no_grad()
def decode_latent(model: DiTIC, container: BitstreamContainer, model_hash: int | None = None):
    if model_hash is not None and container.model_hash != model_hash:
        raise ModelMismatchError(
            f"container was made with model {container.model_hash:08x}, checkpoint is {model_hash:08x}")
    if bool(container.flags & FLAG_TSCALED) != (model.cfg.flow_mode == "tscaled"):
        raise ModelMismatchError("flow mode in container does not match the checkpoint")
    model.eval()
    dtype = next(model.parameters()).dtype
    f = model.cfg.down_factor
    Hp, Wp = container.height + container.pad_bottom, container.width + container.pad_right
    if Hp % f or Wp % f:
        raise ContainerError("padded size is not a multiple of the down factor")
    h, w = Hp // f, Wp // f
    C, Cz = model.cfg.channels, model.cfg.hyper_channels
    hz, wz = (h + 1) // 2, (w + 1) // 2

    z_tables = _z_tables(model)
    try:
        z_syms = rc.decode_symbols(container.z_bytes,
                                   [z_tables[c] for c in range(Cz) for _ in range(hz * wz)])
    except rc.TruncatedStreamError as exc:
        raise TruncatedContainerError(f"z stream: {exc}") from exc
    z_hat = torch.tensor(z_syms, dtype=dtype).reshape(1, Cz, hz, wz)
    feats = model.hs(z_hat)[..., :h, :w]

    schedule = ContextSchedule(h, w)
    y_hat = torch.zeros(1, C, h, w, dtype=dtype)
    sigma_all = torch.zeros_like(y_hat)
    residual = np.zeros((C, h, w), dtype=np.int64)
    try:
        dec = rc.RangeDecoder(container.y_bytes)
        for step in range(1, N_STEPS + 1):
            p = model.em.context.context_params(y_hat, feats, step, schedule)
            idx = _group_indices(schedule, step, C)
            tables = _y_tables(p.sigma[0].numpy().reshape(-1)[idx], model.cfg.sigma_floor)
            syms = _decode_from(dec, tables)
            residual.reshape(-1)[idx] = syms
            r = torch.from_numpy(residual).to(dtype).unsqueeze(0)
            m = schedule.mask(step, y_hat)
            y_hat = y_hat + m * (r + p.mu)
            sigma_all = sigma_all + m * p.sigma
    except rc.TruncatedStreamError as exc:
        raise TruncatedContainerError(f"y stream: {exc}") from exc
    return y_hat, sigma_all, residual


@torch.no_grad()
def decode_image(model: DiTIC, container: BitstreamContainer, model_hash: int | None = None) -> DecodeResult:
    y_hat, sigma, residual = decode_latent(model, container, model_hash)
    y_rec, _, _ = model.dit(y_hat, sigma)
    x_hat = model.synthesis_decode(y_rec, container.height, container.width)
    return DecodeResult(x_hat[0], y_hat[0], residual)
