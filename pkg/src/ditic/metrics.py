"""Image quality metrics, Bjontegaard delta rate, and RD curve CSV I/O."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 99.0
MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
CSV_HEADER = ("method", "lambda", "bpp", "psnr", "msssim")


def _check_pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch {x.shape} vs {y.shape}")
    return x, y


def psnr(x, x_hat) -> float:
    """PSNR in dB for images in [0, 1]; identical inputs give ``PSNR_CAP``."""
    x, x_hat = _check_pair(x, x_hat)
    mse = float(np.mean((x - x_hat) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    g = np.exp(-((np.arange(size) - size // 2) ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img, win):
    out = correlate1d(img, win, axis=-1, mode="constant")
    out = correlate1d(out, win, axis=-2, mode="constant")
    r = len(win) // 2
    return out[..., r:img.shape[-2] - r, r:img.shape[-1] - r]


def _ssim_terms(x, y, win, data_range=1.0, k1=0.01, k2=0.03):
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mx, my = _filter_valid(x, win), _filter_valid(y, win)
    sxx = _filter_valid(x * x, win) - mx * mx
    syy = _filter_valid(y * y, win) - my * my
    sxy = _filter_valid(x * y, win) - mx * my
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    # per-channel means
    return (lum * cs).mean(axis=(-2, -1)), cs.mean(axis=(-2, -1))


def _downsample(img):
    h, w = img.shape[-2] // 2 * 2, img.shape[-1] // 2 * 2
    img = img[..., :h, :w]
    return 0.25 * (img[..., 0::2, 0::2] + img[..., 1::2, 0::2] + img[..., 0::2, 1::2] + img[..., 1::2, 1::2])


def msssim_scales(min_side: int, win: int = 11) -> int:
    n = 5
    while n > 1 and min_side <= (win - 1) * 2 ** (n - 1):
        n -= 1
    if min_side < win:
        raise ValueError(f"image side {min_side} smaller than the {win}-tap window")
    return n


def msssim(x, x_hat, win_size: int = 11, sigma: float = 1.5) -> float:
    """Multi-scale SSIM of ``[C, H, W]`` (or ``[H, W]``) images in [0, 1].

    Uses the standard five scales and exponents when the smaller side exceeds
    160 pixels, otherwise as many scales as fit, with renormalized exponents.
    Negative per-scale terms are clipped at zero before exponentiation.
    """
    x, x_hat = _check_pair(x, x_hat)
    if x.ndim == 2:
        x, x_hat = x[None], x_hat[None]
    n = msssim_scales(min(x.shape[-2:]), win_size)
    weights = np.array(MSSSIM_WEIGHTS[:n])
    if n < 5:
        warnings.warn(f"image too small for 5 MS-SSIM scales; using {n}", stacklevel=2)
        weights = weights / weights.sum()
    win = gaussian_window(win_size, sigma)
    vals = []
    for i in range(n):
        ssim_c, cs_c = _ssim_terms(x, x_hat, win)
        if i < n - 1:
            vals.append(np.maximum(cs_c, 0.0))
            x, x_hat = _downsample(x), _downsample(x_hat)
        else:
            vals.append(np.maximum(ssim_c, 0.0))
    stack = np.stack(vals)  # [scales, channels]
    per_channel = np.prod(stack ** weights[:, None], axis=0)
    return float(per_channel.mean())


# ---------------------------------------------------------------------------
# BD-rate

@dataclass
class RDPoint:
    bpp: float
    quality: float
    metric_name: str = "psnr"


@dataclass
class RDCurve:
    method: str
    points: list = field(default_factory=list)

    def __post_init__(self):
        self.points = sorted(self.points, key=lambda p: p.bpp)

    def validate(self):
        if len(self.points) < 4:
            raise ValueError(f"{self.method}: BD-rate needs >= 4 points, got {len(self.points)}")
        b = [p.bpp for p in self.points]
        if any(v <= 0 for v in b):
            raise ValueError(f"{self.method}: bpp must be positive")
        if any(q <= p for p, q in zip(b, b[1:])):
            raise ValueError(f"{self.method}: bpp values must be strictly increasing")

    @property
    def rates(self):
        return np.array([p.bpp for p in self.points])

    @property
    def qualities(self):
        return np.array([p.quality for p in self.points])


def pchip_slopes(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Fritsch-Carlson derivatives (the shape-preserving choice) with the usual end rule."""
    h = np.diff(x)
    delta = np.diff(y) / h
    n = len(x)
    d = np.zeros(n)
    for k in range(1, n - 1):
        if delta[k - 1] * delta[k] > 0:
            w1 = 2 * h[k] + h[k - 1]
            w2 = h[k] + 2 * h[k - 1]
            d[k] = (w1 + w2) / (w1 / delta[k - 1] + w2 / delta[k])

    def end(h0, h1, d0, d1):
        s = ((2 * h0 + h1) * d0 - h0 * d1) / (h0 + h1)
        if np.sign(s) != np.sign(d0):
            return 0.0
        if np.sign(d0) != np.sign(d1) and abs(s) > abs(3 * d0):
            return 3 * d0
        return s

    d[0] = end(h[0], h[1], delta[0], delta[1])
    d[-1] = end(h[-1], h[-2], delta[-1], delta[-2])
    return d


def _hermite_integral(x, y, d, a, b):
    """Integral over [a, b] of the piecewise cubic Hermite interpolant."""
    total = 0.0
    for k in range(len(x) - 1):
        lo, hi = max(a, x[k]), min(b, x[k + 1])
        if hi <= lo:
            continue
        h = x[k + 1] - x[k]
        # cubic in s = (q - x_k) / h: y_k + d_k h s + c2 s^2 + c3 s^3
        c0 = y[k]
        c1 = d[k] * h
        c2 = 3 * (y[k + 1] - y[k]) - (2 * d[k] + d[k + 1]) * h
        c3 = 2 * (y[k] - y[k + 1]) + (d[k] + d[k + 1]) * h
        s0, s1 = (lo - x[k]) / h, (hi - x[k]) / h
        prim = lambda s: c0 * s + c1 * s ** 2 / 2 + c2 * s ** 3 / 3 + c3 * s ** 4 / 4
        total += h * (prim(s1) - prim(s0))
    return total


def log_rate_integral(quality: np.ndarray, log_rate: np.ndarray, lo: float, hi: float) -> float:
    """Integral of interpolated log-rate over quality in [lo, hi]."""
    order = np.argsort(quality)
    q, r = quality[order], log_rate[order]
    if np.any(np.diff(q) <= 0):
        raise ValueError("quality values must be distinct")
    if len(q) == 4:
        poly = np.polyint(np.polyfit(q, r, 3))
        return float(np.polyval(poly, hi) - np.polyval(poly, lo))
    return _hermite_integral(q, r, pchip_slopes(q, r), lo, hi)


def bd_rate(anchor: RDCurve, test: RDCurve) -> float:
    """Average rate difference (percent) of ``test`` vs ``anchor`` at equal quality."""
    anchor.validate()
    test.validate()
    qa, qt = anchor.qualities, test.qualities
    lo = max(qa.min(), qt.min())
    hi = min(qa.max(), qt.max())
    if not hi > lo:
        raise ValueError("RD curves have no overlapping quality interval")
    ia = log_rate_integral(qa, np.log(anchor.rates), lo, hi)
    it = log_rate_integral(qt, np.log(test.rates), lo, hi)
    avg = (it - ia) / (hi - lo)
    return round((math.exp(avg) - 1.0) * 100.0, 10)


# ---------------------------------------------------------------------------
# CSV

def write_rd_csv(path, rows) -> None:
    """``rows`` are dicts keyed by ``CSV_HEADER``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow([r["method"]] + [repr(float(r[k])) for k in CSV_HEADER[1:]])


def read_rd_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = tuple(next(rd))
        if header != CSV_HEADER:
            raise ValueError(f"unexpected CSV header {header}")
        return [dict(method=r[0], **{k: float(v) for k, v in zip(CSV_HEADER[1:], r[1:])})
                for r in rd if r]


def curves_from_rows(rows, metric: str = "psnr") -> dict[str, RDCurve]:
    curves: dict[str, list] = {}
    for r in rows:
        curves.setdefault(r["method"], []).append(RDPoint(r["bpp"], r[metric], metric))
    return {m: RDCurve(m, pts) for m, pts in curves.items()}
