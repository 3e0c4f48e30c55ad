"""Procedural toy images with coarse caption keys.

Every generator works in absolute pixel units (cell sizes, seed density,
spectral cutoff) so statistics do not change with the canvas size.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

FAMILIES = ("grf", "gradient", "checker", "voronoi")
MIXTURE = (0.4, 0.2, 0.15, 0.25)
N_PALETTES = 4


def _palette(rng, palette: int, k: int) -> np.ndarray:
    """``k`` RGB colours around one of a few base hues."""
    base = np.array([[0.85, 0.35, 0.2], [0.2, 0.55, 0.85], [0.35, 0.75, 0.3], [0.7, 0.6, 0.75]])[palette]
    return np.clip(base + rng.normal(0, 0.22, size=(k, 3)), 0, 1)


def _grf(rng, size, beta):
    H, W = size
    fy = np.fft.fftfreq(H)[:, None]
    fx = np.fft.fftfreq(W)[None, :]
    k2 = fx ** 2 + fy ** 2 + (1 / 32) ** 2
    amp = k2 ** (-beta / 4)
    out = []
    for _ in range(3):
        noise = rng.standard_normal((H, W))
        f = np.real(np.fft.ifft2(np.fft.fft2(noise) * amp))
        out.append(f / (f.std() + 1e-12))
    return np.stack(out)


def _image(rng, family, size):
    H, W = size
    palette = int(rng.integers(N_PALETTES))
    if family == "grf":
        beta = float(rng.choice([2.0, 2.5, 3.0]))
        f = _grf(rng, size, beta)
        mix = rng.normal(0, 0.35, size=(3, 3)) + np.eye(3) * 0.2
        base = _palette(rng, palette, 1)[0]
        img = base[:, None, None] + np.einsum("ij,jhw->ihw", mix, f) * 0.5
        key = f"grf beta={beta} palette={palette}"
    elif family == "gradient":
        direction = int(rng.integers(8))
        theta = direction * np.pi / 4 + rng.uniform(-0.2, 0.2)
        yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
        s = (np.cos(theta) * xx + np.sin(theta) * yy + rng.uniform(0, 128)) / 64.0
        tri = np.abs((s % 2.0) - 1.0)
        c0, c1 = _palette(rng, palette, 2)
        img = c0[:, None, None] * (1 - tri) + c1[:, None, None] * tri
        key = f"gradient dir={direction} palette={palette}"
    elif family == "checker":
        cell = int(rng.choice([4, 8, 16]))
        oy, ox = rng.integers(cell, size=2)
        yy, xx = np.mgrid[0:H, 0:W]
        mask = (((yy + oy) // cell + (xx + ox) // cell) % 2).astype(np.float64)
        c0, c1 = _palette(rng, palette, 2)
        img = c0[:, None, None] * (1 - mask) + c1[:, None, None] * mask
        key = f"checker cell={cell} palette={palette}"
    elif family == "voronoi":
        density = int(rng.integers(1, 4))
        n = max(2, int(round(density * 8 * H * W / 64 ** 2)))
        pts = rng.uniform(0, 1, size=(n, 2)) * [H, W]
        cols = _palette(rng, palette, n)
        yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
        d = (yy[None] - pts[:, 0, None, None]) ** 2 + (xx[None] - pts[:, 1, None, None]) ** 2
        img = cols[np.argmin(d, axis=0)].transpose(2, 0, 1)
        key = f"voronoi density={density} palette={palette}"
    else:
        raise ValueError(f"unknown family {family!r}")
    return np.clip(img, 0.0, 1.0).astype(np.float32), key


def sample_families(rng, n):
    return rng.choice(len(FAMILIES), size=n, p=MIXTURE)


def gen_dataset(seed: int, n: int, size: int | tuple = 64):
    """Return ``(images [n, 3, H, W] float32 in [0, 1], caption_keys)``."""
    if n <= 0:
        raise ValueError("n must be positive")
    size = (size, size) if isinstance(size, int) else tuple(size)
    if size[0] % 8 or size[1] % 8:
        raise ValueError("size must be a multiple of 8")
    rng = np.random.default_rng(seed)
    fams = sample_families(rng, n)
    imgs, keys = [], []
    for f in fams:
        img, key = _image(rng, FAMILIES[f], size)
        imgs.append(img)
        keys.append(key)
    return np.stack(imgs), keys


def training_batch(seed: int, step: int, batch: int, size: int):
    """Deterministic batch for a given (seed, step)."""
    return gen_dataset(int(np.random.default_rng([seed, step]).integers(2 ** 62)), batch, size)


def to_uint8(img: np.ndarray) -> np.ndarray:
    """[3, H, W] in [0, 1] -> [H, W, 3] uint8 with round-half-away-from-zero."""
    v = np.clip(img, 0.0, 1.0) * 255.0
    return np.floor(v + 0.5).astype(np.uint8).transpose(1, 2, 0)


def read_image(path) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return arr.transpose(2, 0, 1).copy()


def write_image(path, img: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(to_uint8(img)).save(path)


def write_dataset(out_dir, images, keys) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (img, key) in enumerate(zip(images, keys)):
        name = f"{i:05d}.png"
        write_image(out / name, img)
        lines.append(f"{name}\t{key}")
    (out / "captions.tsv").write_text("\n".join(lines) + "\n")


def read_dataset(dir_) -> tuple[list[str], np.ndarray | list]:
    d = Path(dir_)
    names = sorted(p.name for p in d.iterdir() if p.suffix.lower() in (".png", ".ppm"))
    return names, [read_image(d / n) for n in names]
