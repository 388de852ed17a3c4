"""Image files, corpus ingestion and the bundled synthetic corpus."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import png
from PIL import Image
from scipy.ndimage import gaussian_filter

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".ppm", ".pgm", ".pnm"}


class CorpusError(ValueError):
    pass


def save_png(path, x: np.ndarray, bitdepth: int = 16) -> None:
    """Write a (3, H, W) or (1, H, W) image in [0, 1] as an 8/16-bit PNG."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    c, h, w = x.shape
    maxval = (1 << bitdepth) - 1
    q = np.round(np.clip(x, 0.0, 1.0) * maxval).astype(np.uint16 if bitdepth == 16 else np.uint8)
    rows = q.transpose(1, 2, 0).reshape(h, w * c)
    writer = png.Writer(width=w, height=h, greyscale=(c == 1), bitdepth=bitdepth)
    with open(path, "wb") as f:
        writer.write(f, rows.tolist() if bitdepth == 16 else rows)


def load_image(path) -> np.ndarray:
    """Read a PNG (8 or 16 bit) or PPM/PGM file into a float (3, H, W) array."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        w, h, rows, info = png.Reader(filename=str(path)).asDirect()
        planes = info["planes"]
        arr = np.vstack([np.asarray(r, dtype=np.float64) for r in rows]).reshape(h, w, planes)
        arr /= (1 << info["bitdepth"]) - 1
        if info.get("alpha"):
            arr = arr[..., :-1]
    else:
        with Image.open(path) as im:
            if im.mode in ("I;16", "I;16B", "I"):
                arr = np.asarray(im, dtype=np.float64)[..., None] / 65535.0
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    if arr.shape[-1] == 1:
        arr = np.repeat(arr, 3, axis=-1)
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def center_crop(x: np.ndarray, size: int) -> np.ndarray:
    _, h, w = x.shape
    if h < size or w < size:
        # upscale the short side by pixel repetition before cropping
        rep = int(np.ceil(size / min(h, w)))
        x = x.repeat(rep, axis=1).repeat(rep, axis=2)
        _, h, w = x.shape
    top, left = (h - size) // 2, (w - size) // 2
    return x[:, top:top + size, left:left + size]


def ingest_corpus(path, size: int | None = None) -> tuple[list[str], list[np.ndarray]]:
    """Load every image in a directory, ordered by filename.

    Undecodable files are skipped with a warning. Returns (ids, images).
    """
    path = Path(path)
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES) if path.is_dir() else []
    ids, images, skipped = [], [], 0
    for f in files:
        try:
            img = load_image(f)
        except Exception as exc:  # noqa: BLE001 - any decoder failure means skip
            log.warning("skipping undecodable image %s: %s", f, exc)
            skipped += 1
            continue
        if size is not None:
            img = center_crop(img, size)
        ids.append(f.stem)
        images.append(img)
    if not images:
        raise CorpusError(f"empty corpus: {path}")
    if skipped:
        log.warning("%d file(s) skipped in %s", skipped, path)
    return ids, images


def synthetic_image(rng: np.random.Generator, size: int = 64, edge_sigma: float = 1.5) -> np.ndarray:
    """Smooth colour gradient with a few shapes and a mild texture."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.empty((3, size, size))
    for c in range(3):
        a, b, d = rng.uniform(-0.6, 0.6, 3)
        img[c] = 0.5 + a * (xx - 0.5) + b * (yy - 0.5) + 0.15 * np.sin(2 * np.pi * d * (xx + yy))
    for _ in range(rng.integers(2, 5)):
        color = rng.uniform(0.05, 0.95, 3)[:, None, None]
        cx, cy = rng.uniform(0.1, 0.9, 2)
        r = rng.uniform(0.08, 0.3)
        if rng.random() < 0.5:
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 < r ** 2
        else:
            mask = (np.abs(xx - cx) < r) & (np.abs(yy - cy) < r * rng.uniform(0.4, 1.0))
        # soft edges, as in defocused photographs
        soft = gaussian_filter(mask.astype(float), sigma=edge_sigma, mode="nearest")
        img = img * (1 - soft) + color * soft
    freq = rng.uniform(3, 8)
    theta = rng.uniform(0, np.pi)
    stripes = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)))
    img += rng.uniform(0.01, 0.05) * stripes
    return np.clip(img, 0.0, 1.0)


def synthetic_corpus(n: int, size: int = 64, seed: int = 0) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [synthetic_image(rng, size) for _ in range(n)]


def write_synthetic_corpus(path, n: int, size: int = 64, seed: int = 0) -> list[Path]:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    out = []
    for i, img in enumerate(synthetic_corpus(n, size, seed)):
        p = path / f"img{i:03d}.png"
        save_png(p, img)
        out.append(p)
    return out
