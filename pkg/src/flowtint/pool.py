"""Image pools: procedural generation, PNG IO and directory ingestion."""

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError, SizingError
from .rng import numpy_rng


def procedural_image(rng: np.random.Generator, size: int = 32) -> np.ndarray:
    """Smooth two-colour gradient overlaid with a handful of soft blobs."""
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    c0, c1 = rng.uniform(0.15, 0.85, 3), rng.uniform(0.15, 0.85, 3)
    ang = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(ang) * xx + np.sin(ang) * yy
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
    img = c0 + (c1 - c0) * ramp[..., None]
    for _ in range(rng.integers(3, 7)):
        cy, cx = rng.uniform(0, 1, 2)
        r = rng.uniform(0.08, 0.3)
        w = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))[..., None]
        img = img * (1 - w) + rng.uniform(0.05, 0.95, 3) * w
    return np.clip(img, 0.0, 1.0)


def procedural_pool(n: int, seed: int, size: int = 32) -> list[np.ndarray]:
    return [procedural_image(numpy_rng(seed, "pool", i), size) for i in range(n)]


def quantize(img: np.ndarray) -> np.ndarray:
    """Round-trip through 8-bit storage precision."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(img: np.ndarray, path) -> None:
    # fixed encoder settings keep the bytes reproducible
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG", compress_level=6)


def load_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return arr / 255.0


IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


def load_pool_dir(directory) -> list[np.ndarray]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"pool directory {directory} does not exist")
    paths = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        raise DataError(f"no images found in {directory}")
    return [load_png(p) for p in paths]


def crop_pair(img: np.ndarray, size: int, rng: np.random.Generator, shift=(2, 4)):
    """Two ``size`` windows of ``img`` displaced by ``shift[0]..shift[1]`` pixels.

    The displacement (Chebyshev distance) mimics two nearby frames of one
    shot: same scene, different framing.
    """
    h, w = img.shape[:2]
    lo, hi = shift
    if size > h or size > w:
        raise SizingError(f"crop {size} exceeds image {h}x{w}")
    if size + lo > min(h, w):
        raise SizingError(f"image {h}x{w} too small for {size}px crops displaced by {lo}px")
    for _ in range(1000):
        y, x = int(rng.integers(0, h - size + 1)), int(rng.integers(0, w - size + 1))
        dy, dx = (int(v) for v in rng.integers(-hi, hi + 1, 2))
        if lo <= max(abs(dy), abs(dx)) <= hi and 0 <= y + dy <= h - size and 0 <= x + dx <= w - size:
            return img[y:y + size, x:x + size].copy(), img[y + dy:y + dy + size, x + dx:x + dx + size].copy()
    raise SizingError(f"could not place displaced crops of {size}px in a {h}x{w} image")
