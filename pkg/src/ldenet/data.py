"""Paired image I/O and the synthetic low-light generator."""

from __future__ import annotations

import io
import logging
import os
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .autodiff.rng import Rng
from .checkpoint import atomic_write
from .errors import DataError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png",)

# synthetic degradation ranges
GAMMA_RANGE = (1.5, 3.0)
GAIN_RANGE = (0.2, 0.6)
SIGMA_RANGE = (0.0, 0.03)


@dataclass
class ImagePair:
    low: np.ndarray
    normal: np.ndarray
    id: str = ""

    def __post_init__(self):
        if self.low.shape != self.normal.shape:
            raise DataError(f"pair {self.id!r}: extents differ {self.low.shape} vs {self.normal.shape}")
        if self.low.ndim != 3 or self.low.shape[-1] != 3:
            raise DataError(f"pair {self.id!r}: expected HxWx3 images, got {self.low.shape}")


@dataclass(frozen=True)
class DegradeParams:
    gamma: float = 2.0
    gain: float = 0.5
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.gamma >= 1.0:
            raise DataError(f"gamma must be >= 1, got {self.gamma}")
        if not 0.0 < self.gain <= 1.0:
            raise DataError(f"gain must lie in (0, 1], got {self.gain}")
        if not self.noise_sigma >= 0.0:
            raise DataError(f"noise_sigma must be nonnegative, got {self.noise_sigma}")


# ---------------------------------------------------------------------------
# PNG
# ---------------------------------------------------------------------------

def load_png(path: str | os.PathLike) -> np.ndarray:
    """8-bit RGB(A) PNG to ``float64`` HxWx3 with ``b -> b / 255``."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"image not found: {path}")
    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            if mode in ("I", "I;16", "I;16B", "I;16L", "F") or img.info.get("bitdepth", 8) > 8:
                raise DataError(f"{path}: unsupported bit depth (mode {mode}); need 8-bit RGB")
            if mode in ("RGBA", "LA", "PA") or (mode == "P" and "transparency" in img.info):
                warnings.warn(f"{path}: alpha channel ignored", stacklevel=2)
            arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DataError(f"{path}: malformed image ({exc})") from None
    return arr.astype(np.float64) / 255.0


def quantize(x: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and map to bytes by ``round(v * 255)``."""
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.rint(x * 255.0).astype(np.uint8)


def save_png(image, path: str | os.PathLike) -> None:
    arr = np.asarray(getattr(image, "data", image))
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise DataError(f"save_png expects HxWx3, got {arr.shape}")
    buf = io.BytesIO()
    Image.fromarray(quantize(arr), mode="RGB").save(buf, format="PNG")
    atomic_write(path, buf.getvalue())


# ---------------------------------------------------------------------------
# synthetic pairs
# ---------------------------------------------------------------------------

def degrade(base: np.ndarray, p: DegradeParams) -> np.ndarray:
    base = np.asarray(base, dtype=np.float64)
    if base.size and (base.min() < 0.0 or base.max() > 1.0):
        raise DataError("base image must lie in [0, 1]")
    low = p.gain * base ** p.gamma
    if p.noise_sigma > 0:
        low = low + Rng(p.seed, "degrade.noise").normal(base.shape, std=p.noise_sigma)
    return np.clip(low, 0.0, 1.0)


def synth_pair(base: np.ndarray, p: DegradeParams, id: str = "") -> ImagePair:
    base = np.asarray(base, dtype=np.float64)
    return ImagePair(low=degrade(base, p), normal=base.copy(), id=id)


def synth_base(size: int, rng: Rng) -> np.ndarray:
    """Smooth colour gradient, a few flat rectangles and fine texture noise."""
    h = w = int(size)
    yy, xx = np.meshgrid(np.linspace(0.0, 1.0, h), np.linspace(0.0, 1.0, w), indexing="ij")
    c0 = rng.uniform((3,), 0.15, 0.5)
    cy = rng.uniform((3,), -0.15, 0.15)
    cx = rng.uniform((3,), -0.15, 0.15)
    img = c0 + yy[..., None] * cy + xx[..., None] * cx
    for _ in range(rng.integer(3, 7)):
        y0, x0 = rng.integer(0, h - 4), rng.integer(0, w - 4)
        y1, x1 = y0 + rng.integer(4, max(5, h // 2)), x0 + rng.integer(4, max(5, w // 2))
        img[y0:y1, x0:x1] = rng.uniform((3,), 0.05, 0.7)
    img = img + rng.normal((h, w, 3), std=0.03)
    return np.clip(img, 0.0, 1.0)


def random_degradation(rng: Rng, seed: int) -> DegradeParams:
    return DegradeParams(
        gamma=float(rng.uniform((), *GAMMA_RANGE)),
        gain=float(rng.uniform((), *GAIN_RANGE)),
        noise_sigma=float(rng.uniform((), *SIGMA_RANGE)),
        seed=seed,
    )


def synth_dataset(n: int, size: int = 64, seed: int = 0) -> list[ImagePair]:
    """``n`` procedural pairs with degradations drawn from the ranges above."""
    if size < 8:
        raise DataError(f"synthetic images must be at least 8x8, got {size}")
    rng = Rng(seed, "synth")
    pairs = []
    for i in range(int(n)):
        base = synth_base(size, rng)
        params = random_degradation(rng, seed=seed * 100_003 + i)
        pairs.append(synth_pair(base, params, id=f"{i:04d}"))
    return pairs


# ---------------------------------------------------------------------------
# directories
# ---------------------------------------------------------------------------

def _images(d: Path) -> dict[str, Path]:
    return {p.stem: p for p in sorted(d.iterdir()) if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES}


def load_dataset(root: str | os.PathLike) -> list[ImagePair]:
    """Pairs ``low/<name>.png`` with ``normal/<name>.png``, sorted by name."""
    root = Path(root)
    dirs = {}
    for sub in ("low", "normal"):
        d = root / sub
        if not d.is_dir():
            raise DataError(f"missing subdirectory {d}")
        dirs[sub] = _images(d)
        if not dirs[sub]:
            raise DataError(f"no PNG images in {d}")
    low, normal = dirs["low"], dirs["normal"]
    for name in sorted(set(low) ^ set(normal)):
        warnings.warn(f"unpaired image {name!r} skipped", stacklevel=2)
    pairs = []
    for name in sorted(set(low) & set(normal)):
        a, b = load_png(low[name]), load_png(normal[name])
        if a.shape != b.shape:
            warnings.warn(f"pair {name!r} skipped: extents differ {a.shape} vs {b.shape}", stacklevel=2)
            continue
        pairs.append(ImagePair(a, b, name))
    if not pairs:
        raise DataError(f"no usable pairs under {root}")
    return pairs


def save_dataset(pairs: list[ImagePair], root: str | os.PathLike) -> None:
    root = Path(root)
    for pair in pairs:
        save_png(pair.low, root / "low" / f"{pair.id}.png")
        save_png(pair.normal, root / "normal" / f"{pair.id}.png")
