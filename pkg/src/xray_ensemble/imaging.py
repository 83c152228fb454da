"""Image loading, resizing, intensity normalisation and affine augmentation.

Grayscale images are plain 2-D float arrays with values in ``[0, 255]``
until :func:`normalize_mean` rescales them.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError

IMAGE_SIZE = 150


class ImageDecodeError(ValueError):
    pass


class DegenerateImageError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentationConfig:
    """Ranges for the random affine perturbation.

    Shear and rotation are in degrees, shifts are fractions of the image
    width/height, and zoom is the half-width of the scale range
    ``[1 - zoom, 1 + zoom]``.
    """

    shear: float = 0.2
    zoom: float = 0.05
    rotation: float = 0.2
    width_shift: float = 0.1
    height_shift: float = 0.1
    horizontal_flip: bool = True

    def __post_init__(self) -> None:
        for name in ("shear", "zoom", "rotation", "width_shift", "height_shift"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.width_shift >= 1 or self.height_shift >= 1:
            raise ValueError("shift fractions must be < 1")
        if self.zoom >= 1:
            raise ValueError("zoom range must stay below 1")

    @classmethod
    def disabled(cls) -> "AugmentationConfig":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, False)


def load_grayscale(path: str | os.PathLike) -> np.ndarray:
    """Decode a PNG/PGM/JPEG file and keep only its first channel."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"image not found: {path}")
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode == "P":
                img = img.convert("RGBA" if "transparency" in img.info else "RGB")
            elif img.mode in ("1", "CMYK", "YCbCr"):
                img = img.convert("L")
            arr = np.asarray(img)
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise ImageDecodeError(f"cannot decode {path}: {exc}") from exc
    if arr.ndim == 3:
        arr = arr[..., 0]
    if arr.ndim != 2 or arr.size == 0:
        raise ImageDecodeError(f"{path} has no pixels")
    return arr.astype(np.float64)


def save_png(path: str | os.PathLike, pixels: np.ndarray, text: dict[str, str] | None = None) -> None:
    """Write an 8-bit gray ``(H, W)`` or RGB ``(H, W, 3)`` array as PNG."""
    from PIL.PngImagePlugin import PngInfo

    arr = np.asarray(pixels)
    if arr.dtype != np.uint8:
        arr = np.clip(np.floor(arr + 0.5), 0, 255).astype(np.uint8)
    info = None
    if text:
        info = PngInfo()
        for k, v in text.items():
            info.add_text(k, v)
    Image.fromarray(arr).save(path, format="PNG", pnginfo=info, compress_level=6)


def _bilinear_sample(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample ``img`` at fractional coordinates; out-of-range coordinates are
    clamped, which amounts to nearest-edge fill."""
    h, w = img.shape
    rows = np.clip(rows, 0.0, h - 1.0)
    cols = np.clip(cols, 0.0, w - 1.0)
    r0 = np.floor(rows).astype(np.intp)
    c0 = np.floor(cols).astype(np.intp)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = rows - r0
    fc = cols - c0
    top = img[r0, c0] * (1.0 - fc) + img[r0, c1] * fc
    bottom = img[r1, c0] * (1.0 - fc) + img[r1, c1] * fc
    return top * (1.0 - fr) + bottom * fr


def resize_bilinear(img: np.ndarray, out_h: int = IMAGE_SIZE, out_w: int = IMAGE_SIZE) -> np.ndarray:
    """Corner-aligned bilinear resize (output corners sample input corners)."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = np.linspace(0.0, h - 1.0, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0.0, w - 1.0, out_w) if out_w > 1 else np.zeros(1)
    rows, cols = np.meshgrid(ys, xs, indexing="ij")
    return _bilinear_sample(img, rows, cols)


def normalize_mean(img: np.ndarray) -> np.ndarray:
    """Divide by the image's own mean; returns an ``(H, W, 1)`` float32 tensor."""
    img = np.asarray(img, dtype=np.float64)
    mean = img.mean()
    if not mean > 0:
        raise DegenerateImageError("image mean is not positive; cannot normalise")
    return (img / mean).astype(np.float32)[..., None]


def affine_matrix(
    rotation_deg: float, shear_deg: float, zoom: float, shift_rows: float, shift_cols: float
) -> tuple[np.ndarray, np.ndarray]:
    """Map output (row, col) offsets from the centre to input offsets.

    Returns ``(A, t)`` such that ``src = A @ (dst - c) + c + t``.
    """
    theta = math.radians(rotation_deg)
    shear = math.radians(shear_deg)
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    shr = np.array([[1.0, -math.sin(shear)], [0.0, math.cos(shear)]])
    scale = np.diag([zoom, zoom])
    return rot @ shr @ scale, np.array([shift_rows, shift_cols])


def apply_affine(img: np.ndarray, a: np.ndarray, t: np.ndarray) -> np.ndarray:
    h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64) - cy, np.arange(w, dtype=np.float64) - cx, indexing="ij")
    src_r = a[0, 0] * rr + a[0, 1] * cc + cy + t[0]
    src_c = a[1, 0] * rr + a[1, 1] * cc + cx + t[1]
    return _bilinear_sample(img, src_r, src_c)


def augment(img: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    """Random flip followed by one combined rotation/shear/zoom/shift resample.

    Every parameter is drawn on each call, even when its range is zero, so
    the rng stream advances identically regardless of the configuration.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    rotation = rng.uniform(-cfg.rotation, cfg.rotation)
    shear = rng.uniform(-cfg.shear, cfg.shear)
    zoom = rng.uniform(1.0 - cfg.zoom, 1.0 + cfg.zoom)
    shift_r = rng.uniform(-cfg.height_shift, cfg.height_shift) * h
    shift_c = rng.uniform(-cfg.width_shift, cfg.width_shift) * w
    flip = rng.random() < 0.5
    if cfg.horizontal_flip and flip:
        img = img[:, ::-1]
    a, t = affine_matrix(rotation, shear, zoom, shift_r, shift_c)
    if np.array_equal(a, np.eye(2)) and not t.any():
        return img.copy()
    return apply_affine(img, a, t)


def preprocess(path: str | os.PathLike, size: int = IMAGE_SIZE) -> np.ndarray:
    """Load and normalise one image into a ``(size, size, 1)`` float32 tensor."""
    return normalize_mean(resize_bilinear(load_grayscale(path), size, size))
