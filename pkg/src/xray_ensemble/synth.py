"""Synthetic two-class "blob" images with a known discriminative region.

Class 0 has a bright Gaussian blob in the left half, class 1 in the right
half, on a noisy mid-gray background. Used for end-to-end checks where the
ground-truth evidence location is known.
"""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .data import DatasetManifest, write_manifest
from .imaging import IMAGE_SIZE, save_png


def blob_image(
    label: int,
    rng: np.random.Generator,
    size: int = IMAGE_SIZE,
    background: float = 70.0,
    amplitude: float = 120.0,
    sigma_range: tuple[float, float] | None = None,
    noise: float = 12.0,
) -> tuple[np.ndarray, tuple[float, float]]:
    """One ``(size, size)`` uint8 image and its blob centre ``(row, col)``.

    The default blob width is 8 to 14 pixels at 150 px, scaled with ``size``.
    """
    if sigma_range is None:
        sigma_range = (8.0 * size / IMAGE_SIZE, 14.0 * size / IMAGE_SIZE)
    sigma = rng.uniform(*sigma_range)
    margin = 2.0 * sigma_range[1]
    half = size / 2.0
    row = rng.uniform(margin, size - margin)
    if label == 0:
        col = rng.uniform(margin, half - sigma_range[1])
    else:
        col = rng.uniform(half + sigma_range[1], size - margin)
    rr, cc = np.mgrid[0:size, 0:size].astype(np.float64)
    blob = amplitude * np.exp(-((rr - row) ** 2 + (cc - col) ** 2) / (2.0 * sigma**2))
    img = background + blob + rng.normal(0.0, noise, size=(size, size))
    return np.clip(np.floor(img + 0.5), 1, 255).astype(np.uint8), (row, col)


def make_blob_dataset(
    out_dir: str | os.PathLike,
    n_images: int = 400,
    seed: int = 0,
    size: int = IMAGE_SIZE,
) -> Path:
    """Write PNGs plus ``manifest.csv`` under ``out_dir``; classes alternate so
    the split is exactly balanced for even ``n_images``. Returns the manifest
    path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths, labels, centres = [], [], []
    for i in range(n_images):
        label = i % 2
        img, centre = blob_image(label, rng, size=size)
        p = out / "images" / f"blob_{i:04d}.png"
        save_png(p, img)
        paths.append(str(p))
        labels.append(label)
        centres.append(centre)
    manifest = DatasetManifest(tuple(paths), tuple(labels))
    write_manifest(manifest, out / "manifest.csv", relative_to=out)
    with open(out / "centres.csv", "w") as fh:
        fh.write("path,row,col\n")
        for p, (r, c) in zip(paths, centres):
            fh.write(f"{os.path.relpath(p, out)},{r:.3f},{c:.3f}\n")
    return out / "manifest.csv"
