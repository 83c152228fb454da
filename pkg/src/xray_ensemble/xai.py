"""Gradient saliency heatmaps, ensemble mean/std maps and overlay rendering."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import CLASS_NAMES
from .imaging import load_grayscale, normalize_mean, resize_bilinear, save_png
from .nn import Network

ALPHA = 0.5


class SaliencyError(RuntimeError):
    pass


@dataclass(frozen=True)
class Heatmap:
    values: np.ndarray  # (H, W) in [0, 1]
    class_index: int
    model_id: str = ""


@dataclass(frozen=True)
class HeatmapBundle:
    """Per-class member maps ``(2, n, H, W)``, their pixelwise mean and sample
    std ``(2, H, W)``, and the ensemble's class probabilities."""

    member_maps: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    probabilities: np.ndarray

    def mean_heatmap(self, class_index: int) -> Heatmap:
        return Heatmap(self.mean[class_index], class_index, "ensemble-mean")


def _as_batch(image: np.ndarray, model: Network) -> np.ndarray:
    x = np.asarray(image)
    if x.ndim == 2:
        x = x[..., None]
    if x.ndim == 3:
        x = x[None]
    if x.shape[1:] != model.input_shape:
        raise ValueError(f"image shape {x.shape[1:]} does not match model input {model.input_shape}")
    return x


def raw_saliency(model: Network, image: np.ndarray, class_index: int) -> np.ndarray:
    """``|d logit_c / d image|`` per pixel, with the softmax head removed and
    dropout off. Returns an ``(H, W)`` float64 array."""
    if class_index not in (0, 1):
        raise ValueError(f"class_index must be 0 or 1, got {class_index}")
    for name, p in model.params.items():
        if not np.all(np.isfinite(p)):
            raise SaliencyError(f"parameter {name} contains non-finite values")
    x = _as_batch(image, model)
    logits = model.forward(x, training=False, linear_output=True)
    upstream = np.zeros_like(logits)
    upstream[:, class_index] = 1.0
    _, grad_x = model.backward(upstream, need_input_grad=True)
    return np.abs(grad_x[0]).max(axis=-1).astype(np.float64)


def minmax_normalize(values: np.ndarray) -> np.ndarray:
    """Scale to [0, 1]; a constant map becomes all zeros."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def saliency(model: Network, image: np.ndarray, class_index: int, model_id: str = "") -> Heatmap:
    return Heatmap(minmax_normalize(raw_saliency(model, image, class_index)), class_index, model_id)


def aggregate_maps(maps: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pixelwise mean and sample (n-1) standard deviation over axis 0."""
    maps = np.asarray(maps, dtype=np.float64)
    # offsets from the first map keep identical members at exactly zero spread
    offsets = maps - maps[0]
    return maps[0] + offsets.mean(axis=0), offsets.std(axis=0, ddof=1)


def ensemble_heatmaps(members: Sequence[Network], image: np.ndarray) -> HeatmapBundle:
    """Both classes' member heatmaps (each normalised before averaging), with
    the mean and std maps and the averaged probabilities."""
    from .ensemble import ensemble_predict

    members = list(members)
    per_class = []
    for c in (0, 1):
        maps = []
        for k, m in enumerate(members):
            try:
                maps.append(saliency(m, image, c, f"member_{k}").values)
            except Exception as exc:
                raise SaliencyError(f"saliency failed for member {k}: {exc}") from exc
        per_class.append(np.stack(maps))
    member_maps = np.stack(per_class)
    mean, std = zip(*(aggregate_maps(member_maps[c]) for c in (0, 1)))
    probs = ensemble_predict(members, _as_batch(image, members[0]))[0]
    return HeatmapBundle(member_maps, np.stack(mean), np.stack(std), probs)


def top_decile_fraction(heatmap: np.ndarray, region: np.ndarray) -> float:
    """Share of the mass of the top-10% pixels that falls inside ``region``."""
    h = np.asarray(heatmap, dtype=np.float64)
    cutoff = np.quantile(h, 0.9)
    top = h >= cutoff
    mass = h[top].sum()
    if mass == 0:
        return 0.0
    return float(h[top & region].sum() / mass)


# rendering -----------------------------------------------------------------


@lru_cache(maxsize=1)
def jet_lut() -> np.ndarray:
    """The 256-entry jet lookup table shipped as ``jet_colormap.csv``."""
    text = resources.files(__package__).joinpath("jet_colormap.csv").read_text()
    lut = np.array([[int(v) for v in line.split(",")] for line in text.splitlines() if line.strip()],
                   dtype=np.uint8)
    if lut.shape != (256, 3):
        raise ValueError(f"colormap must have 256 r,g,b rows, got {lut.shape}")
    return lut


def colorize(values: np.ndarray, lut: np.ndarray | None = None) -> np.ndarray:
    lut = jet_lut() if lut is None else lut
    idx = np.clip(np.floor(np.asarray(values, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.intp)
    return lut[idx]


def render_overlay(
    xray: np.ndarray, heatmap: Heatmap | np.ndarray, alpha: float = ALPHA, lut: np.ndarray | None = None
) -> np.ndarray:
    """Blend a gray X-ray with a colourised heatmap: ``(1-alpha)*gray + alpha*colour``,
    rounded half-up to uint8 RGB."""
    values = heatmap.values if isinstance(heatmap, Heatmap) else np.asarray(heatmap)
    gray = np.clip(np.asarray(xray, dtype=np.float64), 0, 255)
    if gray.shape != values.shape:
        raise ValueError(f"x-ray {gray.shape} and heatmap {values.shape} differ in shape")
    color = colorize(values, lut).astype(np.float64)
    out = (1.0 - alpha) * gray[..., None] + alpha * color
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def _upscale(img: np.ndarray, factor: int) -> np.ndarray:
    if factor <= 1:
        return img
    return np.repeat(np.repeat(img, factor, axis=0), factor, axis=1)


def explain(ensemble, image_path: str | os.PathLike, out_dir: str | os.PathLike, upscale: int = 1) -> dict[str, Path]:
    """Write the original image, per-class mean and std overlays, and a JSON
    sidecar with the ensemble probabilities. Returns the written paths.

    Std maps from both classes share one display scale (the larger of their
    maxima) so their magnitudes can be compared by eye.
    """
    from .ensemble import Ensemble

    members = ensemble.members if isinstance(ensemble, Ensemble) else list(ensemble)
    size = members[0].input_shape[0]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gray = resize_bilinear(load_grayscale(image_path), size, size)
    bundle = ensemble_heatmaps(members, normalize_mean(gray))
    probs = bundle.probabilities
    std_scale = float(bundle.std.max())
    written: dict[str, Path] = {}

    def write(name: str, pixels: np.ndarray, title: str) -> None:
        path = out / f"{name}.png"
        try:
            save_png(path, _upscale(pixels, upscale), {"Title": title})
        except OSError as exc:
            raise OSError(f"could not write {path}: {exc}") from exc
        written[name] = path

    gray_rgb = np.repeat(np.clip(np.floor(gray + 0.5), 0, 255).astype(np.uint8)[..., None], 3, axis=-1)
    write("original", gray_rgb, Path(image_path).name)
    for c, cname in enumerate(CLASS_NAMES):
        label = cname.replace("_", "-")
        write(f"mean_{cname}", render_overlay(gray, bundle.mean[c]),
              f"neuron {c} ({label}) mean heatmap, p={probs[c]:.3f}")
        std_view = bundle.std[c] / std_scale if std_scale > 0 else np.zeros_like(bundle.std[c])
        write(f"std_{cname}", render_overlay(gray, std_view),
              f"neuron {c} ({label}) std heatmap, max std={bundle.std[c].max():.3f}")
    sidecar = out / "probabilities.json"
    try:
        sidecar.write_text(json.dumps({
            "p_non_consolidation": float(probs[0]),
            "p_consolidation": float(probs[1]),
        }, indent=2) + "\n")
    except OSError as exc:
        raise OSError(f"could not write {sidecar}: {exc}") from exc
    written["probabilities"] = sidecar
    return written
