"""Residual maps, Grad-CAM heat maps and side-by-side comparison grids."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import map_coordinates

from .core import ShapeError, check_image, image_to_uint8, save_png
from .models import BackendError, Detector, gradcam_activations

DEFAULT_COLORMAP = "viridis"


def normalize(values: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant map becomes all zeros."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi - lo <= 0 or not np.isfinite(hi - lo):
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


@dataclass(frozen=True)
class HeatMap:
    values: np.ndarray
    colormap: str = DEFAULT_COLORMAP

    def to_rgb(self) -> np.ndarray:
        from matplotlib import colormaps

        return colormaps[self.colormap](self.values)[..., :3]

    def save(self, path: str | Path, overlay: np.ndarray | None = None, alpha: float = 0.5) -> None:
        rgb = self.to_rgb()
        if overlay is not None:
            rgb = (1 - alpha) * check_image(overlay) + alpha * rgb
        save_png(path, rgb, {"colormap": self.colormap})


def residual_map(original: np.ndarray, counterfactual: np.ndarray, colormap: str = DEFAULT_COLORMAP) -> HeatMap:
    """Channel-mean absolute difference, min-max normalised."""
    a = np.asarray(original, dtype=np.float64)
    b = np.asarray(counterfactual, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    diff = np.abs(a - b)
    if diff.ndim == 3:
        diff = diff.mean(axis=2)
    return HeatMap(normalize(diff), colormap)


def residual_mass_in_box(h: HeatMap, box: tuple[int, int, int, int]) -> float:
    """Share of the map's total mass inside ``(r0, r1, c0, c1)``; 0 for an empty map."""
    total = h.values.sum()
    if total <= 0:
        return 0.0
    r0, r1, c0, c1 = box
    return float(h.values[r0:r1, c0:c1].sum() / total)


def upsample_bilinear(m: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Bilinear resize with corner-aligned sampling."""
    h, w = m.shape
    rows = np.linspace(0, h - 1, shape[0])
    cols = np.linspace(0, w - 1, shape[1])
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return map_coordinates(m, [rr, cc], order=1, mode="nearest")


def gradcam_raw(acts: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """Rectified, gradient-weighted channel sum at activation resolution."""
    if acts.shape != grads.shape:
        raise ShapeError(f"activation {acts.shape} and gradient {grads.shape} stacks differ")
    weights = grads.mean(axis=(1, 2))
    return np.maximum(np.tensordot(weights, acts, axes=1), 0.0)


def gradcam_heat(d: Detector, x: np.ndarray, layer: str | None = None, logit: bool = True) -> np.ndarray:
    """Unnormalised Grad-CAM at input resolution.

    With ``logit`` the activation gradients are taken of ``logit(score)``
    rather than the probability, dividing out the ``s(1 - s)`` factor that
    otherwise shrinks heat on confident inputs. This only rescales the map,
    so normalised maps are the same either way; raw heat is comparable
    across inputs only on the logit scale.
    """
    if layer is None:
        layers = getattr(d, "layers", ())
        if not layers:
            raise BackendError(f"detector {d.name} exposes no Grad-CAM layers")
        layer = layers[-1]
    acts, grads = gradcam_activations(d, x, layer)
    if logit:
        s = float(d.head(layer, acts))
        if 0.0 < s < 1.0:
            grads = grads / (s * (1.0 - s))
    return np.maximum(upsample_bilinear(gradcam_raw(acts, grads), x.shape[:2]), 0.0)


def gradcam_map(d: Detector, x: np.ndarray, layer: str | None = None,
                colormap: str = DEFAULT_COLORMAP) -> HeatMap:
    """Rectified gradient-weighted activations, upsampled and min-max normalised."""
    return HeatMap(normalize(gradcam_heat(d, x, layer, logit=False)), colormap)


def grid_shape(n_rows: int, n_methods: int, side: int, pad: int) -> tuple[int, int]:
    return n_rows * side + pad, (n_methods + 1) * side + pad


def comparison_grid(rows: Sequence[tuple[np.ndarray, Sequence[np.ndarray]]], labels: Sequence[str] | None = None,
                    pad: int = 10, background: float = 1.0) -> np.ndarray:
    """Tiles ``(original, [adversarial per method])`` rows into one image.

    The top ``pad`` pixels hold column labels and the left ``pad`` pixels are
    a margin, so the result is ``(n*side + pad, (m+1)*side + pad, 3)``.
    """
    if len(rows) == 0:
        raise ValueError("comparison_grid needs at least one row")
    side = check_image(rows[0][0]).shape[0]
    m = len(rows[0][1])
    labels = list(labels) if labels is not None else [f"method{j}" for j in range(m)]
    if len(labels) != m:
        raise ValueError(f"{len(labels)} labels for {m} methods")
    H, W = grid_shape(len(rows), m, side, pad)
    grid = np.full((H, W, 3), background, dtype=np.float64)
    for i, (orig, advs) in enumerate(rows):
        if len(advs) != m:
            raise ShapeError(f"row {i} has {len(advs)} methods, expected {m}")
        for j, img in enumerate([orig, *advs]):
            img = check_image(img)
            if img.shape[0] != side:
                raise ShapeError(f"row {i} column {j} has side {img.shape[0]}, expected {side}")
            r0, c0 = pad + i * side, pad + j * side
            grid[r0:r0 + side, c0:c0 + side] = img
    if pad >= 8:
        grid = _draw_labels(grid, ["original", *labels], side, pad)
    return grid


def _draw_labels(grid: np.ndarray, labels: Sequence[str], side: int, pad: int) -> np.ndarray:
    from PIL import Image, ImageDraw, ImageFont

    im = Image.fromarray(image_to_uint8(grid))
    draw = ImageDraw.Draw(im)
    font = ImageFont.load_default(size=max(pad - 2, 6))
    for j, text in enumerate(labels):
        box = (pad + j * side, 0, pad + (j + 1) * side - 1, pad - 1)
        # clip text to its column
        tile = Image.new("RGB", (box[2] - box[0] + 1, pad), (255, 255, 255))
        ImageDraw.Draw(tile).text((1, 0), text, fill=(0, 0, 0), font=font)
        im.paste(tile, box[:2])
    del draw
    return np.asarray(im, dtype=np.float64) / 255.0


def save_grid(path: str | Path, grid: np.ndarray, labels: Sequence[str]) -> None:
    save_png(path, grid, {"columns": ",".join(["original", *labels])})
