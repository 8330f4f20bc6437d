"""Grad-CAM heatmaps over the last convolutional feature map."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .tensor import Tensor

FLAT_EPS = 1e-12
ALPHA = 0.5


@dataclass
class Heatmap:
    values: np.ndarray       # (h', w') in [0, 1], feature-map resolution
    upsampled: np.ndarray    # (H, W), input resolution
    target_class: int
    flat: bool = False       # True when the raw map was numerically zero


def bilinear_sample(values: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of ``values`` at continuous source coordinates (ys x xs grid)."""
    h, w = values.shape
    ys = np.clip(np.asarray(ys, dtype=np.float64), 0, h - 1)
    xs = np.clip(np.asarray(xs, dtype=np.float64), 0, w - 1)
    y0 = np.minimum(np.floor(ys).astype(int), max(h - 2, 0))
    x0 = np.minimum(np.floor(xs).astype(int), max(w - 2, 0))
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    v = values.astype(np.float64)
    top = v[np.ix_(y0, x0)] * (1 - wx) + v[np.ix_(y0, x1)] * wx
    bot = v[np.ix_(y1, x0)] * (1 - wx) + v[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def upsample(values: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Align-corners bilinear resize: output corners coincide with input corners."""
    h, w = values.shape
    H, W = out_hw
    ys = np.linspace(0, h - 1, H) if H > 1 else np.zeros(1)
    xs = np.linspace(0, w - 1, W) if W > 1 else np.zeros(1)
    return bilinear_sample(values, ys, xs)


def gradcam(model, image, target_class: int | None = None) -> Heatmap:
    """Grad-CAM for one image (1 x C x H x W); ``target_class`` defaults to the argmax logit."""
    if not isinstance(image, Tensor):
        image = Tensor(np.asarray(image, dtype=model.parameters()[0].dtype))
    if image.ndim == 3:
        image = image.reshape(1, *image.shape)
    if image.shape[0] != 1:
        raise ValueError(f"gradcam takes a single image, got batch of {image.shape[0]}")
    model.eval()
    model.zero_grad()
    logits, fmap = model.forward_features(image)
    c = model.num_classes
    if target_class is None:
        target_class = int(np.argmax(logits.data[0]))
    if not 0 <= target_class < c:
        raise IndexError(f"target class {target_class} out of range for {c} classes")
    fmap.retain_grad()
    logits[0, target_class].backward()
    grad = fmap.grad if fmap.grad is not None else np.zeros_like(fmap.data)
    model.zero_grad()
    A = fmap.data[0].astype(np.float64)           # (K, h', w')
    alpha = grad[0].astype(np.float64).mean(axis=(1, 2))
    raw = np.maximum(np.tensordot(alpha, A, axes=1), 0.0)
    peak = raw.max()
    flat = bool(peak < FLAT_EPS)
    values = np.zeros_like(raw) if flat else raw / peak
    return Heatmap(values, upsample(values, image.shape[2:]), target_class, flat)


def colormap() -> np.ndarray:
    """Fixed 256x3 uint8 ramp from blue through green to red."""
    i = np.arange(256)
    r = i
    g = 255 - np.abs(2 * i - 255)
    b = 255 - i
    return np.stack([r, g, b], axis=1).astype(np.uint8)


_CMAP = colormap()


def overlay_array(heatmap: Heatmap, image: np.ndarray) -> np.ndarray:
    """H x W x 3 uint8 blend of the grayscale source with the colour-mapped heatmap."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 4:
        img = img[0]
    gray = img.mean(axis=0) if img.ndim == 3 else img
    if gray.shape != heatmap.upsampled.shape:
        raise ValueError(f"image {gray.shape} and heatmap {heatmap.upsampled.shape} differ in size")
    gray255 = np.clip(gray, 0.0, 1.0) * 255.0
    idx = np.floor(np.clip(heatmap.upsampled, 0.0, 1.0) * 255.0 + 0.5).astype(int)
    color = _CMAP[idx].astype(np.float64)
    out = (1 - ALPHA) * gray255[..., None] + ALPHA * color
    return np.floor(out + 0.5).astype(np.uint8)


def overlay_export(heatmap: Heatmap, image: np.ndarray, path) -> None:
    """Write the overlay as an RGB PNG."""
    try:
        Image.fromarray(overlay_array(heatmap, image)).save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write heatmap PNG {path}: {exc}") from exc


def export_csv(heatmap: Heatmap, path) -> None:
    """Raw pre-upsample map values, one row per feature-map row."""
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for row in heatmap.values:
                w.writerow([repr(float(v)) for v in row])
    except OSError as exc:
        raise OSError(f"cannot write heatmap CSV {path}: {exc}") from exc
