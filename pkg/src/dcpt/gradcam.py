"""Grad-CAM heatmaps over the extractor groups."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .tensor import Tensor, backward
from .transformer import DeepfakeDetector


def normalize_map(cam: np.ndarray) -> np.ndarray:
    """Min-max to [0, 1]; an all-zero map stays zero, a constant positive map becomes ones."""
    lo, hi = cam.min(), cam.max()
    if hi > lo:
        return (cam - lo) / (hi - lo)
    return np.ones_like(cam) if hi > 0 else np.zeros_like(cam)


def class_activation_map(activation: Tensor, target: Tensor) -> np.ndarray:
    """``ReLU(sum_k alpha_k A_k)`` with ``alpha_k`` the spatial mean of d target / d A_k.

    ``activation`` is ``C x h x w`` or ``1 x C x h x w`` and must sit on the
    graph that produced the scalar ``target``.
    """
    activation.retain_grad()
    activation.grad = None
    backward(target)
    a = activation.data.reshape(activation.shape[-3:]).astype(np.float64)
    g = activation.grad.reshape(a.shape).astype(np.float64)
    alpha = g.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(alpha, a, axes=1), 0.0)
    return normalize_map(cam)


def upsample_nearest(cam: np.ndarray, size: int) -> np.ndarray:
    h, w = cam.shape
    rows = np.arange(size) * h // size
    cols = np.arange(size) * w // size
    return cam[rows][:, cols]


def gradcam_heatmap(model: DeepfakeDetector, image: np.ndarray, target_layer: int, target_class: int) -> np.ndarray:
    """Heatmap in [0, 1] at input resolution for one ``3 x S x S`` image."""
    n_groups = len(model.extractor.groups)
    if not 0 <= target_layer < n_groups:
        raise ValueError(f"target layer must be an extractor group in 0..{n_groups - 1}, got {target_layer}")
    if not 0 <= target_class < model.cfg.num_classes:
        raise ValueError(f"target class must be in 0..{model.cfg.num_classes - 1}, got {target_class}")
    model.eval()
    x = Tensor(np.asarray(image, dtype=model.cfg.dtype)[None])
    capture: dict = {}
    logits = model(x, capture)
    act = capture["groups"][target_layer]
    cam = class_activation_map(act, logits[0, target_class])
    return upsample_nearest(cam, image.shape[-1])


def to_uint8(heatmap: np.ndarray) -> np.ndarray:
    return np.clip(np.round(heatmap * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, heatmap: np.ndarray) -> None:
    pixels = to_uint8(heatmap)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def save_heatmap(path, heatmap: np.ndarray) -> tuple[Path, Path]:
    """8-bit grayscale PNG at ``path`` plus a PGM twin with the same stem."""
    path = Path(path)
    Image.fromarray(to_uint8(heatmap), "L").save(path)
    pgm = path.with_suffix(".pgm")
    write_pgm(pgm, heatmap)
    return path, pgm
