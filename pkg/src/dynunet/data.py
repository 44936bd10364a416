"""Synthetic multi-class segmentation samples built from deformed blobs.

Each foreground class gets one star-shaped blob: a polar radius with a couple
of sinusoidal boundary harmonics, stretched and rotated, so shapes vary in
size, eccentricity and outline from sample to sample. Larger blobs are painted
first so smaller ones stay visible on top. Pixels take a per-class intensity
plus Gaussian noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NOISE_SIGMA = 0.05
MIN_CLASS_PIXELS = 12
MAX_OVERLAP = 0.25


@dataclass
class SegSample:
    image: np.ndarray  # [1, H, W] float in [0, 1]
    labels: np.ndarray  # [H, W] int64
    num_classes: int
    meta: dict = field(default_factory=dict)


def class_intensities(num_classes: int) -> np.ndarray:
    return np.linspace(0.15, 0.85, num_classes)


def _blob_params(rng: np.random.Generator, h: int, w: int) -> dict:
    size = min(h, w)
    return {
        "radius": float(rng.uniform(0.07, 0.2) * size),
        "stretch": float(rng.uniform(0.65, 1.5)),
        "angle": float(rng.uniform(0, np.pi)),
        "amps": rng.uniform(0.0, 0.15, size=2).round(6).tolist(),
        "freqs": rng.integers(2, 6, size=2).tolist(),
        "phases": rng.uniform(0, 2 * np.pi, size=2).round(6).tolist(),
    }


def _rasterize(p: dict, cy: float, cx: float, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    ca, sa = np.cos(p["angle"]), np.sin(p["angle"])
    u = (ca * dx + sa * dy) / np.sqrt(p["stretch"])
    v = (-sa * dx + ca * dy) * np.sqrt(p["stretch"])
    rho = np.hypot(u, v)
    phi = np.arctan2(v, u)
    boundary = np.ones_like(phi)
    for a, f, ph in zip(p["amps"], p["freqs"], p["phases"]):
        boundary += a * np.sin(f * phi + ph)
    return rho <= p["radius"] * boundary


def generate_synthetic_sample(seed: int, h: int = 64, w: int = 64, num_classes: int = 6) -> SegSample:
    """Deterministic sample for ``seed``; one blob per foreground class."""
    if h < 16 or w < 16:
        raise ValueError(f"synthetic samples need extents >= 16, got {h}x{w}")
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    rng = np.random.default_rng(seed)
    for attempt in range(50):
        params = [_blob_params(rng, h, w) for _ in range(num_classes - 1)]
        order = sorted(range(num_classes - 1), key=lambda i: -params[i]["radius"])
        labels = np.zeros((h, w), dtype=np.int64)
        centers = {}
        for i in order:
            p = params[i]
            margin = 0.5 * p["radius"]
            for _ in range(100):
                cy = float(rng.uniform(margin, h - 1 - margin))
                cx = float(rng.uniform(margin, w - 1 - margin))
                blob = _rasterize(p, cy, cx, h, w)
                area = blob.sum()
                if area and (labels[blob] > 0).sum() <= MAX_OVERLAP * area:
                    break
            labels[blob] = i + 1
            centers[i + 1] = (round(cy, 6), round(cx, 6))
        counts = np.bincount(labels.ravel(), minlength=num_classes)
        if counts[1:].min() >= MIN_CLASS_PIXELS:
            break
    levels = class_intensities(num_classes)
    image = levels[labels] + rng.normal(0.0, NOISE_SIGMA, size=(h, w))
    image = np.clip(image, 0.0, 1.0)[None]
    meta = {"seed": seed, "attempt": attempt, "blobs": {c: {**params[c - 1], "center": centers[c]} for c in centers}}
    return SegSample(image=image, labels=labels, num_classes=num_classes, meta=meta)


def make_dataset(seed: int, count: int, h: int = 64, w: int = 64, num_classes: int = 6) -> list:
    """``count`` samples whose per-sample seeds derive from ``seed``."""
    seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, size=count)
    return [generate_synthetic_sample(int(s), h, w, num_classes) for s in seeds]


def stack_batch(samples, dtype=np.float32):
    images = np.stack([s.image for s in samples]).astype(dtype)
    labels = np.stack([s.labels for s in samples])
    return images, labels
