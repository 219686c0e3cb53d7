"""Seeded procedural images: a two-color gradient background with random polygons."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from agnostic_upsampler.feature_io import save_image


def render_image(seed: int, size: int = 64, num_shapes: tuple[int, int] = (3, 7)) -> np.ndarray:
    rng = np.random.default_rng(seed)
    c0, c1 = rng.uniform(0, 1, size=(2, 3))
    angle = rng.uniform(0, 2 * np.pi)
    ys, xs = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    t = np.cos(angle) * xs + np.sin(angle) * ys
    t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
    background = c0[None, None] * (1 - t[..., None]) + c1[None, None] * t[..., None]

    img = Image.fromarray(np.round(background * 255).astype(np.uint8), mode="RGB")
    draw = ImageDraw.Draw(img)
    for _ in range(rng.integers(num_shapes[0], num_shapes[1] + 1)):
        center = rng.uniform(0, size, size=2)
        radius = rng.uniform(size / 8, size / 3)
        n = int(rng.integers(3, 7))
        angles = np.sort(rng.uniform(0, 2 * np.pi, size=n))
        radii = radius * rng.uniform(0.5, 1.0, size=n)
        pts = [(float(center[0] + r * np.cos(a)), float(center[1] + r * np.sin(a))) for a, r in zip(angles, radii)]
        color = tuple(int(v) for v in rng.integers(0, 256, size=3))
        draw.polygon(pts, fill=color)
    return np.asarray(img, dtype=np.float32) / np.float32(255.0)


def make_dataset(count: int, size: int = 64, seed: int = 0) -> list[np.ndarray]:
    return [render_image(seed * 100_003 + i, size) for i in range(count)]


def write_dataset(directory: str | os.PathLike, count: int, size: int = 64, seed: int = 0) -> list[Path]:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(make_dataset(count, size, seed)):
        path = out / f"synthetic_{i:05d}.png"
        save_image(img, path)
        paths.append(path)
    return paths
