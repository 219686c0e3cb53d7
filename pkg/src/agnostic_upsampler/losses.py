"""Training objectives: cosine + MSE distance, input consistency, self-consistency.

Torch variants operate on ``[B, c, H, W]`` tensors and stay differentiable;
the plain variants take ``[H, W, c]`` arrays and return Python floats.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import gaussian_filter

from agnostic_upsampler.errors import ShapeError, ValidationError
from agnostic_upsampler.feature_io import validate_feature_map, validate_image


@dataclass(frozen=True)
class LossWeights:
    w_main: float = 1.0
    w_input: float = 0.1
    w_self: float = 0.1

    def __post_init__(self):
        ws = (self.w_main, self.w_input, self.w_self)
        if any(not np.isfinite(w) or w < 0 for w in ws):
            raise ValidationError(f"loss weights must be finite and non-negative: {ws}")
        if not any(w > 0 for w in ws):
            raise ValidationError("at least one loss weight must be positive")


def cosine_distance_torch(a: torch.Tensor, b: torch.Tensor, dim: int = 1) -> torch.Tensor:
    """Per-location ``1 - cos(a, b)`` along ``dim``; zero-norm locations give 1.

    ``dot / sqrt(|a|^2 |b|^2)`` makes ``a == b`` yield exactly 0, since
    ``sqrt(fl(s * s)) == s`` in IEEE arithmetic.
    """
    dot = (a * b).sum(dim)
    denom_sq = (a * a).sum(dim) * (b * b).sum(dim)
    nonzero = denom_sq > 0
    safe = torch.where(nonzero, denom_sq, torch.ones_like(denom_sq))
    cos = torch.where(nonzero, dot / torch.sqrt(safe), torch.zeros_like(dot))
    return 1.0 - cos.clamp(-1.0, 1.0)


def cos_mse_torch(a: torch.Tensor, b: torch.Tensor, dim: int = 1) -> torch.Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return cosine_distance_torch(a, b, dim).mean() + ((a - b) ** 2).mean()


def cos_mse(a, b) -> float:
    """Mean per-location cosine distance plus elementwise MSE of two ``[H, W, c]`` maps."""
    x = validate_feature_map(a)
    y = validate_feature_map(b)
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {y.shape}")
    tx = torch.from_numpy(x.astype(np.float64))
    ty = torch.from_numpy(y.astype(np.float64))
    return float(cos_mse_torch(tx, ty, dim=-1))


def input_consistency_torch(q: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    if q.shape[:2] != p.shape[:2]:
        raise ShapeError(f"channel mismatch: {tuple(q.shape)} vs {tuple(p.shape)}")
    pooled = F.adaptive_avg_pool2d(q, p.shape[2:])
    return cos_mse_torch(pooled, p)


def input_consistency(q, p) -> float:
    """``cos_mse`` between ``q`` area-pooled onto ``p``'s grid and ``p`` itself."""
    x = validate_feature_map(q)
    y = validate_feature_map(p)
    if x.shape[2] != y.shape[2]:
        raise ShapeError(f"channel mismatch: {x.shape[2]} vs {y.shape[2]}")
    tx = torch.from_numpy(x.astype(np.float64)).permute(2, 0, 1).unsqueeze(0)
    ty = torch.from_numpy(y.astype(np.float64)).permute(2, 0, 1).unsqueeze(0)
    return float(input_consistency_torch(tx, ty))


@dataclass(frozen=True)
class AugmentationConfig:
    p_noise: float = 0.5
    noise_sigma: tuple[float, float] = (0.0, 0.08)
    p_brightness: float = 0.5
    brightness: tuple[float, float] = (0.7, 1.3)
    p_contrast: float = 0.5
    contrast: tuple[float, float] = (0.7, 1.3)
    p_blur: float = 0.5
    blur_sigma: tuple[float, float] = (0.0, 1.5)
    p_grayscale: float = 0.1

    @classmethod
    def disabled(cls) -> "AugmentationConfig":
        return cls(p_noise=0.0, p_brightness=0.0, p_contrast=0.0, p_blur=0.0, p_grayscale=0.0)


_LUMA = np.array([0.299, 0.587, 0.114])


def apply_augmentation(image, seed, config: AugmentationConfig | None = None) -> np.ndarray:
    """Randomly photometrically perturb ``image``; deterministic in ``seed``."""
    cfg = config or AugmentationConfig()
    img = validate_image(image)
    rng = np.random.default_rng(seed)
    # every draw is made unconditionally so the stream layout does not depend on outcomes
    draws = rng.random(5)
    bright = rng.uniform(*cfg.brightness)
    contrast = rng.uniform(*cfg.contrast)
    blur = rng.uniform(*cfg.blur_sigma)
    noise_sigma = rng.uniform(*cfg.noise_sigma)
    noise = rng.standard_normal(img.shape)

    out = img.astype(np.float64)
    if draws[0] < cfg.p_brightness:
        out = np.clip(out * bright, 0.0, 1.0)
    if draws[1] < cfg.p_contrast:
        mean = (out @ _LUMA).mean()
        out = np.clip((out - mean) * contrast + mean, 0.0, 1.0)
    if draws[2] < cfg.p_blur and blur > 0:
        out = gaussian_filter(out, sigma=(blur, blur, 0.0), mode="reflect")
    if draws[3] < cfg.p_grayscale:
        out = np.repeat((out @ _LUMA)[..., None], 3, axis=2)
    if draws[4] < cfg.p_noise:
        out = out + noise_sigma * noise
    return np.clip(out, 0.0, 1.0).astype(img.dtype)


def self_consistency(forward, p, image, seed, config: AugmentationConfig | None = None) -> float:
    """``cos_mse`` between ``forward(p, image)`` and ``forward(p, augmented image)``."""
    clean = forward(p, image)
    noisy = forward(p, apply_augmentation(image, seed, config))
    return cos_mse(clean, noisy)


def total_loss(parts, weights: LossWeights):
    """Weighted sum of ``(main, input, self)`` terms; also accepts a mapping."""
    if isinstance(parts, dict):
        parts = (parts["main"], parts["input"], parts["self"])
    main, inp, slf = parts
    return weights.w_main * main + weights.w_input * inp + weights.w_self * slf
