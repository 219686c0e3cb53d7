"""A frozen, patch-local feature extractor used as an exact ground-truth oracle.

Each output cell is ``W2 @ tanh(W1 @ x + b1) + b2`` where ``x`` is its own
``P x P x 3`` pixel patch rescaled from [0, 1] to [-1, 1], and nothing else.
Because of this, running the encoder densely (stride < P) yields the features
a "higher-resolution" encoder would produce, and encoding a P-aligned crop
reproduces the corresponding slice of the full encoding exactly.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from agnostic_upsampler.errors import ShapeError, ValidationError
from agnostic_upsampler.feature_io import read_feature_map, validate_image


@dataclass(frozen=True)
class EncoderConfig:
    patch_size: int = 8
    feature_dim: int = 32
    seed: int = 0
    hidden_dim: int = 64

    def __post_init__(self):
        if self.patch_size < 1 or self.feature_dim < 1 or self.hidden_dim < 1:
            raise ValidationError(f"encoder sizes must be positive: {self}")
        if not 0 <= self.seed < 2**64:
            raise ValidationError("seed must be an unsigned 64-bit integer")


class ToyEncoder:
    def __init__(self, config: EncoderConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        fan_in = config.patch_size * config.patch_size * 3
        b1 = 1.0 / np.sqrt(fan_in)
        b2 = 1.0 / np.sqrt(config.hidden_dim)
        self.w1 = rng.uniform(-b1, b1, size=(fan_in, config.hidden_dim))
        self.b1 = rng.uniform(-b1, b1, size=config.hidden_dim)
        self.w2 = rng.uniform(-b2, b2, size=(config.hidden_dim, config.feature_dim))
        self.b2 = rng.uniform(-b2, b2, size=config.feature_dim)
        for w in (self.w1, self.b1, self.w2, self.b2):
            w.flags.writeable = False

    def embed_patches(self, patches: np.ndarray) -> np.ndarray:
        """Map ``[..., P, P, 3]`` pixel patches to ``[..., feature_dim]`` features."""
        lead = patches.shape[:-3]
        flat = patches.reshape(-1, self.w1.shape[0]).astype(np.float64) * 2.0 - 1.0
        hidden = np.tanh(flat @ self.w1 + self.b1)
        out = hidden @ self.w2 + self.b2
        return out.reshape(*lead, -1).astype(np.float32)

    def encode_dense(self, image, stride: int) -> np.ndarray:
        img = validate_image(image)
        P = self.config.patch_size
        H, W, _ = img.shape
        if stride < 1:
            raise ValidationError("stride must be positive")
        if H < P or W < P or (H - P) % stride or (W - P) % stride:
            raise ShapeError(
                f"stride {stride} must divide (H - P, W - P) = ({H - P}, {W - P})"
            )
        windows = np.lib.stride_tricks.sliding_window_view(img, (P, P), axis=(0, 1))
        # sliding_window_view yields [rows, cols, 3, P, P]
        windows = windows[::stride, ::stride].transpose(0, 1, 3, 4, 2)
        return self.embed_patches(windows)

    def encode(self, image) -> np.ndarray:
        img = validate_image(image)
        P = self.config.patch_size
        H, W, _ = img.shape
        if H % P or W % P:
            raise ShapeError(f"image size {H}x{W} is not divisible by patch size {P}")
        return self.encode_dense(img, stride=P)


@lru_cache(maxsize=16)
def get_encoder(config: EncoderConfig) -> ToyEncoder:
    return ToyEncoder(config)


def encode(image, config: EncoderConfig) -> np.ndarray:
    return get_encoder(config).encode(image)


def encode_dense(image, config: EncoderConfig, stride: int) -> np.ndarray:
    return get_encoder(config).encode_dense(image, stride)


def import_external_features(path: str | os.PathLike) -> np.ndarray:
    """Load features exported by any backbone; the channel count is unconstrained."""
    return read_feature_map(path)
