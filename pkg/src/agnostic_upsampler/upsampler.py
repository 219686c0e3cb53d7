"""Window-attention feature upsampler.

Queries come from the guidance image at output resolution, keys from the
guidance image area-pooled to the feature grid fused with the
channel-agnostic encoding of the input features, and the values are the input
features themselves. Every output vector is therefore a convex combination of
the low-resolution feature vectors in a ``(2r+1) x (2r+1)`` window around the
cell nearest to that output pixel.

Internally tensors are ``[B, C, H, W]``; the module-level numpy helpers take
and return ``[H, W, C]`` arrays.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from agnostic_upsampler.agnostic_layer import KernelBasis
from agnostic_upsampler.errors import ShapeError, ValidationError
from agnostic_upsampler.feature_io import nearest_indices, validate_feature_map, validate_image


@dataclass(frozen=True)
class UpsamplerConfig:
    query_dim: int = 64
    key_dim: int = 64
    hidden_dim: int = 32
    num_res_blocks: int = 2
    window_radius: int = 1
    pos_enc_frequencies: int = 4
    agnostic_M: int = 32
    agnostic_k: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.query_dim != self.key_dim:
            raise ValidationError("query_dim must equal key_dim")
        for name in ("query_dim", "hidden_dim", "num_res_blocks", "pos_enc_frequencies", "agnostic_M"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive")
        if self.window_radius < 0:
            raise ValidationError("window_radius must be non-negative")
        if self.agnostic_k < 1 or self.agnostic_k % 2 == 0:
            raise ValidationError("agnostic_k must be odd")

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def receptive_radius(self) -> int:
        """Pixel radius of the image path (stem conv + two 3x3 convs per block)."""
        return 1 + 2 * self.num_res_blocks


def positional_encoding_torch(h: int, w: int, frequencies: int, dtype=torch.float32) -> torch.Tensor:
    """``[4F, h, w]`` sinusoids of cell-center coordinates normalized to [0, 1]."""
    if h < 1 or w < 1 or frequencies < 1:
        raise ValidationError("positional encoding sizes must be positive")
    ys = (torch.arange(h, dtype=torch.float64) + 0.5) / h
    xs = (torch.arange(w, dtype=torch.float64) + 0.5) / w
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    chans = []
    for i in range(frequencies):
        f = (2.0**i) * math.pi
        chans += [torch.sin(f * xx), torch.cos(f * xx), torch.sin(f * yy), torch.cos(f * yy)]
    return torch.stack(chans).to(dtype)


def positional_encoding(h: int, w: int, frequencies: int) -> np.ndarray:
    return positional_encoding_torch(h, w, frequencies).permute(1, 2, 0).numpy().copy()


class ResBlock(nn.Module):
    # the second conv starts at zero so every block is the identity at init
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, x):
        return x + self.conv2(F.silu(self.conv1(F.silu(x))))


class ImageEncoder(nn.Module):
    def __init__(self, hidden_dim: int, num_blocks: int, frequencies: int):
        super().__init__()
        self.frequencies = frequencies
        self.stem = nn.Conv2d(3, hidden_dim, 3, padding=1)
        self.blocks = nn.Sequential(*[ResBlock(hidden_dim) for _ in range(num_blocks)])

    @property
    def out_channels(self) -> int:
        return self.stem.out_channels + 4 * self.frequencies

    def forward(self, image):
        x = self.blocks(self.stem(image * 2.0 - 1.0))
        B, _, h, w = x.shape
        pe = positional_encoding_torch(h, w, self.frequencies, dtype=x.dtype)
        return torch.cat([x, pe.unsqueeze(0).expand(B, -1, -1, -1)], dim=1)


def _window_index(h: int, w: int, out_h: int, out_w: int, radius: int, device=None):
    """Flat low-res indices ``[out_h * out_w, K]`` and validity mask for each output pixel.

    Out-of-grid offsets are clamped onto a cell that is still inside the
    window, so masked entries never read from outside it.
    """
    rows = torch.from_numpy(nearest_indices(h, out_h))
    cols = torch.from_numpy(nearest_indices(w, out_w))
    offs = torch.arange(-radius, radius + 1)
    cand_r = rows[:, None] + offs[None, :]
    cand_c = cols[:, None] + offs[None, :]
    valid_r = (cand_r >= 0) & (cand_r < h)
    valid_c = (cand_c >= 0) & (cand_c < w)
    cand_r = cand_r.clamp(0, h - 1)
    cand_c = cand_c.clamp(0, w - 1)
    idx = cand_r[:, None, :, None] * w + cand_c[None, :, None, :]
    mask = valid_r[:, None, :, None] & valid_c[None, :, None, :]
    K = (2 * radius + 1) ** 2
    return idx.reshape(out_h * out_w, K).to(device), mask.reshape(out_h * out_w, K).to(device)


def window_attention_torch(queries, keys, values, radius: int, return_weights: bool = False):
    """Local cross-attention from ``[B, d, H, W]`` queries onto a low-res grid.

    ``keys`` is ``[B, d, h, w]`` and ``values`` ``[B, c, h, w]``; returns
    ``[B, c, H, W]`` (plus ``[B, H*W, K]`` weights and ``[H*W, K]`` indices when
    ``return_weights``).
    """
    B, d, H, W = queries.shape
    if keys.dim() != 4 or keys.shape[0] != B or keys.shape[1] != d:
        raise ShapeError(f"keys {tuple(keys.shape)} incompatible with queries {tuple(queries.shape)}")
    _, _, h, w = keys.shape
    if values.shape[0] != B or values.shape[2:] != keys.shape[2:]:
        raise ShapeError(f"values {tuple(values.shape)} must share the key grid {tuple(keys.shape)}")
    if radius < 0:
        raise ValidationError("radius must be non-negative")
    c = values.shape[1]
    idx, mask = _window_index(h, w, H, W, radius, device=queries.device)
    n, K = idx.shape
    q = queries.flatten(2).transpose(1, 2)  # [B, n, d]
    k = keys.flatten(2).transpose(1, 2)[:, idx]  # [B, n, K, d]
    logits = torch.einsum("bnd,bnkd->bnk", q, k) / math.sqrt(d)
    logits = logits.masked_fill(~mask, float("-inf"))
    attn = torch.softmax(logits, dim=-1)
    v = values.flatten(2).transpose(1, 2)[:, idx]  # [B, n, K, c]
    out = torch.einsum("bnk,bnkc->bnc", attn, v)
    out = out.transpose(1, 2).reshape(B, c, H, W)
    if return_weights:
        return out, attn, idx
    return out


class Upsampler(nn.Module):
    def __init__(self, config: UpsamplerConfig | None = None):
        super().__init__()
        self.config = config = config or UpsamplerConfig()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            gen = torch.Generator().manual_seed(config.seed)
            self.image_encoder = ImageEncoder(config.hidden_dim, config.num_res_blocks, config.pos_enc_frequencies)
            self.basis = KernelBasis(config.agnostic_M, config.agnostic_k, generator=gen)
            feat_ch = self.image_encoder.out_channels
            self.query_proj = nn.Conv2d(feat_ch, config.query_dim, 1)
            self.fuse_in = nn.Conv2d(feat_ch + config.agnostic_M, config.hidden_dim, 1)
            self.fuse_block = ResBlock(config.hidden_dim)
            self.key_proj = nn.Conv2d(config.hidden_dim, config.key_dim, 1)
            with torch.no_grad():
                # sharper initial attention than the default fan-in scaling
                self.query_proj.weight.mul_(3.0)
                self.key_proj.weight.mul_(3.0)

    def encode_queries(self, image):
        return self.query_proj(self.image_encoder(image))

    def encode_keys(self, image_lr, p):
        if image_lr.shape[2:] != p.shape[2:]:
            raise ShapeError(
                f"downsampled image {tuple(image_lr.shape[2:])} must match feature grid {tuple(p.shape[2:])}"
            )
        canonical = self.basis(p)
        fused = self.fuse_in(torch.cat([self.image_encoder(image_lr), canonical], dim=1))
        return self.key_proj(self.fuse_block(fused))

    def forward(self, image, p, out_size=None, window_radius: int | None = None):
        """Upsample ``p`` ``[B, c, h, w]`` guided by ``image`` ``[B, 3, H, W]``.

        The output grid defaults to the image resolution; with ``out_size`` the
        guidance is first resized to that grid.
        """
        if image.dim() != 4 or image.shape[1] != 3:
            raise ShapeError(f"image must be [B, 3, H, W], got {tuple(image.shape)}")
        if p.dim() != 4 or p.shape[0] != image.shape[0]:
            raise ShapeError(f"features must be [B, c, h, w] matching the image batch, got {tuple(p.shape)}")
        radius = self.config.window_radius if window_radius is None else window_radius
        guidance = image
        if out_size is not None and tuple(out_size) != tuple(image.shape[2:]):
            guidance = resize_bilinear_torch(image, out_size)
        image_lr = F.adaptive_avg_pool2d(image, p.shape[2:])
        queries = self.encode_queries(guidance)
        keys = self.encode_keys(image_lr, p)
        return window_attention_torch(queries, keys, p, radius)


def resize_bilinear_torch(x, size):
    size = tuple(int(s) for s in size)
    if tuple(x.shape[2:]) == size:
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def _to_tensor(arr: np.ndarray, dtype) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype).permute(2, 0, 1).unsqueeze(0)


def _to_numpy(t: torch.Tensor) -> np.ndarray:
    return t[0].permute(1, 2, 0).detach().cpu().numpy().copy()


def _dtype(model: Upsampler):
    return next(model.parameters()).dtype


def encode_queries(model: Upsampler, image) -> np.ndarray:
    img = validate_image(image)
    with torch.no_grad():
        return _to_numpy(model.encode_queries(_to_tensor(img, _dtype(model))))


def encode_keys(model: Upsampler, image_lr, p) -> np.ndarray:
    img = validate_image(image_lr)
    fmap = validate_feature_map(p)
    dt = _dtype(model)
    with torch.no_grad():
        return _to_numpy(model.encode_keys(_to_tensor(img, dt), _to_tensor(fmap, dt)))


def window_attention(queries, keys, values, radius: int) -> np.ndarray:
    q, k, v = (validate_feature_map(a) for a in (queries, keys, values))
    dt = torch.float64 if np.float64 in (q.dtype, k.dtype, v.dtype) else torch.float32
    with torch.no_grad():
        out = window_attention_torch(_to_tensor(q, dt), _to_tensor(k, dt), _to_tensor(v, dt), radius)
    return _to_numpy(out)


def upsample(model: Upsampler, image, p, out_size=None, window_radius: int | None = None) -> np.ndarray:
    """Upsample ``[h, w, c]`` features to the guidance resolution (or ``out_size``)."""
    img = validate_image(image)
    fmap = validate_feature_map(p)
    dt = _dtype(model)
    with torch.no_grad():
        out = model(_to_tensor(img, dt), _to_tensor(fmap, dt), out_size=out_size, window_radius=window_radius)
    return _to_numpy(out).astype(fmap.dtype, copy=False)
