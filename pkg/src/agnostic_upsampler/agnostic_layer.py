"""Channel-count-agnostic convolution onto a learned filter basis.

Every input channel is correlated separately with each of the ``M`` basis
filters, the ``M`` responses at a location are turned into a distribution by a
softmax, and those distributions are averaged over input channels. The output
has ``M`` channels no matter how many channels came in.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from agnostic_upsampler.errors import ShapeError, ValidationError
from agnostic_upsampler.feature_io import validate_feature_map

# bounds the [B * chunk, M, h, w] intermediate for very wide inputs
_CHANNEL_CHUNK = 128


class KernelBasis(nn.Module):
    def __init__(self, num_filters: int = 32, kernel_size: int = 3, generator: torch.Generator | None = None):
        super().__init__()
        if num_filters < 1:
            raise ValidationError("num_filters must be positive")
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ValidationError(f"kernel_size must be odd and positive, got {kernel_size}")
        bound = 1.0 / kernel_size
        init = torch.rand(num_filters, kernel_size, kernel_size, generator=generator, dtype=torch.float32)
        self.filters = nn.Parameter(init * (2 * bound) - bound)

    @property
    def num_filters(self) -> int:
        return self.filters.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.filters.shape[-1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """``[B, N, h, w]`` -> ``[B, M, h, w]``."""
        return agnostic_conv_torch(x, self.filters)


def agnostic_conv_torch(x: torch.Tensor, filters: torch.Tensor) -> torch.Tensor:
    if x.dim() != 4:
        raise ShapeError(f"expected [B, N, h, w], got {tuple(x.shape)}")
    B, N, h, w = x.shape
    if N < 1 or h < 1 or w < 1:
        raise ShapeError(f"empty input extent {tuple(x.shape)}")
    M, k, _ = filters.shape
    weight = filters.to(x.dtype).unsqueeze(1)
    total = None
    for start in range(0, N, _CHANNEL_CHUNK):
        chunk = x[:, start:start + _CHANNEL_CHUNK]
        n = chunk.shape[1]
        resp = F.conv2d(chunk.reshape(B * n, 1, h, w), weight, padding=k // 2)
        probs = torch.softmax(resp, dim=1).reshape(B, n, M, h, w).sum(dim=1)
        total = probs if total is None else total + probs
    return total / N


def agnostic_conv(p, basis) -> np.ndarray:
    """Apply the layer to a ``[h, w, N]`` map, returning ``[h, w, M]``.

    ``basis`` is a :class:`KernelBasis` or a raw ``[M, k, k]`` filter array.
    """
    fmap = validate_feature_map(p)
    filters = basis.filters.detach() if isinstance(basis, KernelBasis) else torch.as_tensor(np.asarray(basis))
    if filters.dim() != 3 or filters.shape[1] != filters.shape[2] or filters.shape[1] % 2 == 0:
        raise ValidationError(f"filters must be [M, k, k] with odd k, got {tuple(filters.shape)}")
    dtype = torch.float64 if fmap.dtype == np.float64 else torch.float32
    x = torch.from_numpy(np.ascontiguousarray(fmap)).to(dtype).permute(2, 0, 1).unsqueeze(0)
    with torch.no_grad():
        out = agnostic_conv_torch(x, filters.to(dtype))
    return out[0].permute(1, 2, 0).numpy().copy()
