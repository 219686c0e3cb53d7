import math

import numpy as np
import pytest
import torch

from agnostic_upsampler.errors import ShapeError, ValidationError
from agnostic_upsampler.feature_io import resize_nearest
from agnostic_upsampler.losses import cos_mse_torch
from agnostic_upsampler.upsampler import (
    Upsampler,
    UpsamplerConfig,
    encode_keys,
    encode_queries,
    positional_encoding,
    upsample,
    window_attention,
    window_attention_torch,
)
from oracles import window_attention_loops


def jitter(model, scale=0.05, seed=0):
    """Perturb every parameter so no branch is exactly zero (the residual convs start at zero)."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for prm in model.parameters():
            prm.add_(torch.randn(prm.shape, generator=gen, dtype=prm.dtype) * scale)
    return model


@pytest.fixture(scope="module")
def model():
    return Upsampler(UpsamplerConfig(seed=1)).eval()


def rand_image(seed, h, w=None):
    return np.random.default_rng(seed).random((h, w or h, 3)).astype(np.float32)


class TestPositionalEncoding:
    def test_center_cell(self):
        np.testing.assert_allclose(positional_encoding(1, 1, 1)[0, 0], [1, 0, 1, 0], atol=1e-7)

    def test_range_and_shape(self):
        pe = positional_encoding(5, 9, 3)
        assert pe.shape == (5, 9, 12)
        assert pe.min() >= -1 and pe.max() <= 1

    def test_invalid(self):
        with pytest.raises(ValidationError):
            positional_encoding(0, 3, 1)


class TestWindowAttention:
    @pytest.mark.parametrize("seed", range(100))
    def test_matches_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        h, w = rng.integers(1, 6, size=2)
        H, W = rng.integers(1, 13, size=2)
        d, c = rng.integers(1, 5, size=2)
        r = int(rng.integers(0, 3))
        q = rng.standard_normal((H, W, d))
        k = rng.standard_normal((h, w, d))
        v = rng.standard_normal((h, w, c))
        np.testing.assert_allclose(window_attention(q, k, v, r), window_attention_loops(q, k, v, r), atol=1e-6)

    def test_hand_example(self):
        # one query row over a 1x2 value grid; logits (0, ln 3) give weights (1/4, 3/4)
        q = np.ones((1, 2, 1))
        k = np.array([0.0, math.log(3.0)]).reshape(1, 2, 1)
        v = np.array([0.0, 10.0]).reshape(1, 2, 1)
        out = window_attention(q, k, v, 1)
        assert out[0, 0, 0] == pytest.approx(7.5, abs=1e-12)
        np.testing.assert_allclose(out, window_attention_loops(q, k, v, 1), atol=1e-12)

    @pytest.mark.parametrize("shape", [((3, 4), (9, 8)), ((5, 5), (5, 5)), ((4, 6), (2, 3))])
    def test_radius_zero_is_nearest(self, shape):
        (h, w), (H, W) = shape
        rng = np.random.default_rng(0)
        v = rng.standard_normal((h, w, 6)).astype(np.float32)
        out = window_attention(rng.standard_normal((H, W, 4)), rng.standard_normal((h, w, 4)), v, 0)
        np.testing.assert_array_equal(out, resize_nearest(v, H, W))

    def test_equal_values(self):
        rng = np.random.default_rng(1)
        v = np.broadcast_to(np.array([0.5, -2.0, 3.0]), (4, 4, 3))
        out = window_attention(rng.standard_normal((8, 8, 5)), rng.standard_normal((4, 4, 5)), v, 1)
        np.testing.assert_allclose(out, np.broadcast_to(v[0, 0], (8, 8, 3)), atol=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_weights_and_hull(self, seed):
        rng = np.random.default_rng(seed)
        h, w, H, W, r = 5, 6, 11, 13, int(rng.integers(0, 3))
        q = torch.from_numpy(rng.standard_normal((1, 8, H, W)) * 3).float()
        k = torch.from_numpy(rng.standard_normal((1, 8, h, w)) * 3).float()
        v = torch.from_numpy(rng.standard_normal((1, 3, h, w))).float()
        out, attn, idx = window_attention_torch(q, k, v, r, return_weights=True)
        assert torch.all(attn >= 0)
        np.testing.assert_allclose(attn.sum(-1).numpy(), 1.0, atol=1e-5)
        window = v.flatten(2)[0][:, idx]  # [c, n, K]
        lo = window.masked_fill(attn[0][None] == 0, float("inf")).amin(-1)
        hi = window.masked_fill(attn[0][None] == 0, float("-inf")).amax(-1)
        flat = out.flatten(2)[0]
        assert torch.all(flat >= lo - 1e-5) and torch.all(flat <= hi + 1e-5)

    def test_locality_is_bit_exact(self):
        rng = np.random.default_rng(2)
        h, w, H, W, r = 7, 7, 21, 21, 1
        q = rng.standard_normal((H, W, 4)).astype(np.float32)
        k = rng.standard_normal((h, w, 4)).astype(np.float32)
        v = rng.standard_normal((h, w, 3)).astype(np.float32)
        base = window_attention(q, k, v, r)
        u, t = 10, 4  # nearest cell (3, 1); window rows 2..4, cols 0..2
        k2, v2 = k.copy(), v.copy()
        outside = np.ones((h, w), bool)
        outside[2:5, 0:3] = False
        k2[outside] += rng.standard_normal((outside.sum(), 4)).astype(np.float32)
        v2[outside] += rng.standard_normal((outside.sum(), 3)).astype(np.float32)
        out = window_attention(q, k2, v2, r)
        assert out[u, t].tobytes() == base[u, t].tobytes()
        assert not np.array_equal(out, base)

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            window_attention(np.ones((4, 4, 3)), np.ones((2, 2, 4)), np.ones((2, 2, 5)), 1)
        with pytest.raises(ShapeError):
            window_attention(np.ones((4, 4, 3)), np.ones((2, 2, 3)), np.ones((2, 3, 5)), 1)


class TestEncoders:
    def test_query_shape_and_determinism(self, model):
        img = rand_image(0, 64)
        a = encode_queries(model, img)
        assert a.shape == (64, 64, 64)
        assert a.tobytes() == encode_queries(model, img.copy()).tobytes()

    def test_query_receptive_field(self):
        m = jitter(Upsampler(UpsamplerConfig(seed=2)), scale=0.2).eval()
        radius = m.config.receptive_radius
        img = rand_image(1, 32)
        y, x = 16, 16
        other = rand_image(2, 32)
        field = (slice(y - radius, y + radius + 1), slice(x - radius, x + radius + 1))
        other[field] = img[field]
        qa, qb = encode_queries(m, img), encode_queries(m, other)
        np.testing.assert_allclose(qa[y, x], qb[y, x], atol=1e-6)
        # a single pixel on the edge of the field does reach the query
        edge = img.copy()
        edge[y + radius, x] = 1.0 - edge[y + radius, x]
        assert np.abs(encode_queries(m, edge)[y, x] - qa[y, x]).max() > 1e-6

    def test_keys_shape_independent_of_channels(self, model):
        img = rand_image(3, 4)
        rng = np.random.default_rng(0)
        for n in (32, 384):
            assert encode_keys(model, img, rng.standard_normal((4, 4, n)).astype(np.float32)).shape == (4, 4, 64)

    def test_keys_channel_permutation(self, model):
        img = rand_image(4, 5)
        p = np.random.default_rng(1).standard_normal((5, 5, 24)).astype(np.float32)
        perm = np.random.default_rng(2).permutation(24)
        np.testing.assert_allclose(encode_keys(model, img, p), encode_keys(model, img, p[..., perm]), atol=1e-6)

    def test_keys_spatial_mismatch(self, model):
        with pytest.raises(ShapeError):
            encode_keys(model, rand_image(0, 4), np.ones((5, 5, 3), np.float32))


class TestUpsample:
    @pytest.mark.parametrize("n", [16, 32, 384, 768])
    def test_any_channel_count(self, model, n):
        p = np.random.default_rng(n).standard_normal((4, 4, n)).astype(np.float32)
        assert upsample(model, rand_image(n, 32), p).shape == (32, 32, n)

    @pytest.mark.parametrize("src,dst", [(8, 64), (16, 48), (16, 16), (6, 20)])
    def test_any_to_any(self, model, src, dst):
        p = np.random.default_rng(src).standard_normal((src, src, 12)).astype(np.float32)
        out = upsample(model, rand_image(dst, dst), p)
        assert out.shape == (dst, dst, 12) and np.all(np.isfinite(out))

    def test_out_size_differs_from_image(self, model):
        p = np.random.default_rng(0).standard_normal((4, 4, 8)).astype(np.float32)
        assert upsample(model, rand_image(0, 64), p, out_size=(8, 12)).shape == (8, 12, 8)

    def test_equal_resolution_radius_zero_is_identity(self, model):
        p = np.random.default_rng(5).standard_normal((16, 16, 32)).astype(np.float32)
        np.testing.assert_array_equal(upsample(model, rand_image(5, 16), p, window_radius=0), p)

    def test_constant_features(self, model):
        v = np.array([1.5, -0.5, 2.0, 0.0], np.float32)
        out = upsample(model, rand_image(6, 24), np.broadcast_to(v, (3, 3, 4)))
        np.testing.assert_allclose(out, np.broadcast_to(v, (24, 24, 4)), atol=1e-5)

    def test_deterministic_construction(self):
        a, b = Upsampler(UpsamplerConfig(seed=4)), Upsampler(UpsamplerConfig(seed=4))
        for (na, ta), (nb, tb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert na == nb and torch.equal(ta, tb)

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            UpsamplerConfig(query_dim=32, key_dim=64)
        with pytest.raises(ValidationError):
            UpsamplerConfig(window_radius=-1)
        with pytest.raises(ValidationError):
            UpsamplerConfig(agnostic_k=2)


ZERO_GRAD_OK = {"fuse_block.conv2.bias", "key_proj.bias"}


def test_end_to_end_gradient_matches_finite_differences():
    torch.manual_seed(0)
    model = jitter(Upsampler(UpsamplerConfig(hidden_dim=8, query_dim=8, key_dim=8, agnostic_M=4, seed=3)), 0.1)
    model = model.double()
    rng = np.random.default_rng(0)
    image = torch.from_numpy(rng.random((1, 3, 16, 16)))
    p = torch.from_numpy(rng.standard_normal((1, 5, 2, 2)))
    target = torch.from_numpy(rng.standard_normal((1, 5, 16, 16)))

    def loss():
        return cos_mse_torch(model(image, p), target)

    model.zero_grad()
    loss().backward()
    eps = 1e-4
    for name, prm in model.named_parameters():
        flat = prm.data.view(-1)
        picks = rng.choice(flat.numel(), size=min(6, flat.numel()), replace=False)
        analytic = prm.grad.view(-1)[picks].numpy().copy()
        numeric = np.zeros_like(analytic)
        with torch.no_grad():
            for j, i in enumerate(picks):
                old = flat[i].item()
                flat[i] = old + eps
                up = loss().item()
                flat[i] = old - eps
                down = loss().item()
                flat[i] = old
                numeric[j] = (up - down) / (2 * eps)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
        if scale < 1e-10:
            # biases that shift every key equally cancel inside the softmax
            assert name in ZERO_GRAD_OK, name
            continue
        assert np.linalg.norm(analytic - numeric) / scale < 1e-3, name
