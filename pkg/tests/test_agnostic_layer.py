import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from agnostic_upsampler.agnostic_layer import KernelBasis, agnostic_conv, agnostic_conv_torch
from agnostic_upsampler.errors import ShapeError, ValidationError
from oracles import agnostic_conv_loops


def random_filters(rng, m, k=3):
    return rng.uniform(-1, 1, size=(m, k, k))


def test_single_filter_gives_ones():
    rng = np.random.default_rng(0)
    p = rng.standard_normal((5, 4, 7))
    out = agnostic_conv(p, random_filters(rng, 1))
    assert out.shape == (5, 4, 1)
    np.testing.assert_array_equal(out, 1.0)


def test_hand_example_matches_loops():
    p = np.array([[0, 1, 0], [1, 2, 1], [0, 1, 0]], dtype=np.float64)[..., None]
    center = np.zeros((3, 3))
    center[1, 1] = 1.0
    filters = np.stack([center, np.full((3, 3), 1.0 / 9.0)])
    out = agnostic_conv(p, filters)
    np.testing.assert_allclose(out, agnostic_conv_loops(p, filters), atol=1e-6)
    # center cell: responses (2, 6/9) -> softmax
    e = np.exp([2.0, 6.0 / 9.0])
    np.testing.assert_allclose(out[1, 1], e / e.sum(), atol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_random_instances_match_loops(seed):
    rng = np.random.default_rng(seed)
    h, w, n = rng.integers(1, 9), rng.integers(1, 9), rng.integers(1, 6)
    m = int(rng.integers(1, 5))
    k = int(rng.choice([1, 3, 5]))
    p = rng.standard_normal((h, w, n))
    filters = random_filters(rng, m, k)
    np.testing.assert_allclose(agnostic_conv(p, filters), agnostic_conv_loops(p, filters), atol=1e-6)


def test_duplicated_channels_are_invisible():
    rng = np.random.default_rng(1)
    p = rng.standard_normal((6, 6, 5)).astype(np.float32)
    basis = KernelBasis(8, 3, generator=torch.Generator().manual_seed(0))
    a = agnostic_conv(p, basis)
    b = agnostic_conv(np.concatenate([p, p], axis=2), basis)
    np.testing.assert_allclose(a, b, atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 40), seed=st.integers(0, 2**16))
def test_permutation_invariance_and_simplex(n, seed):
    rng = np.random.default_rng(seed)
    p = rng.standard_normal((5, 7, n)).astype(np.float32)
    filters = random_filters(rng, 6).astype(np.float32)
    out = agnostic_conv(p, filters)
    perm = agnostic_conv(p[..., rng.permutation(n)], filters)
    np.testing.assert_allclose(out, perm, atol=1e-6)
    assert np.all(out > 0) and np.all(out < 1)
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-5)


@pytest.mark.parametrize("n", [1, 3, 32, 384, 768])
def test_output_shape_independent_of_channels(n):
    basis = KernelBasis(32, 3, generator=torch.Generator().manual_seed(0))
    p = np.random.default_rng(n).standard_normal((4, 5, n)).astype(np.float32)
    assert agnostic_conv(p, basis).shape == (4, 5, 32)


def test_init_range_and_validation():
    basis = KernelBasis(16, 5, generator=torch.Generator().manual_seed(3))
    assert basis.filters.abs().max() <= 1 / 5
    with pytest.raises(ValidationError):
        KernelBasis(4, 2)
    with pytest.raises(ShapeError):
        agnostic_conv_torch(torch.zeros(1, 2, 0, 3), basis.filters)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    x = torch.from_numpy(rng.standard_normal((1, 4, 5, 6)))
    filters = torch.from_numpy(rng.uniform(-0.5, 0.5, size=(3, 3, 3))).requires_grad_(True)
    target = torch.from_numpy(rng.random((1, 3, 5, 6)))

    def loss(f):
        return ((agnostic_conv_torch(x, f) - target) ** 2).sum()

    loss(filters).backward()
    analytic = filters.grad.numpy().copy()
    numeric = np.zeros_like(analytic)
    eps = 1e-4
    base = filters.detach().clone()
    for idx in np.ndindex(*base.shape):
        plus, minus = base.clone(), base.clone()
        plus[idx] += eps
        minus[idx] -= eps
        numeric[idx] = (loss(plus).item() - loss(minus).item()) / (2 * eps)
    rel = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    assert rel < 1e-3
    np.testing.assert_allclose(analytic, numeric, rtol=1e-3, atol=1e-7)
