import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from agnostic_upsampler.errors import ShapeError, ValidationError
from agnostic_upsampler.feature_io import resize_nearest
from agnostic_upsampler.losses import (
    AugmentationConfig,
    LossWeights,
    apply_augmentation,
    cos_mse,
    input_consistency,
    self_consistency,
    total_loss,
)


def vec(*xs):
    return np.array(xs, dtype=np.float64).reshape(1, 1, -1)


class TestCosMse:
    def test_identity(self):
        x = np.random.default_rng(0).standard_normal((4, 5, 7))
        assert cos_mse(x, x) == 0.0

    def test_orthogonal(self):
        assert cos_mse(vec(1, 0), vec(0, 1)) == 2.0

    def test_antiparallel(self):
        assert cos_mse(vec(1, 0), vec(-1, 0)) == 4.0

    def test_zero_norm_counts_as_distance_one(self):
        assert cos_mse(vec(0, 0), vec(0, 0)) == 1.0
        # cosine term 1 + mse (1 + 0) / 2
        assert cos_mse(vec(0, 0), vec(1, 0)) == 1.5

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            cos_mse(np.ones((2, 2, 3)), np.ones((2, 2, 4)))

    @settings(max_examples=60, deadline=None)
    @given(
        a=arrays(np.float64, (3, 4, 5), elements=st.floats(-10, 10)),
        b=arrays(np.float64, (3, 4, 5), elements=st.floats(-10, 10)),
    )
    def test_symmetric_and_nonnegative(self, a, b):
        assert cos_mse(a, b) == cos_mse(b, a)
        assert cos_mse(a, b) >= 0.0
        # identity holds where the squared-norm product does not underflow
        assume(np.all(((a * a).sum(-1)) ** 2 > 0))
        assert cos_mse(a, a) == 0.0

    @pytest.mark.parametrize("lam", [0.25, 1.0, 3.0])
    def test_positive_scaling_closed_form(self, lam):
        a = np.random.default_rng(1).standard_normal((3, 3, 6))
        expected = np.mean(((lam - 1) * a) ** 2)
        assert cos_mse(lam * a, a) == pytest.approx(expected, abs=1e-6)


class TestInputConsistency:
    def test_block_replication_is_zero(self):
        p = np.random.default_rng(2).standard_normal((3, 4, 5))
        q = resize_nearest(p, 6, 12)
        assert input_consistency(q, p) == pytest.approx(0.0, abs=1e-12)

    def test_constants(self):
        v = np.array([0.3, -1.2, 2.0])
        assert input_consistency(np.broadcast_to(v, (8, 8, 3)), np.broadcast_to(v, (2, 2, 3))) == pytest.approx(0, abs=1e-12)

    def test_hand_example(self):
        q = np.array([1.0, 3.0, 5.0, 7.0]).reshape(2, 2, 1)
        assert input_consistency(q, np.full((1, 1, 1), 4.0)) == pytest.approx(0.0, abs=1e-12)
        assert input_consistency(q, np.full((1, 1, 1), 5.0)) == pytest.approx(1.0, abs=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            input_consistency(np.ones((4, 4, 2)), np.ones((2, 2, 3)))


class TestAugmentation:
    @pytest.fixture
    def image(self):
        return np.random.default_rng(3).random((16, 16, 3)).astype(np.float32)

    def test_deterministic(self, image):
        assert apply_augmentation(image, 5).tobytes() == apply_augmentation(image, 5).tobytes()

    def test_disabled_is_identity(self, image):
        np.testing.assert_array_equal(apply_augmentation(image, 9, AugmentationConfig.disabled()), image)

    def test_range_over_many_seeds(self, image):
        always = AugmentationConfig(p_noise=1, p_brightness=1, p_contrast=1, p_blur=1, p_grayscale=0.5)
        for seed in range(1000):
            cfg = always if seed % 2 else None
            out = apply_augmentation(image, seed, cfg)
            assert out.shape == image.shape
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_augmentation_changes_something(self, image):
        assert any(not np.array_equal(apply_augmentation(image, s), image) for s in range(10))


class TestSelfConsistency:
    def test_identity_augmentation(self):
        rng = np.random.default_rng(0)
        image = rng.random((16, 16, 3)).astype(np.float32)
        p = rng.standard_normal((2, 2, 4))

        def forward(p, img):
            return resize_nearest(p, 16, 16) * img.mean()

        assert self_consistency(forward, p, image, 1, AugmentationConfig.disabled()) == 0.0

    def test_image_independent_forward(self):
        rng = np.random.default_rng(1)
        image = rng.random((8, 8, 3)).astype(np.float32)
        p = rng.standard_normal((2, 2, 4))
        for seed in range(5):
            assert self_consistency(lambda f, img: resize_nearest(f, 8, 8), p, image, seed) == 0.0


class TestTotalLoss:
    def test_weighted_sum(self):
        assert total_loss((2, 1, 4), LossWeights(1, 0.1, 0.1)) == pytest.approx(2.5)
        assert total_loss({"main": 3.0, "input": 5.0, "self": 7.0}, LossWeights(1, 0, 0)) == 3.0
        assert total_loss((0, 0, 0), LossWeights()) == 0

    def test_invalid_weights(self):
        with pytest.raises(ValidationError):
            LossWeights(-1, 0, 0)
        with pytest.raises(ValidationError):
            LossWeights(0, 0, 0)

    def test_defaults(self):
        assert LossWeights() == LossWeights(1.0, 0.1, 0.1)
