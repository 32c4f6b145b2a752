"""Tests for the conditional next-frame predictor."""

import numpy as np
import pytest

from genro_vad.autodiff.tensor import Tensor
from genro_vad.exceptions import DimensionError, UntrainedModelError, VadConfigError
from genro_vad.models import CVAE, cvae_loss
from genro_vad.models.cvae import soft_clamp


def small_cvae(**kwargs):
    params = dict(image_channels=9, flow_channels=4, size=8, widths=(2, 3, 4), z_dim=3, seed=1)
    params.update(kwargs)
    return CVAE(**params)


def inputs(rng, n=2):
    return Tensor(rng.uniform(size=(n, 9, 8, 8))), Tensor(rng.normal(size=(n, 4, 8, 8)))


@pytest.mark.unit
class TestForward:
    """Training pass."""

    def test_shapes_and_range(self, float64, rng):
        """Test prediction shape, its (0, 1) range and latent shapes."""
        out = small_cvae()(*inputs(rng), rng=rng)
        assert out.prediction.shape == (2, 3, 8, 8)
        assert 0 < out.prediction.data.min() and out.prediction.data.max() < 1
        assert out.mu.shape == out.logvar.shape == out.mu0.shape == out.logvar0.shape == (2, 3)

    def test_zero_noise_is_deterministic(self, float64, rng):
        """Test noise_factor 0 decodes the posterior mean."""
        model = small_cvae()
        images, flows = inputs(rng)
        a = model(images, flows, rng=np.random.default_rng(1), noise_factor=0.0)
        b = model(images, flows, rng=np.random.default_rng(2), noise_factor=0.0)
        np.testing.assert_array_equal(a.prediction.data, b.prediction.data)

    def test_sampling_uses_rng(self, float64, rng):
        """Test different noise draws give different predictions."""
        model = small_cvae()
        images, flows = inputs(rng)
        a = model(images, flows, rng=np.random.default_rng(1))
        b = model(images, flows, rng=np.random.default_rng(2))
        assert not np.array_equal(a.prediction.data, b.prediction.data)

    def test_prior_ignores_flows(self, float64, rng):
        """Test the prior depends on the observed crops only."""
        model = small_cvae()
        images, flows = inputs(rng)
        a = model(images, flows, noise_factor=0.0)
        b = model(images, Tensor(flows.data * 3.0), noise_factor=0.0)
        np.testing.assert_array_equal(a.mu0.data, b.mu0.data)
        assert not np.allclose(a.mu.data, b.mu.data)

    def test_logvar_bounded(self, float64, rng):
        """Test log-variances stay inside the configured limit."""
        model = small_cvae(logvar_limit=0.5)
        images, flows = inputs(rng)
        out = model(Tensor(images.data * 50.0), Tensor(flows.data * 50.0), noise_factor=0.0)
        assert np.abs(out.logvar.data).max() <= 0.5
        assert np.abs(out.logvar0.data).max() <= 0.5

    def test_input_validation(self, rng):
        """Test mismatched channels and batch sizes are rejected."""
        model = small_cvae()
        images, flows = inputs(rng)
        with pytest.raises(DimensionError, match="images"):
            model(Tensor(np.ones((2, 6, 8, 8))), flows)
        with pytest.raises(DimensionError, match="flows"):
            model(images, Tensor(np.ones((1, 4, 8, 8))))

    def test_size_multiple_of_8(self):
        """Test the cube side must allow three halvings."""
        with pytest.raises(VadConfigError, match="multiple of 8"):
            small_cvae(size=12)


@pytest.mark.unit
class TestPredict:
    """Deterministic inference."""

    def test_untrained(self, rng):
        """Test predict refuses an untrained model."""
        images, flows = inputs(rng)
        with pytest.raises(UntrainedModelError):
            small_cvae().predict(images.data, flows.data)

    def test_prior_mean_is_deterministic(self, rng):
        """Test repeated predictions are identical and build no graph."""
        model = small_cvae().mark_trained()
        images, flows = inputs(rng)
        a = model.predict(images.data, flows.data)
        b = model.predict(images.data, flows.data)
        np.testing.assert_array_equal(a, b)
        assert a.shape == (2, 3, 8, 8)

    def test_posterior_mode(self, float64, rng):
        """Test posterior mode equals the zero-noise training pass."""
        model = small_cvae().mark_trained()
        images, flows = inputs(rng)
        predicted = model.predict(images.data, flows.data, mode="posterior")
        expected = model(images, flows, noise_factor=0.0).prediction.data
        np.testing.assert_allclose(predicted, expected)

    def test_unknown_mode(self, rng):
        """Test an unknown mode is a configuration error."""
        images, flows = inputs(rng)
        with pytest.raises(VadConfigError, match="mode"):
            small_cvae().mark_trained().predict(images.data, flows.data, mode="sample")


@pytest.mark.unit
class TestLoss:
    """Prediction plus KL objective."""

    def test_terms(self, float64, rng):
        """Test the loss is prediction MSE plus beta times KL."""
        out = small_cvae()(*inputs(rng), rng=rng)
        target = rng.uniform(size=(2, 3, 8, 8))
        loss, terms = cvae_loss(out, target, beta=0.5)
        expected_mse = np.mean((out.prediction.data - target) ** 2)
        assert terms["prediction"] == pytest.approx(expected_mse)
        assert terms["kl"] >= 0
        assert loss.item() == pytest.approx(terms["prediction"] + 0.5 * terms["kl"])

    def test_soft_clamp(self, float64):
        """Test soft clamping is odd, bounded and near identity at zero."""
        values = soft_clamp(Tensor([-100.0, -0.01, 0.0, 0.01, 100.0]), 2.0).data
        assert np.all(np.abs(values) < 2.0 + 1e-12)
        assert values[2] == 0.0
        assert values[3] == pytest.approx(0.01, rel=1e-4)
        assert values[0] == pytest.approx(-values[4])
