"""Tests for the autodiff tensor, its differentiable ops and the optimizer.

Gradients are checked against central finite differences in float64;
convolutions against a direct nested-loop implementation.
"""

import numpy as np
import pytest

from genro_vad.autodiff import Adam, AdamState, Graph, Tensor, adam_step, no_grad, precision
from genro_vad.autodiff import functional as F
from genro_vad.autodiff.tensor import get_dtype, set_precision
from genro_vad.exceptions import (
    DimensionError,
    GraphError,
    NumericDivergenceError,
    VadConfigError,
)
from genro_vad.models import CVAE, MemAE, cvae_loss, memae_loss

EPS = 1e-6


def numeric_grad(loss_fn, array, index, eps=EPS):
    """Central difference of ``loss_fn()`` w.r.t. ``array[index]`` (in place)."""
    old = array[index]
    array[index] = old + eps
    plus = loss_fn()
    array[index] = old - eps
    minus = loss_fn()
    array[index] = old
    return (plus - minus) / (2 * eps)


def check_gradients(loss_fn, tensors, rng, samples=6, rtol=1e-4, atol=1e-7):
    """Compare analytic gradients of ``loss_fn`` with finite differences."""
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    loss.backward()
    for t in tensors:
        assert t.grad is not None
        flat = rng.choice(t.data.size, size=min(samples, t.data.size), replace=False)
        for k in flat:
            index = np.unravel_index(k, t.data.shape)
            expected = numeric_grad(lambda: loss_fn().item(), t.data, index)
            assert t.grad[index] == pytest.approx(expected, rel=rtol, abs=atol)


def naive_conv2d(x, kernel, stride, padding):
    """Direct nested-loop cross-correlation."""
    n, c, h, w = x.shape
    f, _, kh, kw = kernel.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, f, out_h, out_w))
    for b in range(n):
        for o in range(f):
            for i in range(out_h):
                for j in range(out_w):
                    window = xp[b, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[b, o, i, j] = np.sum(window * kernel[o])
    return out


@pytest.mark.unit
class TestTensor:
    """Tensor construction, precision and graph bookkeeping."""

    def test_precision_controls_dtype(self):
        """Test new tensors follow the global precision."""
        set_precision("float32")
        assert Tensor([1.0]).dtype == np.float32
        with precision("float64"):
            assert Tensor([1.0]).dtype == np.float64
        assert get_dtype() is np.float32

    def test_unknown_precision(self):
        """Test an unknown precision name is a config error."""
        with pytest.raises(VadConfigError, match="Unknown precision"):
            set_precision("float16")

    def test_non_finite_input_rejected(self):
        """Test NaN and Inf never enter a tensor."""
        with pytest.raises(NumericDivergenceError):
            Tensor([1.0, np.nan])

    def test_non_finite_result_rejected(self, float64):
        """Test an op producing Inf raises NumericDivergenceError."""
        with pytest.raises(NumericDivergenceError, match="log"):
            F.log(Tensor([0.0]))

    def test_backward_needs_scalar(self):
        """Test backward on a vector raises GraphError."""
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(GraphError, match="scalar"):
            (x * 2.0).backward()

    def test_backward_on_detached_graph(self):
        """Test backward on a constant raises GraphError."""
        with pytest.raises(GraphError, match="detached"):
            Tensor([1.0]).sum().backward()

    def test_no_grad_records_nothing(self):
        """Test results computed under no_grad are constants."""
        x = Tensor([1.0, 2.0], requires_grad=True)
        with no_grad():
            y = (x * x).sum()
        assert not y.requires_grad
        assert Graph.trace(y).records == ()

    def test_shared_subexpression_accumulates(self, float64):
        """Test a node used twice receives the sum of both gradient paths."""
        x = Tensor([3.0, -1.0], requires_grad=True)
        (x * x + x).sum().backward()
        np.testing.assert_allclose(x.grad, [7.0, -1.0])

    def test_trace_order(self, float64):
        """Test every record comes after the records producing its inputs."""
        x = Tensor([1.0, 2.0], requires_grad=True)
        a = x * 2.0
        b = a + x
        loss = (a * b).sum()
        records = Graph.trace(loss).records
        position = {id(r.output): i for i, r in enumerate(records)}
        for i, record in enumerate(records):
            for parent in record.inputs:
                if id(parent) in position:
                    assert position[id(parent)] < i
        assert len(records) == 4

    def test_broadcast_gradient_shapes(self, float64):
        """Test gradients of broadcast operands keep the operand shape."""
        a = Tensor(np.ones((3, 4)), requires_grad=True)
        b = Tensor(np.ones((1, 4)), requires_grad=True)
        (a * b).sum().backward()
        assert b.grad.shape == (1, 4)
        np.testing.assert_allclose(b.grad, np.full((1, 4), 3.0))

    def test_incompatible_shapes(self):
        """Test a non-broadcastable pair raises DimensionError."""
        with pytest.raises(DimensionError):
            Tensor(np.ones((2, 3))) + Tensor(np.ones((3, 2)))

    def test_matmul_needs_2d(self):
        """Test matmul rejects mismatched inner dimensions."""
        with pytest.raises(DimensionError, match="matmul"):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


@pytest.mark.unit
class TestGradients:
    """Finite-difference checks of elementwise, reduction and shape ops."""

    def test_elementwise_chain(self, float64, rng):
        """Test a chain of smooth elementwise ops."""
        x = Tensor(rng.uniform(0.5, 1.5, (3, 4)), requires_grad=True)

        def loss():
            y = F.sigmoid(x) * F.tanh(x) + F.exp(x * 0.3) + F.log(x) + F.sqrt(x)
            return (F.square(y) / (x + 2.0)).mean()

        check_gradients(loss, [x], rng)

    def test_softmax(self, float64, rng):
        """Test softmax gradient along the last axis."""
        x = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        w = rng.normal(size=(4, 5))
        check_gradients(lambda: (F.softmax(x, axis=1) * w).sum(), [x], rng)

    def test_matmul_transpose_reshape(self, float64, rng):
        """Test matmul through transpose and reshape."""
        a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(3, 5)), requires_grad=True)

        def loss():
            m = a.transpose(0, 2, 1).reshape(8, 3)
            return F.square(m @ b).sum()

        check_gradients(loss, [a, b], rng)

    def test_concat(self, float64, rng):
        """Test concat splits the gradient back to its inputs."""
        a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        w = rng.normal(size=(2, 5))
        check_gradients(lambda: (F.concat([a, b], axis=1) * w).sum(), [a, b], rng)

    def test_leaky_relu(self, float64, rng):
        """Test leaky ReLU away from the kink."""
        data = rng.uniform(0.2, 1.0, (3, 3)) * rng.choice([-1.0, 1.0], (3, 3))
        x = Tensor(data, requires_grad=True)
        check_gradients(lambda: F.square(F.leaky_relu(x, 0.2)).sum(), [x], rng)

    def test_mse_and_kl(self, float64, rng):
        """Test the two training losses."""
        mu = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        logvar = Tensor(rng.normal(size=(3, 2)) * 0.5, requires_grad=True)
        mu0 = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        logvar0 = Tensor(rng.normal(size=(3, 2)) * 0.5, requires_grad=True)
        target = rng.normal(size=(3, 2))

        def loss():
            return F.mse(mu, target) + F.kl_diag_gaussian(mu, logvar, mu0, logvar0)

        check_gradients(loss, [mu, logvar, mu0, logvar0], rng)

    def test_bilinear_resize(self, float64, rng):
        """Test the resize adjoint."""
        x = Tensor(rng.normal(size=(1, 2, 5, 7)), requires_grad=True)
        w = rng.normal(size=(1, 2, 8, 4))
        check_gradients(lambda: (F.bilinear_resize(x, 8, 4) * w).sum(), [x], rng)


@pytest.mark.unit
class TestConvolution:
    """conv2d against a loop oracle, conv2d_transpose as its adjoint."""

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
    def test_conv2d_matches_loops(self, float64, rng, stride, padding):
        """Test conv2d equals the nested-loop cross-correlation."""
        x = rng.normal(size=(2, 3, 8, 8))
        k = rng.normal(size=(4, 3, 4 if stride == 2 else 3, 4 if stride == 2 else 3))
        out = F.conv2d(Tensor(x), Tensor(k), stride, padding)
        np.testing.assert_allclose(out.data, naive_conv2d(x, k, stride, padding), atol=1e-10)

    def test_halving_geometry(self, float64):
        """Test kernel 4, stride 2, padding 1 halves and its transpose doubles."""
        x = Tensor(np.ones((1, 2, 8, 8)))
        down = F.conv2d(x, Tensor(np.ones((3, 2, 4, 4))), 2, 1)
        assert down.shape == (1, 3, 4, 4)
        up = F.conv2d_transpose(down, Tensor(np.ones((3, 2, 4, 4))), 2, 1)
        assert up.shape == (1, 2, 8, 8)

    def test_transpose_is_adjoint(self, float64, rng):
        """Test <conv(x), y> equals <x, conv_transpose(y)> for the same kernel."""
        x = rng.normal(size=(2, 3, 8, 8))
        k = rng.normal(size=(5, 3, 4, 4))
        y = rng.normal(size=(2, 5, 4, 4))
        lhs = np.sum(F.conv2d(Tensor(x), Tensor(k), 2, 1).data * y)
        rhs = np.sum(x * F.conv2d_transpose(Tensor(y), Tensor(k), 2, 1).data)
        assert lhs == pytest.approx(rhs, rel=1e-10)

    def test_conv_gradients(self, float64, rng):
        """Test input and kernel gradients of both convolutions."""
        x = Tensor(rng.normal(size=(2, 2, 6, 6)), requires_grad=True)
        k = Tensor(rng.normal(size=(3, 2, 4, 4)), requires_grad=True)
        kt = Tensor(rng.normal(size=(3, 2, 4, 4)), requires_grad=True)

        def loss():
            down = F.conv2d(x, k, 2, 1)
            return F.square(F.conv2d_transpose(down, kt, 2, 1)).mean()

        check_gradients(loss, [x, k, kt], rng)

    def test_inexact_geometry(self):
        """Test a stride that does not divide the padded span is a config error."""
        with pytest.raises(VadConfigError, match="not exact"):
            F.conv_output_size(7, 4, 2, 1)

    def test_kernel_larger_than_input(self):
        """Test a kernel that does not fit raises DimensionError."""
        with pytest.raises(DimensionError):
            F.conv_output_size(2, 5, 1, 0)

    def test_channel_mismatch(self):
        """Test kernel channels must match the input."""
        with pytest.raises(DimensionError, match="channel"):
            F.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


@pytest.mark.unit
class TestResize:
    """Bilinear interpolation matrices."""

    def test_identity(self):
        """Test resizing to the same size is the identity."""
        np.testing.assert_allclose(F.resize_matrix(6, 6), np.eye(6))

    def test_rows_sum_to_one(self):
        """Test every output pixel is a convex combination."""
        matrix = F.resize_matrix(7, 3)
        np.testing.assert_allclose(matrix.sum(axis=1), np.ones(7))
        assert matrix.min() >= 0

    def test_constant_preserved(self):
        """Test a constant image stays constant after resizing."""
        out = F.resize_array(np.full((2, 5, 9), 0.25), 8, 8)
        np.testing.assert_allclose(out, 0.25)


@pytest.mark.unit
class TestKL:
    """Closed-form KL values."""

    def test_identical_gaussians(self, float64, rng):
        """Test KL of a Gaussian with itself is 0."""
        mu = Tensor(rng.normal(size=(2, 3)))
        logvar = Tensor(rng.normal(size=(2, 3)))
        assert F.kl_diag_gaussian(mu, logvar, mu, logvar).item() == pytest.approx(0.0, abs=1e-12)

    def test_shifted_unit_gaussian(self, float64):
        """Test KL(N(mu,1) || N(0,1)) = mu^2 / 2 summed over dimensions."""
        mu = Tensor([[1.0, 2.0]])
        kl = F.kl_diag_gaussian(mu, Tensor([[0.0, 0.0]]))
        assert kl.item() == pytest.approx(2.5)

    def test_reductions(self, float64):
        """Test mean, sum and none reductions over the batch."""
        mu = Tensor([[1.0], [3.0]])
        logvar = Tensor([[0.0], [0.0]])
        assert F.kl_diag_gaussian(mu, logvar, reduction="sum").item() == pytest.approx(5.0)
        assert F.kl_diag_gaussian(mu, logvar).item() == pytest.approx(2.5)
        assert F.kl_diag_gaussian(mu, logvar, reduction="none").shape == (2,)


@pytest.mark.unit
class TestAdam:
    """Adam update rule."""

    def test_first_step_moves_by_lr(self):
        """Test the bias-corrected first step has magnitude lr."""
        params, state = adam_step(
            {"w": np.array([1.0, -1.0])}, {"w": np.array([0.5, -3.0])}, AdamState(), 0.1
        )
        np.testing.assert_allclose(params["w"], [0.9, -0.9], atol=1e-6)
        assert state.step == 1

    def test_inputs_not_mutated(self):
        """Test adam_step leaves its inputs untouched."""
        w = np.array([1.0])
        state = AdamState()
        adam_step({"w": w}, {"w": np.array([1.0])}, state, 0.1)
        assert w[0] == 1.0 and state.step == 0

    def test_missing_gradient_counts_as_zero(self):
        """Test a None gradient leaves a fresh parameter unchanged."""
        params, _ = adam_step({"w": np.array([2.0])}, {"w": None}, AdamState(), 0.1)
        np.testing.assert_allclose(params["w"], [2.0])

    def test_non_positive_lr(self):
        """Test lr <= 0 is rejected."""
        with pytest.raises(VadConfigError, match="Learning rate"):
            Adam({}, lr=0.0)

    def test_minimizes_quadratic(self, float64):
        """Test the optimizer drives a quadratic towards its minimum."""
        w = Tensor([5.0, -3.0], requires_grad=True)
        optimizer = Adam({"w": w}, lr=0.1)
        for _ in range(500):
            optimizer.zero_grad()
            F.square(w - Tensor([1.0, 2.0])).sum().backward()
            optimizer.step()
        np.testing.assert_allclose(w.data, [1.0, 2.0], atol=5e-2)


@pytest.mark.unit
class TestModelGradients:
    """End-to-end finite-difference checks through both networks."""

    def test_memae(self, float64, rng):
        """Test the autoencoder loss gradient (no shrinkage, so it is smooth)."""
        model = MemAE(4, widths=(2, 3, 4), num_slots=5, threshold=0.0, seed=1)
        flows = Tensor(rng.normal(size=(2, 4, 8, 8)))
        params = [model.enc1.weight, model.mem3.slots, model.dec1.bias, model.mem1.slots]
        check_gradients(lambda: memae_loss(model, flows, 0.01)[0], params, rng, samples=4)

    def test_cvae(self, float64, rng):
        """Test the CVAE loss gradient with the posterior mean as latent."""
        model = CVAE(9, 4, size=8, widths=(2, 3, 4), z_dim=3, seed=1)
        images = Tensor(rng.uniform(size=(2, 9, 8, 8)))
        flows = Tensor(rng.normal(size=(2, 4, 8, 8)))
        target = rng.uniform(size=(2, 3, 8, 8))

        def loss():
            out = model(images, flows, noise_factor=0.0)
            return cvae_loss(out, target, 0.1)[0]

        params = [model.img1.weight, model.flow2.weight, model.post_mu.weight, model.prior_logvar.bias]
        params += [model.dec_in.weight, model.dec1.weight]
        check_gradients(loss, params, rng, samples=4)

    def test_cvae_sampled_latent(self, float64, rng):
        """Test the loss gradient through a reparameterized sample with frozen noise."""
        model = CVAE(9, 4, size=8, widths=(2, 3, 4), z_dim=3, seed=2)
        images = Tensor(rng.uniform(size=(2, 9, 8, 8)))
        flows = Tensor(rng.normal(size=(2, 4, 8, 8)))
        target = rng.uniform(size=(2, 3, 8, 8))

        def loss():
            # A fresh generator per call replays the same noise draw.
            out = model(images, flows, rng=np.random.default_rng(17), noise_factor=1.0)
            return cvae_loss(out, target, 0.1)[0]

        assert loss().item() == loss().item()
        params = [model.post_mu.weight, model.post_mu.bias]
        params += [model.post_logvar.weight, model.post_logvar.bias, model.flow1.weight]
        check_gradients(loss, params, rng, samples=4)
