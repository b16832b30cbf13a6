import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentcf import autodiff as ad
from latentcf.autodiff import Tensor
from latentcf.errors import ContractError, ParameterError, ShapeError


def naive_matmul(a, b):
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            for l in range(k):
                out[i, j] += a[i, l] * b[l, j]
    return out


def naive_conv2d(x, kernel, bias, stride, padding):
    c_in, h, w = x.shape
    f, _, kh, kw = kernel.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((f, h_out, w_out))
    for fi in range(f):
        for i in range(h_out):
            for j in range(w_out):
                patch = xp[:, i * stride : i * stride + kh, j * stride : j * stride + kw]
                out[fi, i, j] = (patch * kernel[fi]).sum() + bias[fi]
    return out


class TestLinear:
    def test_identity(self):
        y = ad.linear(Tensor([1.0, 0.0]), Tensor(np.eye(2)), Tensor([0.0, 0.0]))
        np.testing.assert_array_equal(y.data, [1.0, 0.0])

    def test_arithmetic(self):
        y = ad.linear(Tensor([1.0, 2.0]), Tensor([[1.0], [1.0]]), Tensor([3.0]))
        np.testing.assert_array_equal(y.data, [6.0])

    def test_matches_naive_matmul(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(4, 8))
        w = rng.normal(size=(8, 3))
        b = rng.normal(size=3)
        y = ad.linear(Tensor(x), Tensor(w), Tensor(b))
        np.testing.assert_allclose(y.data, naive_matmul(x, w) + b, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ad.linear(Tensor([1.0, 2.0, 3.0]), Tensor(np.eye(2)), Tensor([0.0, 0.0]))


class TestConv2d:
    def test_identity_kernel(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(1, 5, 5))
        y = ad.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor([0.0]))
        np.testing.assert_allclose(y.data, x, atol=1e-15)

    def test_zero_kernel_constant_bias(self):
        x = np.random.default_rng(2).normal(size=(2, 4, 4))
        y = ad.conv2d(Tensor(x), Tensor(np.zeros((3, 2, 3, 3))), Tensor([7.0, -1.0, 0.5]), padding=1)
        assert y.shape == (3, 4, 4)
        for fi, c in enumerate([7.0, -1.0, 0.5]):
            np.testing.assert_array_equal(y.data[fi], np.full((4, 4), c))

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
    def test_matches_sliding_window(self, stride, padding):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(3, 5, 5))
        k = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        y = ad.conv2d(Tensor(x), Tensor(k), Tensor(b), stride=stride, padding=padding)
        np.testing.assert_allclose(y.data, naive_conv2d(x, k, b, stride, padding), atol=1e-12)

    def test_batch_matches_per_item(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(2, 3, 5, 5))
        k = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        y = ad.conv2d(Tensor(x), Tensor(k), Tensor(b), padding=1)
        for i in range(2):
            yi = ad.conv2d(Tensor(x[i]), Tensor(k), Tensor(b), padding=1)
            np.testing.assert_allclose(y.data[i], yi.data, atol=1e-12)

    def test_nonpositive_stride(self):
        with pytest.raises(ParameterError):
            ad.conv2d(Tensor(np.zeros((1, 3, 3))), Tensor(np.zeros((1, 1, 1, 1))), Tensor([0.0]), stride=0)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            ad.conv2d(Tensor(np.zeros((2, 3, 3))), Tensor(np.zeros((1, 3, 1, 1))), Tensor([0.0]))


class TestActivations:
    def test_relu(self):
        np.testing.assert_array_equal(ad.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])

    def test_activation_dispatch(self):
        x = Tensor([0.5, -0.5])
        np.testing.assert_array_equal(ad.activation(x, "tanh").data, np.tanh(x.data))
        with pytest.raises(ParameterError):
            ad.activation(x, "gelu")

    def test_softmax_symmetry(self):
        np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=12))
    @settings(max_examples=50, deadline=None)
    def test_softmax_sums_to_one(self, values):
        out = ad.softmax(Tensor(values))
        assert abs(out.data.sum() - 1.0) < 1e-12

    def test_softmax_rows_sum_to_one(self):
        x = np.random.default_rng(5).normal(size=(6, 4)) * 10
        out = ad.softmax(Tensor(x), axis=1)
        np.testing.assert_allclose(out.data.sum(axis=1), np.ones(6), atol=1e-12)


class TestLosses:
    def test_mse_of_identical_inputs(self):
        a = Tensor(np.random.default_rng(6).normal(size=(3, 4)))
        assert ad.loss_mse(a, Tensor(a.data.copy())).item() == 0.0

    def test_kl_at_prior_is_zero(self):
        assert ad.gaussian_kl(Tensor(np.zeros(5)), Tensor(np.zeros(5))).item() == 0.0

    def test_kl_unit_mean_per_dimension(self):
        assert ad.gaussian_kl(Tensor([1.0]), Tensor([0.0])).item() == pytest.approx(0.5)

    def test_kl_nonnegative(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            mu = rng.normal(size=6) * 2
            lv = rng.normal(size=6)
            assert ad.gaussian_kl(Tensor(mu), Tensor(lv)).item() >= 0.0

    def test_categorical_floor_as_logits_sharpen(self):
        # A perfect autoencoder's cross-entropy approaches zero as its
        # correct-class logits grow; the floor itself is zero.
        targets = np.random.default_rng(42).integers(0, 4, size=(5, 5))
        onehot = np.moveaxis(np.eye(4)[targets], -1, 0)
        losses = [ad.loss_categorical(Tensor(scale * onehot), targets, axis=0).item() for scale in (1.0, 10.0, 100.0)]
        assert losses[0] > losses[1] > losses[2]
        assert losses[2] == pytest.approx(0.0, abs=1e-9)

    def test_categorical_matches_log_softmax(self):
        rng = np.random.default_rng(8)
        logits = rng.normal(size=(4, 3, 3))
        targets = rng.integers(0, 4, size=(3, 3))
        loss = ad.loss_categorical(Tensor(logits), targets, axis=0)
        lsm = logits - np.log(np.exp(logits).sum(axis=0, keepdims=True))
        expected = -sum(lsm[targets[i, j], i, j] for i in range(3) for j in range(3))
        assert loss.item() == pytest.approx(expected, rel=1e-12)


class TestBackward:
    def test_grad_of_sum_is_ones(self):
        x = Tensor(np.random.default_rng(9).normal(size=(3, 2)), requires_grad=True)
        ad.backward(ad.sum_all(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 2)))

    def test_grad_of_square(self):
        x = Tensor([3.0], requires_grad=True)
        ad.backward(ad.sum_all(x**2))
        np.testing.assert_allclose(x.grad, [6.0])

    def test_seed_must_be_scalar(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError):
            ad.backward(x * x)

    def test_gradient_accumulates_over_reuse(self):
        x = Tensor([2.0], requires_grad=True)
        y = ad.sum_all(x * x + x * x)
        ad.backward(y)
        np.testing.assert_allclose(x.grad, [8.0])

    def test_topo_order_operands_precede_results(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = ad.sum_all(ad.tanh(x) * x)
        order = ad.topo_order(y)
        pos = {id(t): i for i, t in enumerate(order)}
        for node in order:
            for parent in node._parents:
                assert pos[id(parent)] < pos[id(node)]


class TestGradCheck:
    def test_sum(self):
        err = ad.grad_check(ad.sum_all, np.random.default_rng(10).uniform(-2, 2, size=(3, 3)))
        assert err == pytest.approx(0.0, abs=1e-9)

    def test_mse(self):
        target = Tensor(np.random.default_rng(11).uniform(-2, 2, size=8))
        err = ad.grad_check(lambda x: ad.loss_mse(x, target), np.random.default_rng(12).uniform(-2, 2, size=8))
        assert err < 1e-6

    def test_gaussian_kl(self):
        def f(x):
            mu = ad.narrow(x, 0, 0, 4)
            lv = ad.narrow(x, 0, 4, 4)
            return ad.gaussian_kl(mu, lv)

        err = ad.grad_check(f, np.random.default_rng(13).uniform(-2, 2, size=8))
        assert err < 1e-6

    @pytest.mark.parametrize(
        "name,f",
        [
            ("relu", lambda x: ad.sum_all(ad.relu(x) ** 2)),
            ("tanh", lambda x: ad.sum_all(ad.tanh(x) * x)),
            ("sigmoid", lambda x: ad.sum_all(ad.sigmoid(x) ** 2)),
            ("softmax", lambda x: ad.sum_all(ad.softmax(x, axis=0) ** 3)),
            ("exp", lambda x: ad.sum_all(ad.exp(x) * x)),
            ("mul", lambda x: ad.sum_all(x * x * x)),
            ("sub_neg", lambda x: ad.sum_all((-x - x * x) ** 2)),
            ("mean", lambda x: ad.mean_all(x * x)),
            ("concat", lambda x: ad.sum_all(ad.concat([ad.tanh(x), x * x], axis=0) ** 2)),
            ("narrow", lambda x: ad.sum_all(ad.narrow(x, 0, 1, 3) ** 2)),
            ("reshape", lambda x: ad.sum_all(ad.reshape(x * x, (2, 3)))),
            ("sqrt", lambda x: ad.sqrt(ad.sum_all(x * x), eps=1e-12)),
        ],
    )
    def test_primitives_match_finite_differences(self, name, f):
        rng = np.random.default_rng(hash(name) % 2**32)
        # ReLU's kink makes finite differences unreliable near zero; keep clear of it.
        x = rng.uniform(-2, 2, size=6)
        x[np.abs(x) < 0.05] = 0.5
        assert ad.grad_check(f, x) < 1e-3

    def test_linear_weights(self):
        rng = np.random.default_rng(14)
        x = rng.uniform(-2, 2, size=(3, 4))

        def f(w):
            return ad.sum_all(ad.tanh(ad.linear(Tensor(x), ad.reshape(w, (4, 2)), Tensor([0.1, -0.2]))) ** 2)

        assert ad.grad_check(f, rng.uniform(-2, 2, size=8)) < 1e-3

    def test_conv_input_gradient(self):
        rng = np.random.default_rng(15)
        k = Tensor(rng.normal(size=(2, 1, 3, 3)))
        b = Tensor(rng.normal(size=2))

        def f(x):
            return ad.sum_all(ad.conv2d(ad.reshape(x, (1, 4, 4)), k, b, stride=1, padding=1) ** 2)

        assert ad.grad_check(f, rng.uniform(-2, 2, size=16)) < 1e-3

    def test_conv_kernel_gradient(self):
        rng = np.random.default_rng(16)
        x = Tensor(rng.normal(size=(2, 4, 4)))
        b = Tensor(rng.normal(size=2))

        def f(k):
            return ad.sum_all(ad.conv2d(x, ad.reshape(k, (2, 2, 3, 3)), b, padding=1) ** 2)

        assert ad.grad_check(f, rng.uniform(-1, 1, size=36)) < 1e-3

    def test_upsample_gradient(self):
        def f(x):
            return ad.sum_all(ad.upsample2x(ad.reshape(x, (1, 2, 2))) ** 2)

        assert ad.grad_check(f, np.random.default_rng(17).uniform(-2, 2, size=4)) < 1e-3

    def test_categorical_gradient(self):
        targets = np.array([[0, 2], [1, 1]])

        def f(x):
            return ad.loss_categorical(ad.reshape(x, (3, 2, 2)), targets, axis=0)

        assert ad.grad_check(f, np.random.default_rng(18).uniform(-2, 2, size=12)) < 1e-3


class TestDeterminismAndFiniteness:
    def test_forward_deterministic(self):
        rng = np.random.default_rng(19)
        x = rng.normal(size=(4, 7))
        w = rng.normal(size=(7, 5))
        b = rng.normal(size=5)
        y1 = ad.softmax(ad.linear(Tensor(x), Tensor(w), Tensor(b)), axis=1)
        y2 = ad.softmax(ad.linear(Tensor(x), Tensor(w), Tensor(b)), axis=1)
        np.testing.assert_array_equal(y1.data, y2.data)

    def test_finite_outputs_on_finite_inputs(self):
        rng = np.random.default_rng(20)
        x = rng.uniform(-100, 100, size=(3, 8))
        for out in [
            ad.softmax(Tensor(x), axis=1),
            ad.sigmoid(Tensor(x)),
            ad.tanh(Tensor(x)),
            ad.relu(Tensor(x)),
        ]:
            assert np.isfinite(out.data).all()
