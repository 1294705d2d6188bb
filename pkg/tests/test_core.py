import struct
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unfold_rpca.core import (
    AdamState,
    BatchNormParams,
    ConvLayerParams,
    MissingGradientError,
    ShapeError,
    Tensor,
    adam_step,
    batch_norm,
    conv2d,
    decode_tensor,
    encode_tensor,
    no_grad,
    poly_lr,
)

from helpers import as_param, finite_difference_check, naive_conv2d


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def conv_params(weight, bias, grad=False):
    return ConvLayerParams(Tensor(weight, requires_grad=grad), Tensor(bias, requires_grad=grad))


class TestConv2d:
    def test_ones_kernel_counts_neighbours(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        out = conv2d(x, conv_params(np.ones((1, 1, 3, 3)), np.zeros(1))).data[0, 0]
        assert out[1, 1] == 9
        assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4

    def test_delta_kernel_is_identity(self, rng):
        x = Tensor(rng.normal(size=(2, 1, 7, 5)))
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1.0
        out = conv2d(x, conv_params(k, np.zeros(1)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_matches_naive_loops(self, rng):
        x = rng.normal(size=(2, 2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        out = conv2d(Tensor(x), conv_params(w, b))
        np.testing.assert_allclose(out.data, naive_conv2d(x, w, b), rtol=0, atol=1e-12)

    def test_channel_mismatch(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 4, 4)))
        with pytest.raises(ShapeError, match="channels"):
            conv2d(x, conv_params(np.zeros((1, 3, 3, 3)), np.zeros(1)))

    def test_bad_weight_shape(self):
        with pytest.raises(ShapeError):
            conv_params(np.zeros((1, 1, 5, 5)), np.zeros(1))

    def test_gradients(self, rng):
        x = as_param(rng.normal(size=(2, 2, 4, 5)))
        params = conv_params(rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3), grad=True)
        probe = rng.normal(size=(2, 3, 4, 5))
        err = finite_difference_check(
            lambda: (conv2d(x, params) * probe).sum(),
            [x, params.weight, params.bias],
            rng,
            n_coords=60,
        )
        assert err <= 1e-6

    @settings(max_examples=20, deadline=None)
    @given(
        n=st.integers(1, 2),
        cin=st.integers(1, 3),
        cout=st.integers(1, 3),
        h=st.integers(1, 6),
        w=st.integers(1, 6),
    )
    def test_shape_preserved(self, n, cin, cout, h, w):
        x = Tensor(np.ones((n, cin, h, w)))
        out = conv2d(x, conv_params(np.ones((cout, cin, 3, 3)), np.zeros(cout)))
        assert out.shape == (n, cout, h, w)


class TestBatchNorm:
    def test_standardized_input_is_fixed_point(self, rng):
        x = rng.normal(size=(4, 3, 5, 5))
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        bn = BatchNormParams.fresh(3, epsilon=0.0)
        out = batch_norm(Tensor(x), bn, training=True)
        np.testing.assert_allclose(out.data, x, atol=1e-9)

    def test_inference_is_affine(self, rng):
        x = rng.normal(size=(2, 2, 3, 3))
        bn = BatchNormParams.fresh(2)
        bn.gamma.data[:] = 2.0
        bn.beta.data[:] = 3.0
        out = batch_norm(Tensor(x), bn, training=False)
        # running var 1 plus epsilon 1e-5 scales the slope by 1/sqrt(1 + 1e-5)
        np.testing.assert_allclose(out.data, 2 * x / np.sqrt(1 + 1e-5) + 3, rtol=1e-12)
        np.testing.assert_allclose(out.data, 2 * x + 3, atol=1e-4 * np.abs(x).max() + 1e-12)

    def test_training_statistics(self, rng):
        x = rng.normal(loc=4.0, scale=3.0, size=(3, 2, 6, 6))
        bn = BatchNormParams.fresh(2)
        bn.gamma.data[:] = [1.5, 0.5]
        bn.beta.data[:] = [-1.0, 2.0]
        out = batch_norm(Tensor(x), bn, training=True).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), [-1.0, 2.0], atol=1e-12)
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        expected_var = np.array([1.5, 0.5]) ** 2 * var / (var + 1e-5)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), expected_var, rtol=1e-10)
        count = 3 * 36
        np.testing.assert_allclose(bn.running_mean, 0.1 * mean)
        np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * var * count / (count - 1))

    def test_inference_is_deterministic_and_ignores_batch(self, rng):
        bn = BatchNormParams.fresh(2)
        bn.running_mean[:] = [0.3, -0.2]
        bn.running_var[:] = [2.0, 0.5]
        x = rng.normal(size=(2, 2, 4, 4))
        a = batch_norm(Tensor(x), bn, training=False).data
        b = batch_norm(Tensor(x[:1]), bn, training=False).data
        np.testing.assert_array_equal(a[:1], b)

    def test_zero_batch(self):
        with pytest.raises(ShapeError):
            batch_norm(Tensor(np.zeros((0, 2, 3, 3))), BatchNormParams.fresh(2), training=True)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            batch_norm(Tensor(np.zeros((1, 3, 3, 3))), BatchNormParams.fresh(2), training=True)

    @pytest.mark.parametrize("training", [True, False])
    def test_gradients(self, rng, training):
        x = as_param(rng.normal(size=(2, 3, 4, 4)))
        bn = BatchNormParams.fresh(3)
        bn.gamma.data[:] = rng.uniform(0.5, 2.0, size=3)
        bn.beta.data[:] = rng.normal(size=3)
        bn.running_mean[:] = rng.normal(size=3)
        bn.running_var[:] = rng.uniform(0.5, 2.0, size=3)
        probe = rng.normal(size=x.shape)
        stats = (bn.running_mean.copy(), bn.running_var.copy())

        def loss():
            bn.running_mean[:], bn.running_var[:] = stats
            return (batch_norm(x, bn, training) * probe).sum()

        err = finite_difference_check(loss, [x, bn.gamma, bn.beta], rng, n_coords=60)
        assert err <= 1e-6


class TestActivations:
    def test_relu_values(self):
        np.testing.assert_array_equal(Tensor([-1.0, 0.0, 2.0]).relu().data, [0, 0, 2])

    def test_sigmoid_zero(self):
        assert Tensor(0.0).sigmoid().item() == 0.5

    def test_sigmoid_extremes_finite(self):
        out = Tensor([-800.0, 800.0]).sigmoid().data
        assert np.all(np.isfinite(out))
        np.testing.assert_array_equal(out, [0.0, 1.0])

    def test_relu_piecewise_derivative(self):
        x = as_param([2.0, -1.0])
        x.relu().sum().backward()
        np.testing.assert_array_equal(x.grad, [1.0, 0.0])

    def test_sigmoid_gradient(self, rng):
        x = as_param(rng.normal(size=(3, 4)))
        probe = rng.normal(size=(3, 4))
        err = finite_difference_check(lambda: (x.sigmoid() * probe).sum(), [x], rng, n_coords=30)
        assert err <= 1e-6


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = as_param(rng.normal(size=(2, 3)))
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square_gives_two_x(self, rng):
        x = as_param(rng.normal(size=(4,)))
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, 2 * x.data)

    def test_accumulates(self, rng):
        x = as_param(rng.normal(size=(3,)))
        x.sum().backward()
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, 2 * np.ones(3))

    def test_non_scalar_rejected(self):
        x = as_param(np.ones(3))
        with pytest.raises(ShapeError):
            (x * 2).backward()

    def test_values_untouched(self, rng):
        x = as_param(rng.normal(size=(1, 1, 4, 4)))
        params = conv_params(rng.normal(size=(2, 1, 3, 3)), np.zeros(2), grad=True)
        y = conv2d(x, params).relu()
        before = (x.data.copy(), params.weight.data.copy(), y.data.copy())
        y.sum().backward()
        np.testing.assert_array_equal(x.data, before[0])
        np.testing.assert_array_equal(params.weight.data, before[1])
        np.testing.assert_array_equal(y.data, before[2])

    def test_shared_subexpression(self, rng):
        x = as_param(rng.normal(size=(3,)))
        y = x * 3.0
        (y * y + y).sum().backward()
        np.testing.assert_allclose(x.grad, 18 * x.data + 3)

    def test_broadcast_scalar_gradient(self, rng):
        eps = as_param(0.5)
        x = Tensor(rng.normal(size=(2, 3)))
        (eps * x).sum().backward()
        assert eps.grad.shape == ()
        np.testing.assert_allclose(eps.grad, x.data.sum())

    def test_no_grad_records_nothing(self):
        x = as_param(np.ones(2))
        with no_grad():
            y = x * 2
        assert not y.requires_grad

    def test_composite_chain(self, rng):
        x = as_param(rng.normal(size=(2, 1, 5, 5)))
        c1 = conv_params(rng.normal(size=(3, 1, 3, 3)) * 0.5, rng.normal(size=3) * 0.1, grad=True)
        c2 = conv_params(rng.normal(size=(1, 3, 3, 3)) * 0.5, rng.normal(size=1) * 0.1, grad=True)
        bn = BatchNormParams.fresh(3)
        stats = (bn.running_mean.copy(), bn.running_var.copy())

        def loss():
            bn.running_mean[:], bn.running_var[:] = stats
            h = batch_norm(conv2d(x, c1), bn, training=True).relu()
            return conv2d(h, c2).sigmoid().sum()

        tensors = [x, c1.weight, c1.bias, c2.weight, c2.bias, bn.gamma, bn.beta]
        assert finite_difference_check(loss, tensors, rng, n_coords=80) <= 1e-6


class TestAdam:
    def test_first_step_moves_by_lr(self):
        p = as_param(1.0)
        p.grad = np.array(1.0)
        adam_step({"p": p}, AdamState(), lr=0.1)
        # m_hat = 1, v_hat = 1 -> step = 0.1 / (1 + 1e-8)
        assert p.item() == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-15)
        assert p.grad == 0.0

    def test_zero_gradient_no_move(self):
        p = as_param([1.0, -2.0])
        p.grad = np.zeros(2)
        adam_step({"p": p}, AdamState(), lr=0.1)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_missing_gradient(self):
        p = as_param(1.0)
        with pytest.raises(MissingGradientError):
            adam_step({"p": p}, AdamState())

    def test_decreases_quadratic(self):
        p = as_param([3.0, -2.0])
        state = AdamState()
        values = []
        for _ in range(3):
            loss = (p * p).sum()
            values.append(loss.item())
            loss.backward()
            adam_step({"p": p}, state, lr=0.1)
        values.append((p * p).sum().item())
        assert values[0] > values[1] > values[2] > values[3]
        assert state.step_count == 3
        assert state.first_moment["p"].shape == p.shape


class TestPolyLr:
    def test_endpoints(self):
        assert poly_lr(1e-4, 0, 100) == 1e-4
        assert poly_lr(1e-4, 100, 100) == 0.0

    def test_midpoint(self):
        assert poly_lr(1e-4, 50, 100) == pytest.approx(1e-4 * 0.5**0.9, rel=1e-15)
        assert poly_lr(1e-4, 50, 100) == pytest.approx(5.359e-5, rel=1e-4)

    def test_past_end_clamps_and_warns(self):
        with pytest.warns(RuntimeWarning):
            assert poly_lr(1e-4, 101, 100) == 0.0

    def test_bad_total(self):
        with pytest.raises(ValueError):
            poly_lr(1e-4, 0, 0)

    def test_monotone(self):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            lrs = [poly_lr(1.0, i, 37) for i in range(38)]
        assert all(a > b for a, b in zip(lrs, lrs[1:]))


class TestSerialization:
    def test_layout(self):
        blob = encode_tensor(np.arange(6, dtype=float).reshape(2, 3))
        assert blob[:4] == b"UTNS"
        assert struct.unpack_from("<II", blob, 4) == (1, 2)
        assert struct.unpack_from("<2Q", blob, 12) == (2, 3)
        assert struct.unpack_from("<6d", blob, 28) == (0, 1, 2, 3, 4, 5)
        assert len(blob) == 28 + 48

    @pytest.mark.parametrize("shape", [(), (4,), (2, 3), (1, 2, 3, 4)])
    def test_round_trip(self, rng, shape):
        a = rng.normal(size=shape)
        back = decode_tensor(encode_tensor(a))
        assert back.shape == a.shape
        np.testing.assert_array_equal(back, a)

    def test_bad_magic(self):
        with pytest.raises(ValueError):
            decode_tensor(b"XXXX" + bytes(8))

    def test_truncated(self):
        with pytest.raises(ValueError):
            decode_tensor(encode_tensor(np.ones(3))[:-8])
