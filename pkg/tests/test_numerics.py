from statistics import NormalDist

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lfkm import numerics as nx
from lfkm.numerics import Tensor


class TestTensor:
    def test_shape_and_grad_shape(self):
        t = Tensor(np.zeros((2, 3, 4)), requires_grad=True)
        assert t.shape == (2, 3, 4)
        assert t.size == 24
        out = nx.gelu(t)
        out.backward(np.ones(out.shape))
        assert t.grad.shape == t.shape

    def test_rejects_more_than_four_dims(self):
        with pytest.raises(nx.ShapeError):
            Tensor(np.zeros((1, 1, 1, 1, 1)))

    def test_non_finite_is_detected(self):
        t = Tensor(np.array([1.0, np.nan]))
        with pytest.raises(nx.NonFiniteError):
            t.check_finite()

    def test_gradients_accumulate_over_two_uses(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        y = nx.add(x, x)
        y.backward(np.ones(2))
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])


class TestConv2d:
    def test_all_ones(self):
        x = Tensor(np.ones((1, 3, 3)))
        k = Tensor(np.ones((3, 3, 1, 1)))
        out = nx.conv2d(x, k, Tensor(np.zeros(1))).data[0]
        assert out[1, 1] == 9.0
        assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4.0
        assert out[0, 1] == 6.0

    @pytest.mark.parametrize("dilation", [1, 2, 3])
    def test_centered_delta_is_identity(self, rng, dilation):
        x = rng.standard_normal((3, 7, 5))
        k = np.zeros((3, 3, 3, 3))
        k[1, 1] = np.eye(3)
        out = nx.conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(3)), dilation)
        np.testing.assert_array_equal(out.data, x)

    def test_zero_kernel_gives_bias(self, rng):
        x = rng.standard_normal((2, 6, 6))
        out = nx.conv2d(Tensor(x), Tensor(np.zeros((3, 3, 2, 4))), Tensor(np.arange(4.0)))
        for c in range(4):
            np.testing.assert_array_equal(out.data[c], c)

    def test_dilated_tap_reaches_two_pixels(self):
        x = np.zeros((1, 5, 5))
        x[0, 2, 2] = 1.0
        k = np.zeros((3, 3, 1, 1))
        k[0, 0, 0, 0] = 1.0
        out = nx.conv2d(Tensor(x), Tensor(k), None, dilation=2).data[0]
        # output (i, j) reads input (i - 2, j - 2)
        assert out[4, 4] == 1.0
        assert out.sum() == 1.0

    def test_matches_direct_loop(self, rng):
        x = rng.standard_normal((2, 5, 6))
        k = rng.standard_normal((3, 3, 2, 3))
        b = rng.standard_normal(3)
        d = 2
        pad = np.pad(x, ((0, 0), (d, d), (d, d)))
        ref = np.zeros((3, 5, 6))
        for co in range(3):
            for i in range(5):
                for j in range(6):
                    acc = b[co]
                    for a in range(3):
                        for c in range(3):
                            acc += np.dot(pad[:, i + a * d, j + c * d], k[a, c, :, co])
                    ref[co, i, j] = acc
        out = nx.conv2d(Tensor(x), Tensor(k), Tensor(b), d)
        np.testing.assert_allclose(out.data, ref, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(nx.ShapeError):
            nx.conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((3, 3, 3, 1))))


class TestUpsample:
    def test_constant(self):
        out = nx.upsample_bicubic_2x(Tensor(np.full((2, 4, 5), 0.37)))
        np.testing.assert_allclose(out.data, 0.37, atol=1e-15)

    def test_shape(self):
        assert nx.upsample_bicubic_2x(Tensor(np.zeros((3, 8, 8)))).shape == (3, 16, 16)

    def test_ramp_hand_values(self):
        # offsets of +-0.25 source pixels; taps at distances 1.25, 0.25, 0.75, 1.75
        ramp = np.array([0.0, 1.0, 2.0, 3.0])
        x = np.broadcast_to(ramp[:, None], (4, 4))[None].copy()
        col = nx.upsample_bicubic_2x(Tensor(x)).data[0, :, 0]
        assert col[3] == pytest.approx(1.25, abs=1e-12)
        assert col[4] == pytest.approx(1.75, abs=1e-12)
        # edge sample with replicated border
        assert col[0] == pytest.approx(-0.0703125, abs=1e-12)

    def test_tap_weights(self):
        w = nx._cubic_weight(np.array([1.25, 0.25, 0.75, 1.75]))
        np.testing.assert_allclose(w, [-0.0703125, 0.8671875, 0.2265625, -0.0234375])
        assert w.sum() == pytest.approx(1.0)

    def test_needs_two_rows(self):
        with pytest.raises(nx.ShapeError):
            nx.upsample_bicubic_2x(Tensor(np.zeros((1, 1, 4))))


class TestBatchNorm:
    def test_constant_channel_gives_beta(self):
        out = nx.batch_norm(Tensor(np.full((1, 3, 3), 4.0)), Tensor([2.0]), Tensor([0.5]))
        np.testing.assert_allclose(out.data, 0.5)

    def test_standardizes(self, rng):
        x = rng.standard_normal((3, 8, 8)) * 5 + 2
        out = nx.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3))).data
        np.testing.assert_allclose(out.mean(axis=(1, 2)), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=(1, 2)), 1.0, atol=1e-5)

    def test_hand_case(self):
        x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 2, 2))
        out = nx.batch_norm(x, Tensor([2.0]), Tensor([1.0]), eps=1e-12).data.ravel()
        np.testing.assert_allclose(out, [-1.683, 0.106, 1.894, 3.683], atol=1e-2)


class TestActivations:
    def test_gelu_zero(self):
        assert nx.gelu(Tensor([0.0])).data[0] == 0.0

    def test_gelu_one_against_normal_cdf(self):
        expected = 1.0 * NormalDist().cdf(1.0)
        assert nx.gelu(Tensor([1.0])).data[0] == pytest.approx(expected, abs=1e-12)
        assert nx.gelu(Tensor([1.0])).data[0] == pytest.approx(0.84134, abs=1e-4)

    def test_softmax_uniform(self):
        out = nx.softmax(Tensor(np.zeros((3, 2, 2)))).data
        np.testing.assert_allclose(out, 1 / 3)

    def test_softmax_sums_to_one(self, rng):
        out = nx.softmax(Tensor(rng.standard_normal((3, 4, 4)) * 50)).data
        np.testing.assert_allclose(out.sum(axis=0), 1.0)
        assert np.all(np.isfinite(out))

    def test_sigmoid_range(self):
        out = nx.sigmoid(Tensor(np.linspace(-30, 30, 61))).data
        assert np.all((out > 0) & (out < 1))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            nx.activation(Tensor([1.0]), "relu")


class TestMse:
    def test_cases(self):
        assert nx.mse(Tensor([1.0, 2.0]), np.array([1.0, 2.0])).item() == 0.0
        assert nx.mse(Tensor(np.ones(5)), np.zeros(5)).item() == 1.0
        assert nx.mse(Tensor([1.0, 2.0]), np.zeros(2)).item() == 2.5

    def test_shape_mismatch(self):
        with pytest.raises(nx.ShapeError):
            nx.mse(Tensor(np.zeros(3)), np.zeros(4))


class TestAdam:
    def _param(self, value=1.0):
        return {"w": Tensor(np.array([value]), requires_grad=True)}

    def test_zero_gradient(self):
        params, state = self._param(), nx.AdamState(lr=0.01)
        nx.adam_step(params, {"w": np.zeros(1)}, state)
        assert params["w"].data[0] == 1.0
        assert state.step == 1

    @pytest.mark.parametrize("g", [1e-3, 0.5, -7.0])
    def test_first_step_is_lr(self, g):
        params, state = self._param(), nx.AdamState(lr=0.01)
        nx.adam_step(params, {"w": np.array([g])}, state)
        assert params["w"].data[0] - 1.0 == pytest.approx(-0.01 * np.sign(g), abs=1e-3 * 0.01)

    def test_second_identical_step_not_larger(self):
        params, state = self._param(), nx.AdamState(lr=0.01)
        nx.adam_step(params, {"w": np.array([0.3])}, state)
        first = 1.0 - params["w"].data[0]
        before = params["w"].data[0]
        nx.adam_step(params, {"w": np.array([0.3])}, state)
        second = before - params["w"].data[0]
        assert second <= first + 1e-6
        assert state.step == 2

    def test_moments_mirror_shapes(self):
        params = {"a": Tensor(np.zeros((2, 3)), requires_grad=True), "b": Tensor(np.zeros(4), requires_grad=True)}
        state = nx.AdamState()
        nx.adam_step(params, {"a": np.ones((2, 3)), "b": np.ones(4)}, state)
        assert state.m["a"].shape == (2, 3) and state.v["b"].shape == (4,)

    def test_missing_gradient(self):
        with pytest.raises(KeyError):
            nx.adam_step(self._param(), {}, nx.AdamState())


class TestFiniteDiff:
    def test_linear_conv(self, rng):
        k = Tensor(rng.standard_normal((3, 3, 2, 2)))
        err = nx.finite_diff_check(lambda x: nx.conv2d(x, k, None, 2), rng.standard_normal((2, 6, 6)))
        assert err < 1e-6

    def test_gelu(self, rng):
        assert nx.finite_diff_check(nx.gelu, rng.standard_normal((2, 4, 4)), h=1e-4) < 1e-4

    def test_batch_norm(self, rng):
        err = nx.finite_diff_check(nx.batch_norm, [rng.standard_normal((2, 4, 4)), rng.random(2) + 0.5,
                                                   rng.standard_normal(2)])
        assert err < 1e-3

    def test_detects_wrong_gradient(self, rng):
        def bad(x):
            out = nx.gelu(x)
            original = out._backward

            def wrong(g):
                return original(2.0 * g)

            out._backward = wrong
            return out

        assert nx.finite_diff_check(bad, rng.standard_normal((2, 3, 3))) > 0.1


@settings(max_examples=40, deadline=None)
@given(
    c=st.integers(1, 3),
    h=st.integers(2, 6),
    w=st.integers(2, 6),
    dilation=st.integers(1, 3),
    seed=st.integers(0, 2**31),
)
def test_conv_upsample_gradients_property(c, h, w, dilation, seed):
    rng = np.random.default_rng(seed)
    k = rng.standard_normal((3, 3, c, 2))

    def op(x, kernel, bias):
        return nx.upsample_bicubic_2x(nx.conv2d(x, kernel, bias, dilation))

    err = nx.finite_diff_check(op, [rng.standard_normal((c, h, w)), k, rng.standard_normal(2)], samples=6)
    assert err < 1e-6
