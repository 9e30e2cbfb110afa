import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import t64
from s6tal import gradcheck
from s6tal import tensor as T


def arr(t):
    return np.asarray(t.data, dtype=np.float64)


# ---------------------------------------------------------------------------
# conv1d
# ---------------------------------------------------------------------------


class TestConv1d:
    def test_identity_kernel(self, f64):
        y = T.conv1d(t64([[[1, 2, 3]]]), t64([[[1]]]), t64([0]))
        np.testing.assert_array_equal(arr(y)[0, 0], [1, 2, 3])

    def test_causal_two_tap(self, f64):
        y = T.conv1d(t64([[[1, 2, 3]]]), t64([[[1, 1]]]), None, padding="causal")
        np.testing.assert_array_equal(arr(y)[0, 0], [1, 3, 5])

    def test_zero_weights_give_bias(self, f64, rng):
        y = T.conv1d(t64(rng.normal(size=(1, 1, 4))), t64(np.zeros((1, 1, 3))), t64([5]))
        np.testing.assert_array_equal(arr(y)[0, 0], [5, 5, 5, 5])

    def test_same_padding_keeps_length(self, f64, rng):
        y = T.conv1d(t64(rng.normal(size=(2, 3, 9))), t64(rng.normal(size=(4, 3, 3))), None, padding="same")
        assert y.shape == (2, 4, 9)

    def test_depthwise_matches_dense_with_block_diagonal_weights(self, f64, rng):
        x = rng.normal(size=(2, 3, 7))
        w = rng.normal(size=(3, 1, 4))
        dense = np.zeros((3, 3, 4))
        for c in range(3):
            dense[c, c] = w[c, 0]
        a = T.conv1d(t64(x), t64(w), None, groups=3)
        b = T.conv1d(t64(x), t64(dense), None, groups=1)
        np.testing.assert_allclose(arr(a), arr(b), atol=1e-12)

    def test_against_direct_sum(self, f64, rng):
        x = rng.normal(size=(1, 2, 6))
        w = rng.normal(size=(3, 2, 3))
        b = rng.normal(size=3)
        y = arr(T.conv1d(t64(x), t64(w), t64(b), padding="causal"))
        xp = np.concatenate([np.zeros((1, 2, 2)), x], axis=2)
        ref = np.zeros((1, 3, 6))
        for o in range(3):
            for t in range(6):
                ref[0, o, t] = b[o] + sum(w[o, i, j] * xp[0, i, t + j] for i in range(2) for j in range(3))
        np.testing.assert_allclose(y, ref, atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(k=st.integers(1, 5), L=st.integers(2, 12), t=st.data())
    def test_causality(self, k, L, t):
        with T.precision(np.float64):
            rng = np.random.default_rng(k * 100 + L)
            x = rng.normal(size=(1, 2, L))
            w = t64(rng.normal(size=(2, 1, k)))
            pos = t.draw(st.integers(0, L - 1))
            base = arr(T.conv1d(t64(x), w, None, groups=2, padding="causal"))
            x2 = x.copy()
            x2[:, :, pos] += 3.0
            moved = arr(T.conv1d(t64(x2), w, None, groups=2, padding="causal"))
            np.testing.assert_array_equal(base[:, :, :pos], moved[:, :, :pos])

    def test_bad_padding_mode(self, f64):
        with pytest.raises(ValueError):
            T.conv1d(t64(np.zeros((1, 1, 3))), t64(np.zeros((1, 1, 1))), None, padding="reflect")


# ---------------------------------------------------------------------------
# layer norm, pointwise, pooling, linear
# ---------------------------------------------------------------------------


class TestLayerNorm:
    def test_constant_over_channels_is_zero(self, f64):
        y = T.layer_norm_channels(t64(np.full((1, 3, 2), 4.0)), t64(np.ones(3)), t64(np.zeros(3)))
        np.testing.assert_array_equal(arr(y), 0.0)

    def test_two_channel_hand_case(self, f64):
        y = T.layer_norm_channels(t64([[[1.0], [3.0]]]), t64([1, 1]), t64([0, 0]), eps=0.0)
        np.testing.assert_allclose(arr(y)[0, :, 0], [-1, 1], atol=1e-12)

    def test_affine_only(self, f64, rng):
        y = T.layer_norm_channels(t64(rng.normal(size=(2, 2, 5))), t64([0, 0]), t64([7, 7]))
        np.testing.assert_array_equal(arr(y), 7.0)

    @settings(max_examples=25, deadline=None)
    @given(C=st.integers(2, 16), L=st.integers(1, 8), seed=st.integers(0, 2**31))
    def test_output_statistics(self, C, L, seed):
        with T.precision(np.float64):
            x = np.random.default_rng(seed).normal(size=(2, C, L)) * 3 + 1
            y = arr(T.layer_norm_channels(t64(x), t64(np.ones(C)), t64(np.zeros(C)), eps=0.0))
            assert np.abs(y.mean(axis=1)).max() <= 1e-6
            assert np.abs(y.var(axis=1) - 1).max() <= 1e-5


class TestPointwise:
    @pytest.mark.parametrize("mode,expected", [("sigmoid", 0.5), ("softplus", np.log(2)), ("silu", 0.0),
                                               ("relu", 0.0), ("exp", 1.0)])
    def test_values_at_zero(self, f64, mode, expected):
        assert T.pointwise(t64([0.0]), mode).item() == pytest.approx(expected, abs=1e-12)

    def test_softplus_is_stable_for_large_inputs(self, f64):
        y = arr(T.pointwise(t64([-800.0, 800.0]), "softplus"))
        np.testing.assert_allclose(y, [0.0, 800.0])

    def test_unknown_mode(self, f64):
        with pytest.raises(ValueError):
            T.pointwise(t64([0.0]), "tanh")


class TestPooling:
    def test_mean_all(self, f64):
        assert arr(T.pool_time(t64([[[2, 4, 6]]]), "mean_all")).ravel().tolist() == [4.0]

    def test_adaptive_avg_hand_case(self, f64):
        np.testing.assert_allclose(arr(T.pool_time(t64([[[1, 2, 3, 4]]]), "adaptive_avg", 2)).ravel(), [1.5, 3.5])

    def test_adaptive_avg_overlapping_bins(self, f64):
        # 5 -> 3 bins [floor(5i/3), ceil(5(i+1)/3)) = [0,2), [1,4), [3,5)
        y = arr(T.pool_time(t64([[[1, 2, 3, 4, 5]]]), "adaptive_avg", 3)).ravel()
        np.testing.assert_allclose(y, [1.5, 3.0, 4.5])

    def test_max_k3s2p1_hand_case(self, f64):
        np.testing.assert_array_equal(arr(T.pool_time(t64([[[1, 5, 2, 4]]]), "max_k3s2p1")).ravel(), [5, 5])

    @pytest.mark.parametrize("L", [1, 2, 5, 63, 64, 100])
    def test_max_pool_length_is_ceil_half(self, f64, L):
        assert T.pool_time(t64(np.zeros((1, 1, L))), "max_k3s2p1").shape[-1] == -(-L // 2)

    def test_adaptive_needs_target(self, f64):
        with pytest.raises(ValueError):
            T.pool_time(t64(np.zeros((1, 1, 4))), "adaptive_avg")


class TestLinear:
    def test_identity(self, f64, rng):
        x = rng.normal(size=(2, 3))
        np.testing.assert_array_equal(arr(T.linear(t64(x), t64(np.eye(3)), t64(np.zeros(3)))), x)

    def test_hand_matvec(self, f64):
        np.testing.assert_array_equal(arr(T.linear(t64([1, 2]), t64([[1, 1], [1, -1]]), t64([0, 0]))), [3, -1])

    def test_bias_only(self, f64, rng):
        assert arr(T.linear(t64([0.0, 0.0]), t64(rng.normal(size=(1, 2))), t64([3]))).tolist() == [3.0]


# ---------------------------------------------------------------------------
# axis ops and drop path
# ---------------------------------------------------------------------------


class TestAxisOps:
    def test_flip_time_involution(self, rng):
        x = T.Tensor(rng.normal(size=(2, 3, 5)))
        np.testing.assert_array_equal(T.axis_ops(T.axis_ops(x, "flip_time"), "flip_time").data, x.data)

    def test_chunk_then_concat(self, rng):
        x = T.Tensor(rng.normal(size=(2, 6, 5)))
        parts = T.axis_ops(x, "chunk2_channels")
        np.testing.assert_array_equal(T.axis_ops(parts, "concat_channels").data, x.data)

    def test_transpose_shape(self):
        assert T.axis_ops(T.Tensor(np.zeros((2, 3, 5))), "transpose_cl").shape == (2, 5, 3)

    def test_chunk2_odd_channels_rejected(self):
        with pytest.raises(ValueError):
            T.chunk2_channels(T.Tensor(np.zeros((1, 3, 2))))


class TestDropPath:
    def test_rate_zero_is_identity(self, rng):
        x = T.Tensor(rng.normal(size=(4, 2, 3)))
        assert T.drop_path(x, 0.0, True, rng) is x

    def test_eval_is_identity(self, rng):
        x = T.Tensor(rng.normal(size=(4, 2, 3)))
        assert T.drop_path(x, 0.9, False, rng) is x

    def test_mask_reproducible_under_seed(self):
        x = T.Tensor(np.ones((4, 2, 3)))
        a = T.drop_path(x, 0.5, True, np.random.default_rng(7)).data
        b = T.drop_path(x, 0.5, True, np.random.default_rng(7)).data
        np.testing.assert_array_equal(a, b)

    def test_expectation(self):
        rng = np.random.default_rng(0)
        x = T.Tensor(np.full((20, 3), 2.0))
        total = np.zeros((20, 3))
        n = 10_000
        for _ in range(n):
            total += T.drop_path(x, 0.5, True, rng).data
        mean = total / n
        assert np.abs(mean / 2.0 - 1.0).max() <= 0.02

    def test_whole_samples_dropped(self, rng):
        y = T.drop_path(T.Tensor(np.ones((64, 3, 4))), 0.5, True, rng).data
        per_sample = y.reshape(64, -1)
        assert all(np.unique(r).size == 1 for r in per_sample)

    def test_rate_bounds(self, rng):
        with pytest.raises(ValueError):
            T.drop_path(T.Tensor(np.ones((2, 2))), 1.0, True, rng)

    def test_training_without_generator(self):
        with pytest.raises(ValueError):
            T.drop_path(T.Tensor(np.ones((2, 2))), 0.5, True, None)


# ---------------------------------------------------------------------------
# backward engine
# ---------------------------------------------------------------------------


class TestBackward:
    def test_sum_grad_is_ones(self, f64, rng):
        x = t64(rng.normal(size=(2, 3, 4)), grad=True)
        T.sum_(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))

    def test_sigmoid_grad_at_zero(self, f64):
        x = t64(np.zeros(5), grad=True)
        T.sum_(T.sigmoid(x)).backward()
        np.testing.assert_allclose(x.grad, 0.25)

    def test_shared_subexpression_accumulates(self, f64):
        x = t64([3.0], grad=True)
        y = T.mul(x, x)
        T.sum_(T.add(y, y)).backward()
        np.testing.assert_allclose(x.grad, [12.0])

    def test_broadcast_gradient_reduced(self, f64, rng):
        a = t64(rng.normal(size=(3, 4)), grad=True)
        b = t64(rng.normal(size=(1, 4)), grad=True)
        T.sum_(T.mul(a, b)).backward()
        np.testing.assert_allclose(b.grad, a.data.sum(axis=0, keepdims=True))

    def test_graph_consumed_after_backward(self, f64):
        x = t64([1.0, 2.0], grad=True)
        loss = T.sum_(T.mul(x, x))
        loss.backward()
        with pytest.raises(T.GraphConsumedError):
            loss.backward()

    def test_non_scalar_loss_rejected(self, f64):
        x = t64([1.0, 2.0], grad=True)
        with pytest.raises(ValueError):
            T.mul(x, x).backward()

    def test_no_grad_records_nothing(self, f64):
        x = t64([1.0], grad=True)
        with T.no_grad():
            y = T.mul(x, x)
        assert not y.requires_grad and y.is_leaf

    def test_non_finite_forward_raises_naming_op(self, f64):
        with pytest.raises(FloatingPointError, match="div"):
            T.div(t64([1.0]), t64([0.0]))

    def test_random_composite_graph_matches_finite_differences(self, f64, rng):
        a = t64(rng.normal(size=(3, 4)), grad=True)
        W = t64(rng.normal(size=(2, 4)), grad=True)

        def f():
            h = T.silu(T.linear(a, W))
            return T.sum_(T.mul(T.softplus(h), T.sigmoid(T.sub(h, 0.3))))

        errs = gradcheck.check_gradients(f, {"a": a, "W": W}, rng, max_entries=12)
        assert max(errs.values()) <= 1e-4

    def test_default_dtype_is_float32(self):
        assert T.Tensor([1.0]).dtype == np.float32

    def test_precision_context_restores(self):
        with T.precision(np.float64):
            assert T.Tensor([1.0]).dtype == np.float64
        assert T.default_dtype() is np.float32
