import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import t64
from s6tal import tensor as T
from s6tal.blocks import (BiS6Block, BlockConfig, DirectionBundle, cfa_bis6_forward, cfa_config,
                          fa_bis6_forward, multi_kernel_aggregate, t_bis6_config, tfa_config)
from s6tal.nn import Conv1d, param_count


def block(cfg, seed=0):
    with T.precision(np.float64):
        return BiS6Block(cfg, np.random.default_rng(seed))


def identity_convs(width, kernels):
    convs = []
    for k in kernels:
        c = Conv1d(width, width, k, np.random.default_rng(0), groups=width, padding="causal")
        c.weight.data[:] = 0
        c.weight.data[:, :, -1] = 1  # causal tap at the current step
        c.bias.data[:] = 0
        convs.append(c)
    return convs


class TestMultiKernelAggregate:
    def test_single_identity_kernel_is_silu(self, f64, rng):
        u = t64(rng.normal(size=(2, 5, 3)))
        y = multi_kernel_aggregate(u, identity_convs(3, [1]), "sum")
        np.testing.assert_allclose(y.data, T.silu(u).data, rtol=1e-15)

    def test_two_identity_kernels_sum(self, f64, rng):
        u = rng.normal(size=(2, 5, 3))
        y = multi_kernel_aggregate(t64(u), identity_convs(3, [1, 1]), "sum")
        np.testing.assert_allclose(y.data, T.silu(t64(2 * u)).data, rtol=1e-15)

    def test_concat_width(self, f64, rng):
        with T.precision(np.float64):
            convs = [Conv1d(4, 4, k, rng, groups=4) for k in (2, 3)]
        assert multi_kernel_aggregate(t64(rng.normal(size=(1, 6, 4))), convs, "concat").shape == (1, 6, 8)

    def test_empty_kernel_list(self, f64, rng):
        with pytest.raises(ValueError):
            multi_kernel_aggregate(t64(np.zeros((1, 2, 2))), [], "sum")


class TestBlockConfig:
    def test_empty_kernels_rejected(self):
        with pytest.raises(ValueError):
            BlockConfig(4, kernels=())

    def test_kernel_below_one_rejected(self):
        with pytest.raises(ValueError):
            BlockConfig(4, kernels=(0, 2))

    def test_pooled_len_below_kernel_rejected(self):
        with pytest.raises(ValueError):
            cfa_config(4, kernels=(2, 8), pooled_len=4)

    def test_branch_variant_uses_single_kernel_four(self):
        assert t_bis6_config(8).kernels == (4,)


class TestTimeAxisBlock:
    def test_shape(self, f64, rng):
        b = block(tfa_config(8, state_dim=4))
        assert fa_bis6_forward(t64(rng.normal(size=(2, 8, 32))), b).shape == (2, 8, 32)

    def test_dead_network_outputs_bias(self, f64, rng):
        b = block(tfa_config(4, state_dim=2))
        for p in b.parameters():
            p.data[:] = 0
        b.out_proj.bias.data[:] = [1.0, -2.0, 0.5, 3.0]
        y = b(t64(rng.normal(size=(2, 4, 7)))).data
        np.testing.assert_array_equal(y, np.broadcast_to(b.out_proj.bias.data[None, :, None], y.shape))

    def test_time_reversal_pairing_with_shared_directions(self, f64, rng):
        C = 4
        b = block(tfa_config(C, kernels=(2, 3), state_dim=3, share_directions=True), seed=3)
        swapped = block(tfa_config(C, kernels=(2, 3), state_dim=3, share_directions=True), seed=3)
        # exchange the roles of the two halves: swap in_proj output rows and out_proj input columns
        W, bias = b.in_proj.weight.data, b.in_proj.bias.data
        swapped.in_proj.weight.data[:] = np.concatenate([W[C:], W[:C]])
        swapped.in_proj.bias.data[:] = np.concatenate([bias[C:], bias[:C]])
        Wo = b.out_proj.weight.data
        swapped.out_proj.weight.data[:] = np.concatenate([Wo[:, C:], Wo[:, :C]], axis=1)
        z = rng.normal(size=(2, C, 9))
        lhs = swapped(T.flip_time(t64(z))).data
        rhs = T.flip_time(b(t64(z))).data
        assert np.abs(lhs - rhs).max() <= 1e-6

    def test_directions_are_not_symmetric_without_swap(self, f64, rng):
        b = block(tfa_config(4, kernels=(2,), state_dim=2, share_directions=True), seed=1)
        z = rng.normal(size=(1, 4, 9))
        assert np.abs(b(T.flip_time(t64(z))).data - T.flip_time(b(t64(z))).data).max() > 1e-3

    def test_wrong_channel_count(self, f64, rng):
        with pytest.raises(ValueError):
            block(tfa_config(4, state_dim=2))(t64(np.zeros((1, 3, 5))))

    def test_causal_within_forward_direction(self, f64, rng):
        """The forward half alone never sees the future."""
        b = block(tfa_config(4, kernels=(2, 3), state_dim=2), seed=2)
        u = rng.normal(size=(1, 8, 4))
        a = T.chunk2_channels(b.in_proj(t64(u)), axis=2)[0]
        base = b._direction(a, b.fwd).data
        u2 = u.copy()
        u2[0, 5] += 1.0
        a2 = T.chunk2_channels(b.in_proj(t64(u2)), axis=2)[0]
        moved = b._direction(a2, b.fwd).data
        np.testing.assert_array_equal(base[0, :5], moved[0, :5])

    @settings(max_examples=15, deadline=None)
    @given(C=st.integers(1, 6).map(lambda c: 2 * c), L=st.integers(1, 24),
           kernels=st.lists(st.integers(1, 5), min_size=1, max_size=3),
           aggregate=st.sampled_from(["sum", "concat"]), seed=st.integers(0, 2**31))
    def test_shape_and_finiteness(self, C, L, kernels, aggregate, seed):
        rng = np.random.default_rng(seed)
        b = BiS6Block(tfa_config(C, kernels=kernels, aggregate=aggregate, state_dim=3), rng)
        y = b(T.Tensor(rng.uniform(-10, 10, size=(2, C, L))))
        assert y.shape == (2, C, L)
        assert np.isfinite(y.data).all()


class TestChannelAxisBlock:
    def test_shape(self, f64, rng):
        b = block(cfa_config(6, pooled_len=8, state_dim=2))
        assert cfa_bis6_forward(t64(rng.normal(size=(3, 6, 20))), b).shape == (3, 6, 1)

    def test_dead_network_is_zero(self, f64, rng):
        b = block(cfa_config(4, pooled_len=8, state_dim=2))
        for p in b.parameters():
            p.data[:] = 0
        y = b(t64(rng.normal(size=(2, 4, 10)))).data
        np.testing.assert_array_equal(y, 0.0)
        np.testing.assert_array_equal(T.sigmoid(t64(y)).data, 0.5)

    def test_constant_in_time_input_is_length_independent(self, f64, rng):
        b = block(cfa_config(5, kernels=(2, 4), pooled_len=8, state_dim=2), seed=4)
        col = rng.normal(size=(2, 5, 1))
        short = b(t64(np.repeat(col, 16, axis=2))).data
        long = b(t64(np.repeat(col, 64, axis=2))).data
        assert np.abs(short - long).max() <= 1e-6

    def test_time_scan_alternative_shape(self, f64, rng):
        b = block(cfa_config(4, kernels=(2,), pooled_len=8, state_dim=2, cfa_scan_axis="time"))
        assert b.in_proj.weight.shape == (8, 4)
        assert b(t64(rng.normal(size=(2, 4, 12)))).shape == (2, 4, 1)

    def test_channel_scan_projects_pooled_width(self):
        b = block(cfa_config(4, kernels=(2,), pooled_len=8, state_dim=2))
        assert b.in_proj.weight.shape == (16, 8)

    @settings(max_examples=10, deadline=None)
    @given(L=st.integers(1, 40), seed=st.integers(0, 2**31))
    def test_finite_for_bounded_inputs(self, L, seed):
        rng = np.random.default_rng(seed)
        b = BiS6Block(cfa_config(6, pooled_len=8, state_dim=4), rng)
        assert np.isfinite(b(T.Tensor(rng.uniform(-10, 10, size=(2, 6, L)))).data).all()


class TestParameterAccounting:
    def test_sharing_removes_exactly_one_bundle(self):
        cfg = dict(kernels=(2, 3), state_dim=4)
        own = block(tfa_config(8, **cfg))
        shared = block(tfa_config(8, share_directions=True, **cfg))
        assert param_count(own) - param_count(shared) == param_count(own.bwd)
        assert param_count(shared) < param_count(own)

    def test_bundle_count_by_hand(self):
        C, N, K = 6, 4, (2, 3)
        bundle = DirectionBundle(C, BlockConfig(C, kernels=K, state_dim=N), np.random.default_rng(0))
        convs = sum(C * k + C for k in K)
        s6 = C * N + N * C + N * C + C + C + C  # A_log, W_B, W_C, W_delta, b_delta, D_skip
        assert param_count(bundle) == convs + s6

    @pytest.mark.parametrize("extra", [1, 5, 7])
    def test_adding_a_kernel_adds_depthwise_params_per_direction(self, extra):
        C = 8
        base = param_count(block(tfa_config(C, kernels=(2, 3), state_dim=4)))
        more = param_count(block(tfa_config(C, kernels=(2, 3, extra), state_dim=4)))
        assert more - base == 2 * (C * extra + C)

    def test_block_total_by_hand(self):
        C, N = 4, 2
        total = param_count(block(tfa_config(C, kernels=(2,), state_dim=N)))
        in_proj = C * 2 * C + 2 * C
        out_proj = 2 * C * C + C
        bundle = (C * 2 + C) + (3 * C * N + 3 * C)
        assert total == in_proj + out_proj + 2 * bundle

    def test_concat_widens_inner_state(self):
        C, N, K = 4, 2, (2, 3)
        b = block(tfa_config(C, kernels=K, aggregate="concat", state_dim=N))
        assert b.fwd.s6.W_B.shape == (N, len(K) * C)
        assert b.out_proj.weight.shape == (C, 2 * len(K) * C)
