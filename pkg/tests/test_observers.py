"""Quantile observers: order statistics, subsampling, EMA, qparams derivation."""

import numpy as np
import pytest

from qtlab.observers import (ObserverState, activation_qparams, empirical_quantile,
                             subsample, update_activation_stats, update_weight_stats,
                             weight_qparams)


def sort_index_oracle(samples, p):
    order = sorted(samples)
    idx = int(np.ceil(p * len(order)))
    return order[idx - 1]


class TestEmpiricalQuantile:
    def test_index_four(self):
        samples = [0, 1, 1, 3, 5]
        assert empirical_quantile(samples, 0.8) == sort_index_oracle(samples, 0.8) == 3

    def test_index_rounds_up(self):
        samples = [0, 1, 1, 3, 5]
        assert empirical_quantile(samples, 0.999) == sort_index_oracle(samples, 0.999) == 5

    def test_single_sample(self):
        for p in (0.001, 0.5, 0.999):
            assert empirical_quantile([7.0], p) == 7.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            empirical_quantile([], 0.5)

    def test_matches_full_sort_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(60):
            n = int(rng.integers(1, 2000))
            samples = rng.choice(rng.standard_normal(max(n // 3, 1)), n)  # duplicates likely
            for p in (0.001, 0.25, 0.5, 0.75, 0.95, 0.999):
                assert empirical_quantile(samples, p) == sort_index_oracle(samples, p)


class TestSubsample:
    def test_small_input_passthrough(self):
        values = np.arange(10.0)
        out = subsample(values, 100, np.random.default_rng(0))
        assert sorted(out.tolist()) == values.tolist()

    def test_deterministic_for_seed(self):
        values = np.arange(10.0)
        a = subsample(values, 4, np.random.default_rng(1))
        b = subsample(values, 4, np.random.default_rng(1))
        assert np.array_equal(a, b)

    def test_cardinality_at_cap(self):
        values = np.arange(200_000.0)
        out = subsample(values, 100_000, np.random.default_rng(2))
        assert len(out) == 100_000
        assert len(np.unique(out)) == 100_000  # distinct input -> distinct sample


class TestWeightStats:
    def test_first_update_initializes_directly(self):
        state = ObserverState("weight", mu=0.1)
        update_weight_stats(state, [2.0])
        assert state.m_ema == 2.0

    def test_ema_recurrence(self):
        state = ObserverState("weight", mu=0.1)
        update_weight_stats(state, [2.0])
        update_weight_stats(state, [4.0])
        assert state.m_ema == pytest.approx(2.2)

    def test_quantile_of_magnitudes(self):
        state = ObserverState("weight", p_hi=0.999)
        update_weight_stats(state, [-3.0, 1.0, 2.0])
        assert state.m_ema == sort_index_oracle([3.0, 1.0, 2.0], 0.999) == 3.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            update_weight_stats(ObserverState("weight"), [])

    def test_per_channel_updates(self):
        state = ObserverState("weight", per_channel=True)
        update_weight_stats(state, np.array([[1.0, -0.5], [0.0, 10.0]]))
        assert state.m_ema.tolist() == [1.0, 10.0]

    def test_ema_convergence_bound(self):
        state = ObserverState("weight", mu=0.05)
        update_weight_stats(state, [5.0])
        state.m_ema = 0.0  # force a cold start away from the target
        for t in range(1, 40):
            update_weight_stats(state, [5.0])
            assert abs(state.m_ema - 5.0) <= (1 - 0.05) ** t * 5.0 + 1e-12


class TestActivationStats:
    def test_first_update_order_statistics(self):
        state = ObserverState("activation", p_lo=0.25, p_hi=0.75)
        update_activation_stats(state, [0.0, 1.0, 2.0, 3.0])
        assert (state.a_ema, state.b_ema) == (0.0, 2.0)

    def test_ema_on_both_ends(self):
        state = ObserverState("activation", mu=0.5, p_lo=0.25, p_hi=0.75)
        state.a_ema, state.b_ema, state.updates = 0.0, 2.0, 1
        update_activation_stats(state, [-1.0, -1.0, 3.0, 3.0])
        assert (state.a_ema, state.b_ema) == (-0.5, 2.5)

    def test_constant_batch(self):
        state = ObserverState("activation")
        update_activation_stats(state, [5.0, 5.0, 5.0])
        assert state.a_ema == state.b_ema == 5.0

    def test_invariant_a_le_b(self):
        rng = np.random.default_rng(3)
        state = ObserverState("activation")
        for _ in range(20):
            update_activation_stats(state, rng.standard_normal(50))
            assert state.a_ema <= state.b_ema


class TestQParams:
    def test_weight_scale(self):
        state = ObserverState("weight")
        state.m_ema, state.updates = 1.27, 1
        qp = weight_qparams(state, 8)
        assert qp.scale == pytest.approx(0.01)
        assert qp.zero_point == 0 and qp.symmetric

    def test_weight_scale_epsilon_floor(self):
        state = ObserverState("weight")
        state.m_ema, state.updates = 0.0, 1
        assert weight_qparams(state, 8).scale == pytest.approx(1e-6 / 127)

    def test_weight_per_channel_scales(self):
        state = ObserverState("weight", per_channel=True)
        state.m_ema, state.updates = np.array([1.0, 10.0]), 1
        qp = weight_qparams(state, 8)
        assert np.allclose(qp.scale, [1 / 127, 10 / 127])
        assert qp.channel_axis == 0

    def test_activation_scale_and_zero_point(self):
        state = ObserverState("activation")
        state.a_ema, state.b_ema, state.updates = -1.0, 1.55, 1
        qp = activation_qparams(state, 8)
        assert qp.scale == pytest.approx(0.01)
        assert qp.zero_point == 100

    def test_activation_zero_min(self):
        state = ObserverState("activation")
        state.a_ema, state.b_ema, state.updates = 0.0, 2.55, 1
        qp = activation_qparams(state, 8)
        assert qp.scale == pytest.approx(0.01)
        assert qp.zero_point == 0

    def test_degenerate_range_clips_zero_point(self):
        # a == b == 5: raw zero-point -5/(eps/255) is hugely negative -> clips to 0
        state = ObserverState("activation")
        state.a_ema, state.b_ema, state.updates = 5.0, 5.0, 1
        qp = activation_qparams(state, 8)
        assert qp.scale == pytest.approx(1e-6 / 255)
        assert -state.a_ema / qp.scale < 0
        assert qp.zero_point == 0

    def test_uninitialized_rejected(self):
        with pytest.raises(ValueError, match="no updates"):
            weight_qparams(ObserverState("weight"), 8)
        with pytest.raises(ValueError, match="no updates"):
            activation_qparams(ObserverState("activation"), 8)

    def test_zero_point_always_in_range(self):
        rng = np.random.default_rng(9)
        for _ in range(200):
            state = ObserverState("activation")
            update_activation_stats(state, rng.uniform(-100, 100, 30))
            qp = activation_qparams(state, 8)
            assert 0 <= qp.zero_point <= 255

    def test_per_channel_utilization_dominates_per_tensor(self):
        # with p_hi quantile == max (n < 1000 per channel), each channel's
        # own scale uses the grid at least as fully as a shared tensor scale
        rng = np.random.default_rng(4)
        for _ in range(20):
            w = rng.standard_normal((6, 40)) * rng.uniform(0.1, 10.0, (6, 1))
            per_t = ObserverState("weight")
            per_c = ObserverState("weight", per_channel=True)
            update_weight_stats(per_t, w)
            update_weight_stats(per_c, w)
            s_tensor = weight_qparams(per_t, 8).scale
            s_c = np.asarray(weight_qparams(per_c, 8).scale)
            max_c = np.abs(w).max(axis=1)
            assert np.all(max_c / s_c >= max_c / s_tensor - 1e-12)


class TestStateValidation:
    def test_kind_checked(self):
        with pytest.raises(ValueError, match="kind"):
            ObserverState("bias")

    def test_momentum_domain(self):
        with pytest.raises(ValueError, match="mu"):
            ObserverState("weight", mu=0.0)

    def test_kind_mismatch_on_update(self):
        with pytest.raises(ValueError, match="kind"):
            update_weight_stats(ObserverState("activation"), [1.0])
