import math

import pytest
from hypothesis import given, settings, strategies as st

import treepipe as tp
from treepipe.errors import ConfigError


class TestStepCost:
    def test_staircase_leaps_at_quantum(self):
        cost = tp.CostModel(base_ms=40, slope_ms_per_quantum=8, quantum=64)
        assert tp.step_cost(cost, 1) == 40
        assert tp.step_cost(cost, 64) == 40
        assert tp.step_cost(cost, 65) == 48
        assert tp.step_cost(cost, 128) == 48
        assert tp.step_cost(cost, 129) == 56

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 10_000), st.integers(1, 128))
    def test_flat_within_quantum(self, w, q):
        cost = tp.CostModel(quantum=q)
        bucket = math.ceil(w / q)
        assert tp.step_cost(cost, w) == tp.step_cost(cost, bucket * q)

    def test_rejects_zero_width(self):
        with pytest.raises(ConfigError):
            tp.step_cost(tp.CostModel(), 0)


class TestExpectedTbt:
    def test_uniform_is_special_case_of_general(self):
        t, p, m = 40.0, 0.9, 4
        assert tp.expected_tbt_uniform(t, p, m) == tp.expected_tbt_general([t] * m, p)

    def test_perfect_draft_costs_one_step(self):
        assert tp.expected_tbt_uniform(40.0, 1.0, 8) == 40.0

    def test_hopeless_draft_costs_full_refill(self):
        assert tp.expected_tbt_uniform(40.0, 0.0, 8) == 40.0 * 9

    def test_general_uses_slowest_stage(self):
        assert tp.expected_tbt_general([10.0, 50.0], 1.0) == 50.0
        assert tp.expected_tbt_general([10.0, 50.0], 0.5) == 50.0 + 0.5 * 60.0

    @settings(max_examples=100, deadline=None)
    @given(
        st.floats(0.0, 1.0),
        st.floats(0.0, 1.0),
        st.integers(1, 32),
        st.floats(1.0, 100.0),
    )
    def test_monotone_decreasing_in_hit_prob(self, p1, p2, m, t):
        lo, hi = sorted([p1, p2])
        assert tp.expected_tbt_uniform(t, hi, m) <= tp.expected_tbt_uniform(t, lo, m)


class TestAccuracyCurve:
    def test_lookup_and_roundtrip(self):
        curve = tp.AccuracyCurve((1, 2, 64), (0.5, 0.7, 0.99))
        assert curve(2) == 0.7
        assert curve.covers(64) and not curve.covers(3)
        assert tp.AccuracyCurve.from_json(curve.to_json()) == curve

    def test_rejects_unsorted_widths(self):
        with pytest.raises(ConfigError):
            tp.AccuracyCurve((2, 1), (0.5, 0.6))

    def test_isotonic_fix(self):
        curve = tp.AccuracyCurve((1, 2, 4), (0.5, 0.4, 0.9)).isotonic()
        assert curve.probs == (0.5, 0.5, 0.9)

    def test_fit_from_counts_is_isotonic(self):
        curve = tp.fit_accuracy_curve({1: (40, 100), 2: (35, 100), 4: (90, 100)})
        assert curve.probs == (0.4, 0.4, 0.9)


class TestSelectWidth:
    def test_prefers_plateau_edge_under_quantum_cost(self):
        """Accuracy saturates by 64 while cost is flat to 64: pick 64."""
        cost = tp.CostModel(base_ms=40, slope_ms_per_quantum=8, quantum=64)
        widths = (1, 2, 4, 8, 16, 32, 64, 128)
        probs = (0.55, 0.68, 0.80, 0.88, 0.93, 0.96, 0.99, 0.992)
        curve = tp.AccuracyCurve(widths, probs)
        assert tp.select_width(cost, curve, 4, widths) == 64

    def test_tie_breaks_to_smaller_width(self):
        cost = tp.CostModel(base_ms=10, slope_ms_per_quantum=0, quantum=1)
        curve = tp.AccuracyCurve((2, 4), (0.9, 0.9))
        assert tp.select_width(cost, curve, 4, (4, 2)) == 2

    def test_uncovered_candidate_rejected(self):
        curve = tp.AccuracyCurve((2,), (0.9,))
        with pytest.raises(ConfigError):
            tp.select_width(tp.CostModel(), curve, 4, (2, 3))


class TestCadence:
    @pytest.mark.parametrize("p", [0.8, 0.9, 0.95, 0.99])
    @pytest.mark.parametrize("m", [4, 8, 16])
    def test_matches_renewal_formula(self, p, m):
        stats = tp.simulate_cadence(p, m, tokens=10_000, seed=42)
        expected = 1 + (1 - p) * m
        assert stats.steps_per_token == pytest.approx(expected, rel=0.05)

    def test_deterministic(self):
        a = tp.simulate_cadence(0.9, 4, 1000, seed=7)
        assert a == tp.simulate_cadence(0.9, 4, 1000, seed=7)

    def test_tbt_uses_cost_model(self):
        cost = tp.CostModel(base_ms=10, slope_ms_per_quantum=0)
        stats = tp.simulate_cadence(1.0, 4, 100, seed=0, cost=cost)
        assert stats.tbt_mean_ms == 10.0 and stats.misses == 0


class TestCostModelSerialization:
    def test_roundtrip(self):
        cost = tp.CostModel(base_ms=12.5, quantum=32)
        assert tp.CostModel.from_json(cost.to_json()) == cost
