"""Reward arithmetic on the published candidate table, exponent calibration,
argmax selection, and Pareto filtering against a brute-force filter."""

import io

import numpy as np
import pytest

from d2m.errors import DegenerateCalibration, EmptyRecord, InvalidConfig, NonPositiveLatency
from d2m.tradeoff import (
    CandidateEvaluation,
    calibrate_w,
    evaluate_candidates,
    pareto_frontier,
    read_candidates_csv,
    reward,
    write_candidates_csv,
)

# retained depth, measured latency (ms), average benchmark score
CANDIDATE_TABLE = [
    (13, 135.78, 29.85),
    (15, 148.84, 39.06),
    (17, 161.89, 42.76),
    (19, 174.95, 47.31),
    (21, 188.00, 47.50),
    (23, 201.05, 47.93),
]
BASE_LATENCY = 195.87
EXPECTED_REWARDS = [31.54, 40.70, 44.00, 48.12, 47.79, 47.74]


def table_candidates():
    return [CandidateEvaluation(config_id=f"L{d}", retained_depth=d, latency_ms=lat, score=s)
            for d, lat, s in CANDIDATE_TABLE]


class TestReward:
    def test_published_rows(self):
        for (depth, lat, score), expected in zip(CANDIDATE_TABLE, EXPECTED_REWARDS):
            assert reward(score, lat, BASE_LATENCY, -0.15) == pytest.approx(expected, abs=0.02)

    def test_unit_ratio_returns_score(self):
        for w in (-0.15, 0.0, 0.3, -2.0):
            assert reward(42.5, 100.0, 100.0, w) == 42.5

    def test_monotonicity(self):
        slow = reward(40.0, 200.0, 100.0, -0.15)
        fast = reward(40.0, 150.0, 100.0, -0.15)
        assert fast > slow
        assert reward(41.0, 150.0, 100.0, -0.15) > reward(40.0, 150.0, 100.0, -0.15)

    def test_non_positive_latency(self):
        with pytest.raises(NonPositiveLatency):
            reward(1.0, 0.0, 100.0, -0.15)
        with pytest.raises(NonPositiveLatency):
            reward(1.0, 10.0, -5.0, -0.15)


class TestCalibrateW:
    def test_platform_rule(self):
        w = calibrate_w(2, 1.11)
        assert -0.1516 <= w <= -0.1496
        assert w == pytest.approx(-0.1506, abs=1e-4)

    def test_latency_indifferent(self):
        assert calibrate_w(2, 1.0) == 0.0

    def test_factor_composition_consistency(self):
        assert calibrate_w(4, 1.11 ** 2) == pytest.approx(calibrate_w(2, 1.11), abs=1e-12)

    def test_neutral_trade_identity(self):
        # scaling latency by f while scoring gain g leaves the reward fixed
        for factor, gain in ((2, 1.11), (3, 1.25), (1.5, 1.02)):
            w = calibrate_w(factor, gain)
            base = reward(10.0, 100.0, 100.0, w)
            traded = reward(10.0 * gain, 100.0 * factor, 100.0, w)
            assert traded == pytest.approx(base, rel=1e-12)

    def test_degenerate_factor(self):
        with pytest.raises(DegenerateCalibration):
            calibrate_w(1.0, 1.11)
        with pytest.raises(DegenerateCalibration):
            calibrate_w(2.0, 0.0)


class TestEvaluateCandidates:
    def test_table_rewards_and_argmax(self):
        evaluated, best = evaluate_candidates(table_candidates(), BASE_LATENCY, -0.15)
        for cand, expected in zip(evaluated, EXPECTED_REWARDS):
            assert cand.reward == pytest.approx(expected, abs=0.02)
        assert best.retained_depth == 19

    def test_single_candidate_is_argmax(self):
        only = CandidateEvaluation("solo", 10, 50.0, 30.0)
        _, best = evaluate_candidates([only], 100.0, -0.15)
        assert best.config_id == "solo"

    def test_reward_tie_broken_by_lower_latency(self):
        # equal rewards by construction: same score, same latency ratio impact at w=0
        a = CandidateEvaluation("a", 1, 120.0, 40.0)
        b = CandidateEvaluation("b", 2, 80.0, 40.0)
        _, best = evaluate_candidates([a, b], 100.0, 0.0)
        assert best.config_id == "b"

    def test_argmax_invariant_under_latency_rescale(self):
        cands = table_candidates()
        _, best = evaluate_candidates(cands, BASE_LATENCY, -0.15)
        scaled = [CandidateEvaluation(c.config_id, c.retained_depth, c.latency_ms * 3.7,
                                      c.score) for c in cands]
        _, best_scaled = evaluate_candidates(scaled, BASE_LATENCY * 3.7, -0.15)
        assert best_scaled.config_id == best.config_id

    def test_empty_rejected(self):
        with pytest.raises(EmptyRecord):
            evaluate_candidates([], 100.0, -0.15)


def brute_force_frontier(points):
    keep = []
    for i, p in enumerate(points):
        dominated = False
        for j, q in enumerate(points):
            if i != j and q[0] <= p[0] and q[1] >= p[1] and q != p:
                dominated = True
        if not dominated:
            keep.append(p)
    return sorted(keep)


class TestParetoFrontier:
    def test_three_point_example(self):
        assert pareto_frontier([(100, 40), (120, 50), (130, 45)]) == [(100, 40), (120, 50)]

    def test_single_point(self):
        assert pareto_frontier([(5.0, 1.0)]) == [(5.0, 1.0)]

    def test_identical_points_both_survive(self):
        assert pareto_frontier([(10.0, 3.0), (10.0, 3.0)]) == [(10.0, 3.0), (10.0, 3.0)]

    def test_matches_brute_force_on_random_inputs(self):
        rng = np.random.default_rng(6)
        for _ in range(30):
            n = int(rng.integers(1, 200))
            pts = [(float(lat), float(score))
                   for lat, score in zip(rng.integers(1, 50, n), rng.integers(1, 50, n))]
            assert sorted(pareto_frontier(pts)) == brute_force_frontier(pts)

    def test_sorted_by_latency(self):
        rng = np.random.default_rng(7)
        pts = [(float(v), float(s)) for v, s in rng.uniform(1, 100, size=(50, 2))]
        frontier = pareto_frontier(pts)
        assert frontier == sorted(frontier)


class TestCandidatesCsv:
    def test_round_trip(self):
        evaluated, _ = evaluate_candidates(table_candidates(), BASE_LATENCY, -0.15)
        buf = io.StringIO()
        write_candidates_csv(evaluated, buf, header_comment="w=-0.15")
        buf.seek(0)
        back = read_candidates_csv(buf)
        assert [c.config_id for c in back] == [c.config_id for c in evaluated]
        # rewards are serialized at table precision (two decimals)
        assert back[3].reward == pytest.approx(48.12, abs=0.005)

    def test_rejects_wrong_header(self):
        with pytest.raises(InvalidConfig):
            read_candidates_csv(io.StringIO("foo,bar\n1,2\n"))

    def test_rejects_empty(self):
        with pytest.raises(EmptyRecord):
            read_candidates_csv(io.StringIO("config_id,depth,latency_ms,score,reward\n"))
