"""Tests for the multi-maneuver score."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from builders import cubic_straight, jerk_pair, lateral_drift, reference, slow_start, tortuosity_pair
from conftest import angles, futures, offsets, straight
from maneuver_eval.exceptions import (
    DegenerateVarianceError,
    EmptyReferenceSetError,
    SchemaViolationError,
    UnsupportedCheckpointError,
)
from maneuver_eval.mms import (
    ComfortPenalty,
    MmsCase,
    MultiManeuverScorer,
    Reference,
    ReferenceCategory,
    ReferenceSet,
    checkpoint_similarity,
    comfort_penalty,
    pearson_and_fit,
    score,
    similarity,
    speed_factor,
    thresholds,
)
from maneuver_eval.trajectory import Trajectory, rigid_transform

RC = ReferenceCategory


def _past(speed: float = 10.0) -> Trajectory:
    t = 0.2 * np.arange(-20, 1)
    return Trajectory.past(np.column_stack([speed * t, np.zeros(21)]))


def _shift(traj: Trajectory, dx: float = 0.0, dy: float = 0.0, at: float | None = None) -> Trajectory:
    xy = traj.xy.copy()
    if at is None:
        xy += [dx, dy]
    else:
        xy[traj.index_at(at)] += [dx, dy]
    return traj.with_xy(xy)


class TestCategories:
    @pytest.mark.parametrize(
        "category, base, comfort",
        [
            (RC.EXPERT_LIKE, 10, True),
            (RC.WRONG_SPEED, 7, True),
            (RC.NEGLECT_INSTRUCTION, 4, True),
            (RC.OFF_ROAD, 1, False),
            (RC.CRASH, 0, False),
        ],
    )
    def test_ledger(self, category, base, comfort):
        assert category.base_score == base
        assert category.comfort_applicable is comfort

    def test_empty_set(self):
        with pytest.raises(EmptyReferenceSetError):
            ReferenceSet(())

    def test_two_experts(self):
        ref = straight(10.0)
        with pytest.raises(SchemaViolationError):
            ReferenceSet(((RC.EXPERT_LIKE, ref), (RC.EXPERT_LIKE, ref)))

    def test_tuples_coerced(self):
        refs = ReferenceSet(((RC.CRASH, straight(3.0)),))
        assert isinstance(refs.references[0], Reference)
        assert refs.expert is None


class TestThresholds:
    @pytest.mark.parametrize(
        "speed, t, lat, lon",
        [(11.0, 5.0, 1.8, 3.6), (1.4, 3.0, 0.5, 1.0), (0.0, 3.0, 0.5, 1.0), (30.0, 3.0, 1.0, 2.0)],
    )
    def test_table(self, speed, t, lat, lon):
        th = thresholds(speed, t)
        assert (th.lambda_lat, th.lambda_lon) == pytest.approx((lat, lon))

    def test_midpoint(self):
        # halfway between 1.4 and 11 m/s the factor is 0.75
        assert speed_factor(6.2) == pytest.approx(0.75)

    def test_unsupported(self):
        with pytest.raises(UnsupportedCheckpointError):
            thresholds(5.0, 4.0)

    @given(st.floats(0.0, 60.0), st.sampled_from([3.0, 5.0]))
    def test_longitudinal_dominates(self, speed, t):
        th = thresholds(speed, t)
        assert th.lambda_lon >= th.lambda_lat > 0


class TestSimilarity:
    def test_identical(self):
        assert similarity(straight(10.0), straight(10.0), 10.0) == 1.0

    def test_boundary_inside(self):
        ref = straight(11.0)
        plan = _shift(_shift(ref, dy=1.0, at=3.0), dy=1.8, at=5.0)
        assert similarity(plan, ref, 11.0) == 1.0

    def test_double_threshold_is_zero(self):
        ref = straight(11.0)
        assert similarity(_shift(ref, dy=3.6, at=5.0), ref, 11.0) == 0.0

    def test_partial(self):
        ref = straight(11.0)
        # 1.5 m lateral at 3 s against a 1.0 m threshold
        assert similarity(_shift(ref, dy=1.5, at=3.0), ref, 11.0) == pytest.approx(0.5)

    def test_continuity_at_threshold(self):
        th = thresholds(11.0, 3.0)
        for lam, make in ((th.lambda_lat, lambda d: (d, 0.0)), (th.lambda_lon, lambda d: (0.0, d))):
            d = np.linspace(lam - 1e-3, lam + 1e-3, 201)
            vals = np.array([checkpoint_similarity(*make(x), th) for x in d])
            assert np.max(np.abs(np.diff(vals))) < 1e-3 / lam
            assert checkpoint_similarity(*make(lam), th) == 1.0

    def test_per_waypoint_policy_is_stricter_early(self):
        ref = straight(11.0)
        plan = _shift(ref, dy=0.6, at=1.0)
        assert similarity(plan, ref, 11.0) == 1.0
        assert similarity(plan, ref, 11.0, policy="per-waypoint") < 1.0

    @given(futures(), futures(), angles, offsets, st.floats(0.0, 30.0))
    def test_joint_rigid_invariance(self, plan, ref, angle, offset, speed):
        ref_speed = np.hypot(*(ref.xy[15] - ref.xy[13])) / 0.4
        assume(ref_speed > 0.1)
        moved = similarity(rigid_transform(plan, angle, offset), rigid_transform(ref, angle, offset), speed)
        assert moved == pytest.approx(similarity(plan, ref, speed), abs=1e-6)

    @given(futures(), futures(), st.floats(0.0, 30.0))
    def test_range(self, plan, ref, speed):
        assert 0.0 <= similarity(plan, ref, speed) <= 1.0


class TestComfort:
    def test_identical(self):
        ref = cubic_straight(10.0, 0.1)
        assert comfort_penalty(ref, ref) == ComfortPenalty(False, False)

    @pytest.mark.parametrize("ratio, flag", [(1.43, False), (1.44, False), (1.45, True)])
    def test_jerk_strict(self, ratio, flag):
        plan, ref = jerk_pair(ratio)
        assert comfort_penalty(plan, ref).jerk_flag is flag
        assert comfort_penalty(plan, ref).tortuosity_flag is False

    @pytest.mark.parametrize("ratio, flag", [(1.05, False), (1.06, True), (1.07, True)])
    def test_tortuosity_inclusive(self, ratio, flag):
        plan, ref = tortuosity_pair(ratio)
        assert comfort_penalty(plan, ref).tortuosity_flag is flag
        assert comfort_penalty(plan, ref).jerk_flag is False

    def test_both(self):
        plan, ref = tortuosity_pair(1.10)
        stiff = cubic_straight(10.0, 0.0013)
        pen = comfort_penalty(plan, stiff)
        assert pen.value == 2 == int(pen.jerk_flag) + int(pen.tortuosity_flag)
        assert comfort_penalty(plan, ref).value == 1

    def test_zero_jerk_reference_uses_floor(self):
        ref = straight(10.0)
        assert not comfort_penalty(cubic_straight(10.0, 0.005), ref).jerk_flag  # 0.026 m/s^3
        assert comfort_penalty(cubic_straight(10.0, 0.05), ref).jerk_flag  # 0.26 m/s^3

    def test_plan_returning_to_start(self):
        theta = np.linspace(0.0, 2 * np.pi, 25)
        loop = Trajectory.future(5.0 * np.column_stack([np.sin(theta), 1 - np.cos(theta)]))
        assert comfort_penalty(loop, cubic_straight(10.0, 0.1)).tortuosity_flag

    def test_reference_returning_to_start(self):
        theta = np.linspace(0.0, 2 * np.pi, 25)
        loop = Trajectory.future(5.0 * np.column_stack([np.sin(theta), 1 - np.cos(theta)]))
        assert not comfort_penalty(cubic_straight(10.0, 0.1), loop).tortuosity_flag


class TestScore:
    def test_expert_scores_ten(self):
        ref = straight(10.0)
        res = score(ref, _past(), ReferenceSet(((RC.EXPERT_LIKE, ref),)))
        assert (res.score, res.case_applied) == (10.0, MmsCase.SCALED_REFERENCE)

    def test_crash_match(self):
        expert = straight(11.0)
        crash = _shift(straight(11.0), dy=3.0)
        refs = ReferenceSet(((RC.EXPERT_LIKE, expert), (RC.CRASH, crash)))
        # 1.5 m beyond the 1.0 m lateral threshold at 3 s against the crash: s = 0.5
        plan = crash.with_xy(crash.xy + [0.0, 1.5])
        res = score(plan, _past(11.0), refs)
        assert res.similarity_s == pytest.approx(0.5)
        assert (res.score, res.case_applied, res.matched_category) == (
            0.0,
            MmsCase.CRASH_OR_OFF_ROAD_MATCH,
            RC.CRASH,
        )

    @pytest.mark.parametrize("fraction", [0.5, 0.4, 0.0, -1.0])
    def test_slow_start_is_zero(self, fraction):
        ref = straight(10.0)
        plan = slow_start(_past(), ref, fraction)
        res = score(plan, _past(), ReferenceSet(((RC.EXPERT_LIKE, ref),)))
        assert (res.score, res.case_applied) == (0.0, MmsCase.PAST_INCONSISTENT)

    def test_just_above_half_speed_is_not_case_one(self):
        ref = straight(10.0)
        plan = slow_start(_past(), ref, 0.51)
        assert score(plan, _past(), ReferenceSet(((RC.EXPERT_LIKE, ref),))).case_applied is not MmsCase.PAST_INCONSISTENT

    def test_reversed_swerve_is_zero(self):
        refs = ReferenceSet(((RC.EXPERT_LIKE, straight(10.0)),))
        swerve = Trajectory.future(np.column_stack([-2.0 * np.arange(1, 26) * 0.2, np.sin(np.arange(25))]))
        assert score(swerve, _past(), refs).score == 0.0

    def test_unmatched_with_penalty(self):
        plan, expert = tortuosity_pair(1.2)  # the arc sweeps far off to the left
        refs = ReferenceSet(((RC.EXPERT_LIKE, expert),))
        res = score(plan, _past(), refs)
        assert res.case_applied is MmsCase.UNMATCHED
        assert res.comfort.value == 1
        assert res.score == 2.5

    def test_scaled_reference_subtracts_penalty(self):
        expert = cubic_straight(10.0, 0.01)
        refs = ReferenceSet(((RC.EXPERT_LIKE, expert),))
        plan = cubic_straight(10.0, 0.02)  # same endpoint region, doubled jerk
        res = score(plan, _past(), refs)
        assert res.case_applied is MmsCase.SCALED_REFERENCE
        assert res.comfort.jerk_flag
        assert res.score == pytest.approx(res.similarity_s * 10 - 1)

    def test_tie_prefers_higher_base(self):
        ref = straight(10.0)
        refs = ReferenceSet(((RC.NEGLECT_INSTRUCTION, ref), (RC.WRONG_SPEED, ref)))
        res = score(ref, _past(), refs)
        assert res.matched_category is RC.WRONG_SPEED
        assert res.score == 7.0

    def test_stationary_past_disables_case_one(self):
        past = Trajectory.past(np.zeros((21, 2)))
        ref = straight(1.0)
        assert score(ref, past, ReferenceSet(((RC.EXPERT_LIKE, ref),))).score == 10.0

    def test_get_params_roundtrip(self):
        scorer = MultiManeuverScorer(jerk_ratio=1.5)
        assert scorer.get_params()["jerk_ratio"] == 1.5
        assert scorer.set_params(checkpoint_policy="per-waypoint").checkpoint_policy == "per-waypoint"
        assert scorer.fit() is scorer

    def test_fixture_experts(self, corpus):
        for sc in corpus:
            assert score(sc.expert, sc.past, sc.references).score == 10.0

    @given(futures(), st.floats(-3.0, 3.0))
    def test_range_and_unmatched_values(self, plan, drift):
        expert = straight(10.0)
        refs = ReferenceSet(
            ((RC.EXPERT_LIKE, expert), (RC.OFF_ROAD, _shift(expert, dy=4.0)), (RC.CRASH, _shift(expert, dy=-4.0)))
        )
        res = score(plan, _past(), refs)
        assert 0.0 <= res.score <= 10.0
        if res.case_applied is MmsCase.UNMATCHED:
            assert res.score in (3.5, 2.5, 1.5)

    @given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
    def test_monotone_in_similarity(self, a, b):
        # within the scaled case with k* and CP held fixed the score is s * base - CP, clamped
        ref = straight(11.0)
        refs = ReferenceSet(((RC.EXPERT_LIKE, ref),))
        lo, hi = sorted((a, b))

        def at(extra: float):
            return score(_shift(ref, dy=1.0 + extra, at=3.0), _past(11.0), refs)

        r_lo, r_hi = at(1.0 - lo), at(1.0 - hi)
        assume(r_lo.case_applied is r_hi.case_applied is MmsCase.SCALED_REFERENCE)
        assume(r_lo.comfort == r_hi.comfort)
        assert r_hi.score >= r_lo.score - 1e-12


class TestPearson:
    def test_exact_line(self):
        fit = pearson_and_fit([(x, 2 * x + 1) for x in range(10)])
        assert fit.r == pytest.approx(1.0, abs=1e-12)
        assert (fit.slope, fit.intercept) == pytest.approx((2.0, 1.0))

    def test_anticorrelated(self):
        assert pearson_and_fit([(x, -x) for x in range(5)]).r == pytest.approx(-1.0, abs=1e-12)

    def test_noisy_against_covariance_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=50)
        y = 0.3 * x + rng.normal(size=50)
        cov = np.cov(x, y, ddof=1)
        r_oracle = cov[0, 1] / np.sqrt(cov[0, 0] * cov[1, 1])
        fit = pearson_and_fit(list(zip(x, y)))
        assert abs(fit.r - r_oracle) <= 1e-12
        assert abs(fit.slope - cov[0, 1] / cov[0, 0]) <= 1e-12

    @pytest.mark.parametrize("pairs", [[(1.0, 2.0)], [(1.0, 2.0), (1.0, 3.0)], [(1.0, 2.0), (2.0, 2.0)]])
    def test_degenerate(self, pairs):
        with pytest.raises(DegenerateVarianceError):
            pearson_and_fit(pairs)


class TestCategoryPlans:
    @pytest.mark.parametrize(
        "category, low, high",
        [
            (RC.EXPERT_LIKE, 8.0, 10.0),
            (RC.WRONG_SPEED, 5.0, 7.0),
            (RC.NEGLECT_INSTRUCTION, 2.0, 4.0),
            (RC.OFF_ROAD, 1.0, 1.0),
            (RC.CRASH, 0.0, 0.0),
        ],
    )
    def test_fixture_plans(self, corpus, category, low, high):
        for sc in corpus:
            for ref in (r for r in sc.references if r.category is category):
                plan = lateral_drift(ref.trajectory)
                res = score(plan, sc.past, sc.references)
                assert res.matched_category is category, sc.id
                assert low <= res.score <= high, (sc.id, res)
