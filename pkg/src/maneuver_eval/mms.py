"""Multi-maneuver score (MMS).

A plan is compared against a handful of labeled reference futures. The most
similar reference decides the base score (10 expert-like, 7 wrong speed,
4 neglected instruction, 1 off road, 0 crash); similarity scales it and
comfort penalties (jerk, tortuosity) subtract from it. Plans that start
against the direction of travel score 0, unmatched plans score 3.5 - CP.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Literal, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .exceptions import (
    DegenerateChordError,
    DegenerateVarianceError,
    EmptyReferenceSetError,
    SchemaViolationError,
    UnsupportedCheckpointError,
)
from .trajectory import (
    DT,
    Trajectory,
    average_jerk,
    latlon_displacement,
    tortuosity,
    validate_trajectory,
)

CHECKPOINTS = (3.0, 5.0)
BASE_LATERAL = {3.0: 1.0, 5.0: 1.8}
LONGITUDINAL_FACTOR = 2.0
LOW_SPEED, HIGH_SPEED = 1.4, 11.0

JERK_RATIO = 1.44
TORTUOSITY_RATIO = 1.06
JERK_FLOOR = 0.05
MATCH_THRESHOLD = 0.4
UNMATCHED_BASE = 3.5
CONSISTENCY_RATIO = 0.5

# relative slack so a ratio that is exactly at a threshold in decimal is not
# flipped by binary rounding
_RATIO_RTOL = 1e-9
_TIE_TOL = 1e-12
# rounding leaves ~1e-13 m/s^3 on exact straight or quadratic references
_ZERO_JERK = 1e-9

CheckpointPolicy = Literal["checkpoints", "per-waypoint"]


class ReferenceCategory(enum.Enum):
    EXPERT_LIKE = "expert_like"
    WRONG_SPEED = "wrong_speed"
    NEGLECT_INSTRUCTION = "neglect_instruction"
    OFF_ROAD = "off_road"
    CRASH = "crash"

    @property
    def base_score(self) -> int:
        return _BASE_SCORES[self]

    @property
    def comfort_applicable(self) -> bool:
        return self not in (ReferenceCategory.OFF_ROAD, ReferenceCategory.CRASH)

    @property
    def label(self) -> str:
        return _LABELS[self]


_BASE_SCORES = {
    ReferenceCategory.EXPERT_LIKE: 10,
    ReferenceCategory.WRONG_SPEED: 7,
    ReferenceCategory.NEGLECT_INSTRUCTION: 4,
    ReferenceCategory.OFF_ROAD: 1,
    ReferenceCategory.CRASH: 0,
}
_LABELS = {
    ReferenceCategory.EXPERT_LIKE: "Expert-like trajectory",
    ReferenceCategory.WRONG_SPEED: "Wrong speed",
    ReferenceCategory.NEGLECT_INSTRUCTION: "Neglect instruction",
    ReferenceCategory.OFF_ROAD: "Driving off road w/o crashing",
    ReferenceCategory.CRASH: "Crash",
}


@dataclass(frozen=True)
class Reference:
    category: ReferenceCategory
    trajectory: Trajectory
    source: str = "annotated"


@dataclass(frozen=True)
class ReferenceSet:
    """Labeled reference futures of one scenario (at most one expert-like)."""

    references: tuple[Reference, ...]

    def __post_init__(self) -> None:
        refs = tuple(
            r if isinstance(r, Reference) else Reference(r[0], r[1]) for r in self.references
        )
        object.__setattr__(self, "references", refs)
        if not refs:
            raise EmptyReferenceSetError("a reference set needs at least one trajectory")
        n_expert = sum(r.category is ReferenceCategory.EXPERT_LIKE for r in refs)
        if n_expert > 1:
            raise SchemaViolationError("more than one expert-like reference", path="references")
        for r in refs:
            validate_trajectory(r.trajectory, "future")

    def __len__(self) -> int:
        return len(self.references)

    def __iter__(self):
        return iter(self.references)

    @property
    def expert(self) -> Trajectory | None:
        for r in self.references:
            if r.category is ReferenceCategory.EXPERT_LIKE:
                return r.trajectory
        return None

    def replace_category(
        self, category: ReferenceCategory, new: Iterable[Reference]
    ) -> "ReferenceSet":
        kept = [r for r in self.references if r.category is not category]
        return ReferenceSet(tuple(kept) + tuple(new))


@dataclass(frozen=True)
class SimilarityThresholds:
    lambda_lat: float
    lambda_lon: float
    checkpoint_time: float


@dataclass(frozen=True)
class ComfortPenalty:
    jerk_flag: bool = False
    tortuosity_flag: bool = False

    @property
    def value(self) -> int:
        return int(self.jerk_flag) + int(self.tortuosity_flag)


class MmsCase(enum.Enum):
    PAST_INCONSISTENT = "past_inconsistent"
    CRASH_OR_OFF_ROAD_MATCH = "crash_or_off_road_match"
    SCALED_REFERENCE = "scaled_reference"
    UNMATCHED = "unmatched"


@dataclass(frozen=True)
class MmsResult:
    score: float
    case_applied: MmsCase
    matched_category: ReferenceCategory | None
    similarity_s: float
    comfort: ComfortPenalty
    best_category: ReferenceCategory | None = None
    similarities: tuple[float, ...] = field(default=(), repr=False)


# ---------------------------------------------------------------------------
# thresholds and similarity
# ---------------------------------------------------------------------------


def speed_factor(speed: float) -> float:
    """0.5 below 1.4 m/s, 1.0 above 11 m/s, linear in between."""
    frac = (speed - LOW_SPEED) / (HIGH_SPEED - LOW_SPEED)
    return 0.5 + 0.5 * float(np.clip(frac, 0.0, 1.0))


def thresholds(initial_speed: float, checkpoint_time: float) -> SimilarityThresholds:
    if initial_speed < 0 or not np.isfinite(initial_speed):
        raise ValueError(f"initial_speed must be >= 0, got {initial_speed}")
    base = None
    for t, lat in BASE_LATERAL.items():
        if abs(checkpoint_time - t) < 1e-9:
            base = lat
    if base is None:
        raise UnsupportedCheckpointError(
            f"thresholds are defined at {CHECKPOINTS} s, got {checkpoint_time}"
        )
    lat = base * speed_factor(initial_speed)
    return SimilarityThresholds(lat, LONGITUDINAL_FACTOR * lat, float(checkpoint_time))


def _thresholds_anytime(initial_speed: float, t: float) -> SimilarityThresholds:
    # per-waypoint mode: lateral base interpolated linearly through the
    # origin, 3 s and 5 s anchors
    base = float(np.interp(t, [0.0, 3.0, 5.0], [0.0, 1.0, 1.8]))
    lat = base * speed_factor(initial_speed)
    return SimilarityThresholds(lat, LONGITUDINAL_FACTOR * lat, float(t))


def checkpoint_similarity(d_lat: float, d_lon: float, th: SimilarityThresholds) -> float:
    if d_lat <= th.lambda_lat and d_lon <= th.lambda_lon:
        return 1.0
    sim_lat = max(0.0, 1.0 - (d_lat - th.lambda_lat) / th.lambda_lat)
    sim_lon = max(0.0, 1.0 - (d_lon - th.lambda_lon) / th.lambda_lon)
    return min(sim_lat, sim_lon)


def similarity(
    plan: Trajectory,
    ref: Trajectory,
    initial_speed: float,
    *,
    policy: CheckpointPolicy = "checkpoints",
) -> float:
    """Threshold-based similarity in [0, 1]; minimum over evaluation times."""
    if policy == "checkpoints":
        times = CHECKPOINTS
        th_fn = thresholds
    elif policy == "per-waypoint":
        times = tuple(float(t) for t in ref.times if t > 1e-9)
        th_fn = _thresholds_anytime
    else:
        raise ValueError(f"unknown checkpoint policy {policy!r}")
    sims = []
    for t in times:
        d = latlon_displacement(plan, ref, t)
        sims.append(checkpoint_similarity(d.d_lat, d.d_lon, th_fn(initial_speed, t)))
    return float(min(sims))


# ---------------------------------------------------------------------------
# comfort
# ---------------------------------------------------------------------------


def comfort_penalty(
    plan: Trajectory,
    ref: Trajectory,
    *,
    jerk_ratio: float = JERK_RATIO,
    tortuosity_ratio: float = TORTUOSITY_RATIO,
    jerk_floor: float = JERK_FLOOR,
) -> ComfortPenalty:
    """Jerk flag when strictly above ``jerk_ratio`` x reference jerk; tortuosity
    flag when at or above ``tortuosity_ratio`` x reference tortuosity.

    A perfectly smooth reference (zero jerk) switches the jerk test to the
    absolute ``jerk_floor``. A plan that returns to its start always gets the
    tortuosity flag; a reference that does so disables the tortuosity test.
    """
    j_plan, j_ref = average_jerk(plan), average_jerk(ref)
    if j_ref <= _ZERO_JERK:
        jerk_flag = j_plan > jerk_floor
    else:
        jerk_flag = j_plan > jerk_ratio * j_ref * (1.0 + _RATIO_RTOL)

    try:
        t_ref = tortuosity(ref)
    except DegenerateChordError:
        t_ref = None
    try:
        t_plan = tortuosity(plan)
    except DegenerateChordError:
        tort_flag = True
    else:
        tort_flag = t_ref is not None and t_plan >= tortuosity_ratio * t_ref * (1.0 - _RATIO_RTOL)
    return ComfortPenalty(bool(jerk_flag), bool(tort_flag))


# ---------------------------------------------------------------------------
# final score
# ---------------------------------------------------------------------------


def current_velocity(past: Trajectory) -> np.ndarray:
    """Velocity at "now" from the last two past waypoints."""
    return (past.xy[-1] - past.xy[-2]) / past.dt


def initial_plan_velocity(plan: Trajectory) -> np.ndarray:
    """(first planned waypoint - origin) / 0.2 s."""
    return plan.xy[0] / plan.t0 if plan.t0 > 0 else plan.xy[0] / DT


def is_past_inconsistent(
    plan: Trajectory, past: Trajectory, ratio: float = CONSISTENCY_RATIO
) -> bool:
    v_ref = current_velocity(past)
    speed = float(np.hypot(*v_ref))
    if speed <= 1e-9:
        # no direction of travel to contradict
        return False
    projected = float(initial_plan_velocity(plan) @ (v_ref / speed))
    return projected <= ratio * speed * (1.0 + _RATIO_RTOL)


def best_match(
    plan: Trajectory,
    refs: ReferenceSet,
    initial_speed: float,
    *,
    policy: CheckpointPolicy = "checkpoints",
) -> tuple[int, list[float]]:
    """Index of the most similar reference; ties go to the higher base score."""
    sims = [similarity(plan, r.trajectory, initial_speed, policy=policy) for r in refs]
    best = 0
    for k in range(1, len(sims)):
        gap = sims[k] - sims[best]
        if gap > _TIE_TOL or (
            abs(gap) <= _TIE_TOL
            and refs.references[k].category.base_score
            > refs.references[best].category.base_score
        ):
            best = k
    return best, sims


class MultiManeuverScorer(BaseEstimator):
    """Configurable MMS evaluator.

    Holds the scoring constants so sensitivity studies can sweep them with
    ``set_params``. There is nothing to fit; :meth:`evaluate` scores one plan.
    """

    def __init__(
        self,
        checkpoint_policy: CheckpointPolicy = "checkpoints",
        jerk_ratio: float = JERK_RATIO,
        tortuosity_ratio: float = TORTUOSITY_RATIO,
        jerk_floor: float = JERK_FLOOR,
        match_threshold: float = MATCH_THRESHOLD,
        unmatched_base: float = UNMATCHED_BASE,
        consistency_ratio: float = CONSISTENCY_RATIO,
    ) -> None:
        self.checkpoint_policy = checkpoint_policy
        self.jerk_ratio = jerk_ratio
        self.tortuosity_ratio = tortuosity_ratio
        self.jerk_floor = jerk_floor
        self.match_threshold = match_threshold
        self.unmatched_base = unmatched_base
        self.consistency_ratio = consistency_ratio

    def fit(self, X=None, y=None):
        return self

    def _comfort(self, plan: Trajectory, ref: Trajectory | None) -> ComfortPenalty:
        if ref is None:
            return ComfortPenalty()
        return comfort_penalty(
            plan,
            ref,
            jerk_ratio=self.jerk_ratio,
            tortuosity_ratio=self.tortuosity_ratio,
            jerk_floor=self.jerk_floor,
        )

    def _comfort_baseline(self, refs: ReferenceSet, best: Reference) -> Trajectory | None:
        if best.category.comfort_applicable:
            return best.trajectory
        if refs.expert is not None:
            return refs.expert
        applicable = [r for r in refs if r.category.comfort_applicable]
        if not applicable:
            return None
        return max(applicable, key=lambda r: r.category.base_score).trajectory

    def evaluate(self, plan: Trajectory, past: Trajectory, refs: ReferenceSet) -> MmsResult:
        validate_trajectory(plan, "future")
        validate_trajectory(past, "past")
        if not isinstance(refs, ReferenceSet):
            refs = ReferenceSet(tuple(refs))

        speed = float(np.hypot(*current_velocity(past)))
        k, sims = best_match(plan, refs, speed, policy=self.checkpoint_policy)
        best = refs.references[k]
        s = sims[k]
        base = best.category.base_score

        if is_past_inconsistent(plan, past, self.consistency_ratio):
            return MmsResult(
                0.0, MmsCase.PAST_INCONSISTENT, None, s, ComfortPenalty(), best.category, tuple(sims)
            )

        if base in (0, 1) and s >= self.match_threshold:
            return MmsResult(
                float(base),
                MmsCase.CRASH_OR_OFF_ROAD_MATCH,
                best.category,
                s,
                ComfortPenalty(),
                best.category,
                tuple(sims),
            )

        comfort = self._comfort(plan, self._comfort_baseline(refs, best))
        cp = comfort.value
        floor = self.unmatched_base - cp
        scaled = s * base
        if scaled >= floor:
            applied = cp if best.category.comfort_applicable else 0
            value = min(10.0, max(scaled - applied, floor))
            return MmsResult(
                float(value), MmsCase.SCALED_REFERENCE, best.category, s, comfort,
                best.category, tuple(sims),
            )
        return MmsResult(
            float(floor), MmsCase.UNMATCHED, None, s, comfort, best.category, tuple(sims)
        )


def score(
    plan: Trajectory,
    past: Trajectory,
    refs: ReferenceSet,
    *,
    policy: CheckpointPolicy = "checkpoints",
) -> MmsResult:
    """Score one plan with the default constants."""
    return MultiManeuverScorer(checkpoint_policy=policy).evaluate(plan, past, refs)


# ---------------------------------------------------------------------------
# correlation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearFit:
    r: float
    slope: float
    intercept: float
    n: int


def pearson_and_fit(pairs: Sequence[tuple[float, float]]) -> LinearFit:
    """Sample Pearson correlation plus the least-squares line y = slope*x + b."""
    arr = np.asarray(pairs, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 2:
        raise DegenerateVarianceError("need at least two (x, y) pairs")
    x, y = arr[:, 0], arr[:, 1]
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy, sxy = float(dx @ dx), float(dy @ dy), float(dx @ dy)
    if sxx <= 0.0 or syy <= 0.0:
        raise DegenerateVarianceError("x and y must both have non-zero variance")
    r = float(np.clip(sxy / np.sqrt(sxx * syy), -1.0, 1.0))
    slope = sxy / sxx
    intercept = float(y.mean() - slope * x.mean())
    return LinearFit(r, float(slope), intercept, int(arr.shape[0]))
