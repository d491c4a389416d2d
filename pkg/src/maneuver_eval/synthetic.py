"""Seeded generator for the synthetic fixture corpus.

Every scenario is built from one past trajectory and a handful of kinematic
rollouts: the expert follows slightly perturbed controls, instruction
neglect, off-road and crash references follow distinct action sequences,
and the two wrong-speed references come from the augmentation pipeline.
The generator rejects candidate references that resemble each other, so
each category is unambiguous for plans built from it.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .actions import (
    AccelClass as A,
    ControlParams,
    IntervalActions,
    SteerClass as S,
    classify_actions,
    control_params,
    rollout,
    rollout_controls,
)
from .augment import wrong_speed_references
from .coherence import LANGUAGES, template_trace
from .dataset import Scenario, ScenarioType
from .mms import Reference, ReferenceCategory, ReferenceSet, similarity
from .trajectory import DT, PAST_LENGTH, Trajectory

MAX_CROSS_SIMILARITY = 0.3
PER_TYPE = 3
_SPLITS = ("train", "test", "val")

_TYPE_TAG = {
    ScenarioType.SPECIFICALLY_SELECTED: "sel",
    ScenarioType.HEAVY_RAIN: "rain",
    ScenarioType.CONSTRUCTION_ZONE: "constr",
    ScenarioType.OVERTAKE_LANE_CHANGE: "overtake",
    ScenarioType.INTERSECTION: "inter",
    ScenarioType.NIGHTTIME: "night",
    ScenarioType.SNOW_WINTRY_MIX: "snow",
}


@dataclass(frozen=True)
class Blueprint:
    scenario_type: ScenarioType
    speed: float  # m/s at "now"
    instruction: str
    expert: IntervalActions
    neglect: tuple[IntervalActions, ...]
    off_road: tuple[IntervalActions, ...]
    crash: tuple[IntervalActions, ...]
    awareness: str


def _ia(a1, s1, a2=None, s2=None) -> IntervalActions:
    return IntervalActions((a1, s1), (a2 or a1, s2 or s1))


_OFF_ROAD = (_ia(A.MAINTAIN, S.RIGHT), _ia(A.MAINTAIN, S.LEFT), _ia(A.DECEL_SLIGHT, S.RIGHT))
_CRASH = (
    _ia(A.ACCEL_STRONG, S.STRAIGHT),
    _ia(A.ACCEL_STRONG, S.SLIGHT_LEFT),
    _ia(A.ACCEL_STRONG, S.SLIGHT_RIGHT),
)

BLUEPRINTS: tuple[Blueprint, ...] = (
    # specifically selected: instruction often cannot be followed safely
    Blueprint(ScenarioType.SPECIFICALLY_SELECTED, 8.0, "turn left",
              _ia(A.DECEL_SLIGHT, S.STRAIGHT, A.MAINTAIN, S.STRAIGHT),
              (_ia(A.MAINTAIN, S.SLIGHT_LEFT),), _OFF_ROAD, _CRASH,
              "A protest blocks the road to the left; police are directing traffic straight."),
    Blueprint(ScenarioType.SPECIFICALLY_SELECTED, 12.0, "drive straight on",
              _ia(A.DECEL_SLIGHT, S.SLIGHT_RIGHT, A.MAINTAIN, S.SLIGHT_LEFT),
              (_ia(A.MAINTAIN, S.STRAIGHT),), _OFF_ROAD, _CRASH,
              "A broken-down truck occupies my lane; the right lane is free."),
    Blueprint(ScenarioType.SPECIFICALLY_SELECTED, 6.0, "turn right",
              _ia(A.DECEL_SLIGHT, S.STRAIGHT),
              (_ia(A.MAINTAIN, S.SLIGHT_RIGHT),), _OFF_ROAD, _CRASH,
              "An ambulance approaches from the right street, so I wait before turning."),
    # heavy rain, mostly highway speeds
    Blueprint(ScenarioType.HEAVY_RAIN, 22.0, "drive straight on",
              _ia(A.DECEL_SLIGHT, S.STRAIGHT, A.MAINTAIN, S.STRAIGHT),
              (_ia(A.MAINTAIN, S.SLIGHT_LEFT, A.MAINTAIN, S.SLIGHT_RIGHT),), _OFF_ROAD, _CRASH,
              "Heavy rain on the highway reduces visibility and the road is wet."),
    Blueprint(ScenarioType.HEAVY_RAIN, 25.0, "use right lane",
              _ia(A.MAINTAIN, S.SLIGHT_RIGHT, A.MAINTAIN, S.SLIGHT_LEFT),
              (_ia(A.MAINTAIN, S.STRAIGHT),), _OFF_ROAD, _CRASH,
              "Spray from a truck ahead; the right lane is empty."),
    Blueprint(ScenarioType.HEAVY_RAIN, 10.0, "drive straight on",
              _ia(A.MAINTAIN, S.STRAIGHT),
              (_ia(A.MAINTAIN, S.SLIGHT_RIGHT, A.MAINTAIN, S.STRAIGHT),), _OFF_ROAD, _CRASH,
              "Standing water on an urban road; traffic ahead moves slowly."),
    # construction zones
    Blueprint(ScenarioType.CONSTRUCTION_ZONE, 9.0, "drive straight on",
              _ia(A.DECEL_SLIGHT, S.STRAIGHT, A.MAINTAIN, S.STRAIGHT),
              (_ia(A.MAINTAIN, S.SLIGHT_LEFT, A.MAINTAIN, S.STRAIGHT),), _OFF_ROAD, _CRASH,
              "Cones narrow the road to one lane; workers are on the left."),
    Blueprint(ScenarioType.CONSTRUCTION_ZONE, 20.0, "use left lane",
              _ia(A.DECEL_SLIGHT, S.SLIGHT_LEFT, A.MAINTAIN, S.SLIGHT_RIGHT),
              (_ia(A.MAINTAIN, S.STRAIGHT),), _OFF_ROAD, _CRASH,
              "The right lane closes ahead for roadworks."),
    Blueprint(ScenarioType.CONSTRUCTION_ZONE, 7.0, "drive straight on",
              _ia(A.MAINTAIN, S.STRAIGHT, A.ACCEL_SLIGHT, S.STRAIGHT),
              (_ia(A.MAINTAIN, S.SLIGHT_RIGHT, A.MAINTAIN, S.STRAIGHT),), _OFF_ROAD, _CRASH,
              "A flagger waves traffic through a single-lane section."),
    # overtaking and lane changes
    Blueprint(ScenarioType.OVERTAKE_LANE_CHANGE, 24.0, "overtake truck driving on the right",
              _ia(A.ACCEL_SLIGHT, S.SLIGHT_LEFT, A.ACCEL_SLIGHT, S.SLIGHT_RIGHT),
              (_ia(A.MAINTAIN, S.STRAIGHT),), _OFF_ROAD, _CRASH,
              "A slow truck ahead in my lane; the left lane is clear."),
    Blueprint(ScenarioType.OVERTAKE_LANE_CHANGE, 30.0, "use right lane",
              _ia(A.MAINTAIN, S.SLIGHT_RIGHT, A.MAINTAIN, S.SLIGHT_LEFT),
              (_ia(A.MAINTAIN, S.STRAIGHT),), _OFF_ROAD, _CRASH,
              "I am in the middle lane after overtaking; the right lane has space."),
    Blueprint(ScenarioType.OVERTAKE_LANE_CHANGE, 18.0, "overtake cyclist on the right",
              _ia(A.MAINTAIN, S.SLIGHT_LEFT, A.ACCEL_SLIGHT, S.SLIGHT_RIGHT),
              (_ia(A.DECEL_SLIGHT, S.STRAIGHT, A.MAINTAIN, S.STRAIGHT),), _OFF_ROAD, _CRASH,
              "A cyclist rides near the right edge of a rural road."),
    # intersections at urban speeds
    Blueprint(ScenarioType.INTERSECTION, 8.0, "turn right",
              _ia(A.MAINTAIN, S.SLIGHT_RIGHT, A.MAINTAIN, S.STRAIGHT),
              (_ia(A.MAINTAIN, S.STRAIGHT),), _OFF_ROAD, _CRASH,
              "Green light at a four-way intersection; the right street is empty."),
    Blueprint(ScenarioType.INTERSECTION, 7.0, "turn left",
              _ia(A.MAINTAIN, S.SLIGHT_LEFT, A.ACCEL_SLIGHT, S.STRAIGHT),
              (_ia(A.MAINTAIN, S.STRAIGHT),), _OFF_ROAD, _CRASH,
              "Protected left-turn arrow; oncoming traffic is stopped."),
    Blueprint(ScenarioType.INTERSECTION, 9.0, "drive straight on",
              _ia(A.MAINTAIN, S.STRAIGHT, A.ACCEL_SLIGHT, S.STRAIGHT),
              (_ia(A.MAINTAIN, S.SLIGHT_RIGHT, A.MAINTAIN, S.STRAIGHT),), _OFF_ROAD, _CRASH,
              "Crossing a signalized intersection on green."),
    # nighttime
    Blueprint(ScenarioType.NIGHTTIME, 14.0, "drive straight on",
              _ia(A.MAINTAIN, S.STRAIGHT),
              (_ia(A.MAINTAIN, S.SLIGHT_LEFT, A.MAINTAIN, S.STRAIGHT),), _OFF_ROAD, _CRASH,
              "Dark rural road lit only by my headlights."),
    Blueprint(ScenarioType.NIGHTTIME, 26.0, "use left lane",
              _ia(A.MAINTAIN, S.SLIGHT_LEFT, A.MAINTAIN, S.SLIGHT_RIGHT),
              (_ia(A.MAINTAIN, S.STRAIGHT),), _OFF_ROAD, _CRASH,
              "Night highway with sparse traffic; a merge lane joins from the right."),
    Blueprint(ScenarioType.NIGHTTIME, 8.0, "turn left",
              _ia(A.DECEL_SLIGHT, S.SLIGHT_LEFT, A.MAINTAIN, S.STRAIGHT),
              (_ia(A.MAINTAIN, S.STRAIGHT),), _OFF_ROAD, _CRASH,
              "Unlit side street on the left; a pedestrian is on the far sidewalk."),
    # snow and wintry mix
    Blueprint(ScenarioType.SNOW_WINTRY_MIX, 11.0, "drive straight on",
              _ia(A.DECEL_SLIGHT, S.STRAIGHT),
              (_ia(A.MAINTAIN, S.SLIGHT_RIGHT, A.MAINTAIN, S.STRAIGHT),), _OFF_ROAD, _CRASH,
              "Snow covers the lane markings; the car ahead brakes gently."),
    Blueprint(ScenarioType.SNOW_WINTRY_MIX, 19.0, "use right lane",
              _ia(A.DECEL_SLIGHT, S.SLIGHT_RIGHT, A.MAINTAIN, S.SLIGHT_LEFT),
              (_ia(A.MAINTAIN, S.STRAIGHT),), _OFF_ROAD, _CRASH,
              "Slush on the left lane of a highway; the right lane is cleared."),
    Blueprint(ScenarioType.SNOW_WINTRY_MIX, 6.0, "turn right",
              _ia(A.MAINTAIN, S.SLIGHT_RIGHT, A.MAINTAIN, S.STRAIGHT),
              (_ia(A.MAINTAIN, S.STRAIGHT),), _OFF_ROAD, _CRASH,
              "Icy residential street; turning right into a plowed road."),
)


def make_past(speed: float, curvature: float = 0.0, accel: float = 0.0) -> Trajectory:
    """Past trajectory arriving at the origin heading along +x.

    The vehicle drove on a circular arc of the given curvature with constant
    acceleration, reaching ``speed`` at t = 0.
    """
    t = DT * np.arange(-(PAST_LENGTH - 1), 1)
    s = speed * t + 0.5 * accel * t**2  # arc length relative to now (negative)
    if abs(curvature) < 1e-12:
        xy = np.column_stack([s, np.zeros_like(s)])
    else:
        xy = np.column_stack([np.sin(curvature * s) / curvature, (1 - np.cos(curvature * s)) / curvature])
    xy[-1] = 0.0
    return Trajectory.past(xy)


def _jittered(actions: IntervalActions, speed: float, rng: np.random.Generator) -> tuple:
    """Table controls scaled by a few percent, so experts are not exact rollouts.

    Each interval uses the table of its own start speed, as a rollout would.
    """
    out = []
    for pair in (actions.first_3s, actions.last_2s):
        cp = control_params(pair[0], pair[1], speed)
        jittered = ControlParams(
            cp.acceleration * rng.uniform(0.9, 1.1) + rng.uniform(-0.05, 0.05),
            cp.steering_angle * rng.uniform(0.95, 1.05),
        )
        out.append(jittered)
        speed = max(speed + 3.0 * jittered.acceleration, 0.0)
    return tuple(out)


def _cross_similarity(a: Trajectory, b: Trajectory, speed: float) -> float:
    return max(similarity(a, b, speed), similarity(b, a, speed))


def _pick(candidates, past, accepted: list[Trajectory], speed: float) -> Trajectory:
    for acts in candidates:
        traj = rollout(past, acts)
        if all(_cross_similarity(traj, t, speed) <= MAX_CROSS_SIMILARITY for t in accepted):
            return traj
    raise RuntimeError("no candidate reference is dissimilar enough")


def build_scenario(bp: Blueprint, index: int, rng: np.random.Generator) -> Scenario:
    type_idx = index % PER_TYPE
    past = make_past(
        bp.speed,
        curvature=float(rng.uniform(-0.002, 0.002)),
        accel=float(rng.uniform(-0.3, 0.3)),
    )
    first, last = _jittered(bp.expert, bp.speed, rng)
    expert = rollout_controls(past, first, last)
    actions = classify_actions(expert)
    if actions != bp.expert:
        raise RuntimeError(f"expert for {bp} classifies as {actions}")
    wrong = wrong_speed_references(expert)
    accepted = [expert, *(r.trajectory for r in wrong)]
    neglect = _pick(bp.neglect, past, accepted, bp.speed)
    accepted.append(neglect)
    off_road = _pick(bp.off_road, past, accepted, bp.speed)
    accepted.append(off_road)
    crash = _pick(bp.crash, past, accepted, bp.speed)

    refs = ReferenceSet(
        (
            Reference(ReferenceCategory.EXPERT_LIKE, expert),
            *wrong,
            Reference(ReferenceCategory.NEGLECT_INSTRUCTION, neglect),
            Reference(ReferenceCategory.OFF_ROAD, off_road),
            Reference(ReferenceCategory.CRASH, crash),
        )
    )
    sid = f"{_TYPE_TAG[bp.scenario_type]}-{type_idx + 1:03d}"
    language = LANGUAGES[index % len(LANGUAGES)]
    trace = template_trace(
        actions, language, variant=index, situational_awareness=bp.awareness
    )
    return Scenario(
        id=sid,
        split=_SPLITS[type_idx],
        scenario_type=bp.scenario_type,
        instruction=bp.instruction,
        past=past,
        references=refs,
        traces=(trace,),
        media={
            "front_image": f"media/{sid}/front.jpg",
            "front_video": f"media/{sid}/front.mp4",
        },
    )


def fixture_corpus(seed: int = 0) -> list[Scenario]:
    """The shipped synthetic corpus: three scenarios per scenario type."""
    rng = np.random.default_rng(seed)
    scenarios = []
    counters = {t: itertools.count() for t in ScenarioType}
    for bp in BLUEPRINTS:
        k = next(counters[bp.scenario_type])
        scenarios.append(build_scenario(bp, k + PER_TYPE * list(ScenarioType).index(bp.scenario_type), rng))
    return sorted(scenarios, key=lambda s: s.id)


def balanced_plans(speed: float = 10.0) -> tuple[list[Trajectory], list[IntervalActions]]:
    """Rollouts of all 625 (first, last) action-pair combinations from a straight past.

    Returns the plans and their classified actions. Every cell sees each class
    equally often, up to the few plans that come to a stop.
    """
    past = make_past(speed)
    pairs = list(itertools.product(A, S))
    plans = [rollout(past, IntervalActions(p1, p2)) for p1, p2 in itertools.product(pairs, pairs)]
    return plans, [classify_actions(p) for p in plans]


def permutation_null(seed: int = 0, language: str = "en"):
    """Traces shuffled against the plans they describe.

    With balanced classes a shuffled trace agrees with its plan by chance
    only, about one time in five per cell.
    """
    plans, acts = balanced_plans()
    traces = [template_trace(a, language, variant=i) for i, a in enumerate(acts)]
    perm = np.random.default_rng(seed).permutation(len(plans))
    return [traces[i] for i in perm], plans
