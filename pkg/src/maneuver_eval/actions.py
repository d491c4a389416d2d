"""Discrete driving actions, their numeric controls and a kinematic bicycle.

Each 5 s future is split into two intervals (0-3 s and 3-5 s) and described
by one acceleration class and one steering class per interval. The classes
map to constant accelerations and steering angles whose magnitude depends on
the speed regime (up to 60 km/h, or above).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable, Literal

import numpy as np

from .exceptions import IntervalOutOfRangeError
from .trajectory import DT, FUTURE_LENGTH, Trajectory, validate_trajectory

WHEELBASE = 2.8
SUBSTEP = 0.04
REGIME_SPEED = 60.0 / 3.6
SPLIT_TIME = 3.0

Interval = Literal["first_3s", "last_2s"]
INTERVALS: dict[str, tuple[float, float]] = {"first_3s": (0.0, 3.0), "last_2s": (3.0, 5.0)}


class AccelClass(enum.Enum):
    DECEL_STRONG = "decel_strong"
    DECEL_SLIGHT = "decel_slight"
    MAINTAIN = "maintain"
    ACCEL_SLIGHT = "accel_slight"
    ACCEL_STRONG = "accel_strong"


class SteerClass(enum.Enum):
    LEFT = "left"
    SLIGHT_LEFT = "slight_left"
    STRAIGHT = "straight"
    SLIGHT_RIGHT = "slight_right"
    RIGHT = "right"


ActionPair = tuple[AccelClass, SteerClass]

# (<= 60 km/h, > 60 km/h)
ACCELERATION_TABLE: dict[AccelClass, tuple[float, float]] = {
    AccelClass.DECEL_STRONG: (-2.5, -5.0),
    AccelClass.DECEL_SLIGHT: (-0.6, -1.2),
    AccelClass.MAINTAIN: (0.0, 0.0),
    AccelClass.ACCEL_SLIGHT: (0.6, 1.2),
    AccelClass.ACCEL_STRONG: (2.5, 5.0),
}
# degrees, positive to the left
STEERING_TABLE: dict[SteerClass, tuple[float, float]] = {
    SteerClass.LEFT: (30.0, 0.3),
    SteerClass.SLIGHT_LEFT: (10.0, 0.1),
    SteerClass.STRAIGHT: (0.0, 0.0),
    SteerClass.SLIGHT_RIGHT: (-10.0, -0.1),
    SteerClass.RIGHT: (-30.0, -0.3),
}

# allowed command strings offered to models
ACCEL_COMMANDS: dict[AccelClass, str] = {
    AccelClass.ACCEL_SLIGHT: "accelerating slightly",
    AccelClass.ACCEL_STRONG: "accelerating strongly",
    AccelClass.MAINTAIN: "maintaining the current speed",
    AccelClass.DECEL_SLIGHT: "decelerating slightly",
    AccelClass.DECEL_STRONG: "decelerating strongly",
}
STEER_COMMANDS: dict[SteerClass, str] = {
    SteerClass.SLIGHT_LEFT: "turning slightly left",
    SteerClass.LEFT: "turning left",
    SteerClass.STRAIGHT: "steering straight",
    SteerClass.SLIGHT_RIGHT: "turning slightly right",
    SteerClass.RIGHT: "turning right",
}


@dataclass(frozen=True)
class IntervalActions:
    first_3s: ActionPair
    last_2s: ActionPair

    @classmethod
    def constant(cls, accel: AccelClass, steer: SteerClass) -> "IntervalActions":
        return cls((accel, steer), (accel, steer))

    def to_dict(self) -> dict[str, str]:
        return {
            "acceleration_first_3s": self.first_3s[0].value,
            "steering_first_3s": self.first_3s[1].value,
            "acceleration_last_2s": self.last_2s[0].value,
            "steering_last_2s": self.last_2s[1].value,
        }

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "IntervalActions":
        return cls(
            (AccelClass(d["acceleration_first_3s"]), SteerClass(d["steering_first_3s"])),
            (AccelClass(d["acceleration_last_2s"]), SteerClass(d["steering_last_2s"])),
        )


@dataclass(frozen=True)
class ControlParams:
    acceleration: float
    steering_angle: float  # degrees


def is_low_regime(speed: float) -> bool:
    return speed <= REGIME_SPEED


def control_params(accel: AccelClass, steer: SteerClass, speed: float) -> ControlParams:
    col = 0 if is_low_regime(speed) else 1
    return ControlParams(ACCELERATION_TABLE[accel][col], STEERING_TABLE[steer][col])


# ---------------------------------------------------------------------------
# rollout
# ---------------------------------------------------------------------------


def _derivative(state: np.ndarray, accel: float, curvature: float) -> np.ndarray:
    _, _, theta, v = state
    return np.array([v * math.cos(theta), v * math.sin(theta), v * curvature, accel])


def _rk4(state: np.ndarray, accel: float, curvature: float, h: float) -> np.ndarray:
    k1 = _derivative(state, accel, curvature)
    k2 = _derivative(state + 0.5 * h * k1, accel, curvature)
    k3 = _derivative(state + 0.5 * h * k2, accel, curvature)
    k4 = _derivative(state + h * k3, accel, curvature)
    return state + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def _advance(state: np.ndarray, accel: float, curvature: float, h: float) -> np.ndarray:
    v = state[3]
    if accel < 0 and v + accel * h < 0:
        # stop inside the step, then stand still (no reversing)
        h_stop = -v / accel if v > 0 else 0.0
        if h_stop > 0:
            state = _rk4(state, accel, curvature, h_stop)
        state = state.copy()
        state[3] = 0.0
        return state
    return _rk4(state, accel, curvature, h)


def initial_state(past: Trajectory) -> tuple[float, float]:
    """Heading and speed from the last segment of the past trajectory."""
    seg = past.xy[-1] - past.xy[-2]
    dist = float(np.hypot(*seg))
    if dist <= 1e-9:
        return 0.0, 0.0
    return math.atan2(seg[1], seg[0]), dist / past.dt


def _simulate(
    past: Trajectory,
    choose: Callable[[int, float], ControlParams],
    wheelbase: float,
    substep: float,
) -> Trajectory:
    validate_trajectory(past, "past")
    if wheelbase <= 0:
        raise ValueError("wheelbase must be positive")
    n_sub = int(round(DT / substep))
    if n_sub < 1 or abs(n_sub * substep - DT) > 1e-12:
        raise ValueError(f"substep must divide {DT} s evenly")
    h = DT / n_sub

    theta0, v0 = initial_state(past)
    state = np.array([0.0, 0.0, theta0, v0])
    split_frame = int(round(SPLIT_TIME / DT))
    out = np.empty((FUTURE_LENGTH, 2))
    controls = None
    for frame in range(FUTURE_LENGTH):
        if frame == 0 or frame == split_frame:
            cp = choose(0 if frame == 0 else 1, float(state[3]))
            controls = (cp.acceleration, math.tan(math.radians(cp.steering_angle)) / wheelbase)
        for _ in range(n_sub):
            state = _advance(state, controls[0], controls[1], h)
        out[frame] = state[:2]
    return Trajectory.future(out)


def rollout(
    past: Trajectory,
    actions: IntervalActions,
    wheelbase: float = WHEELBASE,
    *,
    substep: float = SUBSTEP,
) -> Trajectory:
    """Integrate the kinematic bicycle from "now" for 5 s and sample at 5 Hz.

    First-interval controls apply on (0, 3] s, second-interval controls on
    (3, 5] s; each interval picks its speed regime from the speed at its start.
    """
    pairs = (actions.first_3s, actions.last_2s)
    return _simulate(past, lambda i, v: control_params(*pairs[i], v), wheelbase, substep)


def rollout_controls(
    past: Trajectory,
    first: ControlParams,
    last: ControlParams,
    wheelbase: float = WHEELBASE,
    *,
    substep: float = SUBSTEP,
) -> Trajectory:
    """Like :func:`rollout` but with explicit numeric controls per interval."""
    return _simulate(past, lambda i, v: (first, last)[i], wheelbase, substep)


# ---------------------------------------------------------------------------
# classification from geometry
# ---------------------------------------------------------------------------

# interval-mean acceleration boundaries, midpoints between table levels
_ACCEL_BOUNDS = {True: (0.3, 1.55), False: (0.6, 3.1)}
# equivalent steering-angle boundaries in degrees
_STEER_BOUNDS = {True: (5.0, 20.0), False: (0.05, 0.2)}


def _interval_points(traj: Trajectory, interval: str) -> tuple[np.ndarray, np.ndarray]:
    if interval not in INTERVALS:
        raise IntervalOutOfRangeError(f"unknown interval {interval!r}")
    lo, hi = INTERVALS[interval]
    times = traj.times
    xy = traj.xy
    if traj.t0 > 0 and abs(traj.t0 - traj.dt) < 1e-9:
        # planned futures start one step after the ego origin
        times = np.concatenate([[0.0], times])
        xy = np.vstack([[0.0, 0.0], xy])
    mask = (times >= lo - 1e-9) & (times <= hi + 1e-9)
    if times[0] > lo + 1e-9 or times[-1] < hi - 1e-9 or mask.sum() < 3:
        raise IntervalOutOfRangeError(
            f"trajectory covering [{times[0]:.2f}, {times[-1]:.2f}] s lacks interval {interval}"
        )
    return times[mask], xy[mask]


def _signed_curvatures(xy: np.ndarray) -> np.ndarray:
    """Menger curvature of each consecutive waypoint triple (NaN if degenerate)."""
    a, b, c = xy[:-2], xy[1:-1], xy[2:]
    ab, bc, ac = b - a, c - b, c - a
    cross = ab[:, 0] * bc[:, 1] - ab[:, 1] * bc[:, 0]
    denom = (
        np.linalg.norm(ab, axis=1) * np.linalg.norm(bc, axis=1) * np.linalg.norm(ac, axis=1)
    )
    with np.errstate(divide="ignore", invalid="ignore"):
        kappa = np.where(denom > 1e-12, 2.0 * cross / denom, np.nan)
    return kappa


def _arc_lengths(xy: np.ndarray, kappa: np.ndarray) -> np.ndarray:
    chords = np.linalg.norm(np.diff(xy, axis=0), axis=1)
    # curvature per segment: mean of the adjacent triples that exist
    k_pad = np.concatenate([[np.nan], np.abs(kappa), [np.nan]])
    pair = np.vstack([k_pad[:-1], k_pad[1:]])
    counts = np.isfinite(pair).sum(axis=0)
    k_seg = np.where(counts > 0, np.nansum(pair, axis=0) / np.maximum(counts, 1), 0.0)
    half = np.clip(chords * k_seg / 2.0, 0.0, 1.0)
    ratio = np.ones_like(chords)
    nz = half > 1e-12
    ratio[nz] = np.arcsin(half[nz]) / half[nz]
    return np.concatenate([[0.0], np.cumsum(chords * ratio)])


@dataclass(frozen=True)
class IntervalKinematics:
    start_speed: float
    mean_acceleration: float
    mean_curvature: float
    steering_angle: float  # degrees


def interval_kinematics(
    traj: Trajectory, interval: Interval, wheelbase: float = WHEELBASE
) -> IntervalKinematics:
    times, xy = _interval_points(traj, interval)
    kappa = _signed_curvatures(xy)
    s = _arc_lengths(xy, kappa)
    tau = times - times[0]
    c2, c1, _ = np.polyfit(tau, s, 2)
    mean_kappa = float(np.nanmean(kappa)) if np.any(np.isfinite(kappa)) else 0.0
    delta = math.degrees(math.atan(wheelbase * mean_kappa))
    return IntervalKinematics(float(max(c1, 0.0)), float(2.0 * c2), mean_kappa, delta)


def _quantize(value: float, bounds: tuple[float, float], classes: tuple) -> object:
    inner, outer = bounds
    if value < -outer:
        return classes[0]
    if value < -inner:
        return classes[1]
    if value <= inner:
        return classes[2]
    if value <= outer:
        return classes[3]
    return classes[4]


def classify(
    traj: Trajectory, interval: Interval, wheelbase: float = WHEELBASE
) -> ActionPair:
    """Acceleration and steering classes of one interval of a trajectory.

    Boundaries sit at the midpoints between adjacent control levels of the
    interval's speed regime; a value exactly on a boundary takes the milder
    class.
    """
    kin = interval_kinematics(traj, interval, wheelbase)
    low = is_low_regime(kin.start_speed)
    accel = _quantize(kin.mean_acceleration, _ACCEL_BOUNDS[low], tuple(AccelClass))
    # positive angle is left, so the left classes sit at the high end
    steer = _quantize(-kin.steering_angle, _STEER_BOUNDS[low], tuple(SteerClass))
    return accel, steer


def classify_actions(traj: Trajectory, wheelbase: float = WHEELBASE) -> IntervalActions:
    return IntervalActions(
        classify(traj, "first_3s", wheelbase), classify(traj, "last_2s", wheelbase)
    )
