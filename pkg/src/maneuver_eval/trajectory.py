"""Trajectory representation and kinematic derivations.

Frame convention: ego frame anchored at the vehicle's current pose, x forward
and y to the left. Trajectories are sampled at 5 Hz. Past trajectories hold
21 waypoints spanning -4.0 s .. 0.0 s and end at the origin; planned and
reference futures hold 25 waypoints spanning 0.2 s .. 5.0 s.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from ._validation import check_xy
from .exceptions import (
    CheckpointOutOfRangeError,
    DegenerateChordError,
    IndexOutOfRangeError,
    PastNotAnchoredAtOriginError,
    ShapeMismatchError,
    TooShortError,
    WrongLengthError,
    WrongSamplingError,
)

DT = 0.2
PAST_LENGTH = 21
FUTURE_LENGTH = 25
PAST_T0 = -4.0
FUTURE_T0 = 0.2
HORIZON = 5.0

_ORIGIN_TOL = 1e-9
_TIME_TOL = 1e-9


class Trajectory:
    """Immutable, time-stamped 2-D waypoint sequence.

    Args:
        xy: (T, 2) waypoint coordinates in meters.
        dt: sampling interval in seconds.
        t0: time of the first waypoint relative to "now" in seconds.
    """

    __slots__ = ("_xy", "_dt", "_t0")

    def __init__(self, xy, dt: float = DT, t0: float = FUTURE_T0) -> None:
        arr = check_xy(xy, min_length=2)
        arr.setflags(write=False)
        if not np.isfinite(dt) or dt <= 0:
            raise WrongSamplingError(f"dt must be positive, got {dt}")
        object.__setattr__(self, "_xy", arr)
        object.__setattr__(self, "_dt", float(dt))
        object.__setattr__(self, "_t0", float(t0))

    def __setattr__(self, name, value):
        raise AttributeError("Trajectory is immutable")

    @classmethod
    def future(cls, xy) -> "Trajectory":
        return cls(xy, dt=DT, t0=FUTURE_T0)

    @classmethod
    def past(cls, xy) -> "Trajectory":
        n = len(xy)
        return cls(xy, dt=DT, t0=-(n - 1) * DT)

    @property
    def xy(self) -> np.ndarray:
        return self._xy

    @property
    def dt(self) -> float:
        return self._dt

    @property
    def t0(self) -> float:
        return self._t0

    @property
    def times(self) -> np.ndarray:
        return self._t0 + self._dt * np.arange(len(self._xy))

    def __len__(self) -> int:
        return len(self._xy)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self._dt == other._dt
            and self._t0 == other._t0
            and np.array_equal(self._xy, other._xy)
        )

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        return f"Trajectory(T={len(self)}, dt={self._dt}, t0={self._t0})"

    def with_xy(self, xy) -> "Trajectory":
        """Same sampling, new coordinates."""
        return Trajectory(xy, dt=self._dt, t0=self._t0)

    def to_list(self) -> list[list[float]]:
        return self._xy.tolist()

    def index_at(self, time: float) -> int:
        """Index of the waypoint stamped ``time``; raises if off-grid or outside."""
        pos = (time - self._t0) / self._dt
        idx = int(round(pos))
        if abs(pos - idx) > 1e-6 or not 0 <= idx < len(self):
            raise CheckpointOutOfRangeError(
                f"time {time} s is not a waypoint of {self!r}"
            )
        return idx


@dataclass(frozen=True)
class VelocityEstimate:
    vx: float
    vy: float

    @property
    def speed(self) -> float:
        return float(np.hypot(self.vx, self.vy))

    @property
    def vector(self) -> np.ndarray:
        return np.array([self.vx, self.vy])


@dataclass(frozen=True)
class LatLonDisplacement:
    d_lat: float
    d_lon: float
    checkpoint_time: float
    heading_fallback: bool = False


@dataclass(frozen=True)
class L2Error:
    """Mean displacement over all waypoints plus the final-waypoint distance."""

    mean: float
    final: float

    def __float__(self) -> float:
        return self.mean


def validate_trajectory(traj: Trajectory, kind: Literal["past", "future"]) -> Trajectory:
    """Check ``traj`` against the past or future format contract.

    Returns the trajectory unchanged when it conforms.
    """
    if kind == "past":
        length, t0 = PAST_LENGTH, PAST_T0
    elif kind == "future":
        length, t0 = FUTURE_LENGTH, FUTURE_T0
    else:
        raise ValueError(f"kind must be 'past' or 'future', got {kind!r}")
    if len(traj) != length:
        raise WrongLengthError(f"{kind} trajectory needs {length} waypoints, got {len(traj)}")
    if abs(traj.dt - DT) > _TIME_TOL:
        raise WrongSamplingError(f"expected dt={DT} s, got {traj.dt}")
    if abs(traj.t0 - t0) > _TIME_TOL:
        raise WrongSamplingError(f"{kind} trajectory must start at t={t0} s, got {traj.t0}")
    # finiteness is enforced at construction
    if kind == "past" and np.max(np.abs(traj.xy[-1])) > _ORIGIN_TOL:
        raise PastNotAnchoredAtOriginError(
            f"past trajectory must end at (0, 0), ends at {tuple(traj.xy[-1])}"
        )
    return traj


def velocity_at(traj: Trajectory, index: int) -> VelocityEstimate:
    """Finite-difference velocity at ``index``.

    Central difference at interior indices, one-sided at the two ends.
    """
    n = len(traj)
    if index < 0:
        index += n
    if not 0 <= index < n:
        raise IndexOutOfRangeError(f"index {index} out of range for {n} waypoints")
    xy, dt = traj.xy, traj.dt
    if index == 0:
        v = (xy[1] - xy[0]) / dt
    elif index == n - 1:
        v = (xy[-1] - xy[-2]) / dt
    else:
        v = (xy[index + 1] - xy[index - 1]) / (2.0 * dt)
    return VelocityEstimate(float(v[0]), float(v[1]))


def average_jerk(traj: Trajectory) -> float:
    """Mean third-difference jerk magnitude, normalized by T (not T - 3)."""
    n = len(traj)
    if n < 4:
        raise TooShortError(f"average jerk needs at least 4 waypoints, got {n}")
    d3 = np.diff(traj.xy, n=3, axis=0) / traj.dt**3
    return float(np.linalg.norm(d3, axis=1).sum() / n)


def path_length(xy: np.ndarray) -> float:
    return float(np.linalg.norm(np.diff(xy, axis=0), axis=1).sum())


def tortuosity(traj: Trajectory) -> float:
    """Polyline length divided by the start-to-end chord."""
    chord = float(np.linalg.norm(traj.xy[-1] - traj.xy[0]))
    if chord <= _ORIGIN_TOL:
        raise DegenerateChordError("first and last waypoints coincide")
    return path_length(traj.xy) / chord


def _unit_heading(ref: Trajectory, idx: int) -> tuple[np.ndarray, bool]:
    v = velocity_at(ref, idx).vector
    speed = float(np.hypot(*v))
    if speed <= 1e-9:
        return np.array([1.0, 0.0]), True
    return v / speed, False


def latlon_displacement(
    plan: Trajectory, ref: Trajectory, checkpoint_time: float
) -> LatLonDisplacement:
    """Split the plan-minus-reference offset at a checkpoint into lateral and
    longitudinal parts relative to the reference heading.

    A stationary reference falls back to the ego x-axis and sets
    ``heading_fallback``.
    """
    if abs(plan.dt - ref.dt) > _TIME_TOL or abs(plan.t0 - ref.t0) > _TIME_TOL:
        raise WrongSamplingError("plan and reference must share dt and t0")
    i_plan = plan.index_at(checkpoint_time)
    i_ref = ref.index_at(checkpoint_time)
    heading, fallback = _unit_heading(ref, i_ref)
    delta = plan.xy[i_plan] - ref.xy[i_ref]
    d_lon = abs(float(delta @ heading))
    d_lat = abs(float(delta[1] * heading[0] - delta[0] * heading[1]))
    return LatLonDisplacement(d_lat, d_lon, float(checkpoint_time), fallback)


def l2_error(plan: Trajectory, expert: Trajectory) -> L2Error:
    if plan.xy.shape != expert.xy.shape or abs(plan.dt - expert.dt) > _TIME_TOL:
        raise ShapeMismatchError(
            f"shape/sampling mismatch: {plan!r} vs {expert!r}"
        )
    dist = np.linalg.norm(plan.xy - expert.xy, axis=1)
    return L2Error(mean=float(dist.mean()), final=float(dist[-1]))


def rigid_transform(traj: Trajectory, angle: float, offset=(0.0, 0.0)) -> Trajectory:
    """Rotate by ``angle`` (rad, counter-clockwise) then translate."""
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    return traj.with_xy(traj.xy @ rot.T + np.asarray(offset, dtype=float))
