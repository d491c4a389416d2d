"""Wrong-speed reference generation.

Expert futures are first smoothed with an extended Kalman filter (constant
turn rate and velocity model, forward pass followed by a Rauch-Tung-Striebel
backward pass) and then re-timed along an arc-length parameterized cubic
spline so the average speed changes by a given factor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq
from scipy.stats import chi2
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_positive
from .exceptions import DegeneratePathError, FilterDivergenceError
from .mms import Reference, ReferenceCategory
from .trajectory import Trajectory

WRONG_SPEED_FACTORS = (0.8, 1.2)


@dataclass(frozen=True)
class KalmanConfig:
    """Noise parameters of the CTRV filter.

    State is (x, y, heading, speed, yaw rate).
    """

    accel_std: float = 1.0  # m/s^2
    yaw_accel_std: float = 0.3  # rad/s^2
    position_std: float = 0.15  # m
    gate_probability: float = 0.999
    max_gated_fraction: float = 0.25

    def __post_init__(self) -> None:
        for name in ("accel_std", "yaw_accel_std", "position_std"):
            check_positive(getattr(self, name), name)
        if not 0 < self.gate_probability < 1:
            raise ValueError("gate_probability must lie in (0, 1)")


# ---------------------------------------------------------------------------
# extended Kalman filter
# ---------------------------------------------------------------------------

_H = np.array([[1.0, 0, 0, 0, 0], [0, 1.0, 0, 0, 0]])


def ctrv_predict(state: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Propagate a CTRV state; returns the new state and the Jacobian."""
    x, y, th, v, w = state
    F = np.eye(5)
    if abs(w) > 1e-6:
        th2 = th + w * dt
        s1, c1, s2, c2 = math.sin(th), math.cos(th), math.sin(th2), math.cos(th2)
        new = np.array([x + v / w * (s2 - s1), y + v / w * (c1 - c2), th2, v, w])
        F[0, 2] = v / w * (c2 - c1)
        F[0, 3] = (s2 - s1) / w
        F[0, 4] = v * dt * c2 / w - v * (s2 - s1) / w**2
        F[1, 2] = v / w * (s2 - s1)
        F[1, 3] = (c1 - c2) / w
        F[1, 4] = v * dt * s2 / w - v * (c1 - c2) / w**2
        F[2, 4] = dt
    else:
        # second-order expansion of the turning branch in w
        c, s = math.cos(th), math.sin(th)
        new = np.array(
            [
                x + v * c * dt - 0.5 * v * s * w * dt**2,
                y + v * s * dt + 0.5 * v * c * w * dt**2,
                th + w * dt,
                v,
                w,
            ]
        )
        F[0, 2] = -v * s * dt
        F[0, 3] = c * dt
        F[0, 4] = -0.5 * v * s * dt**2
        F[1, 2] = v * c * dt
        F[1, 3] = s * dt
        F[1, 4] = 0.5 * v * c * dt**2
        F[2, 4] = dt
    return new, F


def _process_noise(theta: float, dt: float, cfg: KalmanConfig) -> np.ndarray:
    G = np.array(
        [
            [0.5 * dt**2 * math.cos(theta), 0.0],
            [0.5 * dt**2 * math.sin(theta), 0.0],
            [0.0, 0.5 * dt**2],
            [dt, 0.0],
            [0.0, dt],
        ]
    )
    return G @ np.diag([cfg.accel_std**2, cfg.yaw_accel_std**2]) @ G.T


def _initial_state(z: np.ndarray, dt: float) -> np.ndarray:
    d0 = z[1] - z[0]
    th = math.atan2(d0[1], d0[0]) if np.hypot(*d0) > 1e-9 else 0.0
    v = float(np.hypot(*d0)) / dt
    w = 0.0
    if len(z) >= 3:
        d1 = z[2] - z[1]
        if np.hypot(*d0) > 1e-9 and np.hypot(*d1) > 1e-9:
            turn = math.atan2(d0[0] * d1[1] - d0[1] * d1[0], d0 @ d1)
            w = turn / dt
            # segment 0->1 heading is the mid-step heading
            th -= 0.5 * w * dt
    return np.array([z[0, 0], z[0, 1], th, v, w])


def ekf_smooth(traj: Trajectory, cfg: KalmanConfig | None = None) -> Trajectory:
    """Forward EKF plus RTS backward pass over the waypoint positions."""
    cfg = cfg or KalmanConfig()
    z = traj.xy
    n, dt = len(z), traj.dt

    r = cfg.position_std**2
    R = np.eye(2) * r
    gate = chi2.ppf(cfg.gate_probability, df=2)

    xs = np.zeros((n, 5))
    Ps = np.zeros((n, 5, 5))
    x_pred = np.zeros((n, 5))
    P_pred = np.zeros((n, 5, 5))
    Fs = np.zeros((n, 5, 5))

    x = _initial_state(z, dt)
    P = np.diag([r, r, 2 * r / max(x[3] * dt, 1.0) ** 2 + 0.01, 2 * r / dt**2 + 1.0, 0.1])
    x_pred[0], P_pred[0] = x, P
    gated = 0
    for k in range(n):
        if k > 0:
            x, F = ctrv_predict(xs[k - 1], dt)
            P = F @ Ps[k - 1] @ F.T + _process_noise(xs[k - 1][2], dt, cfg)
            x_pred[k], P_pred[k], Fs[k] = x, P, F
        innov = z[k] - _H @ x
        S = _H @ P @ _H.T + R
        if float(innov @ np.linalg.solve(S, innov)) > gate:
            gated += 1
        K = P @ _H.T @ np.linalg.inv(S)
        x = x + K @ innov
        P = (np.eye(5) - K @ _H) @ P
        xs[k], Ps[k] = x, 0.5 * (P + P.T)

    if n > 1 and gated > cfg.max_gated_fraction * (n - 1):
        raise FilterDivergenceError(
            f"innovation gate exceeded on {gated} of {n} steps"
        )

    smoothed = xs.copy()
    for k in range(n - 2, -1, -1):
        C = Ps[k] @ Fs[k + 1].T @ np.linalg.inv(P_pred[k + 1])
        smoothed[k] = xs[k] + C @ (smoothed[k + 1] - x_pred[k + 1])
    return traj.with_xy(smoothed[:, :2])


# ---------------------------------------------------------------------------
# arc-length retiming
# ---------------------------------------------------------------------------

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(24)


class ArcLengthSpline:
    """Natural cubic spline through planar knots with an arc-length inverse.

    Consecutive duplicate knots are collapsed before fitting.
    """

    def __init__(self, knots: np.ndarray) -> None:
        knots = np.asarray(knots, dtype=float)
        keep = np.concatenate([[True], np.linalg.norm(np.diff(knots, axis=0), axis=1) > 1e-9])
        self.knots = knots[keep]
        # index of the unique knot each input knot maps to
        self.knot_index = np.cumsum(keep) - 1
        if len(self.knots) < 2:
            raise DegeneratePathError("path has zero arc length")
        chords = np.linalg.norm(np.diff(self.knots, axis=0), axis=1)
        self.u = np.concatenate([[0.0], np.cumsum(chords)])
        self.spline = CubicSpline(self.u, self.knots, bc_type="natural")
        self._deriv = self.spline.derivative()
        seg = [self._segment_length(a, b) for a, b in zip(self.u[:-1], self.u[1:])]
        self.cumulative = np.concatenate([[0.0], np.cumsum(seg)])

    @property
    def length(self) -> float:
        return float(self.cumulative[-1])

    def _segment_length(self, a: float, b: float) -> float:
        if b <= a:
            return 0.0
        mid, half = 0.5 * (a + b), 0.5 * (b - a)
        speeds = np.linalg.norm(self._deriv(mid + half * _GL_NODES), axis=1)
        return float(half * (_GL_WEIGHTS @ speeds))

    def knot_arc(self, i: int) -> float:
        """Arc length at input knot ``i``."""
        return float(self.cumulative[self.knot_index[i]])

    def param_at(self, s: float) -> float:
        """Spline parameter where the arc length from the start equals ``s``."""
        s = float(np.clip(s, 0.0, self.length))
        k = int(np.searchsorted(self.cumulative, s, side="right")) - 1
        k = min(max(k, 0), len(self.u) - 2)
        base = self.cumulative[k]
        if abs(s - base) <= 1e-13 * max(1.0, self.length):
            return float(self.u[k])
        if abs(s - self.cumulative[k + 1]) <= 1e-13 * max(1.0, self.length):
            return float(self.u[k + 1])
        a, b = self.u[k], self.u[k + 1]
        return float(brentq(lambda p: base + self._segment_length(a, p) - s, a, b, xtol=1e-14))

    def point_at(self, s: float) -> np.ndarray:
        """Point at arc length ``s``; beyond the end, along the end tangent."""
        if s <= self.length:
            return np.asarray(self.spline(self.param_at(s)))
        tangent = np.asarray(self._deriv(self.u[-1]))
        tangent = tangent / np.linalg.norm(tangent)
        return np.asarray(self.knots[-1]) + (s - self.length) * tangent


def _anchored(traj: Trajectory) -> tuple[np.ndarray, bool]:
    # futures start one step after the ego origin, which anchors the path
    if traj.t0 > 0 and abs(traj.t0 - traj.dt) < 1e-9:
        return np.vstack([[0.0, 0.0], traj.xy]), True
    return traj.xy, False


def retime_speed(traj: Trajectory, factor: float) -> Trajectory:
    """Scale the arc length traversed per unit time by ``factor``.

    Waypoint times are unchanged; each waypoint moves to ``factor`` times its
    original arc-length position along the path. Faster variants run past the
    recorded end along its terminal tangent, slower ones cover only the
    initial part of the path.
    """
    factor = check_positive(factor, "factor")
    knots, anchored = _anchored(traj)
    path = ArcLengthSpline(knots)
    out = np.array([path.point_at(factor * path.knot_arc(i)) for i in range(len(knots))])
    if anchored:
        out = out[1:]
    return traj.with_xy(out)


def traversed_arc_length(traj: Trajectory) -> float:
    """Arc length of the spline through the (anchored) waypoints."""
    knots, _ = _anchored(traj)
    return ArcLengthSpline(knots).length


def wrong_speed_references(
    expert: Trajectory,
    factors: Sequence[float] = WRONG_SPEED_FACTORS,
    cfg: KalmanConfig | None = None,
) -> list[Reference]:
    """Smooth the expert once, then retime it by each factor."""
    smooth = ekf_smooth(expert, cfg)
    return [
        Reference(ReferenceCategory.WRONG_SPEED, retime_speed(smooth, f), f"augmented:{f:g}")
        for f in factors
    ]


# ---------------------------------------------------------------------------
# estimator wrappers
# ---------------------------------------------------------------------------


class EKFSmoother(TransformerMixin, BaseEstimator):
    """Transformer that smooths each trajectory of a batch independently."""

    def __init__(
        self,
        accel_std: float = 1.0,
        yaw_accel_std: float = 0.3,
        position_std: float = 0.15,
    ) -> None:
        self.accel_std = accel_std
        self.yaw_accel_std = yaw_accel_std
        self.position_std = position_std

    def fit(self, X: Iterable[Trajectory], y=None):
        self.config_ = KalmanConfig(self.accel_std, self.yaw_accel_std, self.position_std)
        return self

    def transform(self, X: Iterable[Trajectory]) -> list[Trajectory]:
        cfg = getattr(self, "config_", None) or KalmanConfig(
            self.accel_std, self.yaw_accel_std, self.position_std
        )
        return [ekf_smooth(t, cfg) for t in X]


class SpeedRetimer(TransformerMixin, BaseEstimator):
    def __init__(self, factor: float = 1.2) -> None:
        self.factor = factor

    def fit(self, X: Iterable[Trajectory], y=None):
        check_positive(self.factor, "factor")
        return self

    def transform(self, X: Iterable[Trajectory]) -> list[Trajectory]:
        return [retime_speed(t, self.factor) for t in X]
