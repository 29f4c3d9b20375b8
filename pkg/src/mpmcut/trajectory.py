"""Nominal 6-DoF knife trajectory and residual pose composition.

Positions follow a natural cubic spline through the waypoints, orientations
a piecewise slerp. Quaternions are scalar-last ``(x, y, z, w)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.spatial.transform import Rotation


class TrajectoryError(ValueError):
    pass


@dataclass
class Pose:
    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.orientation = np.asarray(self.orientation, dtype=np.float64).reshape(4)

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.position, self.orientation])


@dataclass
class Waypoint:
    t: float
    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        q = np.asarray(self.orientation, dtype=np.float64).reshape(4)
        self.orientation = q / np.linalg.norm(q)

    def to_dict(self) -> dict:
        return {"t": float(self.t), "position": self.position.tolist(),
                "orientation": self.orientation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Waypoint":
        return cls(float(d["t"]), d["position"], d["orientation"])


@dataclass
class ResidualPose:
    translation: np.ndarray
    rotation: np.ndarray

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3)

    @classmethod
    def zero(cls) -> "ResidualPose":
        return cls(np.zeros(3), np.zeros(3))

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.translation, self.rotation])

    def __neg__(self) -> "ResidualPose":
        return ResidualPose(-self.translation, -self.rotation)


def slerp(q0, q1, u: float) -> np.ndarray:
    """Spherical linear interpolation along the shorter arc."""
    q0 = np.asarray(q0, dtype=np.float64)
    q1 = np.asarray(q1, dtype=np.float64)
    if u == 0.0:
        return q0.copy()
    d = float(np.dot(q0, q1))
    if d < 0.0:
        q1 = -q1
        d = -d
    if u == 1.0:
        return q1.copy()
    d = min(d, 1.0)
    theta = np.arccos(d)
    if theta < 1e-8:
        q = (1.0 - u) * q0 + u * q1
    else:
        s = np.sin(theta)
        q = (np.sin((1.0 - u) * theta) * q0 + np.sin(u * theta) * q1) / s
    return q / np.linalg.norm(q)


def _aligned_quaternions(waypoints) -> np.ndarray:
    qs = np.array([w.orientation for w in waypoints])
    for i in range(1, len(qs)):
        if np.dot(qs[i - 1], qs[i]) < 0:
            qs[i] = -qs[i]
    return qs


def _validate(waypoints) -> None:
    if len(waypoints) < 2:
        raise TrajectoryError("need at least 2 waypoints")
    ts = np.array([w.t for w in waypoints])
    if np.any(np.diff(ts) <= 0):
        raise TrajectoryError("waypoint times must be strictly increasing")


class NominalTrajectory:
    """Time-indexed pose curve through waypoints; the spline is built once."""

    def __init__(self, waypoints):
        waypoints = list(waypoints)
        _validate(waypoints)
        self.waypoints = waypoints
        self.times = np.array([w.t for w in waypoints])
        self._positions = np.array([w.position for w in waypoints])
        self._quats = _aligned_quaternions(waypoints)
        self._spline = CubicSpline(self.times, self._positions, bc_type="natural")

    def __call__(self, t: float) -> Pose:
        t = float(t)
        if not (0.0 <= t <= 1.0):
            raise TrajectoryError(f"t = {t} outside [0, 1]")
        if not (self.times[0] <= t <= self.times[-1]):
            raise TrajectoryError(f"t = {t} outside waypoint span [{self.times[0]}, {self.times[-1]}]")
        hit = np.flatnonzero(self.times == t)
        if hit.size:
            i = hit[0]
            return Pose(self._positions[i].copy(), self._quats[i].copy())
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        u = (t - self.times[i]) / (self.times[i + 1] - self.times[i])
        return Pose(self._spline(t), slerp(self._quats[i], self._quats[i + 1], u))


def interpolate(waypoints, t: float) -> Pose:
    return NominalTrajectory(waypoints)(t)


def compose_residual(nominal: Pose, e: ResidualPose) -> Pose:
    """Translate by ``e.translation`` and left-multiply by ``exp(e.rotation)``."""
    if not (np.any(e.translation) or np.any(e.rotation)):
        return Pose(nominal.position.copy(), nominal.orientation.copy())
    rot = Rotation.from_rotvec(e.rotation) * Rotation.from_quat(nominal.orientation)
    q = rot.as_quat()
    if np.dot(q, nominal.orientation) < 0:
        q = -q
    return Pose(nominal.position + e.translation, q / np.linalg.norm(q))


def _clip_norm(v: np.ndarray, limit: float) -> np.ndarray:
    n = np.linalg.norm(v)
    return v * (limit / n) if n > limit else v


def update_residual(e: ResidualPose, action, eta_trans: float = 0.001, eta_rot: float = 0.01,
                    trans_clip: float = 0.01, rot_clip: float = 0.1) -> ResidualPose:
    """``e + eta * a`` with each half clipped to its norm bound (direction kept)."""
    a = np.asarray(action, dtype=np.float64).reshape(6)
    t = _clip_norm(e.translation + eta_trans * a[:3], trans_clip)
    r = _clip_norm(e.rotation + eta_rot * a[3:], rot_clip)
    return ResidualPose(t, r)


def blade_orientation(axis, down=(0.0, 0.0, -1.0)) -> np.ndarray:
    """Quaternion whose local y is ``axis`` and local -z is as close to ``down`` as possible."""
    y = np.asarray(axis, dtype=np.float64)
    y = y / np.linalg.norm(y)
    z = -np.asarray(down, dtype=np.float64)
    z = z - np.dot(z, y) * y
    if np.linalg.norm(z) < 1e-9:
        raise TrajectoryError("cut direction is parallel to the inter-bone axis")
    z /= np.linalg.norm(z)
    x = np.cross(y, z)
    return Rotation.from_matrix(np.column_stack([x, y, z])).as_quat()


def nominal_from_estimate(layout, approach_height: float, exit_depth: float,
                          down=(0.0, 0.0, -1.0)) -> list[Waypoint]:
    """Three waypoints through the estimated gap: above, at the midpoint, below.

    The blade plane contains the gap midplane, i.e. its normal (local y) is the
    estimated inter-center axis. Heights are measured from the gap midpoint.
    """
    q = blade_orientation(layout.axis, down)
    mid = layout.gap_midpoint
    d = np.asarray(down, dtype=np.float64)
    d = d / np.linalg.norm(d)
    return [
        Waypoint(0.0, mid - approach_height * d, q),
        Waypoint(0.5, mid, q),
        Waypoint(1.0, mid + exit_depth * d, q),
    ]


def default_cut_depths(scene, sim, half_height: float, clearance: float = 0.005) -> tuple[float, float]:
    """Approach height and exit depth that start above and end below the meat block."""
    c = scene.resolved_box_center(sim)
    top = c[2] + scene.meat_box[2] / 2
    bottom = c[2] - scene.meat_box[2] / 2
    return top - c[2] + half_height + clearance, c[2] - bottom + half_height + clearance
