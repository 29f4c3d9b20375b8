"""Rigid thin-cuboid knife: oriented-box SDF, Coulomb grid contact, force readout.

Quaternions are scalar-last ``(x, y, z, w)`` throughout the package, the
same convention as :class:`scipy.spatial.transform.Rotation`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from mpmcut import _kernels as K

DEFAULT_HALF_EXTENTS = (0.05, 0.001, 0.02)


def _vec(a) -> np.ndarray:
    return np.array(a, dtype=np.float64).reshape(3)


@dataclass
class KnifeState:
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    orientation: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    linear_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    angular_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    half_extents: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_HALF_EXTENTS))
    friction_mu: float = 0.2
    force_accum: np.ndarray = field(default_factory=lambda: np.zeros(3))
    # nodes closer than this many grid cells to the blade surface are projected
    contact_band_cells: float = 0.5

    def __post_init__(self):
        self.position = _vec(self.position)
        self.linear_velocity = _vec(self.linear_velocity)
        self.angular_velocity = _vec(self.angular_velocity)
        self.half_extents = _vec(self.half_extents)
        self.force_accum = _vec(self.force_accum)
        q = np.array(self.orientation, dtype=np.float64).reshape(4)
        norm = np.linalg.norm(q)
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"knife orientation must be a unit quaternion, |q| = {norm}")
        self.orientation = q
        if not (self.half_extents > 0).all():
            raise ValueError("knife half_extents must be positive")
        if self.friction_mu < 0:
            raise ValueError("friction_mu must be >= 0")
        self._rot_key = None
        self._rot = np.eye(3)

    def rotation_matrix(self) -> np.ndarray:
        key = self.orientation.tobytes()
        if key != self._rot_key:
            self._rot = np.ascontiguousarray(Rotation.from_quat(self.orientation).as_matrix())
            self._rot_key = key
        return self._rot

    def surface_velocity(self, point) -> np.ndarray:
        """Rigid-body velocity of the knife material point at ``point``."""
        return self.linear_velocity + np.cross(self.angular_velocity, _vec(point) - self.position)

    def advance(self, dt: float) -> None:
        """Integrate the pose over ``dt`` with the current twist."""
        self.position = self.position + dt * self.linear_velocity
        if np.any(self.angular_velocity):
            r = Rotation.from_rotvec(dt * self.angular_velocity) * Rotation.from_quat(self.orientation)
            q = r.as_quat()
            self.orientation = q / np.linalg.norm(q)

    def set_pose(self, position, orientation) -> None:
        self.position = _vec(position)
        q = np.array(orientation, dtype=np.float64).reshape(4)
        self.orientation = q / np.linalg.norm(q)

    def servo_to(self, position, orientation, duration: float) -> None:
        """Set a constant twist that reaches the target pose after ``duration`` seconds."""
        self.linear_velocity = (_vec(position) - self.position) / duration
        rel = Rotation.from_quat(orientation) * Rotation.from_quat(self.orientation).inv()
        self.angular_velocity = rel.as_rotvec() / duration

    def copy(self) -> "KnifeState":
        return KnifeState(self.position.copy(), self.orientation.copy(),
                          self.linear_velocity.copy(), self.angular_velocity.copy(),
                          self.half_extents.copy(), self.friction_mu,
                          self.force_accum.copy(), self.contact_band_cells)


def sdf(point, knife: KnifeState) -> float:
    """Exact signed distance to the knife box: negative inside, positive outside."""
    return float(K.knife_sdf(_vec(point), knife.position, knife.rotation_matrix(), knife.half_extents))


def sdf_normal(point, knife: KnifeState) -> np.ndarray:
    """Outward unit normal of the box SDF at ``point`` in world coordinates.

    Outside the box this is the normalized gradient of the exterior distance
    (which also settles edge and corner ties). Inside, it is the normal of the
    nearest face; equal distances pick the lowest local axis.
    """
    out = np.empty(3)
    K.knife_normal(_vec(point), knife.position, knife.rotation_matrix(), knife.half_extents, out)
    return out


def resolve_contact(node_velocity, node_position, knife: KnifeState,
                    node_mass: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Coulomb-friction projection of one grid node against the knife.

    Returns ``(projected_velocity, impulse)`` with ``impulse = m (v_new - v)``.
    Separating nodes are returned unchanged with zero impulse.
    """
    v = _vec(node_velocity)
    n = sdf_normal(node_position, knife)
    vs = knife.surface_velocity(node_position)
    out = np.empty(3)
    K.contact_project(v, vs, n, float(knife.friction_mu), out)
    return out, node_mass * (out - v)


def accumulate_knife_force(impulses, dt: float, force_clip: float = 200.0) -> np.ndarray:
    """Reaction force on the knife from one substep's contact impulses.

    ``-sum(impulses) / dt``, clipped per component to ``+-force_clip``.
    """
    total = np.zeros(3)
    for imp in impulses:
        total += _vec(imp)
    return np.clip(-total / dt, -force_clip, force_clip)
