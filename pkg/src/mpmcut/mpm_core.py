"""MLS-MPM time stepper for the two-material (meat/bone) elastoplastic block.

Particles carry position, velocity, deformation gradient ``F`` and the APIC
affine matrix ``C``. One substep is ``p2g -> grid_update -> g2p``; the heavy
loops live in :mod:`mpmcut._kernels`.

Elasticity is fixed-corotated, plasticity is a von Mises return map on the
Hencky (log) strain. Positions are in metres, the grid node ``(i, j, k)``
sits at ``origin + (i, j, k) * dx``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mpmcut import _kernels as K

MEAT = K.MEAT
BONE = K.BONE
MATERIAL_NAMES = {MEAT: "meat", BONE: "bone"}


class SimulationError(RuntimeError):
    """Base class for unrecoverable simulator states."""


class InvalidStateError(SimulationError):
    def __init__(self, particle: int, detail: str = "det(F) <= 0"):
        super().__init__(f"invalid state at particle {particle}: {detail}")
        self.particle = particle


class OutOfDomainError(SimulationError):
    def __init__(self, particle: int):
        super().__init__(f"particle {particle} is outside the 2-cell domain margin")
        self.particle = particle


@dataclass(frozen=True)
class MaterialParams:
    lam: float
    mu: float
    rho: float
    yield_stress: float

    def __post_init__(self):
        for name in ("lam", "mu", "rho", "yield_stress"):
            if not getattr(self, name) > 0:
                raise ValueError(f"MaterialParams.{name} must be > 0, got {getattr(self, name)}")


MEAT_PARAMS = MaterialParams(lam=27.78, mu=41.67, rho=1000.0, yield_stress=50.0)
BONE_PARAMS = MaterialParams(lam=222.22, mu=333.33, rho=2819.0, yield_stress=5000.0)


@dataclass
class Particles:
    x: np.ndarray
    v: np.ndarray
    F: np.ndarray
    C: np.ndarray
    mass: np.ndarray
    volume0: np.ndarray
    material: np.ndarray

    @classmethod
    def at_rest(cls, x, mass, volume0, material) -> "Particles":
        x = np.ascontiguousarray(x, dtype=np.float64).reshape(-1, 3)
        n = len(x)
        F = np.zeros((n, 3, 3))
        F[:, 0, 0] = F[:, 1, 1] = F[:, 2, 2] = 1.0
        mass = np.broadcast_to(np.asarray(mass, dtype=np.float64), (n,)).copy()
        volume0 = np.broadcast_to(np.asarray(volume0, dtype=np.float64), (n,)).copy()
        material = np.broadcast_to(np.asarray(material, dtype=np.int8), (n,)).copy()
        if n and (mass.min() <= 0 or volume0.min() <= 0):
            raise ValueError("particle mass and volume must be positive")
        if n and not np.isin(material, (MEAT, BONE)).all():
            raise ValueError("material ids must be MEAT (0) or BONE (1)")
        return cls(x=x, v=np.zeros((n, 3)), F=F, C=np.zeros((n, 3, 3)),
                   mass=mass, volume0=volume0, material=material)

    def __len__(self) -> int:
        return len(self.x)

    def copy(self) -> "Particles":
        return Particles(**{f.name: getattr(self, f.name).copy() for f in dataclasses.fields(self)})


@dataclass
class SimConfig:
    n_grid: int = 64
    domain_size: float = 0.2
    origin: tuple = (0.0, 0.0, 0.0)
    dt: float = 1e-4
    gravity: tuple = (0.0, 0.0, 0.0)
    v_max: float = 2.0
    force_clip: float = 200.0
    boundary_cells: int = 3
    sticky_floor: bool = True
    plasticity: bool = True

    @property
    def dx(self) -> float:
        return self.domain_size / self.n_grid


@dataclass
class SimState:
    """Particles plus the background grid and the run constants.

    ``grid_v`` holds momenta after :func:`p2g` and velocities after
    :func:`grid_update`.
    """

    particles: Particles
    config: SimConfig
    materials: tuple = (MEAT_PARAMS, BONE_PARAMS)
    grid_m: np.ndarray = field(init=False, repr=False)
    grid_v: np.ndarray = field(init=False, repr=False)
    time: float = 0.0
    _box: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        cfg = self.config
        if not (cfg.dx > 0 and cfg.dt > 0):
            raise ValueError("dx and dt must be positive")
        # clipped grid velocities bound particle speed by sqrt(3) v_max
        if np.sqrt(3.0) * cfg.v_max * cfg.dt >= cfg.dx:
            raise ValueError(f"CFL guard violated: sqrt(3) * v_max * dt = {np.sqrt(3.0) * cfg.v_max * cfg.dt:.3g} >= dx")
        n = cfg.n_grid + 1
        self.grid_m = np.zeros((n, n, n))
        self.grid_v = np.zeros((n, n, n, 3))
        # whole grid dirty on first clear
        self._box = np.array([[0, 0, 0], [n - 1, n - 1, n - 1]], dtype=np.int64)
        self.origin = np.asarray(cfg.origin, dtype=np.float64)
        self.gravity = np.asarray(cfg.gravity, dtype=np.float64)
        self._lam = np.array([m.lam for m in self.materials])
        self._mu = np.array([m.mu for m in self.materials])
        self._ys = np.array([m.yield_stress for m in self.materials])
        margin = 2.0 * cfg.dx
        self.lo = self.origin + margin
        self.hi = self.origin + (n - 1) * cfg.dx - margin
        self.refresh_polar()

    def refresh_polar(self) -> None:
        """Rebuild the per-particle SVD frame / polar rotation cache.

        ``g2p`` keeps the cache current; call this after editing ``particles.F`` by hand.
        """
        pa = self.particles
        self._V = np.zeros((len(pa), 3, 3))
        self._R = np.zeros((len(pa), 3, 3))
        K.refresh_polar(pa.F, self._V, self._R)

    @property
    def dx(self) -> float:
        return self.config.dx

    @property
    def dt(self) -> float:
        return self.config.dt

    @property
    def n_nodes(self) -> int:
        return self.grid_m.shape[0]

    def node_positions(self, idx) -> np.ndarray:
        return self.origin + np.asarray(idx, dtype=np.float64) * self.dx


# -- constitutive model ------------------------------------------------------


def stress(F, params: MaterialParams, particle: int | None = None) -> np.ndarray:
    """First Piola-Kirchhoff stress of the fixed-corotated model.

    ``P = 2 mu (F - R) + lam J (J - 1) F^-T`` with ``R`` the polar rotation.
    """
    F = np.ascontiguousarray(F, dtype=np.float64)
    if not K.det3(F) > 0:
        raise InvalidStateError(-1 if particle is None else particle)
    P = np.empty((3, 3))
    K.first_piola(F, params.lam, params.mu, P)
    return P


def hencky_deviatoric_stress_norm(F, params: MaterialParams) -> float:
    """``2 mu |dev(log sigma)|``, the quantity bounded by the yield stress."""
    s = np.linalg.svd(np.asarray(F, dtype=np.float64), compute_uv=False)
    eps = np.log(s)
    return float(2.0 * params.mu * np.linalg.norm(eps - eps.mean()))


def von_mises_return_map(F_trial, params: MaterialParams) -> np.ndarray:
    """Project ``F_trial`` back onto the von Mises yield surface if it lies outside.

    States inside the surface come back unchanged (the same values, new array).
    """
    F_trial = np.asarray(F_trial, dtype=np.float64)
    if not K.det3(np.ascontiguousarray(F_trial)) > 0:
        raise InvalidStateError(-1)
    F = np.array(F_trial, dtype=np.float64, order="C")
    U = np.empty((3, 3))
    V = np.eye(3)
    sig = np.empty(3)
    if not K.return_map_inplace(F, params.lam, params.mu, params.yield_stress, U, sig, V):
        return F_trial.copy()
    return F


# -- transfer weights ---------------------------------------------------------


def bspline_weights(fx) -> np.ndarray:
    """Quadratic B-spline weights for fractional offsets ``fx`` in [0.5, 1.5).

    Returns shape ``fx.shape + (3,)`` for nodes ``base, base+1, base+2``.
    """
    fx = np.asarray(fx, dtype=np.float64)
    return np.stack([0.5 * (1.5 - fx) ** 2, 0.75 - (fx - 1.0) ** 2, 0.5 * (fx - 0.5) ** 2], axis=-1)


def stencil(state: SimState, x) -> tuple[np.ndarray, np.ndarray]:
    """Base node index and 27 tensor-product weights (3, 3, 3) for one position."""
    loc = (np.asarray(x, dtype=np.float64) - state.origin) / state.dx
    base = np.floor(loc - 0.5).astype(np.int64)
    w = bspline_weights(loc - base)
    return base, np.einsum("i,j,k->ijk", w[0], w[1], w[2])


# -- substep phases -----------------------------------------------------------


def p2g(state: SimState) -> None:
    """Scatter particle mass and MLS-MPM momentum (incl. stress) to the grid."""
    K.clear_box(state.grid_m, state.grid_v, state._box)
    pa = state.particles
    bad = K.p2g_kernel(pa.x, pa.v, pa.C, pa.F, state._R, pa.mass, pa.volume0, pa.material,
                       state._lam, state._mu, state.origin, 1.0 / state.dx, state.dt,
                       state.grid_m, state.grid_v, state._box)
    if bad >= 0:
        state._box[:] = [[0, 0, 0], [state.n_nodes - 1] * 3]
        raise OutOfDomainError(int(bad))
    if len(pa) == 0:
        state._box[:] = [[0, 0, 0], [-1, -1, -1]]


def grid_update(state: SimState, knife=None) -> np.ndarray:
    """Turn grid momenta into velocities, then run the node-wise updates.

    Per node, in order: gravity, speed clip, knife contact, wall conditions.

    Returns the summed knife contact impulse on the grid (kg m/s) for this substep.
    """
    cfg = state.config
    impulse = np.zeros(3)
    if knife is None:
        kc = kv = kw = kh = np.zeros(3)
        krot = np.eye(3)
        kmu = 0.0
        band = 0.0
        on = False
    else:
        kc, krot, kh = knife.position, knife.rotation_matrix(), knife.half_extents
        kv, kw, kmu = knife.linear_velocity, knife.angular_velocity, knife.friction_mu
        band = knife.contact_band_cells * state.dx
        on = True
    K.grid_update_kernel(state.grid_m, state.grid_v, state._box, state.origin, state.dx,
                         state.dt, state.gravity, cfg.v_max, on, kc, krot, kh, kv, kw,
                         kmu, band, cfg.boundary_cells, cfg.sticky_floor, impulse)
    return impulse


def g2p(state: SimState) -> None:
    """Gather velocity and affine field, update F (with plasticity) and advect."""
    pa = state.particles
    bad = K.g2p_kernel(pa.x, pa.v, pa.C, pa.F, state._V, state._R, pa.material, state._lam, state._mu,
                       state._ys, state.origin, 1.0 / state.dx, state.dt, state.grid_v,
                       state.config.plasticity, state.lo, state.hi)
    if bad >= 0:
        raise InvalidStateError(int(bad))


def step(state: SimState, knife=None) -> np.ndarray:
    """Advance one substep; returns the clipped knife reaction force sample (N).

    The knife, if given, is moved by its own velocity after the transfer and
    its ``force_accum`` is incremented by the sample.
    """
    from mpmcut.knife import accumulate_knife_force

    p2g(state)
    impulse = grid_update(state, knife)
    g2p(state)
    state.time += state.dt
    force = accumulate_knife_force([impulse], state.dt, state.config.force_clip)
    if knife is not None:
        knife.force_accum += force
        knife.advance(state.dt)
    return force


# -- diagnostics and export ----------------------------------------------------


def total_mass(state: SimState) -> float:
    return float(state.particles.mass.sum())


def total_momentum(state: SimState) -> np.ndarray:
    pa = state.particles
    return (pa.mass[:, None] * pa.v).sum(axis=0)


def export_snapshot(state: SimState, path) -> Path:
    """Write ``x, v, material, det F`` per particle.

    ``.npz`` gives a binary table, anything else a whitespace-separated text table.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pa = state.particles
    detF = np.linalg.det(pa.F) if len(pa) else np.zeros(0)
    if path.suffix == ".npz":
        np.savez_compressed(path, x=pa.x, v=pa.v, material=pa.material, detF=detF,
                            time=state.time)
    else:
        table = np.column_stack([pa.x, pa.v, pa.material.astype(np.float64), detF])
        np.savetxt(path, table, fmt="%.9g",
                   header=f"time={state.time:.6g}\nx y z vx vy vz material detF")
    return path


def load_snapshot(path) -> dict:
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path) as z:
            return {k: z[k] for k in z.files}
    table = np.loadtxt(path, ndmin=2)
    return {"x": table[:, 0:3], "v": table[:, 3:6],
            "material": table[:, 6].astype(np.int8), "detF": table[:, 7]}
