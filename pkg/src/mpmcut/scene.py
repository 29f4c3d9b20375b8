"""Simulated shoulder: a soft meat block embedding two stiff bone spheres."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from mpmcut import _kernels as K
from mpmcut.mpm_core import BONE, BONE_PARAMS, MEAT, MEAT_PARAMS, MaterialParams, Particles, SimConfig


class SceneConfigError(ValueError):
    pass


@dataclass
class SceneConfig:
    sphere_radius: float = 0.021
    sphere_center_distance: float = 0.05
    # block extents along world x, y, z; y is the inter-sphere axis
    meat_box: tuple = (0.08, 0.12, 0.08)
    axis: tuple = (0.0, 1.0, 0.0)
    offset_ranges: tuple = ((-0.005, 0.005), (-0.01, 0.01), (-0.01, 0.01))
    meat: MaterialParams = field(default_factory=lambda: MEAT_PARAMS)
    bone: MaterialParams = field(default_factory=lambda: BONE_PARAMS)
    particles_per_cell: int = 8
    # None: centred in x/y, resting on the floor boundary layer
    box_center: tuple | None = None

    def __post_init__(self):
        if self.sphere_radius < 0:
            raise SceneConfigError("sphere_radius must be >= 0")
        if not self.sphere_center_distance > 2 * self.sphere_radius:
            raise SceneConfigError("sphere_center_distance must exceed 2 * sphere_radius (no gap)")
        if self.particles_per_cell < 1:
            raise SceneConfigError("particles_per_cell must be >= 1")
        for lo, hi in self.offset_ranges:
            if lo > hi:
                raise SceneConfigError(f"offset range ({lo}, {hi}) is inverted")

    @property
    def unit_axis(self) -> np.ndarray:
        a = np.asarray(self.axis, dtype=np.float64)
        return a / np.linalg.norm(a)

    @property
    def gap(self) -> float:
        return self.sphere_center_distance - 2.0 * self.sphere_radius

    def resolved_box_center(self, sim: SimConfig) -> np.ndarray:
        if self.box_center is not None:
            return np.asarray(self.box_center, dtype=np.float64)
        o = np.asarray(sim.origin, dtype=np.float64)
        floor = sim.boundary_cells * sim.dx
        return o + np.array([sim.domain_size / 2, sim.domain_size / 2, floor + self.meat_box[2] / 2])


@dataclass
class BoneLayout:
    center_a: np.ndarray
    center_b: np.ndarray
    offset: np.ndarray

    @classmethod
    def from_offset(cls, config: SceneConfig, pair_center, offset) -> "BoneLayout":
        mid = np.asarray(pair_center, dtype=np.float64) + np.asarray(offset, dtype=np.float64)
        half = 0.5 * config.sphere_center_distance * config.unit_axis
        return cls(center_a=mid - half, center_b=mid + half, offset=np.asarray(offset, dtype=np.float64))

    @property
    def gap_midpoint(self) -> np.ndarray:
        return 0.5 * (self.center_a + self.center_b)

    @property
    def axis(self) -> np.ndarray:
        d = self.center_b - self.center_a
        return d / np.linalg.norm(d)


def sample_bone_offset(rng: np.random.Generator, config: SceneConfig) -> np.ndarray:
    """Independent uniform offset per axis within ``config.offset_ranges``."""
    lo = np.array([r[0] for r in config.offset_ranges], dtype=np.float64)
    hi = np.array([r[1] for r in config.offset_ranges], dtype=np.float64)
    return lo + (hi - lo) * rng.random(3)


def _check_layout(config: SceneConfig, layout: BoneLayout, box_center) -> None:
    half_box = 0.5 * np.asarray(config.meat_box, dtype=np.float64)
    for c in (layout.center_a, layout.center_b):
        rel = np.abs(c - box_center) + config.sphere_radius
        if np.any(rel > half_box + 1e-12):
            raise SceneConfigError(
                f"bone sphere at {np.round(c, 4).tolist()} (r={config.sphere_radius}) "
                f"extends outside the meat box")


def build_scene(config: SceneConfig, layout: BoneLayout, sim: SimConfig,
                rng: np.random.Generator | None = None) -> Particles:
    """Seed jittered particles in the meat box and label the two spheres as bone."""
    rng = np.random.default_rng(0) if rng is None else rng
    center = config.resolved_box_center(sim)
    _check_layout(config, layout, center)
    dx = sim.dx
    ppc = config.particles_per_cell
    ncell = np.maximum(np.rint(np.asarray(config.meat_box) / dx).astype(int), 1)
    lo = center - 0.5 * ncell * dx
    cells = np.stack(np.meshgrid(*[np.arange(n) for n in ncell], indexing="ij"), -1).reshape(-1, 1, 3)
    k = round(ppc ** (1 / 3))
    if k ** 3 == ppc:
        sub = np.stack(np.meshgrid(*[np.arange(k)] * 3, indexing="ij"), -1).reshape(1, -1, 3)
        frac = (sub + rng.random((len(cells), ppc, 3))) / k
    else:
        frac = rng.random((len(cells), ppc, 3))
    x = (lo + (cells + frac) * dx).reshape(-1, 3)

    r2 = config.sphere_radius ** 2
    in_a = ((x - layout.center_a) ** 2).sum(1) < r2
    in_b = ((x - layout.center_b) ** 2).sum(1) < r2
    material = np.where(in_a | in_b, BONE, MEAT).astype(np.int8)
    rho = np.where(material == BONE, config.bone.rho, config.meat.rho)
    vol = dx ** 3 / ppc
    return Particles.at_rest(x, rho * vol, vol, material)


def detect_bone_cut(particles: Particles, knife) -> tuple[bool, int]:
    """Whether any bone particle lies inside the knife (SDF < 0), and how many."""
    n = K.bone_hits(particles.x, particles.material, knife.position,
                    knife.rotation_matrix(), knife.half_extents)
    return n > 0, int(n)


def describe(config: SceneConfig, sim: SimConfig) -> dict:
    """Resolved geometry, as printed by ``inspect-scene``."""
    c = config.resolved_box_center(sim)
    nominal = BoneLayout.from_offset(config, c, np.zeros(3))
    return {
        "domain": {"origin": list(sim.origin), "size": sim.domain_size, "n_grid": sim.n_grid, "dx": sim.dx},
        "meat_box": {"center": c.tolist(), "extents": list(config.meat_box)},
        "spheres": {"radius": config.sphere_radius, "center_a": nominal.center_a.tolist(),
                    "center_b": nominal.center_b.tolist()},
        "bone_gap": config.gap,
        "gap_cells": config.gap / sim.dx,
        "offset_ranges": [list(r) for r in config.offset_ranges],
    }
