"""Episodic cutting environment around the MPM simulator.

Observation layout (23 floats):

    [0:7]    current knife pose (position, quaternion), noisy under domain randomization
    [7:14]   next nominal pose
    [14:17]  discretized per-axis force magnitude, zero when force is not observed
    [17:23]  residual pose (translation, rotation vector) after the last action
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from mpmcut.knife import KnifeState
from mpmcut.mpm_core import SimConfig, SimState, SimulationError, step as sim_step
from mpmcut.scene import BoneLayout, SceneConfig, build_scene, detect_bone_cut, sample_bone_offset
from mpmcut.trajectory import (NominalTrajectory, Pose, ResidualPose, compose_residual,
                               default_cut_depths, nominal_from_estimate, update_residual)

log = logging.getLogger(__name__)

OBS_DIM = 23
ACT_DIM = 6
POSE = slice(0, 7)
NEXT_POSE = slice(7, 14)
FORCE = slice(14, 17)
RESIDUAL = slice(17, 23)

LOG_FIELDS = ("step", "pose", "target", "force_raw", "force_disc", "residual", "action", "b", "reward")


@dataclass
class EnvConfig:
    T: int = 60
    substeps: int = 20
    C: float = 0.1
    alpha1: float = 1.0
    alpha2: float = 0.1
    eta_trans: float = 0.001
    eta_rot: float = 0.01
    trans_clip: float = 0.01
    rot_clip: float = 0.1
    domain_randomization: bool = False
    pos_noise_std: float = 0.01
    quat_noise_std: float = 0.1
    f_max: float = 200.0
    observe_force: bool = True
    # bone offset used instead of a random draw, e.g. for the clearance check
    fixed_offset: tuple | None = None
    knife_half_extents: tuple = (0.05, 0.001, 0.02)
    friction_mu: float = 0.2
    clearance: float = 0.005

    def __post_init__(self):
        if self.T <= 0:
            raise ValueError("T must be > 0")
        if self.substeps <= 0:
            raise ValueError("substeps must be > 0")
        if self.f_max <= 0:
            raise ValueError("f_max must be > 0")


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    info: dict = field(default_factory=dict)


def compute_reward(b: int, e: ResidualPose, C: float = 0.1, alpha1: float = 1.0,
                   alpha2: float = 0.1) -> float:
    """Bone-avoidance term minus a quadratic penalty on the residual; ``b = 1`` on contact."""
    return (C - alpha1 * b) - alpha2 * float(np.dot(e.as_array(), e.as_array()))


def discretize_force(f_raw, f_max: float) -> np.ndarray:
    """Per-axis ``|f| / f_max`` saturated at 1 and rounded half-up to a tenth."""
    if f_max <= 0:
        raise ValueError("f_max must be > 0")
    r = np.minimum(np.abs(np.asarray(f_raw, dtype=np.float64)) / f_max, 1.0)
    levels = np.floor(10.0 * r + 0.5)
    return levels / 10.0


def apply_domain_randomization(pose: Pose, rng: np.random.Generator, pos_std: float = 0.01,
                               quat_std: float = 0.1, enabled: bool = True) -> Pose:
    """Gaussian noise on position and quaternion components; the quaternion is renormalized."""
    if not enabled:
        return Pose(pose.position.copy(), pose.orientation.copy())
    p = pose.position + rng.normal(0.0, pos_std, 3)
    q = pose.orientation + rng.normal(0.0, quat_std, 4)
    n = np.linalg.norm(q)
    if n < 1e-12:
        q, n = pose.orientation.copy(), 1.0
    return Pose(p, q / n)


class CuttingEnv:
    """Residual-policy cutting task: one episode is a single downward pass."""

    obs_dim = OBS_DIM
    act_dim = ACT_DIM

    def __init__(self, config: EnvConfig | None = None, scene: SceneConfig | None = None,
                 sim: SimConfig | None = None, waypoints=None):
        self.config = config or EnvConfig()
        # explicit waypoints replace the ones built from the bone estimate
        self.waypoints = list(waypoints) if waypoints is not None else None
        self.scene = scene or SceneConfig()
        self.sim = sim or SimConfig()
        self.state: SimState | None = None
        self.knife: KnifeState | None = None
        self.trajectory: NominalTrajectory | None = None
        self.layout: BoneLayout | None = None
        self.residual = ResidualPose.zero()
        self.k = 0
        self.done = True
        self.episode_log: list[dict] = []
        self._noise_rng = np.random.default_rng(0)
        self._clamp_warned = False

    @property
    def control_dt(self) -> float:
        return self.config.substeps * self.sim.dt

    def _nominal(self, k: int) -> Pose:
        return self.trajectory(min(k, self.config.T) / self.config.T)

    def reset(self, seed: int | None = None) -> np.ndarray:
        cfg = self.config
        rng = np.random.default_rng(seed)
        scene_rng, noise_seed = rng.spawn(1)[0], rng.integers(2 ** 63)
        center = self.scene.resolved_box_center(self.sim)
        if cfg.fixed_offset is not None:
            offset = np.asarray(cfg.fixed_offset, dtype=np.float64)
        else:
            offset = sample_bone_offset(rng, self.scene)
        self.layout = BoneLayout.from_offset(self.scene, center, offset)
        particles = build_scene(self.scene, self.layout, self.sim, scene_rng)
        self.state = SimState(particles, self.sim)

        if self.waypoints is not None:
            self.trajectory = NominalTrajectory(self.waypoints)
        else:
            estimate = BoneLayout.from_offset(self.scene, center, np.zeros(3))
            half_height = float(cfg.knife_half_extents[2])
            approach, exit_depth = default_cut_depths(self.scene, self.sim, half_height, cfg.clearance)
            self.trajectory = NominalTrajectory(nominal_from_estimate(estimate, approach, exit_depth))

        start = self.trajectory(0.0)
        self.knife = KnifeState(start.position, start.orientation,
                                half_extents=np.array(cfg.knife_half_extents),
                                friction_mu=cfg.friction_mu)
        self.residual = ResidualPose.zero()
        self.k = 0
        self.done = False
        self.episode_log = []
        self._noise_rng = np.random.default_rng(noise_seed)
        return self._observe(np.zeros(3))

    def _observe(self, force: np.ndarray) -> np.ndarray:
        cfg = self.config
        pose = Pose(self.knife.position, self.knife.orientation)
        pose = apply_domain_randomization(pose, self._noise_rng, cfg.pos_noise_std,
                                          cfg.quat_noise_std, cfg.domain_randomization)
        obs = np.empty(OBS_DIM)
        obs[POSE] = pose.as_array()
        obs[NEXT_POSE] = self._nominal(self.k + 1).as_array()
        obs[FORCE] = discretize_force(force, cfg.f_max) if cfg.observe_force else 0.0
        obs[RESIDUAL] = self.residual.as_array()
        return obs

    def step(self, action) -> StepResult:
        if self.done:
            raise RuntimeError("step() called on a finished episode; call reset()")
        cfg = self.config
        a = np.asarray(action, dtype=np.float64).reshape(ACT_DIM)
        if np.any(np.abs(a) > 1.0) or not np.all(np.isfinite(a)):
            if not self._clamp_warned:
                log.warning("action outside [-1, 1] clamped: %s", np.round(a, 4).tolist())
                self._clamp_warned = True
            a = np.clip(np.nan_to_num(a), -1.0, 1.0)

        self.residual = update_residual(self.residual, a, cfg.eta_trans, cfg.eta_rot,
                                        cfg.trans_clip, cfg.rot_clip)
        target = compose_residual(self._nominal(self.k + 1), self.residual)
        knife = self.knife
        knife.servo_to(target.position, target.orientation, self.control_dt)
        knife.force_accum[:] = 0.0

        error = None
        n_done = 0
        try:
            for _ in range(cfg.substeps):
                sim_step(self.state, knife)
                n_done += 1
        except SimulationError as exc:
            error = f"{type(exc).__name__}: {exc}"
            log.warning("simulation error at control step %d: %s", self.k, error)
        force = knife.force_accum / max(n_done, 1)
        # remove the integration drift of the rotation servo
        knife.set_pose(target.position, target.orientation)
        knife.linear_velocity[:] = 0.0
        knife.angular_velocity[:] = 0.0

        if error is None:
            b, count = detect_bone_cut(self.state.particles, knife)
            b = int(b)
        else:
            b, count = 1, -1
        reward = compute_reward(b, self.residual, cfg.C, cfg.alpha1, cfg.alpha2)
        self.k += 1
        self.done = error is not None or self.k >= cfg.T
        obs = self._observe(force)
        info = {"b": b, "contact_count": count, "raw_force": force.copy(), "step": self.k,
                "error": error, "offset": self.layout.offset.copy()}
        self.episode_log.append({
            "step": self.k,
            "pose": obs[POSE].tolist(),
            "target": target.as_array().tolist(),
            "force_raw": force.tolist(),
            "force_disc": obs[FORCE].tolist(),
            "residual": self.residual.as_array().tolist(),
            "action": a.tolist(),
            "b": b,
            "reward": reward,
        })
        return StepResult(obs, reward, self.done, info)


def write_episode_log(records: list[dict], path) -> Path:
    """One JSON object per line, keys in :data:`LOG_FIELDS` order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for r in records:
            fh.write(json.dumps({k: r[k] for k in LOG_FIELDS}) + "\n")
    return path


def read_episode_log(path) -> list[dict]:
    with Path(path).open() as fh:
        return [json.loads(line) for line in fh if line.strip()]


def config_dict(config: EnvConfig) -> dict:
    return asdict(config)
