import json
import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st

import mpmcut.env as env_mod
from mpmcut.env import (FORCE, LOG_FIELDS, OBS_DIM, POSE, RESIDUAL, CuttingEnv, EnvConfig,
                        apply_domain_randomization, compute_reward, discretize_force,
                        read_episode_log, write_episode_log)
from mpmcut.mpm_core import InvalidStateError, SimConfig
from mpmcut.scene import SceneConfig
from mpmcut.trajectory import Pose, ResidualPose, interpolate

LEVELS = np.round(np.arange(11) / 10, 10)


def small_env(**kw) -> CuttingEnv:
    cfg = EnvConfig(**{"T": 12, "substeps": 25, "f_max": 1.0, **kw})
    return CuttingEnv(cfg, SceneConfig(particles_per_cell=1), SimConfig(n_grid=32, dt=4e-4))


@pytest.fixture(scope="module")
def env():
    return small_env()


def test_config_validation():
    with pytest.raises(ValueError, match="T"):
        EnvConfig(T=0)
    with pytest.raises(ValueError, match="f_max"):
        EnvConfig(f_max=0.0)


def test_reward_examples():
    assert compute_reward(0, ResidualPose.zero()) == pytest.approx(0.1)
    assert compute_reward(1, ResidualPose.zero(), C=0.1, alpha1=1.0) == pytest.approx(-0.9)


@given(st.integers(0, 1), st.floats(1e-4, 0.05), st.floats(1.01, 3.0))
def test_reward_decreases_with_residual(b, mag, factor):
    e1 = ResidualPose((mag, 0, 0), (0, 0, 0))
    e2 = ResidualPose((mag * factor, 0, 0), (0, 0, 0))
    assert compute_reward(b, e2) < compute_reward(b, e1)


def test_discretize_examples():
    assert np.array_equal(discretize_force(np.zeros(3), 200.0), np.zeros(3))
    assert discretize_force([0.26 * 200, 0, 0], 200.0)[0] == 0.3
    assert np.array_equal(discretize_force([-1000.0, 1000.0, 5 * 200.0], 200.0), np.ones(3))
    assert discretize_force([0.25], 1.0)[0] == 0.3


@given(st.lists(st.floats(-1e4, 1e4, allow_nan=False), min_size=3, max_size=3), st.floats(0.01, 500))
def test_discretize_lands_on_levels(f, f_max):
    d = discretize_force(f, f_max)
    assert all(x in LEVELS for x in d)


def test_domain_randomization_statistics():
    rng = np.random.default_rng(0)
    pose = Pose((0.1, 0.1, 0.1), (0, 0, 0, 1.0))
    assert apply_domain_randomization(pose, rng, enabled=False).as_array().tolist() == pose.as_array().tolist()
    draws = [apply_domain_randomization(pose, rng) for _ in range(10_000)]
    pos = np.array([d.position for d in draws])
    assert np.all(np.abs(pos.std(0) - 0.01) <= 0.05 * 0.01)
    norms = np.linalg.norm([d.orientation for d in draws], axis=1)
    assert np.abs(norms - 1.0).max() <= 1e-9


def test_reset_determinism_and_initial_blocks(env):
    a = env.reset(7)
    b = env.reset(7)
    assert a.shape == (OBS_DIM,)
    assert np.array_equal(a, b)
    assert np.array_equal(a[RESIDUAL], np.zeros(6))
    assert np.array_equal(a[FORCE], np.zeros(3))
    assert abs(np.linalg.norm(a[3:7]) - 1) < 1e-6 and abs(np.linalg.norm(a[10:14]) - 1) < 1e-6


def test_zero_actions_track_nominal(env):
    env.reset(3)
    wps = env.trajectory.waypoints
    T = env.config.T
    for k in range(T):
        res = env.step(np.zeros(6))
        ref = interpolate(wps, (k + 1) / T)
        assert np.abs(env.knife.position - ref.position).max() <= 1e-4
        assert abs(abs(env.knife.orientation @ ref.orientation) - 1) <= 1e-9
        assert res.info["error"] is None
        assert res.done == (k == T - 1)


def test_episode_invariants_under_random_actions(env):
    cfg = env.config
    rng = np.random.default_rng(1)
    env.reset(11)
    bound = cfg.C + cfg.alpha1 + cfg.alpha2 * (cfg.trans_clip ** 2 + cfg.rot_clip ** 2)
    n = 0
    while True:
        res = env.step(rng.uniform(-1, 1, 6))
        n += 1
        e = res.observation[RESIDUAL]
        b = res.info["b"]
        assert abs(res.reward) <= bound
        assert abs(res.reward + cfg.alpha2 * e @ e + cfg.alpha1 * b - cfg.C) < 1e-12
        assert all(x in LEVELS for x in res.observation[FORCE])
        if res.done:
            break
    assert n == cfg.T
    assert sum(r["b"] for r in env.episode_log) == sum(1 for r in env.episode_log if r["b"] == 1)
    with pytest.raises(RuntimeError):
        env.step(np.zeros(6))


def test_same_seed_and_actions_reproduce_every_step():
    acts = np.random.default_rng(5).uniform(-1, 1, (12, 6))
    runs = []
    for _ in range(2):
        e = small_env(domain_randomization=True)
        obs = [e.reset(21)]
        for a in acts:
            r = e.step(a)
            obs.append(np.concatenate([r.observation, [r.reward, r.info["b"]], r.info["raw_force"]]))
        runs.append(np.array(obs[1:]))
    assert np.array_equal(runs[0], runs[1])


def test_force_block_zero_without_force_observation():
    # an offset that puts the knife into bone guarantees nonzero forces
    e = small_env(observe_force=False, fixed_offset=(0.0, 0.008, 0.0))
    e.reset(0)
    forces = []
    for _ in range(e.config.T):
        r = e.step(np.zeros(6))
        assert np.array_equal(r.observation[FORCE], np.zeros(3))
        forces.append(np.abs(r.info["raw_force"]).max())
    assert max(forces) > 0


def test_domain_randomization_only_touches_pose_block():
    clean, noisy = small_env(), small_env(domain_randomization=True)
    a, b = clean.reset(2), noisy.reset(2)
    assert not np.array_equal(a[POSE], b[POSE])
    assert np.array_equal(a[7:], b[7:])
    assert np.array_equal(clean.knife.position, noisy.knife.position)


def test_out_of_range_action_clamped_and_logged(env, caplog):
    env.reset(0)
    env._clamp_warned = False
    with caplog.at_level(logging.WARNING, logger="mpmcut.env"):
        env.step(np.full(6, 5.0))
    assert "clamped" in caplog.text
    assert env.episode_log[-1]["action"] == [1.0] * 6


def test_simulation_error_ends_episode(monkeypatch):
    e = small_env()
    e.reset(0)

    def boom(state, knife):
        raise InvalidStateError(3)

    monkeypatch.setattr(env_mod, "sim_step", boom)
    r = e.step(np.zeros(6))
    assert r.done and r.info["b"] == 1
    assert "InvalidStateError" in r.info["error"]


def test_episode_log_roundtrip(env, tmp_path):
    env.reset(4)
    for _ in range(3):
        env.step(np.full(6, 0.5))
    path = write_episode_log(env.episode_log, tmp_path / "ep.jsonl")
    first = json.loads(path.read_text().splitlines()[0])
    assert tuple(first) == LOG_FIELDS
    assert read_episode_log(path) == [{k: r[k] for k in LOG_FIELDS} for r in env.episode_log]
