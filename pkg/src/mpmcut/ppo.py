"""PPO with a tanh-squashed Gaussian MLP policy and an MLP value function.

Everything runs on the CPU in float64. Actions are sampled as
``a = tanh(u)``, ``u ~ N(mu(obs), diag(exp(log_std))^2)``; the rollout buffer
stores the pre-squash sample ``u`` so log-probabilities are re-evaluated
without an ``atanh``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0
_LOG2 = math.log(2.0)


class TrainingError(RuntimeError):
    pass


class NonFiniteError(TrainingError):
    pass


@dataclass
class PPOConfig:
    learning_rate: float = 3e-4
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_range: float = 0.2
    batch_size: int = 64
    n_epochs: int = 10
    n_steps: int = 2048
    ent_coef: float = 0.0
    vf_coef: float = 0.5
    max_grad_norm: float = 0.5
    hidden: tuple = (64, 64)
    init_log_std: float = 0.0
    obs_norm: bool = False
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.n_steps <= 0 or self.batch_size <= 0 or self.n_epochs <= 0:
            raise ValueError("n_steps, batch_size and n_epochs must be positive")
        if not LOG_STD_MIN <= self.init_log_std <= LOG_STD_MAX:
            raise ValueError("init_log_std outside [-20, 2]")


def _mlp(sizes, out_gain: float) -> nn.Sequential:
    layers = []
    for i in range(len(sizes) - 1):
        lin = nn.Linear(sizes[i], sizes[i + 1])
        last = i == len(sizes) - 2
        nn.init.orthogonal_(lin.weight, gain=out_gain if last else math.sqrt(2.0))
        nn.init.zeros_(lin.bias)
        layers.append(lin)
        if not last:
            layers.append(nn.Tanh())
    return nn.Sequential(*layers)


class ActorCritic(nn.Module):
    """Separate policy and value MLPs.

    With ``obs_norm`` the input is standardized by running statistics that
    are buffers, not parameters; :meth:`update_obs_stats` is called between
    updates so the stored log-probabilities stay valid.
    """

    def __init__(self, obs_dim: int, act_dim: int, hidden=(64, 64), init_log_std: float = 0.0,
                 obs_norm: bool = False):
        super().__init__()
        self.obs_dim, self.act_dim = obs_dim, act_dim
        self.obs_norm = obs_norm
        self.pi = _mlp((obs_dim, *hidden, act_dim), out_gain=0.01)
        self.vf = _mlp((obs_dim, *hidden, 1), out_gain=1.0)
        self.log_std = nn.Parameter(torch.full((act_dim,), float(init_log_std)))
        self.register_buffer("obs_mean", torch.zeros(obs_dim))
        self.register_buffer("obs_var", torch.ones(obs_dim))
        self.register_buffer("obs_count", torch.tensor(1e-4))
        self.double()

    def forward(self, obs: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if self.obs_norm:
            obs = ((obs - self.obs_mean) / torch.sqrt(self.obs_var + 1e-8)).clamp(-10.0, 10.0)
        return self.pi(obs), self.vf(obs).squeeze(-1)

    @torch.no_grad()
    def update_obs_stats(self, obs: np.ndarray) -> None:
        """Merge a batch into the running mean and variance (parallel Welford)."""
        x = torch.as_tensor(np.asarray(obs, dtype=np.float64)).reshape(-1, self.obs_dim)
        n = x.shape[0]
        mean, var = x.mean(0), x.var(0, unbiased=False)
        tot = self.obs_count + n
        delta = mean - self.obs_mean
        m2 = self.obs_var * self.obs_count + var * n + delta.pow(2) * self.obs_count * n / tot
        self.obs_mean += delta * n / tot
        self.obs_var.copy_(m2 / tot)
        self.obs_count.fill_(tot)

    def std(self) -> torch.Tensor:
        return self.log_std.clamp(LOG_STD_MIN, LOG_STD_MAX).exp()


def policy_forward(model: ActorCritic, obs) -> tuple[np.ndarray, float | np.ndarray]:
    """Pre-squash action mean and value estimate for one or a batch of observations."""
    with torch.no_grad():
        mu, v = model(torch.as_tensor(np.asarray(obs, dtype=np.float64)))
    if not (torch.isfinite(mu).all() and torch.isfinite(v).all()):
        raise NonFiniteError("policy produced non-finite output")
    mu, v = mu.numpy(), v.numpy()
    return (mu, float(v)) if mu.ndim == 1 else (mu, v)


def squash_correction(u: torch.Tensor) -> torch.Tensor:
    """``sum log(1 - tanh(u)^2)`` over the last axis, written to stay finite for large ``|u|``."""
    return (2.0 * (_LOG2 - u - nn.functional.softplus(-2.0 * u))).sum(-1)


def log_prob(model: ActorCritic, obs: torch.Tensor, u: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Log-density of the squashed action ``tanh(u)`` and the value estimate."""
    mu, v = model(obs)
    std = model.std()
    z = (u - mu) / std
    gauss = (-0.5 * z.pow(2) - torch.log(std) - 0.5 * math.log(2 * math.pi)).sum(-1)
    return gauss - squash_correction(u), v


def gaussian_entropy(model: ActorCritic) -> torch.Tensor:
    """Entropy of the pre-squash Gaussian (the squashed density has no closed form)."""
    return (0.5 + 0.5 * math.log(2 * math.pi) + torch.log(model.std())).sum()


def sample_action(model: ActorCritic, obs, rng: np.random.Generator):
    """Returns ``(action, pre_squash_sample, log_prob, value)``."""
    mu, v = policy_forward(model, obs)
    std = model.std().detach().numpy()
    u = mu + std * rng.standard_normal(mu.shape)
    with torch.no_grad():
        lp, _ = log_prob(model, torch.as_tensor(np.asarray(obs, dtype=np.float64)), torch.as_tensor(u))
    return np.tanh(u), u, float(lp), v


def deterministic_action(model: ActorCritic, obs) -> np.ndarray:
    mu, _ = policy_forward(model, obs)
    return np.tanh(mu)


# -- advantages -----------------------------------------------------------------


def gae(rewards, values, dones, last_value: float, gamma: float = 0.99,
        lam: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimation.

    ``dones[t]`` marks that the episode ended with transition ``t``; the value
    after the final transition is ``last_value`` unless that transition is
    terminal. Returns ``(advantages, returns)`` with ``returns = adv + values``.
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    d = np.asarray(dones, dtype=np.float64)
    n = len(r)
    adv = np.zeros(n)
    next_v, acc = float(last_value), 0.0
    for t in range(n - 1, -1, -1):
        live = 1.0 - d[t]
        delta = r[t] + gamma * next_v * live - v[t]
        acc = delta + gamma * lam * live * acc
        adv[t] = acc
        next_v = v[t]
    return adv, adv + v


def normalize_advantages(adv) -> np.ndarray:
    adv = np.asarray(adv, dtype=np.float64)
    centred = adv - adv.mean()
    std = np.sqrt(np.mean(centred ** 2))
    if std < 1e-12:
        return centred
    out = centred / std
    # one refinement pass pulls the moments to round-off level
    out -= out.mean()
    return out / np.sqrt(np.mean(out ** 2))


def clipped_surrogate(ratio: torch.Tensor, adv: torch.Tensor, clip: float) -> torch.Tensor:
    """PPO policy loss (to be minimized)."""
    return -torch.min(ratio * adv, ratio.clamp(1.0 - clip, 1.0 + clip) * adv).mean()


# -- rollout buffer and update ----------------------------------------------------


@dataclass
class RolloutBatch:
    obs: np.ndarray
    actions: np.ndarray  # pre-squash samples u
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.obs)
        for name in ("actions", "log_probs", "rewards", "values", "dones"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"rollout field {name!r} has length {len(getattr(self, name))}, expected {n}")

    def __len__(self) -> int:
        return len(self.obs)

    def compute_advantages(self, last_value: float, gamma: float, lam: float) -> None:
        self.advantages, self.returns = gae(self.rewards, self.values, self.dones, last_value, gamma, lam)


def ppo_update(model: ActorCritic, optimizer: torch.optim.Optimizer, batch: RolloutBatch,
               config: PPOConfig, rng: np.random.Generator) -> dict:
    if batch.advantages is None:
        raise TrainingError("advantages must be computed before the update")
    obs = torch.as_tensor(batch.obs)
    u = torch.as_tensor(batch.actions)
    old_lp = torch.as_tensor(batch.log_probs)
    adv_all = torch.as_tensor(normalize_advantages(batch.advantages))
    ret = torch.as_tensor(batch.returns)
    n = len(batch)
    stats = {"policy_loss": [], "value_loss": [], "clip_fraction": [], "approx_kl": []}
    for _ in range(config.n_epochs):
        perm = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = torch.as_tensor(perm[start:start + config.batch_size])
            lp, v = log_prob(model, obs[idx], u[idx])
            ratio = torch.exp(lp - old_lp[idx])
            pg = clipped_surrogate(ratio, adv_all[idx], config.clip_range)
            vl = (ret[idx] - v).pow(2).mean()
            loss = pg + config.vf_coef * vl - config.ent_coef * gaussian_entropy(model)
            if not torch.isfinite(loss):
                raise NonFiniteError(f"non-finite loss (policy {pg.item()}, value {vl.item()})")
            optimizer.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(model.parameters(), config.max_grad_norm)
            optimizer.step()
            with torch.no_grad():
                model.log_std.clamp_(LOG_STD_MIN, LOG_STD_MAX)
                stats["policy_loss"].append(pg.item())
                stats["value_loss"].append(vl.item())
                stats["clip_fraction"].append(((ratio - 1).abs() > config.clip_range).double().mean().item())
                stats["approx_kl"].append((old_lp[idx] - lp).mean().item())
    return {k: float(np.mean(v)) for k, v in stats.items()}


# -- training loop ----------------------------------------------------------------


def episode_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint64)[0] >> 1)


def set_determinism(enabled: bool) -> None:
    if enabled:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


@dataclass
class TrainState:
    model: ActorCritic
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    step: int = 0
    episodes: int = 0
    curve: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)


def make_train_state(obs_dim: int, act_dim: int, config: PPOConfig) -> TrainState:
    set_determinism(config.deterministic)
    torch.manual_seed(config.seed)
    model = ActorCritic(obs_dim, act_dim, config.hidden, config.init_log_std, config.obs_norm)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate, eps=1e-5)
    return TrainState(model, opt, np.random.default_rng(config.seed))


def save_checkpoint(ts: TrainState, config: PPOConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {
        "version": CHECKPOINT_VERSION,
        "obs_dim": ts.model.obs_dim,
        "act_dim": ts.model.act_dim,
        "config": asdict(config),
        "model": ts.model.state_dict(),
        "optimizer": ts.optimizer.state_dict(),
        "rng": ts.rng.bit_generator.state,
        "torch_rng": torch.get_rng_state(),
        "step": ts.step,
        "episodes": ts.episodes,
        "curve": ts.curve,
        "meta": ts.meta,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(blob, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path, config: PPOConfig | None = None) -> tuple[TrainState, PPOConfig]:
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    if blob.get("version") != CHECKPOINT_VERSION:
        raise TrainingError(f"unsupported checkpoint version {blob.get('version')!r} in {path}")
    config = config or PPOConfig(**blob["config"])
    ts = make_train_state(blob["obs_dim"], blob["act_dim"], config)
    ts.model.load_state_dict(blob["model"])
    ts.optimizer.load_state_dict(blob["optimizer"])
    ts.rng.bit_generator.state = blob["rng"]
    torch.set_rng_state(blob["torch_rng"])
    ts.step, ts.episodes, ts.curve = blob["step"], blob["episodes"], list(blob["curve"])
    ts.meta = dict(blob.get("meta", {}))
    return ts, config


def collect_rollout(env, ts: TrainState, n_steps: int, seed: int) -> tuple[RolloutBatch, float, list[dict]]:
    """Run fresh episodes for ``n_steps`` transitions; a trailing partial episode is bootstrapped."""
    obs_buf = np.zeros((n_steps, env.obs_dim))
    u_buf = np.zeros((n_steps, env.act_dim))
    lp_buf, r_buf, v_buf, d_buf = (np.zeros(n_steps) for _ in range(4))
    finished = []
    obs = env.reset(episode_seed(seed, ts.episodes))
    ep_reward, ep_contact = 0.0, 0
    for t in range(n_steps):
        a, u, lp, v = sample_action(ts.model, obs, ts.rng)
        res = env.step(a)
        obs_buf[t], u_buf[t], lp_buf[t], v_buf[t] = obs, u, lp, v
        r_buf[t], d_buf[t] = res.reward, float(res.done)
        ep_reward += res.reward
        ep_contact += res.info.get("b", 0)
        obs = res.observation
        if res.done:
            finished.append({"reward": ep_reward, "violation": ep_contact,
                             "error": res.info.get("error") is not None})
            ts.episodes += 1
            ep_reward, ep_contact = 0.0, 0
            if t + 1 < n_steps:
                obs = env.reset(episode_seed(seed, ts.episodes))
    if d_buf[-1]:
        last_value = 0.0
    else:
        _, last_value = policy_forward(ts.model, obs)
        # the partial episode is dropped; its seed is consumed so resumption stays aligned
        ts.episodes += 1
    batch = RolloutBatch(obs_buf, u_buf, lp_buf, r_buf, v_buf, d_buf)
    return batch, float(last_value), finished


def train(env_factory: Callable, total_steps: int, config: PPOConfig | None = None,
          out_dir=None, resume=None, seed: int | None = None,
          callback: Callable | None = None, meta: dict | None = None) -> tuple[ActorCritic, list]:
    """Alternate rollouts and updates until ``total_steps`` transitions are collected.

    Returns the model and the training curve, a list of per-iteration dicts
    ``{step, mean_reward, mean_violation, episodes}``. With ``out_dir`` a
    checkpoint and the curve are written after every iteration. ``meta`` is
    stored in the checkpoint verbatim.
    """
    env = env_factory()
    if resume is not None:
        ts, config = load_checkpoint(resume, config)
    else:
        config = config or PPOConfig()
        ts = make_train_state(env.obs_dim, env.act_dim, config)
        ts.meta = dict(meta or {})
    seed = config.seed if seed is None else seed
    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt = out_dir / "checkpoint.pt" if out_dir else None
    while ts.step < total_steps:
        n = min(config.n_steps, total_steps - ts.step)
        batch, last_value, finished = collect_rollout(env, ts, n, seed)
        batch.compute_advantages(last_value, config.gamma, config.gae_lambda)
        try:
            stats = ppo_update(ts.model, ts.optimizer, batch, config, ts.rng)
        except NonFiniteError as exc:
            where = f"; last good checkpoint: {ckpt}" if ckpt and ckpt.exists() else ""
            raise NonFiniteError(f"{exc} at step {ts.step}{where}") from exc
        if ts.model.obs_norm:
            ts.model.update_obs_stats(batch.obs)
        ts.step += n
        row = {"step": ts.step, "episodes": len(finished),
               "mean_reward": float(np.mean([f["reward"] for f in finished])) if finished else float("nan"),
               "mean_violation": float(np.mean([f["violation"] for f in finished])) if finished else float("nan"),
               "std": float(ts.model.std().detach().mean()), **stats}
        ts.curve.append(row)
        log.info("step %d reward %.3f violation %.2f", ts.step, row["mean_reward"], row["mean_violation"])
        if out_dir is not None:
            save_checkpoint(ts, config, ckpt)
            write_curve(ts.curve, out_dir / "curve.tsv")
        if callback is not None:
            callback(ts, row)
    return ts.model, ts.curve


def write_curve(curve: list, path) -> Path:
    """Tab-separated step/reward table, one row per iteration."""
    path = Path(path)
    cols = ["step", "episodes", "mean_reward", "mean_violation", "std"]
    with path.open("w") as fh:
        fh.write("\t".join(cols) + "\n")
        for row in curve:
            fh.write("\t".join(json.dumps(row[c]) for c in cols) + "\n")
    return path


class BanditEnv:
    """One-step task with reward ``-|a - target|^2`` and a constant observation."""

    def __init__(self, target, obs_dim: int = 4):
        self.target = np.asarray(target, dtype=np.float64)
        self.obs_dim, self.act_dim = obs_dim, len(self.target)

    def reset(self, seed=None) -> np.ndarray:
        return np.zeros(self.obs_dim)

    def step(self, action):
        from mpmcut.env import StepResult

        r = -float(np.sum((np.asarray(action) - self.target) ** 2))
        return StepResult(np.zeros(self.obs_dim), r, True, {"b": 0})
