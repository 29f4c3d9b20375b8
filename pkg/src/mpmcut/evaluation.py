"""Baseline runners, violation metrics and the method comparison report."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from mpmcut.env import CuttingEnv, read_episode_log, write_episode_log
from mpmcut.mpm_core import export_snapshot
from mpmcut.ppo import ActorCritic, deterministic_action

METHOD_LABELS = {"nominal": "Nominal", "adaptive_no_force": "Adaptive w/o Force", "adaptive": "Adaptive"}


@dataclass
class EpisodeRecord:
    method: str
    seed: int
    offset: list
    contacts: list
    steps: list = field(default_factory=list)
    failed: bool = False
    error: str | None = None


@dataclass
class EvalReport:
    violation_durations: list
    successes: list
    avg_violation_duration: float
    success_rate: float
    episodes: int
    failed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def longest_run(pattern) -> int:
    best = cur = 0
    for b in pattern:
        cur = cur + 1 if b else 0
        best = max(best, cur)
    return best


def episode_success(pattern) -> bool:
    """No two consecutive steps in bone contact."""
    return longest_run(pattern) < 2


def run_episode(method: str, env: CuttingEnv, policy: ActorCritic | None = None, seed: int = 0,
                frame_dir=None) -> EpisodeRecord:
    """Roll out one episode; adaptive methods act with the policy mean."""
    if method != "nominal" and policy is None:
        raise ValueError(f"method {method!r} needs a policy")
    obs = env.reset(seed)
    if frame_dir is not None:
        export_snapshot(env.state, Path(frame_dir) / "step_000.npz")
    contacts, error = [], None
    while True:
        action = np.zeros(env.act_dim) if method == "nominal" else deterministic_action(policy, obs)
        res = env.step(action)
        contacts.append(int(res.info["b"]))
        if frame_dir is not None:
            export_snapshot(env.state, Path(frame_dir) / f"step_{env.k:03d}.npz")
        obs = res.observation
        if res.done:
            error = res.info.get("error")
            break
    return EpisodeRecord(method, int(seed), env.layout.offset.tolist(), contacts,
                         list(env.episode_log), failed=error is not None, error=error)


def compute_metrics(records) -> EvalReport:
    """Aggregate records (or raw 0/1 contact patterns); failed episodes count as unsuccessful."""
    records = list(records)
    if not records:
        raise ValueError("compute_metrics needs at least one episode")
    durations, successes, failed = [], [], 0
    for r in records:
        pattern = r.contacts if isinstance(r, EpisodeRecord) else list(r)
        bad = isinstance(r, EpisodeRecord) and r.failed
        failed += int(bad)
        durations.append(int(sum(pattern)))
        successes.append(bool(episode_success(pattern) and not bad))
    return EvalReport(durations, successes, float(np.mean(durations)), float(np.mean(successes)),
                      len(records), failed)


def format_table(reports: dict) -> str:
    """Human-readable comparison, one row per method."""
    head = f"{'Method':<22}{'Avg. Violation Duration':>26}{'Success Rate':>15}"
    lines = [head, "-" * len(head)]
    for method, rep in reports.items():
        label = METHOD_LABELS.get(method, method)
        lines.append(f"{label:<22}{rep.avg_violation_duration:>26.2f}{rep.success_rate:>15.2f}")
    return "\n".join(lines)


def write_results(out_dir, records_by_method: dict, reports: dict) -> Path:
    """Per-episode logs under ``<method>/``, plus ``report.json`` and ``table.txt``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for method, records in records_by_method.items():
        for i, rec in enumerate(records):
            write_episode_log(rec.steps, out / method / f"episode_{i:03d}.jsonl")
        meta = [{"seed": r.seed, "offset": r.offset, "failed": r.failed, "error": r.error} for r in records]
        (out / method / "episodes.json").write_text(json.dumps(meta, indent=1))
    summary = {m: {"label": METHOD_LABELS.get(m, m), **rep.to_dict()} for m, rep in reports.items()}
    (out / "report.json").write_text(json.dumps(summary, indent=1))
    (out / "table.txt").write_text(format_table(reports) + "\n")
    return out


def report_from_logs(out_dir, method: str) -> EvalReport:
    """Recompute a method's report from the per-episode logs alone."""
    d = Path(out_dir) / method
    meta = json.loads((d / "episodes.json").read_text())
    records = []
    for i, m in enumerate(meta):
        steps = read_episode_log(d / f"episode_{i:03d}.jsonl")
        records.append(EpisodeRecord(method, m["seed"], m["offset"], [s["b"] for s in steps],
                                     steps, m["failed"], m["error"]))
    return compute_metrics(records)
