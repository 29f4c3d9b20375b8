"""Command line entry point: ``mpmcut train | eval | inspect-scene``.

Exit codes: 0 success, 2 usage or config error, 3 missing or unreadable file,
4 checkpoint incompatible with the requested method, 5 simulation failure,
6 training failure. Errors are printed to stderr as
``error[<category>]: <message>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from mpmcut.config import METHODS, ConfigError, RunConfig, dump_config, load_config
from mpmcut.env import CuttingEnv
from mpmcut.evaluation import compute_metrics, format_table, run_episode, write_results
from mpmcut.mpm_core import SimulationError
from mpmcut.ppo import TrainingError, episode_seed, load_checkpoint, train
from mpmcut.scene import SceneConfigError, describe

EXIT_CODES = {"usage": 2, "config": 2, "io": 3, "checkpoint": 4, "simulation": 5, "training": 6}


class CheckpointMismatch(RuntimeError):
    pass


def make_env(cfg: RunConfig, method: str, training: bool = False) -> CuttingEnv:
    return CuttingEnv(cfg.env_for(method, training), cfg.scene, cfg.sim, cfg.waypoint_list())


def train_run(cfg: RunConfig, method: str, resume=None, out_dir=None):
    """Train ``method`` and write checkpoint, curve and resolved config to its output directory."""
    if method == "nominal":
        raise ConfigError("method", "the nominal method has nothing to train")
    out = Path(out_dir or Path(cfg.output_dir) / method)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "resolved_config.yaml")
    env_cfg = cfg.env_for(method)
    meta = {"method": method, "observe_force": env_cfg.observe_force}
    if resume is not None:
        ts, _ = load_checkpoint(resume)
        check_compatible(ts.meta, method, resume)
    model, curve = train(lambda: make_env(cfg, method, training=True), cfg.total_steps, cfg.ppo, out_dir=out,
                         resume=resume, seed=cfg.seed, meta=meta)
    return model, curve, out


def check_compatible(meta: dict, method: str, path) -> None:
    want = method != "adaptive_no_force"
    have = meta.get("observe_force")
    if meta.get("method") not in (None, method) or (have is not None and have != want):
        raise CheckpointMismatch(
            f"checkpoint {path} was trained for method {meta.get('method')!r} "
            f"(observe_force={have}), cannot evaluate it as {method!r}")


def load_policy(path, method: str, obs_dim: int):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    ts, _ = load_checkpoint(path)
    if ts.model.obs_dim != obs_dim:
        raise CheckpointMismatch(f"checkpoint {path} expects {ts.model.obs_dim}-dim observations, env gives {obs_dim}")
    check_compatible(ts.meta, method, path)
    return ts.model


def eval_run(cfg: RunConfig, methods=None, checkpoints=None, episodes=None, export_frames=False,
             out_dir=None):
    """Evaluate each method on the same seeded episodes; returns ``(reports, out_dir)``."""
    methods = list(methods or cfg.methods)
    checkpoints = {**cfg.checkpoints, **(checkpoints or {})}
    n = episodes or cfg.episodes
    out = Path(out_dir or Path(cfg.output_dir) / "eval")
    records, reports = {}, {}
    for method in methods:
        env = make_env(cfg, method)
        policy = None
        if method != "nominal":
            ckpt = checkpoints.get(method) or Path(cfg.output_dir) / method / "checkpoint.pt"
            policy = load_policy(ckpt, method, env.obs_dim)
        recs = []
        for i in range(n):
            frames = out / "frames" / method / f"episode_{i:03d}" if export_frames and i < cfg.frame_episodes else None
            recs.append(run_episode(method, env, policy, episode_seed(cfg.eval_seed, i), frames))
        records[method], reports[method] = recs, compute_metrics(recs)
    write_results(out, records, reports)
    return reports, out


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    method = args.method or cfg.method
    _, curve, out = train_run(cfg, method, resume=args.resume)
    last = curve[-1] if curve else {}
    print(json.dumps({"method": method, "output_dir": str(out), "steps": last.get("step", 0),
                      "mean_violation": last.get("mean_violation")}))
    return 0


def _cmd_eval(args) -> int:
    cfg = load_config(args.config)
    methods = args.methods.split(",") if args.methods else None
    if methods:
        for m in methods:
            if m not in METHODS:
                raise ConfigError("--methods", f"{m!r} is not one of {list(METHODS)}")
    checkpoints = {}
    if args.checkpoint:
        targets = [m for m in (methods or cfg.methods) if m != "nominal"]
        if len(targets) != 1:
            raise ConfigError("--checkpoint", "applies to exactly one adaptive method; use --methods")
        checkpoints[targets[0]] = args.checkpoint
    reports, out = eval_run(cfg, methods, checkpoints, args.episodes, args.export_frames)
    print(format_table(reports))
    print(f"results written to {out}")
    return 0


def _cmd_inspect(args) -> int:
    cfg = load_config(args.config)
    print(json.dumps(describe(cfg.scene, cfg.sim), indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mpmcut", description="MPM cutting simulator with residual PPO policies")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a residual policy")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--method", choices=[m for m in METHODS if m != "nominal"],
                   help="override the method in the config")
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="evaluate methods on seeded episodes")
    e.add_argument("--config", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--episodes", type=int)
    e.add_argument("--methods", help="comma-separated subset of " + ",".join(METHODS))
    e.add_argument("--export-frames", action="store_true", help="write particle snapshots per control step")
    e.set_defaults(func=_cmd_eval)

    i = sub.add_parser("inspect-scene", help="print the resolved scene geometry")
    i.add_argument("--config", required=True)
    i.set_defaults(func=_cmd_inspect)
    return p


def _fail(category: str, message: str) -> int:
    print(f"error[{category}]: {message}", file=sys.stderr)
    return EXIT_CODES[category]


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_CODES["usage"]
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "eval" and args.episodes is not None and args.episodes <= 0:
        return _fail("usage", "--episodes must be > 0")
    try:
        return args.func(args)
    except (ConfigError, SceneConfigError) as exc:
        return _fail("config", str(exc))
    except FileNotFoundError as exc:
        return _fail("io", str(exc))
    except CheckpointMismatch as exc:
        return _fail("checkpoint", str(exc))
    except SimulationError as exc:
        return _fail("simulation", str(exc))
    except TrainingError as exc:
        return _fail("training", str(exc))


if __name__ == "__main__":
    sys.exit(main())
