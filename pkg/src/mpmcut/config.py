"""YAML run configuration.

Every section maps onto one dataclass; unknown keys and bad values are
reported with their dotted path (``env.T``) so a typo never goes unnoticed.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from mpmcut.env import EnvConfig
from mpmcut.mpm_core import MaterialParams, SimConfig
from mpmcut.ppo import PPOConfig
from mpmcut.scene import SceneConfig
from mpmcut.trajectory import Waypoint

METHODS = ("nominal", "adaptive_no_force", "adaptive")


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class RunConfig:
    method: str = "adaptive"
    methods: tuple = METHODS
    seed: int = 0
    eval_seed: int = 1000
    episodes: int = 50
    total_steps: int = 200_000
    output_dir: str = "runs/default"
    frame_episodes: int = 1
    checkpoints: dict = field(default_factory=dict)
    waypoints: list | None = None
    sim: SimConfig = field(default_factory=SimConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError("method", f"{self.method!r} is not one of {list(METHODS)}")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError("methods", f"{m!r} is not one of {list(METHODS)}")
        if self.episodes <= 0:
            raise ConfigError("episodes", "must be > 0")
        if self.total_steps < 0:
            raise ConfigError("total_steps", "must be >= 0")

    def env_for(self, method: str, training: bool = False) -> EnvConfig:
        """Env settings for ``method``.

        The no-force baseline masks the force block; observation noise is only
        applied while training.
        """
        if method not in METHODS:
            raise ConfigError("method", f"{method!r} is not one of {list(METHODS)}")
        return dataclasses.replace(
            self.env,
            observe_force=self.env.observe_force and method != "adaptive_no_force",
            domain_randomization=self.env.domain_randomization and training)

    def waypoint_list(self) -> list[Waypoint] | None:
        if self.waypoints is None:
            return None
        return [Waypoint.from_dict(w) for w in self.waypoints]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["methods"] = list(self.methods)
        return _plain(d)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(value, default, key: str):
    if value is None:
        return None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(key, f"expected a list, got {value!r}")
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    return value


def _build(cls, data, prefix: str, defaults=None):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(prefix, f"expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    defaults = cls() if defaults is None else defaults
    kwargs = {}
    for k, v in data.items():
        key = f"{prefix}.{k}"
        if k not in fields:
            raise ConfigError(key, f"unknown key (allowed: {', '.join(sorted(fields))})")
        default = getattr(defaults, k)
        if isinstance(default, MaterialParams):
            kwargs[k] = _build(MaterialParams, v, key, default)
        else:
            kwargs[k] = _coerce(v, default, key)
    try:
        return dataclasses.replace(defaults, **kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(prefix, str(exc)) from exc


_SECTIONS = {"sim": SimConfig, "scene": SceneConfig, "env": EnvConfig, "ppo": PPOConfig}


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a mapping")
    top = {f.name: f for f in dataclasses.fields(RunConfig)}
    defaults = RunConfig()
    kwargs = {}
    for k, v in data.items():
        if k not in top:
            raise ConfigError(k, f"unknown key (allowed: {', '.join(sorted(top))})")
        if k in _SECTIONS:
            kwargs[k] = _build(_SECTIONS[k], v, k)
        elif k == "waypoints":
            if v is not None:
                try:
                    [Waypoint.from_dict(w) for w in v]
                except (KeyError, TypeError, ValueError) as exc:
                    raise ConfigError("waypoints", f"each entry needs t, position, orientation ({exc})") from exc
            kwargs[k] = v
        elif k == "checkpoints":
            if not isinstance(v, dict):
                raise ConfigError(k, "expected a mapping of method to checkpoint path")
            kwargs[k] = dict(v)
        else:
            kwargs[k] = _coerce(v, getattr(defaults, k), k)
    try:
        return RunConfig(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError("<root>", str(exc)) from exc


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    with path.open() as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError("<yaml>", f"cannot parse {path}: {exc}") from exc
    return config_from_dict(data or {})


def dump_config(config: RunConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        yaml.safe_dump(config.to_dict(), fh, sort_keys=False)
    return path
