import json

import pytest
import yaml

from mpmcut.cli import main
from mpmcut.config import ConfigError, RunConfig, config_from_dict, dump_config, load_config

TINY = {
    "method": "adaptive",
    "methods": ["nominal", "adaptive"],
    "episodes": 2,
    "total_steps": 16,
    "sim": {"n_grid": 32, "dt": 0.0004},
    "scene": {"particles_per_cell": 1},
    "env": {"T": 8, "substeps": 36, "f_max": 1.0},
    "ppo": {"n_steps": 16, "batch_size": 8, "n_epochs": 1, "hidden": [8, 8]},
}


@pytest.fixture
def tiny(tmp_path):
    data = {**TINY, "output_dir": str(tmp_path / "runs")}
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(data))
    return path


def test_unknown_key_named():
    with pytest.raises(ConfigError) as exc:
        config_from_dict({"env": {"TT": 3}})
    assert exc.value.key == "env.TT"
    with pytest.raises(ConfigError, match="bogus"):
        config_from_dict({"bogus": 1})


@pytest.mark.parametrize("data, key", [
    ({"env": {"T": "sixty"}}, "env.T"),
    ({"env": {"T": 0}}, "env"),
    ({"ppo": {"obs_norm": "yes"}}, "ppo.obs_norm"),
    ({"episodes": 0}, "episodes"),
    ({"method": "magic"}, "method"),
])
def test_bad_values_named(data, key):
    with pytest.raises(ConfigError) as exc:
        config_from_dict(data)
    assert exc.value.key == key


def test_yaml_roundtrip(tmp_path):
    cfg = config_from_dict(TINY)
    back = load_config(dump_config(cfg, tmp_path / "c.yaml"))
    assert back == cfg


def test_no_force_env_masks_force_and_dr_only_in_training():
    cfg = config_from_dict({"env": {"domain_randomization": True}})
    assert cfg.env_for("adaptive").observe_force
    assert not cfg.env_for("adaptive_no_force").observe_force
    assert not cfg.env_for("adaptive").domain_randomization
    assert cfg.env_for("adaptive", training=True).domain_randomization


def test_missing_config_exit_code(tmp_path, capsys):
    assert main(["inspect-scene", "--config", str(tmp_path / "nope.yaml")]) == 3
    assert "error[io]" in capsys.readouterr().err


def test_bad_config_exit_code(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text("env:\n  friction: 3\n")
    assert main(["inspect-scene", "--config", str(p)]) == 2
    assert "env.friction" in capsys.readouterr().err


def test_usage_errors(tiny):
    assert main([]) == 2
    assert main(["eval", "--config", str(tiny), "--episodes", "0"]) == 2
    assert main(["eval", "--config", str(tiny), "--methods", "nominal,bogus"]) == 2


def test_inspect_scene(tiny, capsys):
    assert main(["inspect-scene", "--config", str(tiny)]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["bone_gap"] == pytest.approx(0.008)


def test_nominal_eval_needs_no_checkpoint(tiny, tmp_path, capsys):
    assert main(["eval", "--config", str(tiny), "--methods", "nominal"]) == 0
    out = capsys.readouterr().out
    assert "Nominal" in out
    report = json.loads((tmp_path / "runs" / "eval" / "report.json").read_text())
    assert report["nominal"]["episodes"] == 2


def test_missing_checkpoint_exit_code(tiny, capsys):
    assert main(["eval", "--config", str(tiny), "--methods", "adaptive"]) == 3


def test_train_then_eval_and_mismatch(tiny, tmp_path, capsys):
    assert main(["train", "--config", str(tiny)]) == 0
    ckpt = tmp_path / "runs" / "adaptive" / "checkpoint.pt"
    assert ckpt.is_file() and (tmp_path / "runs" / "adaptive" / "curve.tsv").is_file()
    assert load_config(tmp_path / "runs" / "adaptive" / "resolved_config.yaml") == load_config(tiny)
    capsys.readouterr()
    assert main(["eval", "--config", str(tiny), "--episodes", "1"]) == 0
    table = capsys.readouterr().out
    assert "Adaptive" in table and "Nominal" in table
    # a force-observing checkpoint cannot stand in for the no-force baseline
    code = main(["eval", "--config", str(tiny), "--methods", "adaptive_no_force", "--checkpoint", str(ckpt)])
    assert code == 4
    assert "error[checkpoint]" in capsys.readouterr().err
    # resuming an already finished run is a no-op
    assert main(["train", "--config", str(tiny), "--resume", str(ckpt)]) == 0


def test_nominal_cannot_be_trained(tiny):
    assert main(["train", "--config", str(tiny), "--method", "nominal"]) == 2


def test_default_config_valid():
    assert RunConfig().env.T == 60


def test_partial_material_override_keeps_defaults():
    cfg = config_from_dict({"scene": {"bone": {"yield_stress": 80.0}}})
    assert cfg.scene.bone.yield_stress == 80.0
    assert cfg.scene.bone.lam == 222.22 and cfg.scene.bone.rho == 2819.0
    with pytest.raises(ConfigError) as exc:
        config_from_dict({"scene": {"bone": {"hardness": 1}}})
    assert exc.value.key == "scene.bone.hardness"
