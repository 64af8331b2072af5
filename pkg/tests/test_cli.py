"""CLI tests: config validation, command smoke runs, determinism."""

import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from diffdesk.cli import DEFAULT_CONFIG, Experiment, load_config, main
from diffdesk.data_io import load_image
from diffdesk.errors import ConfigError


def tiny_config(out_dir, **extra):
    cfg = {
        "schema_version": 1,
        "seed": 7,
        "output_dir": str(out_dir),
        "dataset": {"size": 16, "count": 40, "noise_amplitude": 0.02},
        "models": {
            "schedule": {"steps": 40, "beta_start": 0.0002, "beta_end": 0.24},
            "autoencoder": {"factor": 2, "latent_channels": 2, "hidden": [6, 12], "stem_channels": 0,
                            "blocks_per_stage": 0, "epochs": 4,
                            "batch_size": 16, "lr": 0.002, "checkpoint": "checkpoints/autoencoder.ckpt"},
            "latent": {"widths": [6, 12], "blocks_per_level": 1, "time_dim": 8, "epochs": 4,
                       "batch_size": 16, "lr": 0.002, "checkpoint": "checkpoints/latent.ckpt"},
            "pdm": {"widths": [6, 12], "blocks_per_level": 1, "time_dim": 8, "epochs": 2,
                    "batch_size": 16, "lr": 0.002, "checkpoint": "checkpoints/pdm.ckpt"},
        },
        "attack": {"budgets_255": [4, 16], "iterations": 4},
        "edit": {"t_star": 6, "model": "ldm"},
        "purify": {"method": "crop_resize", "t_star": 4},
        "evaluation": {"eval_count": 34, "batch_size": 17},
    }
    cfg.update(extra)
    return cfg


def write_config(tmp_path, cfg):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return str(path)


# ---------------------------------------------------------------------------
# config validation


def test_missing_required_section_named(tmp_path):
    cfg = tiny_config(tmp_path / "out")
    del cfg["dataset"]
    with pytest.raises(ConfigError, match="dataset"):
        load_config(write_config(tmp_path, cfg), [])


def test_unknown_key_rejected(tmp_path):
    cfg = tiny_config(tmp_path / "out")
    cfg["dataset"]["resolution"] = 64
    with pytest.raises(ConfigError, match="resolution"):
        load_config(write_config(tmp_path, cfg), [])


def test_wrong_schema_version(tmp_path):
    cfg = tiny_config(tmp_path / "out")
    cfg["schema_version"] = 99
    with pytest.raises(ConfigError, match="schema_version"):
        load_config(write_config(tmp_path, cfg), [])


def test_non_terminal_schedule_rejected(tmp_path):
    cfg = tiny_config(tmp_path / "out")
    cfg["models"]["schedule"] = {"steps": 100, "beta_start": 1e-4, "beta_end": 0.02}
    with pytest.raises(ConfigError, match="alpha_bar_T"):
        load_config(write_config(tmp_path, cfg), [])


def test_set_override_and_unknown_path(tmp_path):
    path = write_config(tmp_path, tiny_config(tmp_path / "out"))
    cfg = load_config(path, ["attack.iterations=9", "dataset.count=12"])
    assert cfg["attack"]["iterations"] == 9
    assert cfg["dataset"]["count"] == 12
    with pytest.raises(ConfigError):
        load_config(path, ["attack.nope=1"])


def test_type_mismatch_rejected(tmp_path):
    cfg = tiny_config(tmp_path / "out")
    cfg["dataset"]["count"] = "many"
    with pytest.raises(ConfigError, match="dataset.count"):
        load_config(write_config(tmp_path, cfg), [])


def test_defaults_are_a_valid_config(tmp_path):
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))
    cfg["output_dir"] = str(tmp_path / "out")
    load_config(write_config(tmp_path, cfg), [])


# ---------------------------------------------------------------------------
# command smoke tests (tiny scale)


@pytest.fixture(scope="module")
def trained_out(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli-run")
    cfg = tiny_config(out / "exp")
    path = out / "config.json"
    path.write_text(json.dumps(cfg))
    assert main(["train", "--config", str(path)]) == 0
    return out, str(path), cfg


def test_cmd_train_outputs(trained_out):
    out, path, cfg = trained_out
    exp = Path(cfg["output_dir"])
    for name in ("autoencoder", "latent", "pdm"):
        assert (exp / "checkpoints" / f"{name}.ckpt").exists()
    report = json.loads((exp / "reports" / "training_report.json").read_text())
    assert set(report) == {"autoencoder", "latent", "pdm"}
    assert report["pdm"]["loss_curve"]


def test_cmd_train_deterministic(tmp_path, trained_out):
    _, _, base_cfg = trained_out
    first = json.loads((Path(base_cfg["output_dir"]) / "reports" / "training_report.json").read_text())
    cfg = dict(base_cfg)
    cfg["output_dir"] = str(tmp_path / "redo")
    path = write_config(tmp_path, cfg)
    assert main(["train", "--config", path]) == 0
    second = json.loads((Path(cfg["output_dir"]) / "reports" / "training_report.json").read_text())
    for model in ("autoencoder", "latent", "pdm"):
        assert first[model]["parameter_hash"] == second[model]["parameter_hash"]


def test_cmd_attack_outputs_and_invariants(trained_out):
    out, path, cfg = trained_out
    assert main(["attack", "--config", path]) == 0
    exp = Path(cfg["output_dir"])
    for budget in (4, 16):
        adv_dir = exp / "attack" / "semantic_latent" / f"delta_{budget}_255"
        images = sorted(adv_dir.glob("*.ppm"))
        assert len(images) == cfg["evaluation"]["eval_count"]
        sidecar = json.loads((adv_dir / "attack_results.json").read_text())
        assert all(l <= budget / 255 + 1e-9 for l in sidecar["linf"])
        assert len(sidecar["loss_trajectories"][0]) == cfg["attack"]["iterations"]


def test_cmd_attack_zero_budget_outputs_inputs(trained_out, tmp_path):
    out, _, base_cfg = trained_out
    cfg = dict(base_cfg)
    cfg["output_dir"] = str(tmp_path / "zb")
    cfg["attack"] = {"budgets_255": [0], "iterations": 2}
    cfg["models"] = dict(base_cfg["models"])
    for name in ("autoencoder", "latent", "pdm"):
        section = dict(base_cfg["models"][name])
        section["checkpoint"] = str(Path(base_cfg["output_dir"]) / "checkpoints" / f"{name}.ckpt")
        cfg["models"][name] = section
    path = write_config(tmp_path, cfg)
    assert main(["attack", "--config", path]) == 0
    exp = Experiment(load_config(path, []))
    originals = exp.eval_images()
    adv_dir = Path(cfg["output_dir"]) / "attack" / "semantic_latent" / "delta_0_255"
    loaded = np.stack([load_image(p) for p in sorted(adv_dir.glob("*.ppm"))])
    quantized = np.rint(np.clip(originals, 0, 1) * 255) / 255
    assert np.array_equal(loaded, quantized)  # byte-identical to saved inputs


def test_cmd_edit_and_purify_and_evaluate(trained_out, tmp_path):
    out, path, cfg = trained_out
    assert main(["edit", "--config", path]) == 0
    exp = Path(cfg["output_dir"])
    edited = sorted((exp / "edit" / "ldm").glob("*.ppm"))
    assert len(edited) == cfg["evaluation"]["eval_count"]
    assert main(["purify", "--config", path]) == 0
    purified = sorted((exp / "purify" / "crop_resize").glob("*.ppm"))
    assert len(purified) == cfg["evaluation"]["eval_count"]
    # evaluate clean-vs-clean: FID ~ 0, SSIM = 1
    assert main(["evaluate", "--config", path]) == 0
    rows = (exp / "reports" / "evaluation.csv").read_text().splitlines()[1:]
    cells = {r.split(",")[3]: r.split(",") for r in rows}
    assert float(cells["fid"][4]) <= 1e-6
    assert float(cells["ssim"][4]) == pytest.approx(1.0, abs=1e-9)
    assert float(cells["fid"][6]) == pytest.approx(0.0, abs=1e-9)


def test_cmd_evaluate_rejects_undersized_sets(trained_out, tmp_path):
    _, _, base_cfg = trained_out
    cfg = json.loads(json.dumps(base_cfg))
    cfg["output_dir"] = str(tmp_path / "ev")
    for name in ("autoencoder", "latent", "pdm"):
        cfg["models"][name]["checkpoint"] = str(
            Path(base_cfg["output_dir"]) / "checkpoints" / f"{name}.ckpt"
        )
    cfg["evaluation"]["eval_count"] = 6  # below featurizer dim + 1
    path = write_config(tmp_path, cfg)
    assert main(["evaluate", "--config", path]) == 1


def test_cli_reports_missing_checkpoints(tmp_path):
    cfg = tiny_config(tmp_path / "fresh")
    path = write_config(tmp_path, cfg)
    assert main(["attack", "--config", path]) == 1


def test_cli_entry_point_runs():
    proc = subprocess.run(
        [sys.executable, "-m", "diffdesk.cli", "--version"],
        capture_output=True,
        text=True,
        cwd=Path(__file__).resolve().parents[1],
        env={"PYTHONPATH": "src", "PATH": "/usr/bin:/bin"},
    )
    assert proc.returncode == 0
    assert "diffdesk" in proc.stdout
