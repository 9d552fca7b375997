import json

import pytest
import yaml

from a3dseg.cli import run_command
from a3dseg.config import ExperimentConfig, parse_override, resolve
from a3dseg.errors import ConfigError

SMALL = {
    "data": {"n_low": 2, "n_high": 2, "n_test": 1,
             "phantom": {"volume_shape": [16, 32, 32], "n_vertebrae": 2, "seed": 3}},
    "net": {"image_size": [32, 32], "base_channels": 8, "content_channels": 16, "artifact_channels": 4,
            "seg_channels": 4},
    "train2d": {"epochs": 1, "steps_per_epoch": 1, "batch_size": 2},
    "train3d": {"patch_shape": [8, 32, 32], "iterations": 1, "seg_channels": 2},
}


@pytest.fixture
def workspace(tmp_path, monkeypatch):
    monkeypatch.setenv("A3DSEG_OUT", str(tmp_path / "out"))
    cfg = tmp_path / "small.yaml"
    cfg.write_text(yaml.safe_dump(SMALL))
    return tmp_path, str(cfg)


# -- config --------------------------------------------------------------------

def test_defaults_are_preloaded():
    cfg = resolve()
    assert cfg.train2d.epochs == 15 and cfg.train2d.lr == 1e-4 and cfg.train2d.batch_size == 1
    assert cfg.train2d.weights.w_adv == 1 and cfg.train2d.weights.w_anat == 5
    assert cfg.train3d.downsample_spacing_mm == (1.0, 1.0, 1.0)


def test_precedence_flags_over_file_over_defaults(tmp_path):
    f = tmp_path / "c.yaml"
    f.write_text(yaml.safe_dump({"train2d": {"epochs": 3, "lr": 0.01}}))
    cfg = resolve(f, [parse_override("train2d.epochs=7")])
    assert cfg.train2d.epochs == 7 and cfg.train2d.lr == 0.01 and cfg.train2d.batch_size == 1


@pytest.mark.parametrize("doc", [{"trian2d": {}}, {"train2d": {"epoch": 3}}, {"net": {"aade": {"eps2": 1}}},
                                 {"train2d": {"weights": {"w_foo": 1}}}, {"eval": {"mode": "4d"}}, [1, 2]])
def test_strict_parsing(tmp_path, doc):
    f = tmp_path / "c.yaml"
    f.write_text(yaml.safe_dump(doc))
    with pytest.raises(ConfigError):
        resolve(f)


def test_resolved_config_round_trips(tmp_path):
    cfg = resolve(None, [SMALL])
    f = tmp_path / "r.yaml"
    f.write_text(yaml.safe_dump(cfg.to_dict()))
    assert resolve(f).to_dict() == cfg.to_dict()
    assert isinstance(cfg, ExperimentConfig)


# -- commands --------------------------------------------------------------------

def test_help_exits_zero(capsys):
    assert run_command(["--help"]) == 0
    assert "gen-data" in capsys.readouterr().out


def test_unknown_subcommand_is_config_error():
    assert run_command(["frobnicate"]) == 2


def test_evaluate_before_training_fails(workspace, capsys):
    tmp, cfg = workspace
    assert run_command(["gen-data", "--config", cfg]) == 0
    assert (tmp / "out" / "data" / "manifest.json").exists()
    assert (tmp / "out" / "data" / "config.yaml").exists()
    rc = run_command(["evaluate", "--config", cfg, "--checkpoint", str(tmp / "out" / "train2d" / "M4" / "x.npz")])
    assert rc == 1
    assert "missing checkpoint" in capsys.readouterr().err


def test_bad_config_exit_code(workspace, capsys):
    _, cfg = workspace
    assert run_command(["gen-data", "--config", cfg, "--set", "data.phantom.volume_shape=[4,4,4]"]) == 2
    assert "error [config]" in capsys.readouterr().err


def test_pipeline_end_to_end(workspace, capsys):
    tmp, cfg = workspace
    out = tmp / "out"
    assert run_command(["gen-data", "--config", cfg]) == 0
    assert run_command(["train-2d", "--config", cfg, "--ablation", "M3"]) == 0
    ck = out / "train2d" / "M3" / "epoch_001.npz"
    resolved = yaml.safe_load((ck.parent / "config.yaml").read_text())
    assert resolved["train2d"]["ablation"] == "M3" and resolved["data"]["out_dir"] == str(out / "data")
    # append-only: a second run into the same directory is refused
    assert run_command(["train-2d", "--config", cfg, "--ablation", "M3"]) == 2
    assert run_command(["train-3d", "--config", cfg, "--translator", str(ck)]) == 0
    ck3 = out / "train3d" / "iter_000001.npz"
    assert ck3.exists()
    assert run_command(["evaluate", "--config", cfg, "--checkpoint", str(ck), "--which", "y_lh",
                        "--json", str(tmp / "e.json")]) == 0
    assert json.loads((tmp / "e.json").read_text())["which"] == "y_lh"
    assert run_command(["evaluate", "--config", cfg, "--checkpoint", str(ck3), "--mode", "3d"]) == 0
    vol = next((out / "data" / "volumes").glob("test_low_*.f32"))
    assert run_command(["translate", "--checkpoint", str(ck), "--input", str(vol),
                        "--output", str(tmp / "t")]) == 0
    assert (tmp / "t.f32").exists()
    assert run_command(["report", str(ck.parent), str(ck3.parent), "--output", str(tmp / "rep")]) == 0
    assert (tmp / "rep" / "M3_losses.png").stat().st_size > 0
    assert (tmp / "rep" / "train3d_losses.png").exists()


def test_ablate_table_layout(workspace, capsys):
    tmp, cfg = workspace
    assert run_command(["gen-data", "--config", cfg]) == 0
    capsys.readouterr()
    assert run_command(["ablate", "--config", cfg]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    header, rows = lines[0], lines[1:]
    assert [r.split()[0] for r in rows] == ["M1", "M2", "M3", "M4"]
    assert header.split()[1:] == ["m_l", "y_l", "y_ll", "y_lh", "m_h", "y_h", "y_hh", "y_hl"]
    for r in rows:
        cells = r.split()[1:]
        assert len(cells) == 8 and all(c.count("/") == 1 for c in cells)
    # attention-map heads do not exist without the shape path
    assert rows[0].split()[1] == "n.a./n.a." and rows[1].split()[5] == "n.a./n.a."
    assert rows[3].split()[1] != "n.a./n.a."
    doc = json.loads((tmp / "out" / "ablate" / "results.json").read_text())
    assert list(doc) == ["M1", "M2", "M3", "M4"]
    assert run_command(["report", str(tmp / "out" / "ablate"), "--output", str(tmp / "rep")]) == 0
