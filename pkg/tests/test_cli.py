import json

import numpy as np
import pytest

from rl4seg import cli, synth
from rl4seg.pgm import write_pgm
from rl4seg.ppo import NonFiniteLoss


@pytest.fixture
def workdir(tmp_path, tiny_config_file):
    data = tmp_path / "data"
    assert cli.main(["generate", "--config", str(tiny_config_file), "--out", str(data)]) == 0
    pre = tmp_path / "pre"
    assert cli.main(["pretrain", "--config", str(tiny_config_file), "--data", str(data), "--out", str(pre)]) == 0
    return tmp_path, tiny_config_file, data, pre


def test_generate_pretrain_adapt_report(workdir, capsys):
    root, cfg, data, pre = workdir
    assert (pre / "policy_ref.ckpt").is_file()
    run = root / "run"
    code = cli.main(["adapt", "--config", str(cfg), "--data", str(data),
                     "--pretrained", str(pre / "policy_ref.ckpt"), "--out", str(run)])
    assert code == 0
    manifest = json.loads((run / "manifest.json").read_text())
    assert len(manifest["iterations"]) == 3
    rep = root / "rep"
    assert cli.main(["report", "--run", str(run), "--out", str(rep)]) == 0
    assert (rep / "report.md").is_file() and (rep / "report.csv").is_file()
    assert cli.main(["evaluate", "--config", str(cfg), "--data", str(data), "--policy", str(run / "policy.ckpt")]) == 0
    assert cli.main(["calibrate", "--config", str(cfg), "--data", str(data), "--run", str(run)]) == 0
    out = capsys.readouterr().out
    assert '"ece"' in out and '"dice_avg"' in out


def test_missing_checkpoint_exits_2(workdir, capsys):
    root, cfg, data, _ = workdir
    code = cli.main(["adapt", "--config", str(cfg), "--data", str(data),
                     "--pretrained", str(root / "nope.ckpt"), "--out", str(root / "x")])
    assert code == cli.EXIT_INPUT
    assert "not found" in capsys.readouterr().err


def test_wrong_checkpoint_kind_exits_2(workdir, tmp_path):
    root, cfg, data, pre = workdir
    run = root / "run"
    assert cli.main(["adapt", "--config", str(cfg), "--data", str(data),
                     "--pretrained", str(pre / "policy_ref.ckpt"), "--out", str(run)]) == 0
    code = cli.main(["adapt", "--config", str(cfg), "--data", str(data),
                     "--pretrained", str(run / "reward.ckpt"), "--out", str(root / "y")])
    assert code == cli.EXIT_INPUT


def test_missing_config_exits_2(tmp_path):
    assert cli.main(["generate", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == cli.EXIT_INPUT


def test_zero_iterations_exits_2(tmp_path, tiny_config):
    tiny_config["iterations"] = 0
    p = tmp_path / "c.json"
    p.write_text(json.dumps(tiny_config))
    assert cli.main(["run", "--config", str(p), "--out", str(tmp_path / "o")]) == cli.EXIT_INPUT


def test_ablating_every_axis_exits_2(tmp_path, tiny_config_file):
    code = cli.main(["run", "--config", str(tiny_config_file), "--out", str(tmp_path / "o"),
                     "--ablate", "anatomical_correction,image_transforms,weight_perturbations"])
    assert code == cli.EXIT_INPUT


def test_report_on_empty_manifest_exits_2(tmp_path):
    (tmp_path / "manifest.json").write_text(json.dumps({"iterations": []}))
    assert cli.main(["report", "--run", str(tmp_path)]) == cli.EXIT_INPUT


def test_anatomy_check_valid_and_invalid(tmp_path, capsys):
    mask = synth.generate_scene(0, 0).mask
    write_pgm(tmp_path / "ok.pgm", mask, 255)
    assert cli.main(["anatomy", "check", str(tmp_path / "ok.pgm")]) == 0
    assert json.loads(capsys.readouterr().out)["valid"] is True
    broken = mask.copy()
    broken[0, 0] = 2
    write_pgm(tmp_path / "bad.pgm", broken, 255)
    assert cli.main(["anatomy", "check", str(tmp_path / "bad.pgm")]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["valid"] is False


def test_anatomy_check_rejects_bad_labels_and_files(tmp_path):
    write_pgm(tmp_path / "m.pgm", np.full((8, 8), 7), 255)
    assert cli.main(["anatomy", "check", str(tmp_path / "m.pgm")]) == cli.EXIT_INPUT
    (tmp_path / "junk.pgm").write_bytes(b"hello")
    assert cli.main(["anatomy", "check", str(tmp_path / "junk.pgm")]) == cli.EXIT_INPUT
    assert cli.main(["anatomy", "check", str(tmp_path / "none.pgm")]) == cli.EXIT_INPUT


def test_non_finite_loss_exits_3_with_diagnostics(tmp_path, tiny_config_file, monkeypatch):
    def boom(*a, **kw):
        raise NonFiniteLoss("clip_loss", 4)

    monkeypatch.setattr(cli.pipeline, "run_experiment", boom)
    out = tmp_path / "o"
    assert cli.main(["run", "--config", str(tiny_config_file), "--out", str(out)]) == cli.EXIT_NONFINITE
    diag = json.loads((out / "diagnostics.json").read_text())
    assert diag["what"] == "clip_loss" and diag["batch_index"] == 4
