import json
import os

import numpy as np
import pytest

from fmwiss import cli
from fmwiss.config import apply_overrides, load_run_config, parse_run_config
from fmwiss.errors import ConfigError


def toy_config(tmp_path, **overrides):
    cfg = {
        "seed": 5,
        "output_dir": str(tmp_path / "out"),
        "protocol": "overlap",
        "taxonomy": {"base": [1, 2], "increments": [[3]], "names": {"3": "triangle"}},
        "dataset": {"kind": "synthetic", "base_images": 10, "step_images": 8, "val_images": 6,
                    "image_size": 32, "grid": 8},
        "backends": {"vlp": "synthetic", "ssl": "synthetic"},
        "coseg": {"fusion": "union"},
        "train": {"epochs": 2, "warmup_epochs": 1, "lr": 0.05, "batch": 4, "channels": [6, 8],
                  "bank_capacity": 4},
    }
    cfg.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path, cfg


def test_config_validation_messages(tmp_path):
    path, raw = toy_config(tmp_path)
    cfg = load_run_config(str(path))
    assert cfg.seed == 5
    assert cfg.train.epochs == 2

    bad = dict(raw)
    bad.pop("seed")
    p2 = tmp_path / "bad.json"
    p2.write_text(json.dumps(bad))
    with pytest.raises(ConfigError):
        load_run_config(str(p2))

    with pytest.raises(ConfigError):
        parse_run_config(dict(raw, protocol="sideways"))
    with pytest.raises(ConfigError):
        parse_run_config(dict(raw, train=dict(raw["train"], epochs=1)))  # < warmup
    with pytest.raises(ConfigError):
        parse_run_config(dict(raw, train=dict(raw["train"], alpha=1.5)))
    with pytest.raises(ConfigError):
        parse_run_config(dict(raw, taxonomy={"base": [1], "increments": [[1]]}))
    with pytest.raises(ConfigError):
        parse_run_config(dict(raw, dataset={"kind": "dir", "path": str(tmp_path / "nowhere")}))
    with pytest.raises(ConfigError):
        parse_run_config(dict(raw, backends={"vlp": "carrier-pigeon:coop"}))


def test_dotted_overrides():
    raw = {"train": {"lr": 0.1}, "seed": 1}
    out = apply_overrides(raw, [("train.lr", "0.5"), ("coseg.fusion", "none"), ("seed", "9")])
    assert out["train"]["lr"] == 0.5
    assert out["coseg"]["fusion"] == "none"
    assert out["seed"] == 9
    assert raw["train"]["lr"] == 0.1  # original untouched


def test_cli_override_tokens(tmp_path):
    path, _ = toy_config(tmp_path)
    rc = cli.main(["coseg", "--config", str(path), "--train.epochs", "not-even-json-number-ok"])
    # string override lands in TrainConfig and fails validation -> exit 1
    assert rc == 1
    assert cli.main(["coseg", "--config", str(path), "--dangling"]) == 1


def test_full_pipeline_and_idempotence(tmp_path, capsys):
    path, raw = toy_config(tmp_path)
    out = raw["output_dir"]

    assert cli.main(["coseg", "--config", str(path)]) == 0
    maskdir = os.path.join(out, "masks", "step1")
    masks = [f for f in os.listdir(maskdir) if f.endswith(".fmwm")]
    assert len(masks) == 8
    assert os.path.isfile(os.path.join(maskdir, "manifest.json"))
    first = capsys.readouterr().out
    assert "8 written, 0 skipped" in first

    # rerun without --force rewrites nothing
    assert cli.main(["coseg", "--config", str(path)]) == 0
    assert "0 written, 8 skipped" in capsys.readouterr().out

    stamp = {f: os.path.getmtime(os.path.join(maskdir, f)) for f in masks}
    assert cli.main(["coseg", "--config", str(path), "--force"]) == 0
    assert "8 written, 0 skipped" in capsys.readouterr().out

    assert cli.main(["train-base", "--config", str(path)]) == 0
    assert os.path.isfile(os.path.join(out, "base", "student.fmws"))
    assert os.path.isfile(os.path.join(out, "base", "bank.fmwb"))
    with open(os.path.join(out, "base", "metrics.jsonl")) as fh:
        records = [json.loads(line) for line in fh]
    assert len(records) == 2
    assert set(records[0]) == {"epoch", "l_new", "l_dcl", "l_old", "l_all", "total"}

    assert cli.main(["train-step", "--config", str(path), "--step", "1"]) == 0
    assert os.path.isfile(os.path.join(out, "step1", "student.fmws"))
    assert os.path.isfile(os.path.join(out, "step1", "teacher.fmwt"))

    capsys.readouterr()
    ckpt = os.path.join(out, "step1", "student.fmws")
    assert cli.main(["eval", "--config", str(path), "--checkpoint", ckpt]) == 0
    printed = capsys.readouterr().out
    assert "base" in printed and "new" in printed
    reports = os.listdir(os.path.join(out, "eval"))
    assert any(f.endswith(".json") for f in reports)
    assert any(f.endswith(".txt") for f in reports)
    rpt = json.load(open(os.path.join(out, "eval", sorted(f for f in reports if f.endswith(".json"))[0])))
    assert set(rpt) == {"all", "base", "new"}

    capsys.readouterr()
    assert cli.main(["bank-inspect", "--bank", os.path.join(out, "base", "bank.fmwb")]) == 0
    assert "crops" in capsys.readouterr().out


def test_exit_codes_for_missing_prerequisites(tmp_path, capsys):
    path, raw = toy_config(tmp_path)
    # train-step before train-base -> 3 with the missing path named
    rc = cli.main(["train-step", "--config", str(path), "--step", "1"])
    assert rc == 3
    err = capsys.readouterr().err
    assert "student.fmws" in err

    # eval without checkpoint -> 3
    assert cli.main(["eval", "--config", str(path), "--checkpoint", str(tmp_path / "nope.fmws")]) == 3

    # bad config -> 1
    p2 = tmp_path / "broken.json"
    p2.write_text("{not json")
    assert cli.main(["coseg", "--config", str(p2)]) == 1

    # unreachable http backend -> 2, endpoint named
    path3, _ = toy_config(tmp_path, backends={"vlp": "http://127.0.0.1:9", "ssl": "http://127.0.0.1:9"},
                          dataset={"kind": "synthetic", "base_images": 4, "step_images": 2,
                                   "val_images": 2, "image_size": 32, "grid": 8})
    rc = cli.main(["coseg", "--config", str(path3)])
    assert rc == 2
    assert "127.0.0.1:9" in capsys.readouterr().err


def test_train_step_requires_masks(tmp_path, capsys):
    path, raw = toy_config(tmp_path)
    assert cli.main(["train-base", "--config", str(path)]) == 0
    rc = cli.main(["train-step", "--config", str(path), "--step", "1"])
    assert rc == 3
    assert "coseg" in capsys.readouterr().err


def test_synthetic_backend_requires_synthetic_dataset(tmp_path):
    datadir = tmp_path / "data"
    datadir.mkdir()
    path, _ = toy_config(tmp_path, dataset={"kind": "dir", "path": str(datadir)})
    assert cli.main(["coseg", "--config", str(path)]) == 1
