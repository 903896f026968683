import subprocess
import sys

import pytest
import tomlkit

from mplab import config
from mplab.cli import main
from mplab.data import load_manifest, read_png

from .conftest import SMALL_HFN


def _write_cfg(path, data_root, **train):
    doc = {"train": {"iterations": 2, "log_interval": 1, "eval_interval": 0, **train},
           "hfn": dict(SMALL_HFN), "extractor": {"hidden_channels": 4},
           "data": {"root": str(data_root), "resolution": 32}}
    path.write_text(tomlkit.dumps(doc), encoding="utf-8")
    return path


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--out", str(root), "--domains", "3", "--per-class", "5", "--seed", "2",
                 "--resolution", "32"]) == 0
    return root


def test_gen_data_counts(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path), "--domains", "4", "--per-class", "50", "--seed", "7",
                 "--resolution", "16"]) == 0
    assert "wrote 400 images in 4 domains" in capsys.readouterr().out
    ds = load_manifest(tmp_path)
    assert len(ds) == 400
    assert sorted(p.name for p in tmp_path.iterdir() if p.is_dir()) == ["d0", "d1", "d2", "d3"]


def test_train_echoes_effective_config(tmp_path, dataset):
    cfg_path = _write_cfg(tmp_path / "run.toml", dataset)
    out = tmp_path / "out"
    assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == 0
    resolved = config.load(out / "config.resolved")
    assert resolved.train.inner_steps == 4 and resolved.train.lr == 0.001 and resolved.train.momentum == 0.9
    text = (out / "config.resolved").read_text()
    assert "inner_steps = 4" in text and "lr = 0.001" in text
    for name in ("history.csv", "history.png", "checkpoint.mpck"):
        assert (out / name).exists(), name
    assert len((out / "history.csv").read_text().splitlines()) == 3


def test_train_seed_flag_overrides_config(tmp_path, dataset):
    cfg_path = _write_cfg(tmp_path / "run.toml", dataset, seed=1)
    assert main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "o"), "--seed", "5"]) == 0
    assert config.load(tmp_path / "o" / "config.resolved").train.seed == 5


def test_eval_and_extract(tmp_path, dataset, capsys):
    cfg_path = _write_cfg(tmp_path / "run.toml", dataset, mode="meta")
    out = tmp_path / "out"
    assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == 0
    assert main(["eval", "--checkpoint", str(out / "checkpoint.mpck"), "--data", str(dataset)]) == 0
    report = (out / "report.csv").read_text().splitlines()
    assert report[0] == "fold,test_domain,auc,hter,far,frr,threshold" and len(report) == 5
    assert (out / "roc.png").exists()
    assert "threshold" in capsys.readouterr().out
    assert main(["eval", "--checkpoint", str(out / "checkpoint.mpck"), "--data", str(dataset),
                 "--protocol", "loo", "--out", str(tmp_path / "loo")]) == 0
    assert [r.split(",")[1] for r in (tmp_path / "loo" / "report.csv").read_text().splitlines()[1:4]] == \
        ["d0", "d1", "d2"]
    img = next((dataset / "d0").glob("*.png"))
    assert main(["extract", "--checkpoint", str(out / "checkpoint.mpck"), "--image", str(img),
                 "--out", str(tmp_path / "mp.png")]) == 0
    assert read_png(tmp_path / "mp.png").shape == (3, 32, 32)


def test_train_holds_out_test_domain(tmp_path, dataset):
    cfg_path = _write_cfg(tmp_path / "run.toml", dataset)
    doc = tomlkit.parse(cfg_path.read_text())
    doc["data"]["test_domain"] = "d2"
    cfg_path.write_text(tomlkit.dumps(doc))
    out = tmp_path / "out"
    assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == 0
    last = (out / "history.csv").read_text().splitlines()[-1].split(",")
    assert last[2] != ""  # held-out metrics on the final logged row


def test_gradcheck_exit_zero(capsys):
    assert main(["gradcheck", "--trials", "1", "--only", "conv2d", "hfm_fuse"]) == 0
    assert "all checks passed" in capsys.readouterr().out


def test_failures_exit_one(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[train]\nwarmup = 3\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert "unknown key" in capsys.readouterr().err
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.mpck"), "--data", str(tmp_path)]) == 1
    (tmp_path / "junk.mpck").write_bytes(b"JUNKJUNK")
    assert main(["extract", "--checkpoint", str(tmp_path / "junk.mpck"), "--image", "x.png",
                 "--out", str(tmp_path / "y.png")]) == 1
    assert "magic" in capsys.readouterr().err


def test_bad_thread_setting(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("MPLAB_THREADS", "lots")
    assert main(["gen-data", "--out", str(tmp_path), "--per-class", "1"]) == 1
    assert "MPLAB_THREADS" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [["frobnicate"], ["train", "--bogus"], []])
def test_usage_errors_exit_two(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2


def test_console_script_usage_error():
    proc = subprocess.run([sys.executable, "-m", "mplab.cli", "nope"], capture_output=True, text=True)
    assert proc.returncode == 2 and "usage" in proc.stderr
