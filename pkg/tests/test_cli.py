import json
import subprocess
import sys

import pytest

from attn3d import cli
from attn3d.data import load_manifest

TINY_FLAGS = ["--epochs", "1", "--batch-size", "6", "--seed", "3", "--conv-channels", "4", "--hidden-width", "8"]


@pytest.fixture(scope="module")
def gen(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    code = cli.main(["gen-data", "--classes", "4", "--clips-per-class", "5", "--frames", "20", "--size", "32",
                     "--seed", "7", "--out", str(out)])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def trained(gen, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    code = cli.main(["train", "--data", str(gen), "--config", "tiny", "--out", str(out), *TINY_FLAGS])
    assert code == 0
    return out


def test_gen_data_writes_manifest(gen):
    m = load_manifest(gen)
    assert len(m.records) == 20 and m.num_classes == 4
    assert all(m.path(i).is_file() for i in range(20))


def test_train_prints_resolved_config(gen, tmp_path, capsys):
    assert cli.main(["train", "--data", str(gen), "--config", "tiny", "--out", str(tmp_path), *TINY_FLAGS,
                     "--lr", "0.002"]) == 0
    out = capsys.readouterr().out
    line = next(l for l in out.splitlines() if "resolved config" in l)
    resolved = json.loads(line.split("resolved config: ", 1)[1])
    assert resolved["schedule"]["initial_lr"] == 0.002  # flag wins
    assert resolved["schedule"]["decay_period_epochs"] == 10  # from tiny.json
    assert resolved["model"]["conv_out_channels"] == 4
    assert "[train] seed: 3" in out
    assert (tmp_path / "metrics.csv").is_file()


def test_eval_and_predictions(gen, trained, tmp_path, capsys):
    preds = tmp_path / "p.jsonl"
    assert cli.main(["eval", "--checkpoint", str(trained / "best.a3dc"), "--data", str(gen), "--split", "val",
                     "--topk", "2", "--predictions", str(preds)]) == 0
    out = capsys.readouterr().out
    assert "epoch,split,loss,accuracy,lr" in out
    records = [json.loads(l) for l in preds.read_text().splitlines()]
    assert len(records) == 4 and all(len(r["topk"]) == 2 for r in records)


def test_predict(gen, trained, capsys):
    clip = next((gen / "clips").iterdir())
    assert cli.main(["predict", "--checkpoint", str(trained / "last.a3dc"), "--clip", str(clip), "--k", "4",
                     "--gt", "1"]) == 0
    rec = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert rec["gt"] == 1 and abs(sum(t["p"] for t in rec["topk"]) - 1) < 1e-6


def test_gradcheck_single_layer(capsys):
    assert cli.main(["gradcheck", "--layer", "dense", "--layer", "relu"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 2


def test_ablation_command(gen, tmp_path, capsys):
    assert cli.main(["ablation", "--data", str(gen), "--config", "tiny", "--out", str(tmp_path), *TINY_FLAGS]) == 0
    assert "3D-CNN + attention" in capsys.readouterr().out
    assert json.loads((tmp_path / "report.json").read_text())["data_order_identical"]


@pytest.mark.parametrize("argv", [
    ["train", "--epochs", "abc"],
    ["frobnicate"],
    [],
    ["gradcheck"],
    ["gen-data", "--classes", "4"],
])
def test_malformed_flags_exit_1(argv, capsys):
    assert cli.main(argv) == 1
    assert "error" in capsys.readouterr().err


def test_validation_errors_exit_1(gen, tmp_path):
    assert cli.main(["gen-data", "--classes", "9", "--clips-per-class", "1", "--out", str(tmp_path)]) == 1
    assert cli.main(["train", "--data", str(gen), "--config", "no-such-config", "--out", str(tmp_path)]) == 1
    assert cli.main(["train", "--data", str(gen), "--config", "tiny", "--out", str(tmp_path), "--epochs", "0"]) == 1
    assert cli.main(["gradcheck", "--layer", "conv4d"]) == 1


def test_runtime_errors_exit_2(gen, tmp_path):
    assert cli.main(["predict", "--checkpoint", str(tmp_path / "missing.a3dc"), "--clip", "x.vclp"]) == 2
    assert cli.main(["train", "--data", str(tmp_path / "nowhere"), "--config", "tiny", "--out", str(tmp_path)]) == 2


def test_help_lists_reference_values(capsys, monkeypatch):
    monkeypatch.setenv("COLUMNS", "250")
    assert cli.main(["train", "--help"]) == 0
    out = capsys.readouterr().out
    assert "(reference: 1e-4)" in out and "(reference: 0.25)" in out


def test_shipped_configs_load():
    assert cli.shipped_config_names() == ["paper", "tiny"]
    paper = cli.load_config_file("paper")
    assert paper["schedule"] == {"initial_lr": 1e-4, "decay_period_epochs": 4, "decay_factor": 0.1,
                                 "weight_decay": 1e-4}
    assert paper["epochs"] == 50 and paper["model"]["conv_out_channels"] == 64


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "attn3d", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "gen-data" in r.stdout
