import json
import logging
import math
from types import SimpleNamespace

import numpy as np
import pytest

from attn3d import data as D
from attn3d import train as T
from attn3d.checkpoint import load_checkpoint
from attn3d.errors import ConfigError, NumericError
from attn3d.model import Model, ModelConfig, build_model
from attn3d.tensor import Rng

MODEL = {"frames": 16, "height": 16, "width": 16, "conv_out_channels": 4, "global_pool": True,
         "hidden_width": 8, "num_classes": 4}
AUGMENT = {"resize_h": 18, "resize_w": 20, "crop": 16, "window": 16}


def _cfg(small_dataset, out, **over):
    d = {"epochs": 2, "batch_size": 6, "seed": 3, "data": str(small_dataset.root), "out": str(out),
         "model": MODEL, "augment": AUGMENT, "schedule": {"initial_lr": 3e-3}}
    d.update(over)
    return T.TrainConfig.from_dict(d)


@pytest.fixture(scope="module")
def three_epoch_run(small_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return T.train(_cfg(small_dataset, out, epochs=3))


def test_config_defaults_and_validation():
    cfg = T.TrainConfig()
    assert cfg.epochs == 50 and cfg.schedule.initial_lr == 1e-4 and cfg.model.dropout_rate == 0.25
    with pytest.raises(ConfigError):
        T.TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        T.TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        T.TrainConfig.from_dict({"epoch": 3})


def test_geometry_mismatch_rejected(small_dataset, tmp_path):
    cfg = _cfg(small_dataset, tmp_path, augment={**AUGMENT, "crop": 14})
    with pytest.raises(ConfigError, match="crop"):
        T.train(cfg)


def test_class_count_mismatch_rejected(small_dataset, tmp_path):
    cfg = _cfg(small_dataset, tmp_path, model={**MODEL, "num_classes": 5})
    with pytest.raises(ConfigError):
        T.train(cfg)


def test_metrics_file_layout(three_epoch_run):
    lines = (three_epoch_run.out / "metrics.csv").read_text().splitlines()
    assert lines[0] == "epoch,split,loss,accuracy,lr"
    rows = T.read_metrics(three_epoch_run.out / "metrics.csv")
    assert [(r.epoch, r.split) for r in rows] == [(e, s) for e in range(4) for s in ("train", "val", "test")]
    assert all(0 <= r.accuracy <= 1 for r in rows)
    for name in ["best.a3dc", "last.a3dc", "data_order.txt"] + [f"ckpt_epoch_{e:03d}.a3dc" for e in range(4)]:
        assert (three_epoch_run.out / name).is_file()


def test_fresh_model_is_near_chance(three_epoch_run):
    rows = [r for r in three_epoch_run.rows if r.epoch == 0]
    for r in rows:
        assert abs(r.loss - math.log(4)) < 0.5
    val = next(r for r in rows if r.split == "val")
    n = 8
    assert abs(val.accuracy - 0.25) <= 4 * math.sqrt(0.25 * 0.75 / n)


def _same_checkpoint(a, b):
    meta_a, ta = load_checkpoint(a)
    meta_b, tb = load_checkpoint(b)
    meta_a["train"].pop("out")
    meta_b["train"].pop("out")
    assert meta_a == meta_b
    assert list(ta) == list(tb) and all(ta[k].tobytes() == tb[k].tobytes() for k in ta)


def test_two_runs_byte_identical(three_epoch_run, small_dataset, tmp_path):
    again = T.train(_cfg(small_dataset, tmp_path, epochs=3))
    for name in ("metrics.csv", "data_order.txt"):
        assert (again.out / name).read_bytes() == (three_epoch_run.out / name).read_bytes()
    _same_checkpoint(again.out / "last.a3dc", three_epoch_run.out / "last.a3dc")


def test_resume_matches_uninterrupted(three_epoch_run, small_dataset, tmp_path):
    cfg = _cfg(small_dataset, tmp_path, epochs=3)
    T.train(cfg, stop_after=1)
    T.train(cfg, resume=str(tmp_path / "ckpt_epoch_001.a3dc"))
    for name in ("metrics.csv", "data_order.txt"):
        assert (tmp_path / name).read_bytes() == (three_epoch_run.out / name).read_bytes()
    for name in ("last.a3dc", "best.a3dc"):
        _same_checkpoint(tmp_path / name, three_epoch_run.out / name)


def test_checkpoint_round_trip_evaluation(small_dataset, tmp_path):
    model = build_model(ModelConfig.from_dict(MODEL), Rng(1))
    cfg = _cfg(small_dataset, tmp_path)
    T.save_run_checkpoint(tmp_path / "m.a3dc", model, None, cfg)
    aug = D.AugmentConfig.from_dict(AUGMENT)
    row_mem, preds_mem = T.evaluate_model(model, small_dataset, "val", aug, k=2)
    row_disk, preds_disk = T.evaluate(tmp_path / "m.a3dc", small_dataset.root, "val", k=2)
    assert row_mem == row_disk and preds_mem == preds_disk
    assert T.evaluate(tmp_path / "m.a3dc", small_dataset.root, "val", k=2)[0] == row_disk


def test_best_checkpoint_tracks_best_val(three_epoch_run):
    _, _, meta = T.load_run_checkpoint(three_epoch_run.out / "best.a3dc")
    vals = {r.epoch: r.accuracy for r in three_epoch_run.rows if r.split == "val"}
    assert meta["best_val_accuracy"] == max(vals.values())
    assert meta["best_epoch"] == min(e for e, a in vals.items() if a == max(vals.values()))


def test_flips_disabled_for_mirror_sensitive_classes(small_dataset, tmp_path, caplog):
    with caplog.at_level(logging.WARNING):
        T.train(_cfg(small_dataset, tmp_path, epochs=1, keep_epoch_checkpoints=False))
    assert "flips disabled" in caplog.text


def test_non_finite_loss_aborts(small_dataset, tmp_path, monkeypatch):
    def nan_backward(self, x, labels, mode="train", rng=None):
        return float("nan"), {}, np.zeros((len(labels), 4), np.float32)
    monkeypatch.setattr(Model, "backward", nan_backward)
    with pytest.raises(NumericError, match="epoch 1 batch 0"):
        T.train(_cfg(small_dataset, tmp_path, epochs=1))


# --- evaluation with stub models ------------------------------------------

def _label_manifest(root, k, per_class=1):
    """Constant clips whose pixel value encodes the label."""
    records = []
    for c in range(k):
        for j in range(per_class):
            frames = np.full((4, 4, 4, 3), c % 256, np.uint8)
            D.write_clip(root / f"{c}_{j}.vclp", frames)
            records.append(D.ClipRecord(f"{c}_{j}", f"{c}_{j}.vclp", c, 4, "val"))
    return D.DatasetManifest(root, records)


class _Stub:
    def __init__(self, k, fn):
        self.config = SimpleNamespace(num_classes=k)
        self.fn = fn

    def forward(self, x, mode="eval"):
        return self.fn(x), None


AUG4 = D.AugmentConfig(resize_h=4, resize_w=4, crop=4, window=4)


def test_oracle_stub_scores_one(tmp_path):
    m = _label_manifest(tmp_path, 6, per_class=2)

    def oracle(x):
        labels = np.rint(x[:, 0, 0, 0, 0] * 255).astype(int)
        return np.eye(6, dtype=np.float32)[labels] * 10
    row, preds = T.evaluate_model(_Stub(6, oracle), m, "val", AUG4)
    assert row.accuracy == 1.0
    assert all(p.topk[0][0] == p.gt for p in preds)


def test_uniform_stub_loss_is_log_k(tmp_path):
    m = _label_manifest(tmp_path, 101)
    stub = _Stub(101, lambda x: np.zeros((x.shape[0], 101), np.float32))
    row, _ = T.evaluate_model(stub, m, "val", AUG4)
    assert abs(row.loss - 4.61512) < 1e-3
    assert row == T.evaluate_model(stub, m, "val", AUG4)[0]


def test_evaluate_class_count_mismatch(tmp_path):
    m = _label_manifest(tmp_path, 3)
    with pytest.raises(ConfigError):
        T.evaluate_model(_Stub(4, lambda x: np.zeros((x.shape[0], 4))), m, "val", AUG4)


def test_evaluate_empty_split(tmp_path):
    m = _label_manifest(tmp_path, 3)
    with pytest.raises(ConfigError):
        T.evaluate_model(_Stub(3, lambda x: np.zeros((x.shape[0], 3))), m, "test", AUG4)


# --- top-k and prediction -------------------------------------------------

def test_top_k_tie_break_lower_class_first():
    assert T.top_k(np.array([0.25, 0.25, 0.5]), 3) == [(2, 0.5), (0, 0.25), (1, 0.25)]
    with pytest.raises(ConfigError):
        T.top_k(np.array([0.5, 0.5]), 3)


def test_predict_full_distribution_sums_to_one(small_dataset, tmp_path):
    model = build_model(ModelConfig.from_dict(MODEL), Rng(2))
    T.save_run_checkpoint(tmp_path / "m.a3dc", model, None, _cfg(small_dataset, tmp_path))
    pred = T.predict_topk(tmp_path / "m.a3dc", small_dataset.path(0), k=4, gt=0)
    probs = [p for _, p in pred.topk]
    assert abs(sum(probs) - 1) < 1e-6 and probs == sorted(probs, reverse=True)
    assert all(0 < p < 1 for p in probs)
    rec = json.loads(pred.to_json())
    assert rec["gt"] == 0 and len(rec["topk"]) == 4 and set(rec["topk"][0]) == {"class", "p"}
    with pytest.raises(ConfigError):
        T.predict_topk(tmp_path / "m.a3dc", small_dataset.path(0), k=5)


# --- ablation -------------------------------------------------------------

def test_ablation_report(small_dataset, tmp_path):
    report = T.ablation(_cfg(small_dataset, tmp_path, epochs=1, keep_epoch_checkpoints=False))
    assert [m["model"] for m in report["models"]] == ["3D-CNN + attention", "3D-CNN"]
    assert report["data_order_identical"]
    assert (tmp_path / "attention" / "data_order.txt").read_bytes() == \
        (tmp_path / "baseline" / "data_order.txt").read_bytes()
    assert json.loads((tmp_path / "report.json").read_text()) == report
    assert "data order identical: True" in (tmp_path / "report.txt").read_text()
