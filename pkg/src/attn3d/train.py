"""Training, evaluation, top-k prediction and the attention ablation.

Every random choice in a run is a pure function of ``(seed, epoch, ...)``:

    init       root.substream("init", <param name>)
    shuffle    root.substream("shuffle", epoch)
    augment    root.substream("augment", epoch).substream(clip index)
    dropout    root.substream("dropout", epoch, batch index)

so a run resumed from the epoch-k checkpoint replays epoch k+1 onwards bit
for bit, and two runs with the same seed see the same data order even when
their models differ.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import AugmentConfig, DatasetManifest, eval_clip, clip_to_tensor, load_batch, load_manifest, read_clip
from .errors import ConfigError, NumericError
from .layers import softmax, softmax_cross_entropy
from .model import Model, ModelConfig, build_model
from .optim import AdamState, Schedule, adam_step, lr_at
from .tensor import RNG_VERSION, Rng

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "split", "loss", "accuracy", "lr"]


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: Schedule = field(default_factory=Schedule)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    data: Optional[str] = None
    out: Optional[str] = None
    eval_test: bool = True
    eval_batch_size: int = 16
    keep_epoch_checkpoints: bool = True
    workers: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        model = ModelConfig.from_dict(d.pop("model", {}))
        schedule = Schedule.from_dict(d.pop("schedule", {}))
        augment = AugmentConfig.from_dict(d.pop("augment", {}))
        return cls(model=model, schedule=schedule, augment=augment, **d)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["model"] = self.model.to_dict()
        d["schedule"] = self.schedule.to_dict()
        d["augment"] = self.augment.to_dict()
        return d

    def check_geometry(self) -> None:
        m, a = self.model, self.augment
        if a.crop != m.height or a.crop != m.width:
            raise ConfigError(f"augment crop {a.crop} must equal model height/width {m.height}x{m.width}")
        if a.window != m.frames:
            raise ConfigError(f"augment window {a.window} must equal model frames {m.frames}")
        if m.in_channels != 3:
            raise ConfigError("clips are RGB; model in_channels must be 3")
        if a.resize_h < a.crop or a.resize_w < a.crop:
            raise ConfigError(f"resize {a.resize_h}x{a.resize_w} smaller than crop {a.crop}")
        m.stage_shapes()


@dataclass
class MetricsRow:
    epoch: int
    split: str
    loss: float
    accuracy: float
    lr: float

    def as_csv(self) -> list[str]:
        return [str(self.epoch), self.split, repr(float(self.loss)), repr(float(self.accuracy)),
                repr(float(self.lr))]


@dataclass
class Prediction:
    id: str
    gt: Optional[int]
    topk: list  # [(class index, probability)], probability descending

    def to_json(self) -> str:
        return json.dumps({"id": self.id, "gt": self.gt,
                           "topk": [{"class": c, "p": p} for c, p in self.topk]})


@dataclass
class TrainResult:
    out: Path
    rows: list
    best_val_accuracy: float
    best_epoch: int
    batch_hashes: list


def write_metrics(path, rows: Sequence[MetricsRow]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for row in rows:
            w.writerow(row.as_csv())
    tmp.replace(path)


def read_metrics(path) -> list[MetricsRow]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != METRICS_HEADER:
            raise ConfigError(f"{path}: unexpected metrics header {header}")
        return [MetricsRow(int(e), s, float(l), float(a), float(r)) for e, s, l, a, r in reader]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_run_checkpoint(path, model: Model, adam: Optional[AdamState], cfg: Optional[TrainConfig] = None,
                        epoch: int = 0, best: tuple = (-1.0, -1), classes: Optional[list] = None) -> None:
    meta = {
        "model": model.config.to_dict(),
        "train": cfg.to_dict() if cfg else None,
        "epoch": epoch,
        "best_val_accuracy": best[0],
        "best_epoch": best[1],
        "classes": classes,
        "rng": {"algorithm": "splitmix64-counter", "version": RNG_VERSION},
    }
    tensors = dict(model.params)
    if adam is not None:
        tensors.update(adam.to_tensors())
    save_checkpoint(path, meta, tensors)


def load_run_checkpoint(path) -> tuple[Model, Optional[AdamState], dict]:
    meta, tensors = load_checkpoint(path)
    cfg = ModelConfig.from_dict(meta["model"])
    params = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    model = Model(cfg, params)
    adam = AdamState.from_tensors(tensors) if "adam.t" in tensors else None
    return model, adam, meta


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def top_k(probs: np.ndarray, k: int) -> list[tuple[int, float]]:
    """Highest ``k`` probabilities; equal probabilities list the lower class index first."""
    if not 1 <= k <= probs.size:
        raise ConfigError(f"k must be in [1, {probs.size}], got {k}")
    order = np.lexsort((np.arange(probs.size), -probs))[:k]
    return [(int(c), float(probs[c])) for c in order]


def evaluate_model(model, manifest: DatasetManifest, split: str, augment: AugmentConfig,
                   batch_size: int = 16, k: int = 1, epoch: int = 0, lr: float = 0.0,
                   workers: int = 1) -> tuple[MetricsRow, list[Prediction]]:
    """Deterministic pass over ``split``: eval data path, eval forward mode.

    ``model`` only needs ``config.num_classes`` and ``forward(x, mode)``.
    """
    idx = manifest.indices(split)
    if not idx:
        raise ConfigError(f"split {split!r} is empty")
    if model.config.num_classes != manifest.num_classes:
        raise ConfigError(f"model has {model.config.num_classes} classes, dataset has {manifest.num_classes}")
    total_loss, correct = 0.0, 0
    preds = []
    for start in range(0, len(idx), batch_size):
        batch = load_batch(manifest, idx[start: start + batch_size], False, cfg=augment, workers=workers)
        logits = model.forward(batch.x, "eval")[0]
        loss, _ = softmax_cross_entropy(logits, batch.labels)
        total_loss += loss * len(batch.labels)
        correct += int((logits.argmax(axis=1) == batch.labels).sum())
        probs = softmax(logits)
        for i, clip_id in enumerate(batch.ids):
            preds.append(Prediction(clip_id, int(batch.labels[i]), top_k(probs[i], k)))
    row = MetricsRow(epoch, split, total_loss / len(idx), correct / len(idx), lr)
    return row, preds


def evaluate(checkpoint, data, split: str = "test", k: int = 1, batch_size: int = 16):
    model, _, meta = load_run_checkpoint(checkpoint)
    manifest = load_manifest(data)
    augment = _checkpoint_augment(meta)
    return evaluate_model(model, manifest, split, augment, batch_size, k, epoch=meta.get("epoch", 0))


def _checkpoint_augment(meta: dict) -> AugmentConfig:
    train = meta.get("train") or {}
    if "augment" in train:
        return AugmentConfig.from_dict(train["augment"])
    m = ModelConfig.from_dict(meta["model"])
    return AugmentConfig(resize_h=m.height, resize_w=m.width, crop=m.height, window=m.frames)


def predict_topk(checkpoint, clip_path, k: int = 5, gt: Optional[int] = None) -> Prediction:
    model, _, meta = load_run_checkpoint(checkpoint)
    if k > model.config.num_classes:
        raise ConfigError(f"k={k} exceeds number of classes {model.config.num_classes}")
    clip = eval_clip(read_clip(clip_path), _checkpoint_augment(meta))
    logits = model.forward(clip_to_tensor(clip)[None], "eval")[0]
    return Prediction(clip.id, gt, top_k(softmax(logits)[0], k))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _batch_hash(ids: Sequence[str]) -> str:
    return hashlib.sha256("\n".join(ids).encode()).hexdigest()[:16]


def _augment_for(cfg: TrainConfig, manifest: DatasetManifest) -> AugmentConfig:
    if cfg.augment.flip and not manifest.flip_invariant:
        log.warning("dataset has mirror-sensitive classes; horizontal flips disabled")
        return AugmentConfig(**{**cfg.augment.to_dict(), "flip": False})
    return cfg.augment


def _epoch_ckpt(out: Path, epoch: int) -> Path:
    return out / f"ckpt_epoch_{epoch:03d}.a3dc"


def train(cfg: TrainConfig, resume: Optional[str] = None, manifest: Optional[DatasetManifest] = None,
          stop_after: Optional[int] = None) -> TrainResult:
    """Run (or resume) training; writes metrics.csv, checkpoints and data_order.txt under ``cfg.out``.

    ``stop_after`` ends the run after that epoch without changing anything
    else, which is how an interrupted run is simulated.
    """
    cfg.check_geometry()
    if cfg.out is None:
        raise ConfigError("no output directory given")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = manifest or load_manifest(cfg.data)
    if manifest.num_classes != cfg.model.num_classes:
        raise ConfigError(f"model num_classes={cfg.model.num_classes} but dataset has {manifest.num_classes}")
    train_idx = manifest.indices("train")
    if not train_idx or not manifest.indices("val"):
        raise ConfigError("dataset needs non-empty train and val splits")
    eval_splits = ["train", "val"] + (["test"] if cfg.eval_test and manifest.indices("test") else [])
    augment = _augment_for(cfg, manifest)
    root = Rng(cfg.seed)
    metrics_path = out / "metrics.csv"
    order_path = out / "data_order.txt"

    if resume:
        model, adam, meta = load_run_checkpoint(resume)
        if model.config != cfg.model:
            raise ConfigError("checkpoint model config differs from the requested config")
        start = meta["epoch"] + 1
        best = (meta["best_val_accuracy"], meta["best_epoch"])
        rows = [r for r in read_metrics(metrics_path) if r.epoch < start]
        hashes = [line.split() for line in order_path.read_text().splitlines()] if order_path.exists() else []
        hashes = [h for h in hashes if int(h[0]) < start]
        log.info("resuming from %s at epoch %d", resume, start)
    else:
        model = build_model(cfg.model, root)
        adam = AdamState.zeros_like(model.params)
        rows = []
        for split in eval_splits:
            row, _ = evaluate_model(model, manifest, split, augment, cfg.eval_batch_size, epoch=0,
                                    lr=lr_at(cfg.schedule, 0), workers=cfg.workers)
            rows.append(row)
        best = (rows[1].accuracy, 0)
        hashes = []
        write_metrics(metrics_path, rows)
        save_run_checkpoint(out / "best.a3dc", model, adam, cfg, 0, best, manifest.classes)
        if cfg.keep_epoch_checkpoints:
            save_run_checkpoint(_epoch_ckpt(out, 0), model, adam, cfg, 0, best, manifest.classes)
        start = 1
        log.info("epoch 0: %s", _fmt(rows))

    last = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    for epoch in range(start, last + 1):
        lr = lr_at(cfg.schedule, epoch - 1)
        order = [train_idx[i] for i in root.substream("shuffle", epoch).permutation(len(train_idx))]
        aug_rng = root.substream("augment", epoch)
        total_loss, correct = 0.0, 0
        for b, s in enumerate(range(0, len(order), cfg.batch_size)):
            batch = load_batch(manifest, order[s: s + cfg.batch_size], True, aug_rng, augment, cfg.workers)
            hashes.append([str(epoch), str(b), _batch_hash(batch.ids)])
            loss, grads, logits = model.backward(batch.x, batch.labels, "train",
                                                 root.substream("dropout", epoch, b))
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch} batch {b}")
            adam_step(model.params, grads, adam, lr, cfg.schedule.weight_decay)
            total_loss += loss * len(batch.labels)
            correct += int((logits.argmax(axis=1) == batch.labels).sum())
        epoch_rows = [MetricsRow(epoch, "train", total_loss / len(order), correct / len(order), lr)]
        for split in eval_splits[1:]:
            row, _ = evaluate_model(model, manifest, split, augment, cfg.eval_batch_size, epoch=epoch,
                                    lr=lr, workers=cfg.workers)
            epoch_rows.append(row)
        rows.extend(epoch_rows)
        val_acc = epoch_rows[1].accuracy
        if val_acc > best[0]:
            best = (val_acc, epoch)
            save_run_checkpoint(out / "best.a3dc", model, adam, cfg, epoch, best, manifest.classes)
        write_metrics(metrics_path, rows)
        order_path.write_text("".join(" ".join(h) + "\n" for h in hashes))
        save_run_checkpoint(out / "last.a3dc", model, adam, cfg, epoch, best, manifest.classes)
        if cfg.keep_epoch_checkpoints:
            save_run_checkpoint(_epoch_ckpt(out, epoch), model, adam, cfg, epoch, best, manifest.classes)
        log.info("epoch %d: %s", epoch, _fmt(epoch_rows))

    return TrainResult(out, rows, best[0], best[1], hashes)


def _fmt(rows) -> str:
    return "  ".join(f"{r.split} loss={r.loss:.4f} acc={r.accuracy:.3f}" for r in rows)


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

def ablation(cfg: TrainConfig) -> dict:
    """Train with and without the attention gate (same seed, same data order) and compare."""
    if cfg.out is None:
        raise ConfigError("no output directory given")
    out = Path(cfg.out)
    manifest = load_manifest(cfg.data)
    results = {}
    for name, enabled in (("3D-CNN + attention", True), ("3D-CNN", False)):
        sub = TrainConfig.from_dict({**cfg.to_dict(), "out": str(out / ("attention" if enabled else "baseline")),
                                     "model": {**cfg.model.to_dict(), "attention_enabled": enabled}})
        res = train(sub, manifest=manifest)
        final = {r.split: r for r in res.rows if r.epoch == cfg.epochs}
        results[name] = {
            "attention_enabled": enabled,
            "best_val_accuracy": res.best_val_accuracy,
            "best_epoch": res.best_epoch,
            "final_val_accuracy": final["val"].accuracy,
            "final_test_accuracy": final["test"].accuracy if "test" in final else None,
            "metrics": str(res.out / "metrics.csv"),
            "_hashes": res.batch_hashes,
        }
    h_att, h_base = (results[n].pop("_hashes") for n in results)
    report = {
        "models": [{"model": n, **v} for n, v in results.items()],
        "data_order_identical": h_att == h_base,
        "seed": cfg.seed,
        "epochs": cfg.epochs,
    }
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    (out / "report.txt").write_text(format_report(report))
    return report


def format_report(report: dict) -> str:
    lines = [f"{'model':<22}{'best val':>10}{'final val':>11}{'final test':>12}"]
    for m in report["models"]:
        test = "-" if m["final_test_accuracy"] is None else f"{m['final_test_accuracy']:.3f}"
        lines.append(f"{m['model']:<22}{m['best_val_accuracy']:>10.3f}{m['final_val_accuracy']:>11.3f}{test:>12}")
    lines.append(f"data order identical: {report['data_order_identical']}")
    return "\n".join(lines) + "\n"

