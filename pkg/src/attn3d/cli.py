"""Command-line entry point: ``attn3d <subcommand> [flags]``.

Exit codes: 0 success, 1 validation error (bad flags, bad config, bad data),
2 runtime or numeric failure (I/O, non-finite loss, failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import Attn3dError, ConfigError

log = logging.getLogger("attn3d")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


CONFIG_DIR = Path(__file__).parent / "configs"


def shipped_config_names() -> list[str]:
    return sorted(p.stem for p in CONFIG_DIR.glob("*.json"))


def load_config_file(name_or_path: str) -> dict:
    """A path to a JSON file, or the name of a shipped config (``paper``, ``tiny``)."""
    path = Path(name_or_path)
    if path.is_file():
        return json.loads(path.read_text())
    stem = name_or_path[:-5] if name_or_path.endswith(".json") else name_or_path
    if stem in shipped_config_names():
        return json.loads((CONFIG_DIR / f"{stem}.json").read_text())
    raise ConfigError(f"config {name_or_path!r} is neither a file nor one of {shipped_config_names()}")


# flag dest -> (section, key) in the train config
_OVERRIDES = {
    "epochs": (None, "epochs"),
    "batch_size": (None, "batch_size"),
    "seed": (None, "seed"),
    "data": (None, "data"),
    "out": (None, "out"),
    "workers": (None, "workers"),
    "lr": ("schedule", "initial_lr"),
    "weight_decay": ("schedule", "weight_decay"),
    "lr_decay_period": ("schedule", "decay_period_epochs"),
    "lr_decay_factor": ("schedule", "decay_factor"),
    "conv_channels": ("model", "conv_out_channels"),
    "hidden_width": ("model", "hidden_width"),
    "dropout": ("model", "dropout_rate"),
    "attention": ("model", "attention_enabled"),
    "gate_parameterized": ("model", "attention_parameterized"),
    "global_pool": ("model", "global_pool"),
    "num_classes": ("model", "num_classes"),
    "flip": ("augment", "flip"),
}


def resolve_train_config(args) -> dict:
    cfg = load_config_file(args.config) if args.config else {}
    cfg = {k: (dict(v) if isinstance(v, dict) else v) for k, v in cfg.items()}
    for dest, (section, key) in _OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        if section is None:
            cfg[key] = value
        else:
            cfg.setdefault(section, {})[key] = value
    return cfg


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="dataset directory holding manifest.jsonl")
    p.add_argument("--config", help="JSON config file or shipped name (paper, tiny); flags override it")
    p.add_argument("--out", help="run output directory")
    p.add_argument("--epochs", type=int, help="training epochs (reference: 50)")
    p.add_argument("--batch-size", type=int, help="minibatch size (no reference value)")
    p.add_argument("--seed", type=int, help="root seed for init, shuffling, augmentation and dropout")
    p.add_argument("--lr", type=float, help="initial learning rate (reference: 1e-4)")
    p.add_argument("--weight-decay", type=float, help="decoupled weight decay (reference: 1e-4)")
    p.add_argument("--lr-decay-period", type=int,
                   help="epochs between learning-rate drops (reference: 4); 0 disables")
    p.add_argument("--lr-decay-factor", type=float, help="learning-rate multiplier per drop (default 0.1)")
    p.add_argument("--conv-channels", type=int, help="3D conv output channels (reference: 64)")
    p.add_argument("--hidden-width", type=int, help="width of the hidden dense layer (no reference value)")
    p.add_argument("--dropout", type=float, help="dropout rate after the hidden dense layer (reference: 0.25)")
    p.add_argument("--num-classes", type=int, help="number of classes K (reference: 101)")
    p.add_argument("--attention", action=argparse.BooleanOptionalAction, default=None,
                   help="sigmoid attention gate after the conv block (reference: on)")
    p.add_argument("--gate-parameterized", action=argparse.BooleanOptionalAction, default=None,
                   help="learned 1x1x1 projection inside the gate")
    p.add_argument("--global-pool", action=argparse.BooleanOptionalAction, default=None,
                   help="average over all of T x H x W instead of 2x2x2 windows")
    p.add_argument("--flip", action=argparse.BooleanOptionalAction, default=None,
                   help="random horizontal flips per clip (reference: on)")
    p.add_argument("--workers", type=int, help="data-loading threads (default 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="attn3d", description="3D convolution with attention gating for action recognition")
    parser.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1 for bitwise determinism)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic motion dataset")
    g.add_argument("--classes", type=int, required=True, help="number of motion classes (<= 8)")
    g.add_argument("--clips-per-class", type=int, required=True)
    g.add_argument("--frames", type=int, default=24, help="frames per clip")
    g.add_argument("--size", type=int, default=32, help="frame height and width in pixels")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--patterns", help="comma-separated motion patterns, one per class")
    g.add_argument("--flip-safe", action="store_true",
                   help="only use patterns unchanged by a horizontal flip (up, down, grow, shrink)")

    t = sub.add_parser("train", help="train a model from a config plus flag overrides")
    _add_train_flags(t)
    t.add_argument("--resume", help="checkpoint to resume from; the run continues in --out")

    e = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=["train", "val", "test"])
    e.add_argument("--topk", type=int, default=1, help="classes per prediction record")
    e.add_argument("--predictions", help="write JSON-lines predictions here")

    pr = sub.add_parser("predict", help="top-k softmax prediction for one VCLP clip")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--clip", required=True)
    pr.add_argument("--k", type=int, default=5)
    pr.add_argument("--gt", type=int, help="ground-truth label to include in the output")

    a = sub.add_parser("ablation", help="train with and without the attention gate and compare")
    _add_train_flags(a)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every backward pass (float64)")
    which = gc.add_mutually_exclusive_group(required=True)
    which.add_argument("--all", action="store_true")
    which.add_argument("--layer", action="append", help="layer check name; repeatable")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--h", type=float, default=1e-4, help="finite-difference step (default 1e-4)")
    return parser


def _print_resolved(command: str, resolved: dict) -> None:
    print(f"[{command}] resolved config: {json.dumps(resolved, sort_keys=True)}")
    if "seed" in resolved:
        print(f"[{command}] seed: {resolved['seed']}")


def _run(args) -> int:
    from . import data, gradcheck, train
    from .tensor import Rng

    if args.command == "gen-data":
        patterns = args.patterns.split(",") if args.patterns else None
        _print_resolved("gen-data", {k: v for k, v in vars(args).items() if k not in ("command", "verbose")})
        m = data.generate_synthetic_dataset(args.out, args.classes, args.clips_per_class, args.frames,
                                            args.size, Rng(args.seed), patterns, args.flip_safe)
        counts = {s: len(m.indices(s)) for s in data.SPLITS}
        print(f"wrote {len(m.records)} clips to {args.out} (classes: {', '.join(m.classes)}; splits: {counts})")
        return 0

    if args.command in ("train", "ablation"):
        resolved = resolve_train_config(args)
        cfg = train.TrainConfig.from_dict(resolved)
        _print_resolved(args.command, cfg.to_dict())
        if args.command == "train":
            res = train.train(cfg, resume=args.resume)
            print(f"best val accuracy {res.best_val_accuracy:.4f} at epoch {res.best_epoch}; "
                  f"metrics in {res.out / 'metrics.csv'}")
        else:
            report = train.ablation(cfg)
            print(train.format_report(report), end="")
        return 0

    if args.command == "eval":
        _print_resolved("eval", {k: v for k, v in vars(args).items() if k not in ("command", "verbose")})
        row, preds = train.evaluate(args.checkpoint, args.data, args.split, args.topk)
        print(",".join(train.METRICS_HEADER))
        print(",".join(row.as_csv()))
        if args.predictions:
            Path(args.predictions).write_text("".join(p.to_json() + "\n" for p in preds))
        return 0

    if args.command == "predict":
        _print_resolved("predict", {k: v for k, v in vars(args).items() if k not in ("command", "verbose")})
        print(train.predict_topk(args.checkpoint, args.clip, args.k, args.gt).to_json())
        return 0

    if args.command == "gradcheck":
        _print_resolved("gradcheck", {"all": args.all, "layer": args.layer, "seed": args.seed, "h": args.h})
        names = list(gradcheck.LAYER_CHECKS) if args.all else args.layer
        reports = [gradcheck.check_layer(n, seed=args.seed, h=args.h) for n in names]
        for r in reports:
            print(r.summary())
            if not r.passed:
                for err, tensor, i, a, n in r.worst(5):
                    print(f"    {tensor}[{i}] analytic={a:.6e} numeric={n:.6e} rel_err={err:.3e}")
        return 0 if all(r.passed for r in reports) else 2

    raise UsageError(f"unknown command {args.command}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=args.threads):
            return _run(args)
    except Attn3dError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
