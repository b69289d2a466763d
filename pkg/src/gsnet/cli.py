"""``gsnet generate|train|eval|ablate|diagnose --config <path>``.

Exit codes: 0 ok, 2 configuration error, 3 I/O error, 4 non-finite loss.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import io
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import RunConfig, load_config, serialize_config
from .data import build_dataset, load_dataset
from .diagnostics import (compare_independence, dump_json, export_attention_map, feature_map_summary,
                          grad_check)
from .errors import ConfigError
from .metrics import REPORT_KEYS
from .tensor import Tensor, cross_entropy, no_grad
from .train import CHECKPOINT, NanLossError, class_targets, evaluate, load_model, train

log = logging.getLogger("gsnet")

# Table VI settings: (name, triple, guided, iawca); the encoder is always on
ABLATIONS = (
    ("GSNet-0", False, True, True),
    ("GSNet-1", True, False, True),
    ("GSNet-2", True, True, False),
    ("GSNet-3", True, True, True),
)


def _out_dir(cfg: RunConfig, args) -> Path:
    return Path(args.out or cfg.train.out_dir)


def _load_splits(cfg: RunConfig):
    root = Path(cfg.data.dir)
    if not (root / "manifest.csv").exists():
        raise ConfigError(f"data.dir {root} has no manifest.csv; run 'gsnet generate' first")
    splits = load_dataset(root)
    return splits.get("train"), splits.get("val")


def cmd_generate(cfg: RunConfig, args) -> int:
    out = Path(args.out or cfg.data.dir)
    train_ds, val_ds = build_dataset(cfg.data.gen, cfg.data.n_per_level, cfg.data.split, out)
    n = cfg.data.gen.num_levels
    print(f"manifest: {out / 'manifest.csv'}")
    print(f"train per level: {train_ds.level_counts(n)}")
    print(f"val per level: {val_ds.level_counts(n)}")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    train_ds, val_ds = _load_splits(cfg)
    out = _out_dir(cfg, args)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint.atomic_write(out / "config.txt", serialize_config(cfg).encode("utf-8"))
    try:
        result = train(cfg, train_ds, val_ds, out)
    except NanLossError as exc:
        dump_json(exc.dump, out / "nan_dump.json")
        raise
    print(f"checkpoint: {out / CHECKPOINT}")
    print(f"final train_loss: {result.final_train_loss!r}  best val_acc: {result.best_val_acc!r}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    _, val_ds = _load_splits(cfg)
    ckpt = Path(args.checkpoint or _out_dir(cfg, args) / CHECKPOINT)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    model = load_model(cfg.model_config(), ckpt)
    report = evaluate(model, val_ds, cfg.data.gen.num_levels, cfg.train.half_levels)
    text = report.to_json()
    print(text)
    out = _out_dir(cfg, args)
    checkpoint.atomic_write(out / "eval_report.json", (text + "\n").encode("utf-8"))
    return 0


def cmd_ablate(cfg: RunConfig, args) -> int:
    train_ds, val_ds = _load_splits(cfg)
    out = _out_dir(cfg, args)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "encoder", "triple", "guided", "iawca", "seed", *REPORT_KEYS])
    for name, triple, guided, iawca in ABLATIONS:
        variant = replace(cfg, ablation=replace(cfg.ablation, triple=triple, guided=guided, iawca=iawca))
        result = train(variant, train_ds, val_ds, out / name)
        report = evaluate(result.model, val_ds, cfg.data.gen.num_levels, cfg.train.half_levels)
        vals = ["" if getattr(report, k) is None else repr(getattr(report, k)) for k in REPORT_KEYS]
        flags = ["1", "1" if triple else "0", "1" if guided else "0", "1" if iawca else "0"]
        w.writerow([name, *flags, cfg.train.seed, *vals])
        print(f"{name}: acc={report.acc:.4f}")
    checkpoint.atomic_write(out / "ablation.csv", buf.getvalue().encode("utf-8"))
    print(f"table: {out / 'ablation.csv'}")
    return 0


def cmd_diagnose(cfg: RunConfig, args) -> int:
    train_ds, val_ds = _load_splits(cfg)
    ckpt = Path(args.checkpoint or _out_dir(cfg, args) / CHECKPOINT)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    mcfg = cfg.model_config()
    model = load_model(mcfg, ckpt)
    out = _out_dir(cfg, args) / "diagnostics"
    sample = val_ds.items[0] if val_ds is not None and len(val_ds) else train_ds.items[0]

    x = Tensor(sample.pixels[None, None])
    target = class_targets(np.array([sample.label]), cfg.train.half_levels)
    report = grad_check(lambda: cross_entropy(model(x), target), dict(model.named_parameters()),
                        max_coords=cfg.diagnose.grad_coords, seed=cfg.train.seed)
    dump_json(report.to_dict(), out / "gradcheck.json")

    pool = (val_ds.items if val_ds is not None else []) + train_ds.items
    probes = []
    for item in pool[:cfg.diagnose.samples]:
        pair = compare_independence(model, item.pixels)
        probes.append({"id": item.id, **{k: v.to_dict() for k, v in pair.items()}})
    dump_json(probes, out / "independence.json")

    with no_grad():
        feats = model.features(x)
    export_attention_map(feature_map_summary(feats["feat_e"]), out / "map1_encoder.pgm")
    export_attention_map(feature_map_summary(feats["feat_s"]), out / "map2_swin.pgm")
    export_attention_map(feature_map_summary(feats["guided"]), out / "map3_guided.pgm")
    print(f"grad-check max rel err: {report.max_rel_err:.3e} ({'pass' if report.passed() else 'FAIL'})")
    print(f"artifacts: {out}")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "diagnose": cmd_diagnose,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gsnet", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="flat key = value config file")
    p.add_argument("--checkpoint", help="checkpoint path (eval, diagnose)")
    p.add_argument("--seed", type=int, help="override train.seed")
    p.add_argument("--out", help="output directory (overrides train.out_dir, or data.dir for generate)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


@contextlib.contextmanager
def _thread_cap():
    n = os.environ.get("GSNET_THREADS")
    if not n:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=int(n)):
        yield


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.train.seed = args.seed
        cfg.model_config().validate()
        cfg.data.gen.validate()
        with _thread_cap():
            return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NanLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
