"""Training and evaluation loops shared by the CLI commands."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint
from .config import RunConfig
from .data import Dataset
from .errors import ConfigError, GsnetError
from .metrics import EvalReport, EvalSet, biased_accuracy, evaluate_all
from .model import GsnetModel, ModelConfig, build_model
from .nn import make_rng
from .optim import SgdState, poly_lr, sgd_step
from .tensor import Tensor, backward, cross_entropy, no_grad

log = logging.getLogger(__name__)

LOG_HEADER = "epoch,step,lr,train_loss,val_acc"
CHECKPOINT = "checkpoint.gsnc"
BEST = "best.gsnc"


class NanLossError(GsnetError):
    def __init__(self, epoch: int, step: int, dump: dict):
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}")
        self.dump = dump


def class_targets(labels: np.ndarray, half_levels: bool) -> np.ndarray:
    """Class index per integer level; the half-level head puts level l at index 2l."""
    return labels * 2 if half_levels else labels


def predicted_levels(logits: np.ndarray, half_levels: bool) -> np.ndarray:
    idx = logits.argmax(axis=1).astype(np.float64)
    return idx / 2.0 if half_levels else idx


def predict_logits(model: GsnetModel, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            x = Tensor(images[i:i + batch_size, None])
            out.append(model(x).data)
    return np.concatenate(out) if out else np.zeros((0, model.cfg.num_classes))


def eval_set(model: GsnetModel, ds: Dataset, num_levels: int, half_levels: bool) -> EvalSet:
    preds = predicted_levels(predict_logits(model, ds.images()), half_levels)
    if half_levels:
        return EvalSet(ds.labels().astype(np.float64), preds, 2 * num_levels - 1, step=0.5)
    return EvalSet(ds.labels().astype(np.float64), preds, num_levels)


def evaluate(model: GsnetModel, ds: Dataset, num_levels: int, half_levels: bool = False) -> EvalReport:
    return evaluate_all(eval_set(model, ds, num_levels, half_levels))


def save_model(model: GsnetModel, path: Path) -> None:
    checkpoint.save(path, model.state_dict())
    sidecar = path.with_suffix(".json")
    checkpoint.atomic_write(sidecar, (json.dumps(model.cfg.to_dict(), indent=2, sort_keys=True) + "\n").encode())


def load_model(cfg: ModelConfig, path: Path) -> GsnetModel:
    """Build ``cfg`` and fill it from ``path``; mismatches raise ConfigError naming the fields."""
    path = Path(path)
    sidecar = path.with_suffix(".json")
    if sidecar.exists():
        saved = json.loads(sidecar.read_text())
        want = cfg.to_dict()
        diff = [f"model.{k}: checkpoint={saved.get(k)!r} config={want[k]!r}"
                for k in want if saved.get(k) != want[k]]
        if diff:
            raise ConfigError("checkpoint/config mismatch: " + "; ".join(diff))
    model = build_model(cfg, 0)
    try:
        model.load_state_dict(checkpoint.load(path))
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"checkpoint/config mismatch: {exc}") from None
    return model


@dataclass
class TrainResult:
    model: GsnetModel
    log_lines: list[str]
    best_val_acc: float
    final_train_loss: float


def train(cfg: RunConfig, train_ds: Dataset, val_ds: Dataset | None, out_dir: Path | None = None,
          max_steps: int | None = None,
          stop_when: Callable[[int, float], bool] | None = None) -> TrainResult:
    """SGD with momentum and polynomial LR decay; writes log and checkpoints to ``out_dir``.

    ``stop_when(epoch, val_acc)`` is consulted after every epoch; returning
    True ends training early (the LR schedule still spans the full run).
    """
    mcfg = cfg.model_config()
    seed = cfg.train.seed
    model = build_model(mcfg, seed)
    params = model.parameters()
    opt = SgdState(cfg.optim.lr, cfg.optim.momentum, cfg.optim.weight_decay)
    half = cfg.train.half_levels
    n_levels = cfg.data.gen.num_levels

    images = train_ds.images()
    targets = class_targets(train_ds.labels(), half)
    bs = cfg.optim.batch_size
    steps_per_epoch = math.ceil(len(images) / bs) if len(images) else 0
    total = cfg.train.epochs * steps_per_epoch
    if max_steps is not None:
        total = min(total, max_steps)

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    lines = [LOG_HEADER]
    best = -1.0
    step = 0
    last_loss = float("nan")
    for epoch in range(cfg.train.epochs):
        if step >= total:
            break
        order = make_rng(seed * 1_000_003 + epoch).permutation(len(images))
        losses = []
        for b in range(steps_per_epoch):
            if step >= total:
                break
            idx = order[b * bs:(b + 1) * bs]
            opt.learning_rate = poly_lr(cfg.optim.lr, step, total, cfg.optim.lr_power)
            loss = cross_entropy(model(Tensor(images[idx, None])), targets[idx])
            if not np.isfinite(loss.data):
                raise NanLossError(epoch, step, {
                    "epoch": epoch, "step": step, "lr": opt.learning_rate, "batch_ids": idx.tolist(),
                    "param_norms": {k: float(np.linalg.norm(p.data)) for k, p in model.named_parameters()},
                })
            backward(loss)
            sgd_step(opt, params)
            losses.append(float(loss.data))
            step += 1
        last_loss = float(np.mean(losses))
        val_acc = biased_accuracy(eval_set(model, val_ds, n_levels, half)) if val_ds is not None and len(val_ds) else float("nan")
        lines.append(f"{epoch},{step},{opt.learning_rate!r},{last_loss!r},{val_acc!r}")
        log.info("epoch %d step %d loss %.4f val_acc %.4f", epoch, step, last_loss, val_acc)
        if out_dir is not None:
            checkpoint.atomic_write(out_dir / "train_log.csv", ("\n".join(lines) + "\n").encode())
            if val_acc > best:
                save_model(model, out_dir / BEST)
        best = max(best, val_acc) if np.isfinite(val_acc) else best
        if stop_when is not None and stop_when(epoch, val_acc):
            break

    if out_dir is not None:
        checkpoint.atomic_write(out_dir / "train_log.csv", ("\n".join(lines) + "\n").encode())
        save_model(model, out_dir / CHECKPOINT)
    return TrainResult(model, lines, best, last_loss)
