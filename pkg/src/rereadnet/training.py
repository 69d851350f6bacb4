"""Loss, Adam, cosine warm-up schedule, early-stopped training loop and metrics."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import Batch, Featurizer, PairExample, batch_pad
from .nn import Module
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr_init: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 200
    warmup_frac: float = 0.1
    patience: int = 1000
    val_every: int = 100
    clip_norm: float = 5.0
    seed: int = 0
    target_train_acc: float | None = None

    def __post_init__(self):
        for name in ("lr_init", "batch_size", "max_epochs", "patience", "val_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.warmup_frac < 1:
            raise ValueError("warmup_frac must lie in [0, 1)")


def cross_entropy(probs: Tensor, gold) -> Tensor:
    """Mean ``-log(max(p[gold], 1e-12))``."""
    return T.nll(probs, gold, floor=1e-12)


@dataclass
class OptimizerState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], state: OptimizerState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam on ``param.grad``; entries masked by ``update_mask`` stay put."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ValueError("optimizer state does not match the parameter list")
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        if g.shape != p.shape or m.shape != p.shape:
            raise ValueError(f"shape mismatch in adam step for parameter of shape {p.shape}")
        if p.update_mask is not None:
            g = g * p.update_mask
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        upd = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        if p.update_mask is not None:
            upd *= p.update_mask
        p.data -= upd


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad *= scale
    return total


def lr_schedule(step: int, total_steps: int, lr_init: float = 0.001,
                warmup_frac: float = 0.1) -> float:
    """Linear warm-up to ``lr_init`` then half-cosine decay to 0 at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = warmup_frac * total_steps
    if step < warm:
        return lr_init * step / warm
    span = total_steps - warm
    progress = 1.0 if span <= 0 else (step - warm) / span
    return lr_init * 0.5 * (1.0 + math.cos(math.pi * progress))


def predict(model: Module, batches: Sequence[Batch]) -> np.ndarray:
    with T.no_grad():
        return np.concatenate([model(b).probs.data for b in batches])


def batch_loss(model: Module, batches: Sequence[Batch]) -> tuple[float, float]:
    """Example-weighted mean loss and accuracy over labelled batches."""
    total, correct, n = 0.0, 0, 0
    with T.no_grad():
        for b in batches:
            probs = model(b).probs
            total += cross_entropy(probs, b.labels).item() * b.size
            correct += int((probs.data.argmax(axis=1) == b.labels).sum())
            n += b.size
    return total / n, correct / n


def evaluate(model: Module, batches: Sequence[Batch], labels: Sequence[str]) -> dict:
    """Accuracy, macro-F1 and per-class counts; binary tasks add positive-class F1."""
    gold = np.concatenate([b.labels for b in batches])
    pred = predict(model, batches).argmax(axis=1)
    return classification_report(gold, pred, labels)


def classification_report(gold: np.ndarray, pred: np.ndarray, labels: Sequence[str]) -> dict:
    k = len(labels)
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (gold, pred), 1)
    per_class = {}
    f1s = []
    for i, name in enumerate(labels):
        tp = int(confusion[i, i])
        fp = int(confusion[:, i].sum()) - tp
        fn = int(confusion[i, :].sum()) - tp
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        f1s.append(f1)
        per_class[name] = {"tp": tp, "fp": fp, "fn": fn, "support": tp + fn,
                           "precision": prec, "recall": rec, "f1": f1}
    report = {"accuracy": float((gold == pred).mean()), "macro_f1": float(np.mean(f1s)),
              "per_class": per_class, "confusion": confusion.tolist(), "n": int(len(gold))}
    if k == 2:
        report["positive_f1"] = f1s[1]
    return report


@dataclass
class TrainResult:
    best_state: dict[str, np.ndarray]
    best_val_loss: float
    best_step: int
    steps: int
    epochs: int
    stopped_early: bool
    log: list[dict]
    val_losses: list[float]


def train_loop(model: Module, train: Sequence[PairExample], val: Sequence[PairExample],
               featurizer: Featurizer, labels: Sequence[str], config: TrainConfig,
               log_path: str | Path | None = None, encodings=None) -> TrainResult:
    """Adam with the warm-up/cosine schedule and validation-loss early stopping.

    Validation runs every ``val_every`` batches and once at the end; training
    stops after ``patience`` batches without a new best. The model is left
    holding the best-validation parameters, which are also returned.
    """
    if not train or not val:
        raise ValueError("train and validation splits must be non-empty")
    params = model.parameters()
    opt = OptimizerState()
    val_batches = batch_pad(val, config.batch_size, featurizer, labels, encodings=encodings)
    per_epoch = math.ceil(len(train) / config.batch_size)
    total = per_epoch * config.max_epochs
    records: list[dict] = []
    val_losses: list[float] = []
    best = (math.inf, model.state_dict(), 0)
    step = 0
    stopped = False
    sink = open(log_path, "w", encoding="utf-8") if log_path else None

    def validate() -> bool:
        nonlocal best
        vloss, vacc = batch_loss(model, val_batches)
        val_losses.append(vloss)
        records[-1].update(val_loss=vloss, val_acc=vacc)
        if vloss < best[0]:
            best = (vloss, model.state_dict(), step)
            return True
        return False

    epoch = 0
    try:
        for epoch in range(1, config.max_epochs + 1):
            batches = batch_pad(train, config.batch_size, featurizer, labels, seed=config.seed,
                                epoch=epoch, encodings=encodings)
            for b in batches:
                lr = lr_schedule(step + 1, total, config.lr_init, config.warmup_frac)
                model.zero_grad()
                loss = cross_entropy(model(b).probs, b.labels)
                loss.backward()
                clip_grad_norm(params, config.clip_norm)
                adam_step(params, opt, lr, config.beta1, config.beta2, config.adam_eps)
                step += 1
                rec = {"step": step, "epoch": epoch, "lr": lr, "train_loss": loss.item()}
                records.append(rec)
                if step % config.val_every == 0:
                    validate()
                    if step - best[2] >= config.patience:
                        stopped = True
                if sink:
                    sink.write(json.dumps(records[-1]) + "\n")
                if stopped:
                    break
            if stopped:
                break
            if config.target_train_acc is not None:
                _, acc = batch_loss(model, batches)
                records[-1]["train_acc"] = acc
                if acc >= config.target_train_acc:
                    log.info("train accuracy %.3f reached at epoch %d", acc, epoch)
                    break
        if step % config.val_every != 0:
            validate()
            if sink:
                sink.write(json.dumps({"step": step, "val_loss": records[-1]["val_loss"],
                                       "val_acc": records[-1]["val_acc"]}) + "\n")
    finally:
        if sink:
            sink.close()
    model.load_state_dict(best[1])
    return TrainResult(best[1], best[0], best[2], step, epoch, stopped, records, val_losses)
