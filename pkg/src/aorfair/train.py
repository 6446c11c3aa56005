"""Two-stage training of the split model.

Stage A fits trunk + attribute head on an attribute-only dataset. Stage B
freezes both, then fits the task head on ``CE + lambda * l_ortho``, where the
penalty compares the task head's first-layer weights with the frozen
attribute head's.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import aor
from .data import GroupLabeledDataset
from .fairmetrics import DegenerateDistributionError, group_distribution_pcc
from .model import SplitModel, first_dense, head_first_layer_weights
from .numcore import (ContractError, as_matrix, backward, forward, one_hot, softmax,
                      softmax_cross_entropy)

HISTORY_FIELDS = ("epoch", "total_loss", "l_cls1", "l_ortho", "train_acc", "val_acc", "val_group_pcc")


class StageError(RuntimeError):
    pass


@dataclass
class TrainingConfig:
    lam: float = 0.0
    learning_rate: float = 0.05
    batch_size: int = 64
    epochs: int = 40
    momentum: float = 0.9
    seed: int = 0
    shuffle: bool = True
    # lets stage B run with a trainable trunk / attribute head while lam > 0
    allow_unfrozen: bool = False

    def validate(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be at least 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        return self

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    total_loss: float
    l_cls1: float
    l_ortho: float
    train_acc: float
    val_acc: float
    val_group_pcc: float


@dataclass
class TrainingHistory:
    stage: str
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @property
    def last(self) -> EpochRecord:
        return self.records[-1]

    def to_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HISTORY_FIELDS)
            for r in self.records:
                w.writerow([r.epoch] + [repr(float(getattr(r, f))) for f in HISTORY_FIELDS[1:]])
        return path


@dataclass
class LossTerms:
    total: float
    cls: float
    ortho: float


class SGD:
    """Mini-batch SGD with classical momentum over trainable parameters only."""

    def __init__(self, params, lr, momentum=0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = {id(p): np.zeros_like(p.value) for p in self.params}

    def step(self):
        for p in self.params:
            if not p.trainable:
                continue
            v = self.velocity[id(p)]
            v *= self.momentum
            v -= self.lr * p.grad
            p.value += v
            p.version += 1


def total_loss(model: SplitModel, X, y_onehot, lam: float) -> LossTerms:
    """Task cross-entropy plus ``lam * l_ortho``; gradients are accumulated, not zeroed."""
    X, y_onehot = as_matrix(X), as_matrix(y_onehot)
    if X.shape[0] != y_onehot.shape[0]:
        raise ValueError(f"{X.shape[0]} inputs vs {y_onehot.shape[0]} targets")
    trunk_trace = forward(model.trunk, X)
    head_trace = forward(model.head_task, trunk_trace.output)
    cls, g_logits = softmax_cross_entropy(head_trace.output, y_onehot)

    trunk_needs_grad = any(p.trainable for p in model.parameters("trunk"))
    g_feat = backward(model.head_task, head_trace, g_logits, need_input_grad=trunk_needs_grad)
    if trunk_needs_grad:
        backward(model.trunk, trunk_trace, g_feat)

    W1 = first_dense(model.head_task).weight
    W2 = first_dense(model.head_attr).weight
    ortho = aor.l_ortho(W1.value, W2.value).l_ortho
    if lam != 0.0 and (W1.trainable or W2.trainable):
        G1, G2 = aor.l_ortho_grad(W1.value, W2.value)
        if W1.trainable:
            W1.grad += lam * G1
        if W2.trainable:
            W2.grad += lam * G2
    return LossTerms(cls + lam * ortho, cls, ortho)


def _batches(n, cfg, rng):
    order = rng.permutation(n) if cfg.shuffle else np.arange(n)
    for start in range(0, n, cfg.batch_size):
        yield order[start:start + cfg.batch_size]


def _attr_accuracy(model, ds):
    return float(np.mean(np.argmax(model.attr_logits(ds.X), axis=1) == ds.g))


def train_stage_a(model: SplitModel, external_ds: GroupLabeledDataset, cfg: TrainingConfig,
                  val_ds: GroupLabeledDataset | None = None) -> TrainingHistory:
    """Fit trunk + attribute head to the group labels of ``external_ds``."""
    cfg.validate()
    if external_ds.g is None:
        raise ContractError("stage A needs group labels")
    rng = np.random.default_rng([cfg.seed, 10])
    opt = SGD(model.parameters("trunk") + model.parameters("head_attr"), cfg.learning_rate, cfg.momentum)
    targets = one_hot(external_ds.g, 2)
    hist = TrainingHistory("stage-a")
    for epoch in range(1, cfg.epochs + 1):
        loss_sum, correct = 0.0, 0
        for idx in _batches(len(external_ds), cfg, rng):
            model.zero_grad()
            trunk_trace = forward(model.trunk, external_ds.X[idx])
            head_trace = forward(model.head_attr, trunk_trace.output)
            loss, g = softmax_cross_entropy(head_trace.output, targets[idx])
            g_feat = backward(model.head_attr, head_trace, g, need_input_grad=True)
            backward(model.trunk, trunk_trace, g_feat)
            opt.step()
            loss_sum += loss * len(idx)
            correct += int(np.sum(np.argmax(head_trace.output, axis=1) == external_ds.g[idx]))
        mean_loss = loss_sum / len(external_ds)
        ortho = aor.l_ortho(head_first_layer_weights(model, "task"),
                            head_first_layer_weights(model, "attr")).l_ortho
        hist.records.append(EpochRecord(
            epoch, mean_loss, mean_loss, ortho, correct / len(external_ds),
            _attr_accuracy(model, val_ds) if val_ds is not None else math.nan, math.nan))
        _check_finite(hist.last)
    model.zero_grad()
    model.stage = "stage-a"
    return hist


def _check_finite(rec: EpochRecord):
    if not all(math.isfinite(v) for v in (rec.total_loss, rec.l_cls1, rec.l_ortho)):
        raise FloatingPointError(f"non-finite loss at epoch {rec.epoch}: {rec}")


def _safe_group_pcc(levels, g):
    try:
        return group_distribution_pcc(levels, g)
    except DegenerateDistributionError:
        return math.nan


def train_stage_b(model: SplitModel, task_ds_train: GroupLabeledDataset,
                  task_ds_val: GroupLabeledDataset | None, cfg: TrainingConfig) -> TrainingHistory:
    """Fit the task head on cross-entropy + ``cfg.lam * l_ortho``."""
    cfg.validate()
    if model.stage not in ("stage-a", "stage-b"):
        raise StageError(f"stage B needs a stage-A model, got stage {model.stage!r}")
    if not task_ds_train.has_task_labels:
        raise ContractError("stage B needs task labels; attribute-only datasets are rejected")
    unfrozen = [p.name for p in model.parameters("trunk") + model.parameters("head_attr") if p.trainable]
    if unfrozen and cfg.lam > 0 and not cfg.allow_unfrozen:
        raise ContractError(
            f"trunk/attribute head must be frozen for stage B with lambda > 0: {unfrozen[:3]}...")
    n_classes = model.config.head1_widths[-1]
    targets = one_hot(task_ds_train.y, n_classes)
    rng = np.random.default_rng([cfg.seed, 20])
    opt = SGD(model.parameters(), cfg.learning_rate, cfg.momentum)
    hist = TrainingHistory("stage-b")
    for epoch in range(1, cfg.epochs + 1):
        sums = np.zeros(3)
        for idx in _batches(len(task_ds_train), cfg, rng):
            model.zero_grad()
            terms = total_loss(model, task_ds_train.X[idx], targets[idx], cfg.lam)
            opt.step()
            sums += len(idx) * np.array([terms.total, terms.cls, terms.ortho])
        sums /= len(task_ds_train)
        train_levels, _ = predict(model, task_ds_train.X)
        train_acc = float(np.mean(train_levels == task_ds_train.y))
        if task_ds_val is not None:
            val_levels, _ = predict(model, task_ds_val.X)
            val_acc = float(np.mean(val_levels == task_ds_val.y))
            val_pcc = _safe_group_pcc(val_levels, task_ds_val.g)
        else:
            val_acc = val_pcc = math.nan
        hist.records.append(EpochRecord(epoch, *map(float, sums), train_acc, val_acc, val_pcc))
        _check_finite(hist.last)
    model.zero_grad()
    model.stage = "stage-b"
    return hist


def levels_from_probabilities(P) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest level."""
    return np.argmax(as_matrix(P), axis=1)


def predict(model: SplitModel, X):
    P = softmax(model.task_logits(as_matrix(X)))
    return levels_from_probabilities(P), P
