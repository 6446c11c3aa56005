"""Group-disaggregated evaluation of engagement predictions."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .data import N_GROUPS, N_LEVELS, GroupLabeledDataset, max_uniform_per_cell, uniform_subset
from .numcore import as_matrix, backward, forward


class DegenerateDistributionError(ValueError):
    pass


class EmptyGroupError(ValueError):
    pass


def pearson(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1 or u.size < 2:
        raise ValueError(f"need two equal-length vectors of length >= 2, got {u.shape}, {v.shape}")
    du, dv = u - u.mean(), v - v.mean()
    su, sv = np.sqrt(du @ du), np.sqrt(dv @ dv)
    if su == 0.0 or sv == 0.0:
        raise DegenerateDistributionError("Pearson correlation is undefined for a constant vector")
    return float(np.clip((du @ dv) / (su * sv), -1.0, 1.0))


@dataclass
class GroupDistribution:
    group: int
    proportions: np.ndarray

    def to_dict(self):
        return {"group": self.group, "proportions": [float(p) for p in self.proportions]}


def group_prediction_distributions(pred_levels, g):
    pred_levels = np.asarray(pred_levels, dtype=np.int64)
    g = np.asarray(g, dtype=np.int64)
    if pred_levels.shape != g.shape:
        raise ValueError("predictions and group labels differ in length")
    out = []
    for group in range(N_GROUPS):
        mine = pred_levels[g == group]
        if mine.size == 0:
            raise EmptyGroupError(f"group {group} has no predictions")
        out.append(GroupDistribution(group, np.bincount(mine, minlength=N_LEVELS) / mine.size))
    return tuple(out)


def group_distribution_pcc(pred_levels, g) -> float:
    d0, d1 = group_prediction_distributions(pred_levels, g)
    return pearson(d0.proportions, d1.proportions)


def total_variation(p, q) -> float:
    return float(0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum())


def _f1(pred, true, cls):
    tp = np.sum((pred == cls) & (true == cls))
    fp = np.sum((pred == cls) & (true != cls))
    fn = np.sum((pred != cls) & (true == cls))
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2.0 * tp / denom


def f1_table(pred_levels, true_levels, g) -> np.ndarray:
    """One-vs-rest F1, shape (4 classes, 2 groups); 0 where precision + recall is 0."""
    pred = np.asarray(pred_levels, dtype=np.int64)
    true = np.asarray(true_levels, dtype=np.int64)
    g = np.asarray(g, dtype=np.int64)
    if not pred.shape == true.shape == g.shape:
        raise ValueError("pred_levels, true_levels and g must have equal lengths")
    table = np.zeros((N_LEVELS, N_GROUPS))
    for group in range(N_GROUPS):
        m = g == group
        for cls in range(N_LEVELS):
            table[cls, group] = _f1(pred[m], true[m], cls)
    return table


@dataclass
class Baselines:
    uniform: float
    mode: float
    mode_level: int


def baselines(ds: GroupLabeledDataset) -> Baselines:
    if ds.y is None:
        raise ValueError("baselines need task labels")
    freq = np.bincount(ds.y, minlength=N_LEVELS) / len(ds)
    level = int(np.argmax(freq))
    return Baselines(1.0 / N_LEVELS, float(freq[level]), level)


def _as_predictor(model_or_fn) -> Callable[[np.ndarray], np.ndarray]:
    if callable(model_or_fn):
        return model_or_fn
    from .train import predict
    return lambda X: predict(model_or_fn, X)[0]


@dataclass
class UniformEval:
    dist_g0: np.ndarray
    dist_g1: np.ndarray
    repeats: int
    per_cell: int
    subset_size: int

    def to_dict(self):
        return {"dist_g0": [float(v) for v in self.dist_g0],
                "dist_g1": [float(v) for v in self.dist_g1],
                "repeats": self.repeats, "per_cell": self.per_cell,
                "subset_size": self.subset_size}


def uniform_subset_eval(model, ds: GroupLabeledDataset, per_cell: int = 21, repeats: int = 10,
                        seed: int = 0) -> UniformEval:
    """Average per-group prediction distributions over ``repeats`` uniform subsets.

    Repeat ``r`` draws its subset with seed ``seed + r``. ``model`` may be a
    SplitModel or any callable mapping a feature matrix to predicted levels.
    """
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    predict_fn = _as_predictor(model)
    acc = np.zeros((N_GROUPS, N_LEVELS))
    size = 0
    for r in range(repeats):
        sub = uniform_subset(ds, per_cell, seed + r)
        size = len(sub)
        d0, d1 = group_prediction_distributions(predict_fn(sub.X), sub.g)
        acc[0] += d0.proportions
        acc[1] += d1.proportions
    acc /= repeats
    return UniformEval(acc[0], acc[1], repeats, per_cell, size)


@dataclass
class SaliencyReport:
    mean_saliency_g0: np.ndarray
    mean_saliency_g1: np.ndarray
    cosine_similarity: float
    mean_abs_g0: np.ndarray
    mean_abs_g1: np.ndarray

    def block_share(self, block: slice) -> float:
        """Fraction of pooled mean |saliency| falling on the feature columns in ``block``."""
        pooled = self.mean_abs_g0 + self.mean_abs_g1
        return float(pooled[block].sum() / pooled.sum())


def input_saliency(model, X) -> np.ndarray:
    """Gradient of each row's predicted-class logit w.r.t. that row's input."""
    X = as_matrix(X)
    trunk_trace = forward(model.trunk, X)
    head_trace = forward(model.head_task, trunk_trace.output)
    logits = head_trace.output
    upstream = np.zeros_like(logits)
    upstream[np.arange(len(X)), np.argmax(logits, axis=1)] = 1.0
    g = backward(model.head_task, head_trace, upstream, need_input_grad=True, accumulate=False)
    return backward(model.trunk, trunk_trace, g, need_input_grad=True, accumulate=False)


def _cosine(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


def group_saliency_divergence(model, ds: GroupLabeledDataset, sample_cap: int = 500) -> SaliencyReport:
    """Mean input-gradient saliency per group (first ``sample_cap`` samples of each)."""
    means, abs_means = [], []
    for group in range(N_GROUPS):
        idx = np.flatnonzero(ds.g == group)[:sample_cap]
        if idx.size == 0:
            raise EmptyGroupError(f"group {group} has no samples")
        s = input_saliency(model, ds.X[idx])
        means.append(s.mean(axis=0))
        abs_means.append(np.abs(s).mean(axis=0))
    return SaliencyReport(means[0], means[1], _cosine(means[0], means[1]), abs_means[0], abs_means[1])


# -- report -------------------------------------------------------------------

@dataclass
class FairnessReport:
    dist_g0: GroupDistribution
    dist_g1: GroupDistribution
    group_pcc: float
    f1: np.ndarray
    accuracy: float
    baseline_uniform: float
    baseline_mode: float
    uniform_subset_eval: Optional[UniformEval] = None
    extensions: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "dist_g0": self.dist_g0.to_dict(),
            "dist_g1": self.dist_g1.to_dict(),
            "group_pcc": self.group_pcc,
            "f1": [[float(v) for v in row] for row in self.f1],
            "accuracy": self.accuracy,
            "baseline_uniform": self.baseline_uniform,
            "baseline_mode": self.baseline_mode,
            "uniform_subset_eval": None if self.uniform_subset_eval is None
            else self.uniform_subset_eval.to_dict(),
            "extensions": self.extensions,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write_json(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        return path

    def write_f1_csv(self, path) -> Path:
        """F1 table laid out one row per group, one column per class."""
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["set"] + [f"class_{c}" for c in range(N_LEVELS)])
            for group in range(N_GROUPS):
                w.writerow([f"group_{group}"] + [f"{self.f1[c, group]:.4f}" for c in range(N_LEVELS)])
        return path


_PROB4 = {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1},
          "minItems": N_LEVELS, "maxItems": N_LEVELS}
_GROUP_DIST = {"type": "object", "required": ["group", "proportions"],
               "properties": {"group": {"enum": [0, 1]}, "proportions": _PROB4}}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["dist_g0", "dist_g1", "group_pcc", "f1", "accuracy",
                 "baseline_uniform", "baseline_mode", "uniform_subset_eval"],
    "properties": {
        "dist_g0": _GROUP_DIST,
        "dist_g1": _GROUP_DIST,
        "group_pcc": {"type": "number", "minimum": -1, "maximum": 1},
        "f1": {"type": "array", "minItems": N_LEVELS, "maxItems": N_LEVELS,
               "items": {"type": "array", "minItems": N_GROUPS, "maxItems": N_GROUPS,
                         "items": {"type": "number", "minimum": 0, "maximum": 1}}},
        "accuracy": {"type": "number", "minimum": 0, "maximum": 1},
        "baseline_uniform": {"type": "number", "minimum": 0, "maximum": 1},
        "baseline_mode": {"type": "number", "minimum": 0, "maximum": 1},
        "uniform_subset_eval": {
            "oneOf": [
                {"type": "null"},
                {"type": "object",
                 "required": ["dist_g0", "dist_g1", "repeats", "per_cell", "subset_size"],
                 "properties": {"dist_g0": _PROB4, "dist_g1": _PROB4,
                                "repeats": {"type": "integer", "minimum": 1},
                                "per_cell": {"type": "integer", "minimum": 1},
                                "subset_size": {"type": "integer", "minimum": 1}}},
            ]
        },
        "extensions": {"type": "object"},
    },
}


def validate_report(doc: dict):
    import jsonschema

    jsonschema.validate(doc, REPORT_SCHEMA)


def build_report(model, ds: GroupLabeledDataset, per_cell: int | None = 21, repeats: int = 10,
                 seed: int = 0, saliency_cap: int | None = None,
                 spurious_block: slice | None = None) -> FairnessReport:
    """Evaluate ``model`` on ``ds``.

    The uniform-subset evaluation uses ``per_cell`` samples per cell, or as
    many as the sparsest cell allows when that is fewer; it is skipped when
    some cell is empty or ``per_cell`` is None.
    """
    from .train import predict

    if ds.y is None:
        raise ValueError("evaluation needs task labels")
    levels, _ = predict(model, ds.X)
    d0, d1 = group_prediction_distributions(levels, ds.g)
    base = baselines(ds)
    ext = {
        "total_variation": total_variation(d0.proportions, d1.proportions),
        "baseline_mode_level": base.mode_level,
        "n_samples": len(ds),
    }
    uni = None
    if per_cell is not None:
        usable = min(per_cell, max_uniform_per_cell(ds))
        if usable >= 1:
            uni = uniform_subset_eval(model, ds, usable, repeats, seed)
            ext["uniform_subset_pcc"] = _pcc_or_none(uni.dist_g0, uni.dist_g1)
        ext["uniform_subset_requested_per_cell"] = per_cell
    if saliency_cap:
        sal = group_saliency_divergence(model, ds, saliency_cap)
        ext["saliency_cosine"] = sal.cosine_similarity
        if spurious_block is not None:
            ext["saliency_spurious_share"] = sal.block_share(spurious_block)
    return FairnessReport(
        dist_g0=d0, dist_g1=d1,
        group_pcc=pearson(d0.proportions, d1.proportions),
        f1=f1_table(levels, ds.y, ds.g),
        accuracy=float(np.mean(levels == ds.y)),
        baseline_uniform=base.uniform, baseline_mode=base.mode,
        uniform_subset_eval=uni, extensions=ext,
    )


def _pcc_or_none(a, b):
    try:
        return pearson(a, b)
    except DegenerateDistributionError:
        return None
