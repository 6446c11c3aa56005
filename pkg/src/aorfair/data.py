"""Synthetic group-biased engagement data, uniform subsets and CSV I/O.

Features are three concatenated blocks:

* core     -- class mean ``class_separation * u_y`` plus Gaussian noise; carries the label
* spurious -- group mean ``+-group_separation / 2 * v`` plus noise; carries only the group
* noise    -- pure Gaussian noise

Labels are drawn from a per-group distribution, so the spurious block is
predictive of the label through the group alone. A model can shortcut
through it, which is the failure mode the orthogonality penalty targets.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

LEVEL_NAMES = ("very low", "low", "high", "very high")
N_LEVELS = 4
N_GROUPS = 2


class DatasetError(ValueError):
    pass


class InsufficientCellError(DatasetError):
    def __init__(self, group, level, count, needed):
        self.group, self.level, self.count, self.needed = group, level, count, needed
        super().__init__(
            f"cell (group={group}, level={level}) has {count} samples, need {needed}")


class CSVFormatError(DatasetError):
    pass


class MissingColumnError(CSVFormatError):
    pass


class NonNumericError(CSVFormatError):
    pass


class LabelRangeError(CSVFormatError):
    pass


@dataclass
class GroupLabeledDataset:
    X: np.ndarray
    g: np.ndarray
    y: Optional[np.ndarray] = None
    level_names: tuple[str, ...] = LEVEL_NAMES

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.g = np.asarray(self.g, dtype=np.int64)
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2:
            raise DatasetError(f"X must be 2-D, got shape {self.X.shape}")
        n = self.X.shape[0]
        if self.g.shape != (n,):
            raise DatasetError(f"g has {self.g.shape[0]} entries for {n} samples")
        if ((self.g < 0) | (self.g >= N_GROUPS)).any():
            raise DatasetError("group labels must be 0 or 1")
        if self.y is not None:
            if self.y.shape != (n,):
                raise DatasetError(f"y has {self.y.shape[0]} entries for {n} samples")
            if ((self.y < 0) | (self.y >= N_LEVELS)).any():
                raise DatasetError("task levels must lie in 0..3")

    def __len__(self):
        return self.X.shape[0]

    @property
    def n_features(self):
        return self.X.shape[1]

    @property
    def has_task_labels(self):
        return self.y is not None

    def take(self, idx) -> "GroupLabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return GroupLabeledDataset(self.X[idx], self.g[idx],
                                   None if self.y is None else self.y[idx], self.level_names)

    def cell_counts(self) -> np.ndarray:
        """2 x 4 array of sample counts, indexed [group, level]."""
        if self.y is None:
            raise DatasetError("cell counts need task labels")
        counts = np.zeros((N_GROUPS, N_LEVELS), dtype=np.int64)
        np.add.at(counts, (self.g, self.y), 1)
        return counts


@dataclass
class DatasetSpec:
    n: int = 10_000
    group1_fraction: float = 1.0 / 3.3
    label_dist_g0: tuple[float, ...] = (0.25, 0.25, 0.25, 0.25)
    label_dist_g1: tuple[float, ...] = (0.25, 0.25, 0.25, 0.25)
    d_core: int = 12
    d_spur: int = 8
    d_noise: int = 4
    class_separation: float = 1.0
    group_separation: float = 2.0
    noise_sd: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.label_dist_g0 = tuple(float(p) for p in self.label_dist_g0)
        self.label_dist_g1 = tuple(float(p) for p in self.label_dist_g1)

    @property
    def n_features(self):
        return self.d_core + self.d_spur + self.d_noise

    @property
    def spurious_slice(self):
        return slice(self.d_core, self.d_core + self.d_spur)

    def validate(self):
        if self.n < 1:
            raise DatasetError("n must be positive")
        if not 0.0 < self.group1_fraction < 1.0:
            raise DatasetError("group1_fraction must lie strictly between 0 and 1")
        for name in ("label_dist_g0", "label_dist_g1"):
            p = np.asarray(getattr(self, name))
            if p.shape != (N_LEVELS,) or (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
                raise DatasetError(f"{name} must be a distribution over {N_LEVELS} levels")
        if self.d_core < 1 or self.d_spur < 0 or self.d_noise < 0:
            raise DatasetError("need d_core >= 1 and non-negative d_spur, d_noise")
        if self.noise_sd < 0 or self.class_separation < 0 or self.group_separation < 0:
            raise DatasetError("separations and noise_sd must be non-negative")
        return self

    def overall_label_dist(self) -> np.ndarray:
        f1 = self.group1_fraction
        return (1 - f1) * np.asarray(self.label_dist_g0) + f1 * np.asarray(self.label_dist_g1)


def daisee_skew_preset(**overrides) -> DatasetSpec:
    """Label/group skew matching the published DAiSEE engagement statistics.

    The per-group distributions are derived, not published: they give 93.5%
    of mass on levels 2-3, a level-2 mode of 49.5%, a between-group Pearson
    correlation of ~0.81, modes 2 (group 0) and 3 (group 1), and a 2.3:1
    group ratio.
    """
    spec = DatasetSpec(
        group1_fraction=1.0 / 3.3,
        label_dist_g0=(0.02, 0.06, 0.55, 0.37),
        label_dist_g1=(0.01, 0.02, 0.37, 0.60),
        d_core=12, d_spur=8, d_noise=4,
        class_separation=1.0, group_separation=2.0, noise_sd=1.0,
    )
    return replace(spec, **overrides)


def _unit_rows(rng, k, dim):
    v = rng.standard_normal((k, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def feature_geometry(spec: DatasetSpec):
    """Class directions (4 x d_core) and the group direction (d_spur,), fixed by spec.seed."""
    rng = np.random.default_rng([spec.seed, 0])
    class_dirs = _unit_rows(rng, N_LEVELS, spec.d_core)
    group_dir = _unit_rows(rng, 1, spec.d_spur)[0] if spec.d_spur else np.zeros(0)
    return class_dirs, group_dir


def _features(spec, y, g, rng):
    class_dirs, group_dir = feature_geometry(spec)
    n = y.shape[0]
    core = spec.class_separation * class_dirs[y] + spec.noise_sd * rng.standard_normal((n, spec.d_core))
    sign = (g - 0.5)[:, None]
    spur = spec.group_separation * sign * group_dir[None, :] \
        + spec.noise_sd * rng.standard_normal((n, spec.d_spur))
    noise = spec.noise_sd * rng.standard_normal((n, spec.d_noise))
    return np.concatenate([core, spur, noise], axis=1)


def generate_task_dataset(spec: DatasetSpec, seed_override: int | None = None) -> GroupLabeledDataset:
    spec.validate()
    seed = spec.seed if seed_override is None else seed_override
    rng = np.random.default_rng([seed, 1])
    g = (rng.random(spec.n) < spec.group1_fraction).astype(np.int64)
    cdf = np.cumsum(np.stack([spec.label_dist_g0, spec.label_dist_g1]), axis=1)
    u = rng.random(spec.n)
    y = (u[:, None] >= cdf[g, :-1]).sum(axis=1).astype(np.int64)
    return GroupLabeledDataset(_features(spec, y, g, rng), g, y)


def generate_external_dataset(spec: DatasetSpec, n_ext: int, domain_shift_sd: float = 0.25,
                              seed: int = 0) -> GroupLabeledDataset:
    """Attribute-only dataset: balanced groups, no task labels, shifted domain.

    Shares the task spec's feature geometry. The latent level driving the
    core block is drawn uniformly and independently of the group, then
    discarded.
    """
    spec.validate()
    if n_ext < 1:
        raise DatasetError("n_ext must be positive")
    if domain_shift_sd < 0:
        raise DatasetError("domain_shift_sd must be non-negative")
    rng = np.random.default_rng([seed, 2])
    g = (rng.random(n_ext) < 0.5).astype(np.int64)
    latent = rng.integers(0, N_LEVELS, size=n_ext)
    X = _features(spec, latent, g, rng)
    X = X + domain_shift_sd * rng.standard_normal(X.shape)
    return GroupLabeledDataset(X, g, None)


def train_val_split(ds: GroupLabeledDataset, val_fraction: float = 0.2, seed: int = 0):
    if not 0.0 < val_fraction < 1.0:
        raise DatasetError("val_fraction must lie strictly between 0 and 1")
    perm = np.random.default_rng([seed, 3]).permutation(len(ds))
    n_val = int(round(val_fraction * len(ds)))
    return ds.take(np.sort(perm[n_val:])), ds.take(np.sort(perm[:n_val]))


def uniform_subset(ds: GroupLabeledDataset, per_cell: int, seed: int = 0) -> GroupLabeledDataset:
    """Exactly ``per_cell`` samples from every (group, level) cell, without replacement."""
    if per_cell < 1:
        raise DatasetError("per_cell must be at least 1")
    if ds.y is None:
        raise DatasetError("uniform subsets need task labels")
    rng = np.random.default_rng(seed)
    chosen = []
    for group in range(N_GROUPS):
        for level in range(N_LEVELS):
            idx = np.flatnonzero((ds.g == group) & (ds.y == level))
            if idx.size < per_cell:
                raise InsufficientCellError(group, level, int(idx.size), per_cell)
            chosen.append(rng.choice(idx, size=per_cell, replace=False))
    return ds.take(np.sort(np.concatenate(chosen)))


def max_uniform_per_cell(ds: GroupLabeledDataset) -> int:
    return int(ds.cell_counts().min())


# -- feature CSV --------------------------------------------------------------

def _parse_cell(text, line, col):
    try:
        return float(text)
    except ValueError:
        raise NonNumericError(f"line {line}: column {col!r} is not numeric: {text!r}") from None


def _parse_label(text, line, col, n_values):
    v = _parse_cell(text, line, col)
    if not (np.isfinite(v) and v == int(v) and 0 <= v < n_values):
        raise LabelRangeError(f"line {line}: {col}={text} outside 0..{n_values - 1}")
    return int(v)


def ingest_feature_csv(path) -> GroupLabeledDataset:
    """Read ``f0..f{d-1}[,y],g`` rows. Line numbers in errors count the header as line 1."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise MissingColumnError("empty file: no header") from None
        if "g" not in header:
            raise MissingColumnError("header has no 'g' column")
        feat_cols = [h for h in header if h.startswith("f")]
        d = len(feat_cols)
        if d == 0 or feat_cols != [f"f{i}" for i in range(d)]:
            raise MissingColumnError("feature columns must be named f0..f{d-1}")
        unknown = set(header) - set(feat_cols) - {"y", "g"}
        if unknown:
            raise CSVFormatError(f"unexpected columns: {sorted(unknown)}")
        pos = {h: i for i, h in enumerate(header)}
        has_y = "y" in pos
        X, y, g = [], [], []
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise CSVFormatError(f"line {line}: {len(row)} fields, header has {len(header)}")
            X.append([_parse_cell(row[pos[c]], line, c) for c in feat_cols])
            g.append(_parse_label(row[pos["g"]], line, "g", N_GROUPS))
            if has_y:
                y.append(_parse_label(row[pos["y"]], line, "y", N_LEVELS))
    X = np.asarray(X, dtype=np.float64).reshape(-1, d)
    return GroupLabeledDataset(X, np.asarray(g), np.asarray(y) if has_y else None)


def export_feature_csv(ds: GroupLabeledDataset, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = [f"f{i}" for i in range(ds.n_features)] + (["y"] if ds.has_task_labels else []) + ["g"]
        w.writerow(header)
        for i in range(len(ds)):
            row = [repr(float(v)) for v in ds.X[i]]
            if ds.has_task_labels:
                row.append(int(ds.y[i]))
            row.append(int(ds.g[i]))
            w.writerow(row)
    return path
