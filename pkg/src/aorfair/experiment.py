"""Config-driven orchestration: data, staged training, lambda sweeps, reports."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .data import (DatasetSpec, GroupLabeledDataset, daisee_skew_preset, generate_external_dataset,
                   generate_task_dataset, ingest_feature_csv, train_val_split)
from .fairmetrics import build_report, validate_report
from .model import (ConfigError, SplitModelConfig, build_split_model, load_checkpoint,
                    save_checkpoint, set_trainable)
from .train import TrainingConfig, train_stage_a, train_stage_b

log = logging.getLogger(__name__)

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


@dataclass
class ExternalConfig:
    n_ext: int = 20_000
    domain_shift_sd: float = 0.25
    csv: str | None = None


@dataclass
class EvaluationConfig:
    val_fraction: float = 0.2
    per_cell: int = 21
    repeats: int = 10
    saliency_cap: int = 200


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec | str = field(default_factory=lambda: daisee_skew_preset())
    external: ExternalConfig = field(default_factory=ExternalConfig)
    model: SplitModelConfig = field(default_factory=SplitModelConfig)
    stage_a: TrainingConfig = field(default_factory=lambda: TrainingConfig(epochs=40))
    stage_b: TrainingConfig = field(default_factory=lambda: TrainingConfig(epochs=60))
    lambda_values: tuple[float, ...] = (0.0, 0.1, 1.0, 10.0)
    seeds: tuple[int, ...] = (0,)
    output_dir: str = "runs"
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    def validate(self):
        if not self.lambda_values:
            raise ConfigError("lambda_values must contain at least one value")
        if any(lam < 0 for lam in self.lambda_values):
            raise ConfigError("lambda values must be non-negative")
        if not self.seeds:
            raise ConfigError("seeds must contain at least one value")
        if isinstance(self.dataset, str):
            if self.external.csv is None:
                raise ConfigError("a CSV task dataset needs external.csv for stage A")
        else:
            try:
                self.dataset.validate()
            except ValueError as e:
                raise ConfigError(f"dataset: {e}") from e
        for name in ("stage_a", "stage_b"):
            try:
                getattr(self, name).validate()
            except ValueError as e:
                raise ConfigError(f"{name}: {e}") from e
        if not 0.0 < self.evaluation.val_fraction < 1.0:
            raise ConfigError("evaluation.val_fraction must lie in (0, 1)")
        if self.evaluation.per_cell < 1 or self.evaluation.repeats < 1:
            raise ConfigError("evaluation.per_cell and evaluation.repeats must be >= 1")
        if self.model.head1_widths[-1] != 4:
            raise ConfigError("the task head must end in 4 engagement levels")
        out = Path(self.output_dir)
        if out.exists() and not out.is_dir():
            raise ConfigError(f"output_dir {out} exists and is not a directory")
        return self

    def semantic_dict(self) -> dict:
        """Every field that affects results; output_dir is excluded."""
        d = {
            "dataset": self.dataset if isinstance(self.dataset, str) else asdict(self.dataset),
            "external": asdict(self.external),
            "model": asdict(self.model),
            "stage_a": asdict(self.stage_a),
            "stage_b": asdict(self.stage_b),
            "lambda_values": [float(v) for v in self.lambda_values],
            "seeds": [int(s) for s in self.seeds],
            "evaluation": asdict(self.evaluation),
        }
        return json.loads(json.dumps(d))

    def config_hash(self) -> str:
        blob = json.dumps(self.semantic_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _build(cls, section: dict | None, where: str, **defaults):
    known = {f.name for f in fields(cls)}
    section = dict(section or {})
    if cls is TrainingConfig and "lambda" in section:
        section["lam"] = section.pop("lambda")
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"[{where}] unknown keys: {sorted(unknown)}")
    try:
        return cls(**{**defaults, **section})
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{where}] {e}") from e


def config_from_dict(doc: dict, base_dir: Path | None = None) -> ExperimentConfig:
    doc = dict(doc)
    top = {"dataset", "external", "model", "stage_a", "stage_b", "lambda_values", "seeds",
           "output_dir", "evaluation"}
    unknown = set(doc) - top
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    base_dir = base_dir or Path(".")

    ds_sec = dict(doc.get("dataset") or {})
    if "csv" in ds_sec:
        dataset: DatasetSpec | str = str(base_dir / ds_sec["csv"])
    else:
        preset = ds_sec.pop("preset", "daisee_skew")
        if preset not in ("daisee_skew", "none"):
            raise ConfigError(f"[dataset] unknown preset {preset!r}")
        base = daisee_skew_preset() if preset == "daisee_skew" else DatasetSpec()
        dataset = _build(DatasetSpec, ds_sec, "dataset", **asdict(base))

    ext = _build(ExternalConfig, doc.get("external"), "external")
    if ext.csv is not None:
        ext.csv = str(base_dir / ext.csv)
    model_sec = dict(doc.get("model") or {})
    model_sec.pop("seed", None)
    cfg = ExperimentConfig(
        dataset=dataset,
        external=ext,
        model=_build(SplitModelConfig, model_sec, "model"),
        stage_a=_build(TrainingConfig, doc.get("stage_a"), "stage_a", epochs=40),
        stage_b=_build(TrainingConfig, doc.get("stage_b"), "stage_b", epochs=60),
        lambda_values=tuple(float(v) for v in doc.get("lambda_values", (0.0, 0.1, 1.0, 10.0))),
        seeds=tuple(int(s) for s in doc.get("seeds", (0,))),
        output_dir=str(base_dir / doc.get("output_dir", "runs")),
        evaluation=_build(EvaluationConfig, doc.get("evaluation"), "evaluation"),
    )
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    """Read a TOML (or ``.json``) experiment config; relative paths resolve against its folder."""
    path = Path(path)
    text = path.read_text()
    try:
        doc = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"{path}: {e}") from e
    return config_from_dict(doc, path.parent)


# -- data per seed ------------------------------------------------------------

@dataclass
class SeedData:
    train: GroupLabeledDataset
    val: GroupLabeledDataset
    external: GroupLabeledDataset
    spurious_block: slice | None


def seed_data(cfg: ExperimentConfig, seed: int) -> SeedData:
    if isinstance(cfg.dataset, str):
        full = ingest_feature_csv(cfg.dataset)
        if not full.has_task_labels:
            raise ConfigError(f"{cfg.dataset} has no 'y' column")
        block = None
    else:
        spec = replace(cfg.dataset, seed=seed)
        full = generate_task_dataset(spec)
        block = spec.spurious_slice
    train, val = train_val_split(full, cfg.evaluation.val_fraction, seed)
    if cfg.external.csv is not None:
        external = ingest_feature_csv(cfg.external.csv)
    else:
        external = generate_external_dataset(replace(cfg.dataset, seed=seed), cfg.external.n_ext,
                                              cfg.external.domain_shift_sd, seed)
    if external.n_features != full.n_features:
        raise ConfigError(
            f"external data has {external.n_features} features, task data {full.n_features}")
    return SeedData(train, val, external, block)


def _lambda_tag(lam: float) -> str:
    return f"lambda_{lam:g}"


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Stage A once per seed, stage B per (lambda, seed); writes checkpoints, reports, manifest."""
    cfg.validate()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    stage_a_entries, runs = [], []
    for seed in cfg.seeds:
        seed_dir = out / f"seed_{seed}"
        seed_dir.mkdir(exist_ok=True)
        try:
            data = seed_data(cfg, seed)
            model_cfg = replace(cfg.model, input_dim=data.train.n_features, seed=seed)
            model = build_split_model(model_cfg)
            hist_a = train_stage_a(model, data.external, replace(cfg.stage_a, seed=seed))
            set_trainable(model, "trunk", False)
            set_trainable(model, "head_attr", False)
            ckpt_a = save_checkpoint(model, seed_dir / "stage_a.aorm")
            hist_a.to_csv(seed_dir / "stage_a_history.csv")
            attr_acc = float(np.mean(np.argmax(model.attr_logits(data.val.X), axis=1) == data.val.g))
            stage_a_entries.append({
                "seed": seed, "status": "ok", "checkpoint": str(ckpt_a.relative_to(out)),
                "history": f"seed_{seed}/stage_a_history.csv",
                "attr_accuracy_on_task_val": attr_acc,
            })
            log.info("seed %d: stage A done, attribute accuracy on task validation %.3f", seed, attr_acc)
        except Exception as e:  # noqa: BLE001 -- one failing seed must not stop the others
            log.error("seed %d: stage A failed: %s", seed, e)
            stage_a_entries.append({"seed": seed, "status": "failed", "error": repr(e)})
            runs.extend({"seed": seed, "lambda": lam, "status": "failed",
                         "error": f"stage A failed: {e!r}"} for lam in cfg.lambda_values)
            continue

        for lam in cfg.lambda_values:
            run_dir = seed_dir / _lambda_tag(lam)
            run_dir.mkdir(exist_ok=True)
            entry: dict[str, Any] = {"seed": seed, "lambda": lam}
            try:
                m = load_checkpoint(ckpt_a)
                hist_b = train_stage_b(m, data.train, data.val, replace(cfg.stage_b, lam=lam, seed=seed))
                report = build_report(m, data.val, cfg.evaluation.per_cell, cfg.evaluation.repeats,
                                      seed, cfg.evaluation.saliency_cap, data.spurious_block)
                report.extensions["final_l_ortho"] = hist_b.last.l_ortho
                report.extensions["stage_a_attr_accuracy"] = attr_acc
                validate_report(report.to_dict())
                rel = run_dir.relative_to(out)
                save_checkpoint(m, run_dir / "stage_b.aorm")
                hist_b.to_csv(run_dir / "history.csv")
                report.write_json(run_dir / "report.json")
                report.write_f1_csv(run_dir / "f1.csv")
                entry.update(status="ok", stage_a_checkpoint=stage_a_entries[-1]["checkpoint"],
                             checkpoint=str(rel / "stage_b.aorm"), history=str(rel / "history.csv"),
                             report=str(rel / "report.json"), f1_csv=str(rel / "f1.csv"),
                             group_pcc=report.group_pcc, accuracy=report.accuracy,
                             final_l_ortho=hist_b.last.l_ortho)
                log.info("seed %d lambda %g: group PCC %.3f, accuracy %.3f",
                         seed, lam, report.group_pcc, report.accuracy)
            except Exception as e:  # noqa: BLE001
                log.error("seed %d lambda %g failed: %s", seed, lam, e)
                entry.update(status="failed", error=repr(e))
            runs.append(entry)

    manifest = {
        "config_hash": cfg.config_hash(),
        "config": cfg.semantic_dict(),
        "library_version": __version__,
        "wall_clock_seconds": time.time() - t0,
        "stage_a": stage_a_entries,
        "runs": runs,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def manifest_failed(manifest: dict) -> bool:
    return any(r["status"] != "ok" for r in manifest["runs"])


# -- lambda sweep -------------------------------------------------------------

SWEEP_FIELDS = ("lambda", "seed", "group_pcc", "accuracy", "final_l_ortho")


def summarize_sweep(rows: list[dict]) -> dict:
    by_lam: dict[float, list[dict]] = {}
    for r in rows:
        by_lam.setdefault(r["lambda"], []).append(r)
    summary = []
    for lam in sorted(by_lam):
        rs = by_lam[lam]
        item = {"lambda": lam, "n_seeds": len(rs)}
        for key in SWEEP_FIELDS[2:]:
            vals = np.array([r[key] for r in rs], dtype=float)
            item[f"{key}_mean"] = float(vals.mean())
            item[f"{key}_min"] = float(vals.min())
            item[f"{key}_max"] = float(vals.max())
        summary.append(item)
    out: dict[str, Any] = {"summary": summary, "best_lambda": None, "monotone_ordering": None}
    base = next((s for s in summary if s["lambda"] == 0.0), None)
    nonzero = [s for s in summary if s["lambda"] != 0.0]
    if nonzero:
        best = max(nonzero, key=lambda s: s["group_pcc_mean"])
        out["best_lambda"] = best["lambda"]
        if base is not None:
            out["monotone_ordering"] = best["group_pcc_mean"] > base["group_pcc_mean"]
    return out


def sweep_lambda(cfg: ExperimentConfig) -> dict:
    """Run every (lambda, seed) pair and aggregate into sweep.csv / sweep_summary.csv / sweep.json."""
    if len(set(cfg.lambda_values)) < 2:
        raise ConfigError("a sweep needs at least two distinct lambda values")
    manifest = run_experiment(cfg)
    rows = [{k: r[k] for k in SWEEP_FIELDS} for r in manifest["runs"] if r["status"] == "ok"]
    result = summarize_sweep(rows)
    result["rows"] = rows
    result["failed_runs"] = [r for r in manifest["runs"] if r["status"] != "ok"]
    out = Path(cfg.output_dir)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_FIELDS)
        for r in rows:
            w.writerow([repr(float(r["lambda"])), r["seed"]] + [repr(float(r[k])) for k in SWEEP_FIELDS[2:]])
    if result["summary"]:
        keys = list(result["summary"][0])
        with open(out / "sweep_summary.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, keys, lineterminator="\n")
            w.writeheader()
            w.writerows(result["summary"])
    (out / "sweep.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    result["manifest"] = manifest
    return result


# -- plots --------------------------------------------------------------------

class ReportParseError(ValueError):
    """Malformed report; ``field`` names the offending path."""

    def __init__(self, field_path: str, problem: str):
        super().__init__(f"{field_path}: {problem}")
        self.field = field_path


def _proportions(doc: dict, key: str) -> list[float]:
    if key not in doc:
        raise ReportParseError(key, "missing")
    entry = doc[key]
    if not isinstance(entry, dict) or "proportions" not in entry:
        raise ReportParseError(f"{key}.proportions", "missing")
    props = entry["proportions"]
    if not isinstance(props, list) or len(props) != 4:
        raise ReportParseError(f"{key}.proportions", "expected a list of 4 numbers")
    for i, v in enumerate(props):
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not 0.0 <= v <= 1.0:
            raise ReportParseError(f"{key}.proportions[{i}]", f"expected a number in [0, 1], got {v!r}")
    return [float(v) for v in props]


def histogram_svg(dist_g0, dist_g1, title: str = "") -> str:
    """Side-by-side per-group bar charts of 4-level prediction distributions."""
    panel_w, panel_h, top, bottom, left = 260, 200, 40, 40, 40
    bar_w, gap = 40, 15
    width = left + 2 * panel_w + 20
    height = top + panel_h + bottom
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
           f'<rect width="{width}" height="{height}" fill="white"/>']
    if title:
        out.append(f'<text x="{width / 2:.1f}" y="16" text-anchor="middle" font-size="14">{title}</text>')
    for k, (name, dist, colour) in enumerate((("group 0", dist_g0, "#4878a8"),
                                              ("group 1", dist_g1, "#c8683a"))):
        x0 = left + k * panel_w
        base_y = top + panel_h
        out.append(f'<text x="{x0 + 2 * (bar_w + gap):.1f}" y="{top - 6}" text-anchor="middle">{name}</text>')
        out.append(f'<line x1="{x0}" y1="{base_y}" x2="{x0 + 4 * (bar_w + gap)}" y2="{base_y}" stroke="black"/>')
        out.append(f'<line x1="{x0}" y1="{top}" x2="{x0}" y2="{base_y}" stroke="black"/>')
        for level, p in enumerate(dist):
            h = p * panel_h
            x = x0 + gap / 2 + level * (bar_w + gap)
            out.append(f'<rect x="{x:.1f}" y="{base_y - h:.2f}" width="{bar_w}" height="{h:.2f}" '
                       f'fill="{colour}"><title>level {level}: {p:.4f}</title></rect>')
            out.append(f'<text x="{x + bar_w / 2:.1f}" y="{base_y + 16}" text-anchor="middle">{level}</text>')
            out.append(f'<text x="{x + bar_w / 2:.1f}" y="{base_y - h - 4:.2f}" '
                       f'text-anchor="middle" font-size="10">{p:.2f}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def render_histograms(report_path, out_path) -> Path:
    """Render a report's per-group prediction distributions to an SVG file."""
    try:
        doc = json.loads(Path(report_path).read_text())
    except json.JSONDecodeError as e:
        raise ReportParseError("<root>", f"invalid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ReportParseError("<root>", "expected a JSON object")
    d0, d1 = _proportions(doc, "dist_g0"), _proportions(doc, "dist_g1")
    pcc = doc.get("group_pcc")
    title = f"predicted level distribution (group PCC {pcc:.3f})" if isinstance(pcc, (int, float)) \
        else "predicted level distribution"
    out_path = Path(out_path)
    out_path.write_text(histogram_svg(d0, d1, title))
    return out_path
