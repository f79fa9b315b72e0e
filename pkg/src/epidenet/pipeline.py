"""Run configuration and the end-to-end LOOCV experiment behind the CLI."""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import Optional

import yaml

from .dataio import (LabelRule, RecordSet, SynthSpec, decimate, load_edf_subject,
                     read_windows, synth_dataset, windowize_record)
from .dataio.preprocess import TEMPORAL_MONTAGE
from .evaluation import EvalReport, aggregate, format_table, reports_csv
from .loss import (DEFAULT_GRID, LossConfig, grid_csv, grid_search, metric_sensitivity,
                   metric_sensitivity_at_specificity, metric_sensitivity_within_fph)
from .model import ConfigError, ModelConfig, atomic_write
from .train import LoocvResult, TrainConfig, loocv_rows, run_loocv


SELECTIONS = ("sensitivity_within_ce_fph", "sensitivity", "sensitivity_at_spec99")


@dataclass
class RunConfig:
    dataset: dict
    windowing: dict = field(default_factory=lambda: {"window_s": 4.0})
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    loss: dict = field(default_factory=lambda: {"kind": "ce"})
    evaluation: dict = field(default_factory=dict)
    output_dir: str = "runs/latest"
    seed: int = 0

    # -- derived pieces ------------------------------------------------------
    @property
    def window_s(self) -> float:
        return float(self.windowing.get("window_s", 4.0))

    @property
    def stride_s(self) -> float:
        return float(self.windowing.get("stride_s", self.window_s))

    @property
    def label_rule(self) -> LabelRule:
        return LabelRule(float(self.windowing.get("min_overlap", 0.5)))

    @property
    def target_rate_hz(self) -> Optional[int]:
        r = self.windowing.get("target_rate_hz")
        return None if r is None else int(r)

    @property
    def repetitions(self) -> int:
        return int(self.evaluation.get("repetitions", 5))

    @property
    def tolerance_s(self) -> float:
        return float(self.evaluation.get("tolerance_s", 30.0))

    @property
    def smoothing(self) -> bool:
        return bool(self.evaluation.get("smoothing", True))

    @property
    def loss_kind(self) -> str:
        return self.loss.get("kind", "ce")

    def grid(self) -> tuple[list, list]:
        if self.loss_kind == "ce":
            return [0.0], [0.0]
        if "alpha_grid" in self.loss or "beta_grid" in self.loss:
            return ([float(a) for a in self.loss.get("alpha_grid", DEFAULT_GRID)],
                    [float(b) for b in self.loss.get("beta_grid", DEFAULT_GRID)])
        if "alpha" in self.loss or "beta" in self.loss:
            return [float(self.loss.get("alpha", 0))], [float(self.loss.get("beta", 0))]
        return list(DEFAULT_GRID), list(DEFAULT_GRID)

    def train_config(self) -> TrainConfig:
        kw = {k: v for k, v in self.train.items() if k != "loss"}
        kw.setdefault("seed", self.seed)
        try:
            tc = TrainConfig(**kw)
            tc.validate()
        except (TypeError, ValueError) as e:
            raise ConfigError(f"train: {e}") from None
        return tc

    def validate(self) -> None:
        ds = self.dataset
        if sum(k in ds for k in ("synthetic", "cache_dir", "edf_dir")) != 1:
            raise ConfigError("dataset needs exactly one of synthetic / cache_dir / edf_dir")
        if "edf_dir" in ds and "summary" not in ds:
            raise ConfigError("dataset.edf_dir requires dataset.summary")
        if "synthetic" in ds:
            try:
                self.synth_spec()
            except (TypeError, ValueError) as e:
                raise ConfigError(f"dataset.synthetic: {e}") from None
        if self.loss_kind not in ("ce", "sswce"):
            raise ConfigError(f"loss.kind must be ce or sswce, got {self.loss_kind!r}")
        alphas, betas = self.grid()
        if min(alphas + betas) < 0:
            raise ConfigError("alpha and beta must be non-negative")
        sel = self.loss.get("selection", SELECTIONS[0])
        if sel not in SELECTIONS:
            raise ConfigError(f"loss.selection must be one of {SELECTIONS}")
        if sel == "sensitivity_within_ce_fph" and (0.0 not in alphas or 0.0 not in betas):
            raise ConfigError("selection sensitivity_within_ce_fph needs alpha=0, beta=0 in the grid")
        if self.repetitions < 1:
            raise ConfigError("evaluation.repetitions must be >= 1")
        if self.window_s <= 0 or self.stride_s <= 0:
            raise ConfigError("window_s and stride_s must be positive")
        self.train_config()

    def synth_spec(self) -> SynthSpec:
        spec = self.dataset["synthetic"]
        if isinstance(spec, str):
            with open(spec) as f:
                spec = yaml.safe_load(f)
            spec = {k: v for k, v in spec.items() if k != "windowing"}
        return SynthSpec.from_dict(spec)

    def resolved(self) -> dict:
        d = dataclasses.asdict(self)
        if "synthetic" in self.dataset:
            d["dataset"] = {"synthetic": dataclasses.asdict(self.synth_spec())}
        d["train"] = dataclasses.asdict(self.train_config())
        alphas, betas = self.grid()
        d["loss"] = dict(self.loss, alpha_grid=alphas, beta_grid=betas,
                         selection=self.loss.get("selection", SELECTIONS[0]))
        d["evaluation"] = {"repetitions": self.repetitions, "tolerance_s": self.tolerance_s,
                           "smoothing": self.smoothing}
        d["windowing"] = {"window_s": self.window_s, "stride_s": self.stride_s,
                          "min_overlap": self.label_rule.min_overlap,
                          "target_rate_hz": self.target_rate_hz}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        if "dataset" not in d:
            raise ConfigError("config needs a dataset section")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as f:
            d = yaml.safe_load(f)
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: expected a mapping")
        return cls.from_dict(anchor_paths(d, os.path.dirname(os.path.abspath(path))))


DATASET_PATH_KEYS = ("synthetic", "cache_dir", "edf_dir", "summary")


def anchor_paths(d: dict, base: str) -> dict:
    """Make relative dataset paths relative to ``base`` (the config's directory)."""
    ds = d.get("dataset")
    if not isinstance(ds, dict):
        return d
    ds = dict(ds)
    for key in DATASET_PATH_KEYS:
        v = ds.get(key)
        if isinstance(v, str) and not os.path.isabs(v):
            ds[key] = os.path.join(base, v)
    return dict(d, dataset=ds)


# ---------------------------------------------------------------------------
# datasets


def _window_recordings(recordings, cfg: RunConfig):
    out = []
    for rec in recordings:
        if cfg.target_rate_hz and rec.sample_rate_hz != cfg.target_rate_hz:
            if rec.sample_rate_hz % cfg.target_rate_hz:
                raise ConfigError(f"cannot decimate {rec.sample_rate_hz} Hz "
                                  f"to {cfg.target_rate_hz} Hz")
            rec = decimate(rec, rec.sample_rate_hz // cfg.target_rate_hz)
        out.append(windowize_record(rec, cfg.window_s, cfg.stride_s, cfg.label_rule))
    return out


def load_dataset(cfg: RunConfig) -> list[RecordSet]:
    ds = cfg.dataset
    if "synthetic" in ds:
        return [RecordSet(s.subject, _window_recordings(s.recordings, cfg))
                for s in synth_dataset(cfg.synth_spec())]
    if "cache_dir" in ds:
        return load_cache_dir(ds["cache_dir"])
    return [load_edf_subject(ds["edf_dir"], ds["summary"], ds.get("subject"),
                             ds.get("channels", TEMPORAL_MONTAGE),
                             cfg.target_rate_hz or 256, cfg.window_s, cfg.stride_s,
                             cfg.label_rule)]


def load_cache_dir(path) -> list[RecordSet]:
    """Read the windows written by ``epidenet synth``, grouped by subject."""
    with open(os.path.join(path, "manifest.json")) as f:
        man = json.load(f)
    sets = []
    for sub in man["subjects"]:
        recs = [read_windows(os.path.join(path, "windows", r["record_id"] + ".epwc"))
                for r in sub["records"]]
        sets.append(RecordSet(sub["subject"], recs))
    return sets


# ---------------------------------------------------------------------------
# experiment


@dataclass
class SubjectResult:
    subject: str
    cells: dict  # (alpha, beta) -> LoocvResult
    selected: tuple

    @property
    def baseline(self) -> Optional[LoocvResult]:
        return self.cells.get((0.0, 0.0))

    @property
    def best(self) -> LoocvResult:
        return self.cells[self.selected]


def _primary(result: LoocvResult, smoothing: bool) -> EvalReport:
    return result.smoothed if smoothing else result.raw


def run_subject(record_set: RecordSet, cfg: RunConfig, checkpoint_dir=None,
                log_dir=None) -> SubjectResult:
    mcfg = ModelConfig(record_set.records[0].windows.shape[1],
                       record_set.records[0].windows.shape[2],
                       activation=cfg.model.get("activation", "relu"))
    tc = cfg.train_config()
    results = {}

    def train_cell(alpha, beta):
        res = run_loocv(record_set, mcfg, tc.replace(loss=LossConfig(alpha, beta)),
                        cfg.repetitions, cfg.tolerance_s, checkpoint_dir=checkpoint_dir,
                        log_dir=log_dir)
        results[(alpha, beta)] = res
        rep = _primary(res, cfg.smoothing)
        if rep is None:
            raise RuntimeError(f"all runs failed for alpha={alpha}, beta={beta}")
        return rep

    alphas, betas = cfg.grid()
    if len(alphas) * len(betas) == 1:
        train_cell(alphas[0], betas[0])
        return SubjectResult(record_set.subject, results, (alphas[0], betas[0]))
    sel = cfg.loss.get("selection", SELECTIONS[0])
    if sel == "sensitivity_within_ce_fph":
        # evaluate the plain cross-entropy cell first; it fixes the FP/h ceiling
        ceiling = train_cell(0.0, 0.0).fp_per_hour
        metric = metric_sensitivity_within_fph(ceiling)
    elif sel == "sensitivity_at_spec99":
        metric = metric_sensitivity_at_specificity(99.0)
    else:
        metric = metric_sensitivity

    def cached(alpha, beta):
        if (alpha, beta) in results:
            return _primary(results[(alpha, beta)], cfg.smoothing)
        return train_cell(alpha, beta)

    gr = grid_search(cached, alphas, betas, metric)
    return SubjectResult(record_set.subject, results, gr.best)


def grid_rows(sr: SubjectResult, smoothing: bool) -> list[dict]:
    rows = []
    for (a, b), res in sorted(sr.cells.items()):
        reps = sorted({r.repetition for r in res.runs})
        for rep in reps:
            reports = [(r.smoothed if smoothing else r.raw) for r in res.runs
                       if r.repetition == rep and r.raw is not None]
            if not reports:
                continue
            agg = aggregate(reports, tally="sum")
            rows.append(dict(alpha=a, beta=b, seed=rep, sensitivity=agg.sensitivity,
                             specificity=agg.specificity, fp_per_hour=agg.fp_per_hour,
                             detected_events=agg.detected_events,
                             total_events=agg.total_events))
    return rows


def summary_table(results: list[SubjectResult]) -> str:
    rows = []
    for sr in results:
        if sr.baseline is not None and sr.baseline.raw is not None:
            rows.append((f"{sr.subject} CE", sr.baseline.raw, sr.baseline.smoothed))
        if sr.selected != (0.0, 0.0) or sr.baseline is None:
            best = sr.best
            name = f"{sr.subject} SSWCE" if sr.selected != (0.0, 0.0) else sr.subject
            if best.raw is not None:
                rows.append((name, best.raw, best.smoothed))
    lines = [format_table(rows)]
    for sr in results:
        lines.append(f"{sr.subject}: selected alpha={sr.selected[0]:g} beta={sr.selected[1]:g}")
    return "\n".join(lines) + "\n"


def run_experiment(cfg: RunConfig, write: bool = True) -> list[SubjectResult]:
    """Load data, run every subject, and (optionally) write all outputs."""
    out = cfg.output_dir
    ckpt_dir = log_dir = None
    if write:
        ckpt_dir = os.path.join(out, "checkpoints")
        log_dir = os.path.join(out, "logs")
        os.makedirs(ckpt_dir, exist_ok=True)
        os.makedirs(log_dir, exist_ok=True)
        atomic_write(os.path.join(out, "resolved_config.json"),
                     (json.dumps(cfg.resolved(), indent=2, sort_keys=True) + "\n").encode())
    results = [run_subject(rs, cfg, ckpt_dir, log_dir) for rs in load_dataset(cfg)]
    if write:
        rows = [row for sr in results for res in sr.cells.values() for row in loocv_rows(res)]
        atomic_write(os.path.join(out, "folds.csv"), reports_csv(rows).encode())
        if any(len(sr.cells) > 1 for sr in results):
            grows = []
            for sr in results:
                grows += grid_rows(sr, cfg.smoothing)
            atomic_write(os.path.join(out, "grid.csv"), grid_csv(grows).encode())
        atomic_write(os.path.join(out, "aggregate.txt"), summary_table(results).encode())
    return results


def any_failed(results: list[SubjectResult]) -> bool:
    return any(res.failed for sr in results for res in sr.cells.values())
