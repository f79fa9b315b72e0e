"""Subject-specific training and leave-one-seizure-record-out evaluation."""
from __future__ import annotations

import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .dataio.records import RecordSet, WindowedRecord
from .evaluation import (DEFAULT_TOLERANCE_S, EvalReport, PredictionTrack, aggregate_loocv,
                         evaluate_track)
from .loss import LossConfig, sswce_with_grad
from .model import Model, ModelConfig, build, save_checkpoint

log = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "sgd_momentum")
BALANCING = ("none", "oversample_positive")


class TrainingError(RuntimeError):
    pass


class FoldPlanError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    loss: LossConfig = LossConfig()
    class_balance: str = "oversample_positive"
    seed: int = 0
    early_stop_patience: Optional[int] = None
    # windows drawn per epoch; None = size of the training set
    samples_per_epoch: Optional[int] = None
    momentum: float = 0.9
    weight_decay: float = 0.0

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ValueError("epochs >= 1, batch_size >= 1 and learning_rate > 0 required")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.class_balance not in BALANCING:
            raise ValueError(f"class_balance must be one of {BALANCING}")
        if self.samples_per_epoch is not None and self.samples_per_epoch < 1:
            raise ValueError("samples_per_epoch must be positive")
        self.loss.validate()

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


@dataclass
class WindowSet:
    x: np.ndarray  # (n, C, T) float32
    y: np.ndarray  # (n,) int8
    record_ids: np.ndarray  # (n,) str

    def __len__(self):
        return len(self.y)

    @classmethod
    def from_records(cls, records: Sequence[WindowedRecord]) -> "WindowSet":
        if not records:
            raise ValueError("no records")
        return cls(np.concatenate([r.windows for r in records]),
                   np.concatenate([r.labels for r in records]).astype(np.int8),
                   np.concatenate([np.full(len(r.labels), r.record_id, dtype=object)
                                   for r in records]))


# ---------------------------------------------------------------------------
# optimizers


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr, self.b1, self.b2, self.eps, self.wd = lr, beta1, beta2, eps, weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads[k].astype(p.dtype, copy=False)
            if self.wd:
                g = g + self.wd * p
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            p -= (self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)).astype(p.dtype)


class SGDMomentum:
    def __init__(self, params, lr, momentum=0.9, weight_decay=0.0):
        self.params, self.lr, self.mu, self.wd = params, lr, momentum, weight_decay
        self.vel = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads):
        for k, p in self.params.items():
            g = grads[k].astype(p.dtype, copy=False)
            if self.wd:
                g = g + self.wd * p
            self.vel[k] = self.mu * self.vel[k] + g
            p -= (self.lr * self.vel[k]).astype(p.dtype)


def _param_refs(model: Model) -> dict:
    return {f"{name}.{k}": layer.params[k] for name, layer in model.layers
            for k in layer.params}


# ---------------------------------------------------------------------------
# training


def epoch_indices(rng: np.random.Generator, y: np.ndarray, n: int, balance: str) -> np.ndarray:
    """Training order for one epoch of ``n`` windows.

    With ``oversample_positive`` each slot is a positive window with
    probability 0.5 (positives drawn with replacement, negatives without
    replacement while they last).
    """
    if balance == "none":
        idx = rng.permutation(len(y))
        return np.resize(idx, n) if n != len(y) else idx
    pos = np.flatnonzero(y == 1)
    neg = np.flatnonzero(y == 0)
    if len(pos) == 0 or len(neg) == 0:
        raise TrainingError("oversample_positive needs both positive and negative windows")
    take_pos = rng.random(n) < 0.5
    n_pos = int(take_pos.sum())
    neg_order = np.resize(rng.permutation(neg), n - n_pos)
    out = np.empty(n, dtype=np.int64)
    out[take_pos] = pos[rng.integers(0, len(pos), n_pos)]
    out[~take_pos] = neg_order
    return out


@dataclass
class TrainResult:
    model: Model
    history: list  # one dict per epoch


def train(model_config: ModelConfig, windows: WindowSet, train_config: TrainConfig,
          validation: Optional[WindowSet] = None) -> TrainResult:
    """Fit a freshly built model. Everything random derives from ``train_config.seed``.

    The model's ``input_scale`` is set to 1 / std of the training windows.
    """
    train_config.validate()
    if len(windows) == 0:
        raise TrainingError("empty training set")
    std = float(np.std(windows.x, dtype=np.float64))
    cfg = model_config.replace(seed=train_config.seed,
                               input_scale=1.0 / std if std > 0 else 1.0)
    model = build(cfg)
    params = _param_refs(model)
    if train_config.optimizer == "adam":
        opt = Adam(params, train_config.learning_rate, weight_decay=train_config.weight_decay)
    else:
        opt = SGDMomentum(params, train_config.learning_rate, train_config.momentum,
                          train_config.weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence([train_config.seed, 0x7A1]))
    n_epoch = train_config.samples_per_epoch or len(windows)
    history = []
    best_val, best_state, stale = np.inf, None, 0
    for epoch in range(train_config.epochs):
        order = epoch_indices(rng, windows.y, n_epoch, train_config.class_balance)
        losses = []
        for step, i in enumerate(range(0, n_epoch, train_config.batch_size)):
            idx = order[i:i + train_config.batch_size]
            xb = windows.x[idx][:, None]
            logits = model.forward(xb)
            loss, d_logits = sswce_with_grad(windows.y[idx], logits, train_config.loss)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}")
            opt.step(model.backward(d_logits))
            losses.append(loss)
        entry = {"epoch": epoch, "loss": float(np.mean(losses)),
                 "positive_fraction": float(np.mean(windows.y[order]))}
        if validation is not None and len(validation):
            vz = model.logits(validation.x)
            vloss, _ = sswce_with_grad(validation.y, vz, train_config.loss)
            entry["val_loss"] = float(vloss)
            entry["val_accuracy"] = float(np.mean((vz[:, 1] > vz[:, 0]) == validation.y))
            if train_config.early_stop_patience is not None:
                if vloss < best_val:
                    best_val, best_state, stale = vloss, model.copy(), 0
                else:
                    stale += 1
        history.append(entry)
        log.debug("epoch %d loss %.5f", epoch, entry["loss"])
        if best_state is not None and stale > train_config.early_stop_patience:
            model = best_state
            break
    return TrainResult(model, history)


def write_jsonl(path, rows: Sequence[dict]) -> None:
    from .model import atomic_write
    atomic_write(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows).encode())


# ---------------------------------------------------------------------------
# leave-one-seizure-record-out


@dataclass
class Fold:
    held_out: str
    train_records: list


@dataclass
class FoldPlan:
    subject: str
    folds: list
    repetitions: int = 5


def make_fold_plan(record_set: RecordSet, repetitions: int = 5) -> FoldPlan:
    """One fold per seizure record; seizure-free records train in every fold."""
    seizure_ids = record_set.seizure_record_ids
    if len(seizure_ids) < 2:
        raise FoldPlanError(f"subject {record_set.subject} has {len(seizure_ids)} seizure "
                            "record(s); LOOCV needs >= 2, use a single train/test holdout")
    all_ids = sorted(r.record_id for r in record_set.records)
    folds = [Fold(h, [r for r in all_ids if r != h]) for h in seizure_ids]
    return FoldPlan(record_set.subject, folds, repetitions)


def cell_seed(root_seed: int, fold_index: int, repetition: int) -> int:
    """Seed of one fold x repetition cell; independent of the loss weights."""
    seq = np.random.SeedSequence([root_seed, fold_index, repetition])
    return int(seq.generate_state(1, np.uint32)[0])


@dataclass
class RunResult:
    fold: int
    held_out: str
    repetition: int
    seed: int
    raw: Optional[EvalReport]
    smoothed: Optional[EvalReport]
    status: str = "ok"
    history: list = field(default_factory=list)


@dataclass
class LoocvResult:
    subject: str
    loss: LossConfig
    runs: list
    fold_raw: list
    fold_smoothed: list
    raw: Optional[EvalReport]
    smoothed: Optional[EvalReport]

    @property
    def failed(self) -> list:
        return [r for r in self.runs if r.status != "ok"]


def _default_train_fn(model_config, windows, train_config):
    return train(model_config, windows, train_config)


def evaluate_record(predictor, rec: WindowedRecord, seed: Optional[int] = None,
                    tolerance_s: float = DEFAULT_TOLERANCE_S) -> tuple[EvalReport, EvalReport]:
    """(raw, smoothed) reports of ``predictor.predict_labels`` on one record."""
    pred = predictor.predict_labels(rec.windows)
    track = PredictionTrack(rec.record_id, rec.starts_s, pred, rec.stride_s,
                            rec.duration_s / 3600.0, rec.window_s)
    return (evaluate_track(track, rec.labels, rec.seizure_events, tolerance_s, False, seed),
            evaluate_track(track, rec.labels, rec.seizure_events, tolerance_s, True, seed))


def run_loocv(record_set: RecordSet, model_config: ModelConfig, train_config: TrainConfig,
              repetitions: int = 5, tolerance_s: float = DEFAULT_TOLERANCE_S,
              train_fn: Callable = _default_train_fn, checkpoint_dir: Optional[str] = None,
              log_dir: Optional[str] = None) -> LoocvResult:
    """Train and score every fold x repetition, then aggregate.

    Seeds come from ``cell_seed(train_config.seed, fold, repetition)``.
    Failing cells are recorded with their error and excluded from the
    aggregate; the remaining cells still run.
    """
    plan = make_fold_plan(record_set, repetitions)
    runs = []
    for fi, fold in enumerate(plan.folds):
        train_recs = [record_set.by_id(r) for r in fold.train_records]
        windows = WindowSet.from_records(train_recs)
        if np.any(windows.record_ids == fold.held_out):
            raise AssertionError(f"held-out record {fold.held_out} leaked into training")
        test = record_set.by_id(fold.held_out)
        for rep in range(repetitions):
            seed = cell_seed(train_config.seed, fi, rep)
            try:
                result = train_fn(model_config, windows, train_config.replace(seed=seed))
                predictor = getattr(result, "model", result)
                raw, sm = evaluate_record(predictor, test, seed, tolerance_s)
                history = getattr(result, "history", [])
                runs.append(RunResult(fi, fold.held_out, rep, seed, raw, sm, "ok", history))
                tag = f"{plan.subject}_f{fi}_r{rep}_a{train_config.loss.alpha:g}_b{train_config.loss.beta:g}"
                if checkpoint_dir and isinstance(predictor, Model):
                    save_checkpoint(predictor, os.path.join(checkpoint_dir, tag + ".ckpt"))
                if log_dir and history:
                    write_jsonl(os.path.join(log_dir, tag + ".jsonl"), history)
            except Exception as e:  # keep going; the failure is reported per cell
                log.error("fold %d (%s) repetition %d failed: %r", fi, fold.held_out, rep, e)
                runs.append(RunResult(fi, fold.held_out, rep, seed, None, None,
                                      f"failed: {e!r}"))
    per_fold_raw = [[r.raw for r in runs if r.fold == fi and r.raw is not None]
                    for fi in range(len(plan.folds))]
    per_fold_sm = [[r.smoothed for r in runs if r.fold == fi and r.smoothed is not None]
                   for fi in range(len(plan.folds))]
    if any(per_fold_raw):
        fold_raw, agg_raw = aggregate_loocv(per_fold_raw)
        fold_sm, agg_sm = aggregate_loocv(per_fold_sm)
    else:
        fold_raw, agg_raw, fold_sm, agg_sm = [], None, [], None
    return LoocvResult(plan.subject, train_config.loss, runs, fold_raw, fold_sm, agg_raw, agg_sm)


def loocv_rows(result: LoocvResult) -> list[dict]:
    """Flat rows (raw and smoothed per fold x seed) for CSV output."""
    from .evaluation import report_row
    rows = []
    for r in result.runs:
        base = dict(subject=result.subject, fold=r.fold, held_out=r.held_out, seed=r.seed,
                    alpha=result.loss.alpha, beta=result.loss.beta)
        if r.raw is None:
            rows.append(dict(base, status=r.status))
            continue
        for rep in (r.raw, r.smoothed):
            rows.append(report_row(rep, **base, status=r.status))
    return rows
