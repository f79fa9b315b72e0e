"""``epidenet`` command line: synth, loocv, train, quantize, eval, bench, report.

Exit codes: 0 success, 2 configuration error, 3 data or file error,
4 run failure (some fold or cell failed).
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import sys
import time
from collections import defaultdict

import numpy as np
import yaml

from . import pipeline, quantize as q
from .dataio import DataError, SynthSpec, manifest as synth_manifest, synth_dataset, write_windows
from .evaluation import EvalReport, aggregate, aggregate_loocv, format_table, reports_csv, report_row
from .loss import LossConfig
from .model import (CKPT_MAGIC, CheckpointFormatError, ConfigError, ModelConfig, Model,
                    atomic_write, count_macs, load_checkpoint, save_checkpoint)
from .tensor import ShapeError
from .train import FoldPlanError, TrainingError, WindowSet, evaluate_record, train, write_jsonl

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUN = 0, 2, 3, 4


class RunFailure(RuntimeError):
    pass


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _write_text(path, text: str) -> None:
    atomic_write(path, text.encode())


def _load_yaml(path) -> dict:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no such file: {path}")
    with open(path) as f:
        try:
            d = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: {e}") from None
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    return d


def _load_run(path) -> dict:
    return pipeline.anchor_paths(_load_yaml(path), os.path.dirname(os.path.abspath(path)))


def _load_records(source: str):
    """Windows from a ``synth`` output directory or a run config file."""
    if os.path.isdir(source):
        if not os.path.isfile(os.path.join(source, "manifest.json")):
            raise DataError(f"{source}: no manifest.json (not a synth output directory)")
        return pipeline.load_cache_dir(source)
    return pipeline.load_dataset(pipeline.RunConfig.from_dict(_load_run(source)))


def _load_artifact(path):
    """A float checkpoint or an INT8 bundle, told apart by the file magic."""
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no such file: {path}")
    with open(path, "rb") as f:
        magic = f.read(8)
    if magic == CKPT_MAGIC:
        return load_checkpoint(path)
    if magic == q.BUNDLE_MAGIC:
        return q.read_bundle(path)
    raise CheckpointFormatError(f"{path}: neither a checkpoint nor an INT8 bundle")


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    doc = _load_yaml(args.spec)
    win = doc.pop("windowing", {})
    try:
        spec = SynthSpec.from_dict(doc)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"synthetic spec: {e}") from None
    cfg = pipeline.RunConfig(dataset={"synthetic": dataclasses.asdict(spec)},
                             windowing=dict(win, window_s=args.window_s or win.get("window_s", 4.0)))
    if os.path.isdir(args.out_dir) and os.listdir(args.out_dir) and not args.force:
        print(f"refusing to write into non-empty {args.out_dir} (use --force)", file=sys.stderr)
        return EXIT_CONFIG
    os.makedirs(os.path.join(args.out_dir, "windows"), exist_ok=True)
    subjects = synth_dataset(spec)
    n = 0
    for sub in subjects:
        for wr in pipeline._window_recordings(sub.recordings, cfg):
            write_windows(os.path.join(args.out_dir, "windows", wr.record_id + ".epwc"), wr)
            n += len(wr.labels)
    _write_text(os.path.join(args.out_dir, "manifest.json"), synth_manifest(spec, subjects))
    _write_text(os.path.join(args.out_dir, "resolved_config.json"),
                json.dumps(cfg.resolved(), indent=2, sort_keys=True) + "\n")
    hours = sum(r.duration_s for s in subjects for r in s.recordings) / 3600
    print(f"{len(subjects)} subject(s), {hours:g} h, {n} windows -> {args.out_dir}")
    return EXIT_OK


def _run_config(args) -> pipeline.RunConfig:
    d = _load_run(args.config)
    loss = dict(d.get("loss", {}))
    if args.loss:
        loss["kind"] = args.loss
    if args.alpha_grid is not None:
        loss["alpha_grid"] = args.alpha_grid
    if args.beta_grid is not None:
        loss["beta_grid"] = args.beta_grid
    d["loss"] = loss
    ev = dict(d.get("evaluation", {}))
    if args.repetitions is not None:
        ev["repetitions"] = args.repetitions
    if args.no_smoothing:
        ev["smoothing"] = False
    d["evaluation"] = ev
    if args.seed is not None:
        d["seed"] = args.seed
    if args.out:
        d["output_dir"] = args.out
    return pipeline.RunConfig.from_dict(d)


def cmd_loocv(args) -> int:
    cfg = _run_config(args)
    results = pipeline.run_experiment(cfg)
    print(open(os.path.join(cfg.output_dir, "aggregate.txt")).read(), end="")
    if pipeline.any_failed(results):
        for sr in results:
            for (a, b), res in sr.cells.items():
                for r in res.failed:
                    print(f"FAILED {sr.subject} alpha={a:g} beta={b:g} fold={r.fold} "
                          f"seed={r.seed}: {r.status}", file=sys.stderr)
        return EXIT_RUN
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = pipeline.RunConfig.from_dict(_load_run(args.config))
    sets = pipeline.load_dataset(cfg)
    rs = sets[0] if args.subject is None else next(
        (s for s in sets if s.subject == args.subject), None)
    if rs is None:
        raise DataError(f"no subject {args.subject!r} in dataset")
    tc = cfg.train_config()
    tc = tc.replace(loss=LossConfig(args.alpha, args.beta))
    windows = WindowSet.from_records(rs.records)
    mcfg = ModelConfig(windows.x.shape[1], windows.x.shape[2],
                       activation=cfg.model.get("activation", "relu"))
    try:
        result = train(mcfg, windows, tc)
    except TrainingError as e:
        raise RunFailure(str(e)) from None
    save_checkpoint(result.model, args.out)
    write_jsonl(args.out + ".jsonl", result.history)
    last = result.history[-1]
    print(f"trained {rs.subject} on {len(windows)} windows, final loss {last['loss']:.5f} "
          f"-> {args.out}")
    return EXIT_OK


def _flat_windows(sets):
    x = np.concatenate([r.windows for s in sets for r in s.records])
    y = np.concatenate([r.labels for s in sets for r in s.records])
    return x, y


def comparison_rows(model: Model, qm: q.QuantizedModel, x, y) -> list[dict]:
    from .evaluation import window_metrics
    pf = model.predict_labels(x)
    pq = qm.predict_labels(x)
    mf, mq = window_metrics(pf, y), window_metrics(pq, y)
    rows = [{"metric": "argmax_agreement", "float": 100.0, "int8": 100.0 * float(np.mean(pf == pq)),
             "delta": 100.0 * float(np.mean(pf == pq)) - 100.0}]
    for name in ("sensitivity", "specificity"):
        a, b = getattr(mf, name), getattr(mq, name)
        rows.append({"metric": name, "float": a, "int8": b, "delta": b - a})
    return rows


def _rows_csv(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def cmd_quantize(args) -> int:
    if not os.path.isfile(args.checkpoint):
        raise FileNotFoundError(f"no such checkpoint: {args.checkpoint}")
    model = load_checkpoint(args.checkpoint)
    x, y = _flat_windows(_load_records(args.calibration))
    if len(x) == 0:
        raise q.QuantizationError("calibration set is empty")
    if args.max_windows and len(x) > args.max_windows:
        idx = np.random.default_rng(0).choice(len(x), args.max_windows, replace=False)
        idx.sort()
        x, y = x[idx], y[idx]
    ranges = q.calibrate(model, x, args.percentile)
    qm = q.quantize_model(model, ranges)
    q.write_bundle(qm, args.out_bundle, args.out_bundle + ".json")
    text = _rows_csv(comparison_rows(model, qm, x, y), ("metric", "float", "int8", "delta"))
    _write_text(args.compare_csv or args.out_bundle + ".compare.csv", text)
    print(text, end="")
    return EXIT_OK


def cmd_eval(args) -> int:
    predictor = _load_artifact(args.artifact)
    sets = _load_records(args.data)
    rows, table = [], []
    for rs in sets:
        raws, sms = [], []
        for rec in rs.records:
            raw, sm = evaluate_record(predictor, rec, None, args.tolerance_s)
            raws.append(raw)
            sms.append(sm)
            rows += [report_row(r, subject=rs.subject, held_out=rec.record_id, status="ok")
                     for r in (raw, sm)]
        hours = [r.duration_s for r in rs.records]
        table.append((rs.subject, aggregate(raws, hours), aggregate(sms, hours)))
    if args.csv:
        _write_text(args.csv, reports_csv(rows))
    print(format_table(table))
    return EXIT_OK


def _time_it(fn, runs: int) -> float:
    fn()  # warm-up
    t0 = time.perf_counter()
    for _ in range(runs):
        fn()
    return runs / (time.perf_counter() - t0)


def cmd_bench(args) -> int:
    art = _load_artifact(args.artifact)
    if isinstance(art, Model):
        model = art
        c, t = model.config.channels, model.config.samples
        # ranges only shape timing, so a synthetic calibration batch suffices
        x_cal = np.random.default_rng(0).standard_normal((64, c, t)).astype(np.float32)
        x_cal /= np.float32(model.config.input_scale)
        qm = q.quantize_model(model, q.calibrate(model, x_cal))
    else:
        model, qm = None, art
        c, t = qm.channels, qm.samples
    mc = count_macs(ModelConfig(c, t))
    for name, n in mc.per_layer.items():
        print(f"{name:<12}{n:>12,d}")
    print(f"{'total':<12}{mc.total:>12,d}")
    man = q.manifest(qm)
    x = np.random.default_rng(1).standard_normal((1, 1, c, t)).astype(np.float32)
    if model is not None:
        print(f"float32 parameter bytes {4 * model.n_parameters()}")
        rate = _time_it(lambda: model.forward(x), args.runs)
        print(f"float32 host throughput {rate:.1f} windows/s ({rate * mc.total / 1e6:.2f} MMAC/s)")
    print(f"int8 parameter bytes {man['parameter_bytes']} (+{man['metadata_bytes']} metadata)")
    xq = qm.quantize_input(x[:, 0])
    rate = _time_it(lambda: q.quantized_forward(qm, xq), args.runs)
    print(f"int8 host throughput {rate:.1f} windows/s ({rate * mc.total / 1e6:.2f} MMAC/s)")
    return EXIT_OK


def _report_from_row(row: dict) -> EvalReport:
    f = {k: float(row[k]) for k in ("tp", "fp", "tn", "fn", "sensitivity", "specificity",
                                    "fp_per_hour", "detected_events", "total_events")}
    return EvalReport(**f, smoothed=row["smoothed"] == "1", record_ids=(row["held_out"],),
                      seed=int(row["seed"]))


def cmd_report(args) -> int:
    path = os.path.join(args.run_dir, "folds.csv")
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no folds.csv in {args.run_dir}")
    groups = defaultdict(lambda: defaultdict(lambda: {False: [], True: []}))
    with open(path) as f:
        for row in csv.DictReader(f):
            if row["status"] != "ok":
                continue
            rep = _report_from_row(row)
            key = (row["subject"], float(row["alpha"]), float(row["beta"]))
            groups[key][int(row["fold"])][rep.smoothed].append(rep)
    table = []
    for (subject, a, b), folds in sorted(groups.items()):
        order = sorted(folds)
        _, raw = aggregate_loocv([folds[k][False] for k in order])
        _, sm = aggregate_loocv([folds[k][True] for k in order])
        table.append((f"{subject} a={a:g} b={b:g}", raw, sm))
    print(format_table(table))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="epidenet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset and cache its windows")
    s.add_argument("spec")
    s.add_argument("out_dir")
    s.add_argument("--window-s", type=float)
    s.add_argument("--force", action="store_true")
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("loocv", help="leave-one-seizure-record-out training and evaluation")
    s.add_argument("config")
    s.add_argument("--out")
    s.add_argument("--loss", choices=("ce", "sswce"))
    s.add_argument("--alpha-grid", type=_floats)
    s.add_argument("--beta-grid", type=_floats)
    s.add_argument("--repetitions", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--no-smoothing", action="store_true")
    s.set_defaults(fn=cmd_loocv)

    s = sub.add_parser("train", help="train one model on all records of a subject")
    s.add_argument("config")
    s.add_argument("--out", required=True)
    s.add_argument("--subject")
    s.add_argument("--alpha", type=float, default=0.0)
    s.add_argument("--beta", type=float, default=0.0)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("quantize", help="INT8 post-training quantization")
    s.add_argument("checkpoint")
    s.add_argument("calibration", help="synth output directory or run config")
    s.add_argument("out_bundle")
    s.add_argument("--percentile", type=float)
    s.add_argument("--max-windows", type=int, default=1000)
    s.add_argument("--compare-csv")
    s.set_defaults(fn=cmd_quantize)

    s = sub.add_parser("eval", help="score a checkpoint or bundle on a dataset")
    s.add_argument("artifact")
    s.add_argument("data", help="synth output directory or run config")
    s.add_argument("--tolerance-s", type=float, default=30.0)
    s.add_argument("--csv")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("bench", help="MACs, parameter bytes and host throughput")
    s.add_argument("artifact")
    s.add_argument("--runs", type=int, default=100)
    s.set_defaults(fn=cmd_bench)

    s = sub.add_parser("report", help="re-aggregate a loocv output directory")
    s.add_argument("run_dir")
    s.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FoldPlanError, CheckpointFormatError, ShapeError,
            q.QuantizationError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (RunFailure, TrainingError) as e:
        print(f"run failed: {e}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
