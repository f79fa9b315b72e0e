"""The ten acceptance criteria. Each test records one PASS/FAIL line.

Criteria 5, 6 and 10 share two full runs of the synthetic LOOCV grid
(about 15 minutes each on one core).
"""
import dataclasses
import os
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from epidenet import pipeline
from epidenet.dataio import Recording, decode_windows, encode_windows, parse_chbmit_summary, \
    parse_edf, write_edf
from epidenet.evaluation import PredictionTrack, event_metrics, window_metrics
from epidenet.loss import LossConfig, cross_entropy, soft_confusion, sswce, sswce_with_grad
from epidenet.model import ModelConfig, build, count_macs, count_macs_instrumented, load_checkpoint
from epidenet.quantize import calibrate, quantize_model, quantized_forward
from epidenet.tensor import Conv2D, Dense, Flatten, GlobalAvgPool, MaxPool2D, ReLU

from oracles import central_difference, events_brute, quantized_forward_exact, rel_error

HERE = os.path.dirname(__file__)
CONFIG = os.path.join(HERE, "data", "acceptance.yaml")


def verdict(n, title, ok, detail, started):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title}  [{detail}; {time.time() - started:.1f}s]"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# -- 1 ------------------------------------------------------------------------------

def _layer_error(layer, x, r):
    up = r.standard_normal(layer.forward(x).shape)

    def loss():
        return float(np.sum(layer.forward(x) * up))

    layer.forward(x)
    g = layer.backward(up)
    errs = [rel_error(g.d_input, central_difference(loss, x))]
    if layer.params:
        errs.append(rel_error(g.d_weights, central_difference(loss, layer.params["weights"])))
        errs.append(rel_error(g.d_bias, central_difference(loss, layer.params["bias"])))
    return max(errs)


def test_criterion_1_gradients():
    t0 = time.time()
    r = np.random.default_rng(1)
    conv = Conv2D(2, 3, (2, 4))
    conv.params = {"weights": r.standard_normal((3, 2, 2, 4)), "bias": r.standard_normal(3)}
    dense = Dense(6, 2)
    dense.params = {"weights": r.standard_normal((2, 6)), "bias": r.standard_normal(2)}
    # maxpool and relu inputs are kept away from ties and the kink
    cases = {
        "conv2d": (conv, r.standard_normal((2, 2, 3, 8))),
        "maxpool": (MaxPool2D((1, 4)), r.permutation(48).reshape(1, 2, 3, 8) / 7.0),
        "gap": (GlobalAvgPool(), r.standard_normal((2, 3, 2, 4))),
        "flatten": (Flatten(), r.standard_normal((2, 3, 1, 1))),
        "dense": (dense, r.standard_normal((3, 6))),
        "relu": (ReLU(), np.sign(r.standard_normal((2, 3, 4))) * r.uniform(0.1, 1, (2, 3, 4))),
    }
    layer_err = {k: _layer_error(layer, x, r) for k, (layer, x) in cases.items()}

    loss_err = []
    for seed in range(20):
        rr = np.random.default_rng(seed)
        n = int(rr.integers(1, 33))
        y, z = rr.integers(0, 2, n), rr.normal(0, 2, (n, 2))
        cfg = LossConfig(float(rr.uniform(0, 5)), float(rr.uniform(0, 5)))
        _, g = sswce_with_grad(y, z, cfg)

        def f(z=z):
            return sswce_with_grad(y, z, cfg)[0]
        loss_err.append(rel_error(g, central_difference(f, z)))
    worst = max(max(layer_err.values()), max(loss_err))
    verdict(1, "gradient correctness", worst < 1e-4 and time.time() - t0 < 60,
            f"worst relative error {worst:.2e} over {len(cases)} layers and 20 loss configs", t0)


# -- 2 ------------------------------------------------------------------------------

def _table_shapes(c, t):
    return {"phi1.pool": (4, c, t // 8), "phi2.pool": (16, c, t // 32),
            "phi3.pool": (16, c, t // 128), "phi4.pool": (16, c // 4, t // 128),
            "phi5.pool": (16, 1, 1), "phi6.dense": (2,)}


def test_criterion_2_architecture():
    t0 = time.time()
    ok, checked = True, 0
    for c, t in [(4, 2048), (22, 1024)]:
        m = build(ModelConfig(c, t))
        static = dict(m.intermediate_shapes())
        _, outs = m.forward(np.zeros((1, 1, c, t), np.float32), keep=True)
        for name, shape in _table_shapes(c, t).items():
            ok &= static[name] == shape and outs[name].shape[1:] == shape
            checked += 1
        ok &= outs["phi6.dense"].shape == (1, 2)
    verdict(2, "architecture conformance", ok, f"{checked} stage shapes exact", t0)


# -- 3 ------------------------------------------------------------------------------

def test_criterion_3_macs():
    t0 = time.time()
    cfg = ModelConfig(4, 2048)
    total = count_macs(cfg).total
    measured = count_macs_instrumented(build(cfg))
    dev = abs(total - 2064352) / 2064352
    verdict(3, "MAC accounting", dev < 0.05 and total == measured and time.time() - t0 < 1,
            f"count_macs {total:,}, instrumented {measured:,}, {100 * dev:.2f}% from 2,064,352", t0)


# -- 4 ------------------------------------------------------------------------------

def test_criterion_4_sswce_properties():
    t0 = time.time()
    r = np.random.default_rng(4)
    equal, monotone, tested = True, True, 0
    for _ in range(500):
        n = int(r.integers(1, 64))
        y, p = r.integers(0, 2, n), r.uniform(0.01, 0.99, n)
        equal &= sswce(y, p, LossConfig(0, 0)) == cross_entropy(y, p)
        a, b, step = r.uniform(0, 5), r.uniform(0, 5), r.uniform(0.01, 2)
        if soft_confusion(y, p).sn < 1:
            tested += 1
            monotone &= sswce(y, p, LossConfig(a, b + step)) > sswce(y, p, LossConfig(a, b))
    verdict(4, "SSWCE degeneracy and monotonicity",
            equal and monotone and time.time() - t0 < 10,
            f"500 batches exactly equal to CE at (0,0); strictly increasing in beta on {tested}", t0)


# -- 5, 6, 10 -------------------------------------------------------------------------

def _run(out):
    cfg = dataclasses.replace(pipeline.RunConfig.load(CONFIG), output_dir=str(out))
    t0 = time.time()
    results = pipeline.run_experiment(cfg)
    return cfg, results, time.time() - t0


@pytest.fixture(scope="module")
def first_run(tmp_path_factory):
    return _run(tmp_path_factory.mktemp("acceptance") / "run1")


@pytest.mark.slow
def test_criterion_5_synthetic_reproduction(first_run):
    t0 = time.time()
    cfg, (sr,), elapsed = first_run
    ce, sw = sr.baseline.smoothed, sr.best.smoothed
    hours = sum(r.duration_s for rs in pipeline.load_dataset(cfg) for r in rs.records) / 3600
    detect = ce.detected_events / ce.total_events
    strictly = sum(res.smoothed is not None and res.smoothed.sensitivity > ce.sensitivity
                   and res.smoothed.fp_per_hour <= ce.fp_per_hour for res in sr.cells.values())
    ok = (detect >= 0.8 and sw.sensitivity >= ce.sensitivity and sw.fp_per_hour <= ce.fp_per_hour
          and elapsed < 20 * 60)
    verdict(5, "end-to-end synthetic reproduction", ok,
            f"{hours:g} h, {ce.total_events:g} seizures; CE detects {ce.detected_events:g}"
            f"/{ce.total_events:g}, sens {ce.sensitivity:.2f}%, {ce.fp_per_hour:.2f} FP/h; "
            f"SSWCE a={sr.selected[0]:g} b={sr.selected[1]:g} sens {sw.sensitivity:.2f}%, "
            f"{sw.fp_per_hour:.2f} FP/h; {strictly}/{len(sr.cells)} cells beat CE sensitivity "
            f"within its FP/h; run {elapsed / 60:.1f} min", t0)


@pytest.mark.slow
def test_criterion_6_smoothing(first_run):
    t0 = time.time()
    _, (sr,), _ = first_run
    parts, ok = [], True
    for name, res in (("CE", sr.baseline), ("SSWCE", sr.best)):
        raw, sm = res.raw, res.smoothed
        ratio = raw.fp_per_hour / sm.fp_per_hour if sm.fp_per_hour else float("inf")
        change = abs(raw.detected_events - sm.detected_events)
        ok &= raw.fp_per_hour > 0 and ratio >= 1.5 and change <= 1
        parts.append(f"{name} FP/h {raw.fp_per_hour:.2f} -> {sm.fp_per_hour:.2f} "
                     f"({ratio:.1f}x), detected change {change:g}")
    verdict(6, "smoothing effect", ok, "; ".join(parts), t0)


@pytest.mark.slow
def test_criterion_10_determinism(first_run, tmp_path_factory):
    t0 = time.time()
    cfg, _, _ = first_run
    cfg2, _, _ = _run(tmp_path_factory.mktemp("acceptance") / "run2")
    names = ["folds.csv", "grid.csv", "aggregate.txt"]
    same = [open(os.path.join(cfg.output_dir, n), "rb").read()
            == open(os.path.join(cfg2.output_dir, n), "rb").read() for n in names]
    verdict(10, "determinism", all(same),
            ", ".join(f"{n} {'identical' if s else 'DIFFERS'}" for n, s in zip(names, same)), t0)


# -- 7 ------------------------------------------------------------------------------

def _small_model(seed):
    m = build(ModelConfig(4, 128, seed=seed, input_scale=0.05))
    r = np.random.default_rng(seed + 100)
    for _, p in m.parameters():
        if p.ndim == 1:
            p[:] = r.normal(0, 0.1, p.shape)
    return m


@pytest.mark.slow
def test_criterion_7_quantization(first_run):
    t0 = time.time()
    cfg, _, _ = first_run
    (rs,) = pipeline.load_dataset(cfg)
    held_out = rs.records[0].record_id
    model = load_checkpoint(os.path.join(cfg.output_dir, "checkpoints",
                                         f"{rs.subject}_f0_r0_a0_b0.ckpt"))
    r = np.random.default_rng(0)
    train_x = np.concatenate([rec.windows for rec in rs.records if rec.record_id != held_out])
    x = np.concatenate([rec.windows for rec in rs.records])
    y = np.concatenate([rec.labels for rec in rs.records])
    idx = np.sort(r.choice(len(x), 1000, replace=False))
    x, y = x[idx], y[idx]
    cal = train_x[np.sort(r.choice(len(train_x), 1000, replace=False))]
    qm = quantize_model(model, calibrate(model, cal))
    pf, pq = model.predict_labels(x), qm.predict_labels(x)
    agree = float(np.mean(pf == pq))
    mf, mq = window_metrics(pf, y), window_metrics(pq, y)
    d_sens, d_spec = abs(mq.sensitivity - mf.sensitivity), abs(mq.specificity - mf.specificity)

    exact = True
    for seed in (1, 2, 3):
        sm = _small_model(seed)
        w = (np.random.default_rng(seed).standard_normal((64, 4, 128)) * 20).astype(np.float32)
        sq = quantize_model(sm, calibrate(sm, w))
        codes = sq.quantize_input(w[:2])
        exact &= np.array_equal(quantized_forward(sq, codes)[0].astype(np.int64),
                                quantized_forward_exact(sq, codes))
    ok = agree >= 0.99 and d_sens <= 0.5 and d_spec <= 0.5 and exact and time.time() - t0 < 120
    verdict(7, "quantization fidelity", ok,
            f"agreement {100 * agree:.1f}% on 1000 windows ({int(y.sum())} seizure); "
            f"sens delta {d_sens:.2f} pp, spec delta {d_spec:.2f} pp; "
            f"integer path {'bit-identical' if exact else 'DIFFERS'} on 3 models", t0)


# -- 8 ------------------------------------------------------------------------------

def test_criterion_8_event_oracle():
    t0 = time.time()
    r = np.random.default_rng(8)
    mismatches = 0
    for _ in range(200):
        n = int(r.integers(0, 65))
        hop = float(r.choice([1.0, 2.0, 4.0]))
        window = hop * int(r.choice([1, 2]))
        labels = r.integers(0, 2, n).tolist()
        span = max(n * hop, 1.0)
        events = sorted((a, a + float(r.uniform(0.5, span / 2 + 1)))
                        for a in r.uniform(0, span, int(r.integers(0, 4))).tolist())
        tol = float(r.choice([0.0, 2.0, 5.0, 30.0]))
        dur = span / 3600
        starts = hop * np.arange(n)
        res = event_metrics(PredictionTrack("r", starts, labels, hop, dur, window), events, tol)
        detected, runs, fph = events_brute(starts.tolist(), window, labels, events, dur, tol)
        mismatches += (set(res.detected) != detected or res.fp_runs != runs
                       or res.fp_per_hour != fph)
    verdict(8, "event-scoring oracle equivalence", mismatches == 0 and time.time() - t0 < 10,
            f"{200 - mismatches}/200 random tracks match exactly", t0)


# -- 9 ------------------------------------------------------------------------------

def test_criterion_9_round_trips():
    t0 = time.time()
    r = np.random.default_rng(9)
    x = r.normal(0, 50, (4, 256 * 8))
    x[2] *= 30
    back = parse_edf(write_edf(Recording("rt", 256, ["a", "b", "c", "d"], x)))
    step = (x.max(axis=1) - x.min(axis=1)) / 65535
    edf_ok = back.signals.shape == x.shape and bool(
        np.all(np.abs(back.signals - x).max(axis=1) <= step))

    cfg = pipeline.RunConfig.from_dict({"dataset": {"synthetic": {
        "records_per_subject": 2, "record_duration_s": 300, "seizures_per_subject": 2,
        "seizure_duration_s": [20, 30], "sample_rate_hz": 64, "seed": 9}}})
    wr = pipeline.load_dataset(cfg)[0].records[0]
    wb = decode_windows(encode_windows(wr))
    cache_ok = (wb.windows.tobytes() == wr.windows.tobytes()
                and wb.labels.tobytes() == wr.labels.tobytes()
                and wb.starts_s.tobytes() == wr.starts_s.tobytes() and wb.seizure_events == wr.seizure_events)

    with open(os.path.join(HERE, "data", "chb99-summary.txt")) as f:
        events = parse_chbmit_summary(f.read())
    summary_ok = events == {"chb99_01": [], "chb99_03": [(2996.0, 3036.0)],
                            "chb99_04": [(1467.0, 1494.0), (2840.5, 2899.0)]}
    verdict(9, "data round trips", edf_ok and cache_ok and summary_ok and time.time() - t0 < 5,
            f"EDF within one step {edf_ok}, cache bit-exact {cache_ok}, summary exact {summary_ok}",
            t0)
