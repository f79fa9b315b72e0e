import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from epidenet.evaluation import (EvalReport, PredictionTrack, aggregate, aggregate_loocv,
                                 evaluate_track, event_metrics, format_table, majority_smooth,
                                 merge_event_results, reports_csv, window_metrics)

from oracles import events_brute, smooth_brute


def track(labels, hop=4.0, duration_h=None, start=0.0):
    n = len(labels)
    return PredictionTrack("r", start + hop * np.arange(n), labels, hop,
                           duration_h or max(n * hop, 1.0) / 3600)


# -- smoothing ------------------------------------------------------------------

@pytest.mark.parametrize("raw,expected", [
    ([1, 0, 1, 0, 0], [0, 0, 1, 0, 0]),
    ([1, 1, 1], [0, 1, 1]),
    ([0, 1, 0, 0, 1, 0], [0, 0, 0, 0, 0, 0]),
    ([1], [0]),
    ([1, 1], [0, 1]),
])
def test_majority_examples(raw, expected):
    assert majority_smooth(raw).tolist() == expected


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=1, max_size=64))
def test_majority_matches_brute_force(raw):
    assert majority_smooth(raw).tolist() == smooth_brute(raw)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=1, max_size=64))
def test_smoothing_removes_isolated_positives(raw):
    # a positive with no other positive within two windows either side leaves no trace
    sm = majority_smooth(raw)
    n = len(raw)
    for i, v in enumerate(raw):
        near = [raw[j] for j in range(max(0, i - 2), min(n, i + 3)) if j != i]
        if v and not any(near):
            assert not sm[i:i + 3].any()


# -- window metrics -------------------------------------------------------------

def test_window_metrics_counts():
    wm = window_metrics([1, 1, 0, 0, 1], [1, 0, 0, 1, 1])
    assert (wm.tp, wm.fp, wm.tn, wm.fn) == (2, 1, 1, 1)
    assert wm.sensitivity == pytest.approx(200 / 3)
    assert wm.specificity == 50


def test_undefined_rates_are_nan():
    wm = window_metrics([0, 1], [0, 0])
    assert math.isnan(wm.sensitivity) and wm.specificity == 50


def test_length_mismatch_rejected():
    with pytest.raises(ValueError):
        window_metrics([0, 1], [0])


# -- event metrics ----------------------------------------------------------------

def test_one_positive_inside_event_detects_it():
    res = event_metrics(track([0, 0, 1, 0, 0, 0]), [(8.0, 12.0)], tolerance_s=0)
    assert res.detected_events == 1 and res.fp_runs == 0


def test_fp_run_counts_once():
    labels = [0] * 20
    labels[5:9] = [1, 1, 1, 1]
    res = event_metrics(track(labels, duration_h=2.0), [], tolerance_s=0)
    assert res.fp_runs == 1 and res.fp_per_hour == 0.5


def test_two_separated_runs_count_twice():
    labels = [0, 1, 1, 0, 1, 0]
    assert event_metrics(track(labels), [], tolerance_s=0).fp_runs == 2


def test_tolerance_absorbs_near_miss():
    labels = [0] * 20
    labels[10] = 1  # window [40, 44)
    events = [(60.0, 80.0)]
    assert event_metrics(track(labels), events, tolerance_s=0).fp_runs == 1
    res = event_metrics(track(labels), events, tolerance_s=30)
    assert res.fp_runs == 0 and res.detected_events == 1


def test_empty_track_and_zero_duration():
    res = event_metrics(PredictionTrack("r", [], [], 4.0, 1.0), [(0, 1)])
    assert res.detected_events == 0 and res.fp_runs == 0 and res.total_events == 1
    with pytest.raises(ValueError):
        event_metrics(PredictionTrack("r", [0.0], [1], 4.0, 0.0), [])


def test_uneven_starts_rejected():
    with pytest.raises(ValueError):
        PredictionTrack("r", [0, 4, 9], [0, 0, 0], 4.0, 1.0)


@st.composite
def random_track(draw):
    n = draw(st.integers(0, 64))
    hop = draw(st.sampled_from([1.0, 2.0, 4.0]))
    window = hop * draw(st.sampled_from([1, 2]))
    labels = draw(st.lists(st.integers(0, 1), min_size=n, max_size=n))
    span = max(n * hop, 1.0)
    k = draw(st.integers(0, 3))
    events = []
    for _ in range(k):
        a = draw(st.floats(0, span))
        events.append((a, a + draw(st.floats(0.5, span / 2 + 1))))
    tol = draw(st.sampled_from([0.0, 2.0, 5.0, 30.0]))
    return labels, hop, window, sorted(events), tol


@settings(max_examples=200, deadline=None)
@given(random_track())
def test_event_metrics_match_brute_force(case):
    labels, hop, window, events, tol = case
    duration_h = max(len(labels) * hop, 1.0) / 3600
    starts = hop * np.arange(len(labels))
    t = PredictionTrack("r", starts, labels, hop, duration_h, window)
    res = event_metrics(t, events, tol)
    detected, runs, fph = events_brute(starts.tolist(), window, labels, events, duration_h, tol)
    assert set(res.detected) == detected
    assert res.fp_runs == runs
    assert res.fp_per_hour == fph


@settings(max_examples=100, deadline=None)
@given(random_track(), st.integers(1, 63))
def test_chunked_scoring_equals_whole_record(case, cut):
    labels, hop, window, events, tol = case
    if cut >= len(labels):
        return
    starts = hop * np.arange(len(labels))
    dur = max(len(labels) * hop, 1.0) / 3600
    whole = event_metrics(PredictionTrack("r", starts, labels, hop, dur, window), events, tol)
    first = event_metrics(PredictionTrack("r", starts[:cut], labels[:cut], hop, dur, window),
                          events, tol)
    second = event_metrics(PredictionTrack("r", starts[cut:], labels[cut:], hop, dur, window),
                           events, tol, continues_fp_run=first.ends_in_fp_run)
    merged = merge_event_results([first, second], dur)
    assert merged.detected == whole.detected and merged.fp_runs == whole.fp_runs


@settings(max_examples=100, deadline=None)
@given(random_track())
def test_smoothing_never_adds_fp_runs_to_isolated_alarms(case):
    labels, hop, window, events, tol = case
    starts = hop * np.arange(len(labels))
    t = PredictionTrack("r", starts, labels, hop, 1.0, window)
    assert event_metrics(t, events, tol, smoothed=True).fp_runs <= \
        event_metrics(t, events, tol).fp_runs


# -- reports ----------------------------------------------------------------------

def test_evaluate_track_both_modes():
    labels = [0, 1, 0, 0, 1, 1, 1, 0]
    truth = [0, 0, 0, 0, 1, 1, 1, 0]
    t = track(labels, duration_h=1.0)
    raw = evaluate_track(t, truth, [(16.0, 28.0)], tolerance_s=0)
    sm = evaluate_track(t, truth, [(16.0, 28.0)], tolerance_s=0, smoothed=True)
    assert (raw.fp, raw.fp_per_hour, raw.detected_events) == (1, 1.0, 1)
    # the causal vote lags one window: the isolated alarm goes, a trailing positive appears
    assert (sm.fp, sm.fp_per_hour, sm.detected_events) == (1, 1.0, 1)
    assert sm.sensitivity == pytest.approx(200 / 3)
    sm = evaluate_track(t, truth, [(16.0, 28.0)], tolerance_s=30, smoothed=True)
    assert sm.fp_per_hour == 0
    assert not raw.smoothed and sm.smoothed


def rep(sens, spec, fph, det, tot, smoothed=False):
    return EvalReport(0, 0, 0, 0, sens, spec, fph, det, tot, smoothed)


def test_aggregate_means_and_sums():
    agg = aggregate([rep(50, 90, 2, 1, 2), rep(100, 100, 0, 1, 1)])
    assert (agg.sensitivity, agg.specificity, agg.fp_per_hour) == (75, 95, 1)
    assert (agg.detected_events, agg.total_events) == (2, 3)
    agg = aggregate([rep(50, 90, 2, 1, 2), rep(100, 100, 0, 1, 2)], tally="mean")
    assert (agg.detected_events, agg.total_events) == (1, 2)


def test_aggregate_skips_nan_and_rejects_mixing():
    agg = aggregate([rep(math.nan, 90, 2, 0, 0), rep(80, 100, 0, 1, 1)])
    assert agg.sensitivity == 80
    with pytest.raises(ValueError):
        aggregate([rep(1, 1, 1, 1, 1), rep(1, 1, 1, 1, 1, smoothed=True)])


def test_aggregate_loocv_two_level():
    per_fold = [[rep(100, 100, 0, 1, 1), rep(0, 100, 2, 0, 1)], [rep(50, 80, 1, 2, 2)]]
    folds, agg = aggregate_loocv(per_fold)
    assert folds[0].sensitivity == 50 and folds[0].detected_events == 0.5
    assert agg.sensitivity == 50 and agg.detected_events == 2.5 and agg.total_events == 3
    assert agg.fp_per_hour == 1


def test_table_puts_smoothed_in_parentheses():
    text = format_table([("s1", rep(80, 99, 3, 2, 3), rep(75, 99.5, 1.5, 2, 3, True))])
    line = text.splitlines()[1]
    assert "80.00 (75.00)" in line and "3.00 (1.50)" in line and "2/3" in line


def test_reports_csv_header_and_nan():
    text = reports_csv([dict(subject="s", fold=0, smoothed=True, sensitivity=math.nan)])
    head, row = text.splitlines()
    assert head.startswith("subject,fold,held_out,seed,alpha,beta,smoothed")
    assert row.startswith("s,0,,,,,1,") and ",nan," in row
