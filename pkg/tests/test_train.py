import numpy as np
import pytest

from epidenet.dataio import RecordSet, SynthSpec, synth_record_sets
from epidenet.dataio.records import WindowedRecord
from epidenet.loss import LossConfig
from epidenet.model import ModelConfig
from epidenet.train import (Adam, FoldPlanError, SGDMomentum, TrainConfig, TrainingError,
                            WindowSet, cell_seed, epoch_indices, loocv_rows, make_fold_plan,
                            run_loocv, train)

FAST = TrainConfig(epochs=2, samples_per_epoch=128, batch_size=32, learning_rate=3e-3)


def toy_windows(n=200, pos=0.1, seed=0, t=128):
    r = np.random.default_rng(seed)
    y = (r.random(n) < pos).astype(np.int8)
    y[:2] = [1, 0]
    x = r.standard_normal((n, 4, t)).astype(np.float32) * 20
    x[y == 1] += 40 * np.sin(np.arange(t) / 2.0).astype(np.float32)
    return WindowSet(x, y, np.array(["r"] * n, dtype=object))


def fake_record(rid, n, events, t=128):
    labels = np.zeros(n, np.int8)
    for s, e in events:
        labels[int(s // 4):int(e // 4)] = 1
    return WindowedRecord(rid, np.zeros((n, 4, t), np.float32), labels, 4.0 * np.arange(n), 4.0,
                          4.0, 4.0 * n, list(events), 32)


# -- sampling and optimizers ------------------------------------------------------

def test_balanced_sampler_fraction():
    y = np.array([1] * 10 + [0] * 990)
    idx = epoch_indices(np.random.default_rng(0), y, 20000, "oversample_positive")
    assert abs(y[idx].mean() - 0.5) < 0.02
    # negatives are drawn without replacement until exhausted
    neg = idx[y[idx] == 0][:990]
    assert len(set(neg.tolist())) == 990


def test_balanced_sampler_needs_both_classes():
    with pytest.raises(TrainingError):
        epoch_indices(np.random.default_rng(0), np.zeros(10), 10, "oversample_positive")


def test_unbalanced_sampler_is_permutation():
    idx = epoch_indices(np.random.default_rng(0), np.zeros(7), 7, "none")
    assert sorted(idx.tolist()) == list(range(7))


def test_adam_first_step_moves_by_lr():
    p = {"w": np.array([1.0, -2.0])}
    Adam(p, 0.1).step({"w": np.array([3.0, -0.5])})
    # the bias-corrected first step is lr * sign(g)
    np.testing.assert_allclose(p["w"], [0.9, -1.9], atol=1e-6)


def test_sgd_momentum_accumulates():
    p = {"w": np.array([0.0])}
    opt = SGDMomentum(p, 0.1, momentum=0.5)
    opt.step({"w": np.array([1.0])})
    opt.step({"w": np.array([1.0])})
    np.testing.assert_allclose(p["w"], [-0.1 - 0.15])


# -- training ---------------------------------------------------------------------

def test_training_is_seeded():
    ws = toy_windows()
    a = train(ModelConfig(4, 128), ws, FAST.replace(seed=3))
    b = train(ModelConfig(4, 128), ws, FAST.replace(seed=3))
    c = train(ModelConfig(4, 128), ws, FAST.replace(seed=4))
    for (_, pa), (_, pb), (_, pc) in zip(a.model.parameters(), b.model.parameters(),
                                         c.model.parameters()):
        assert pa.tobytes() == pb.tobytes()
    assert a.history == b.history
    assert a.history != c.history


def test_training_learns_a_separable_task():
    ws = toy_windows(400)
    res = train(ModelConfig(4, 128), ws, FAST.replace(epochs=6))
    assert res.history[-1]["loss"] < res.history[0]["loss"]
    assert np.mean(res.model.predict_labels(ws.x) == ws.y) > 0.9
    assert res.model.config.input_scale == pytest.approx(1 / np.std(ws.x, dtype=np.float64))
    assert all(abs(h["positive_fraction"] - 0.5) < 0.15 for h in res.history)


def test_non_finite_loss_aborts_with_location():
    ws = toy_windows()
    ws.x[:] = np.nan
    with pytest.raises(TrainingError, match="epoch 0, step 0"):
        train(ModelConfig(4, 128), ws, FAST)


def test_validation_and_early_stop():
    ws, val = toy_windows(200, seed=1), toy_windows(60, seed=2)
    res = train(ModelConfig(4, 128), ws, FAST.replace(epochs=30, early_stop_patience=0), val)
    assert "val_loss" in res.history[0]
    assert len(res.history) < 30


def test_bad_config_rejected():
    with pytest.raises(ValueError):
        train(ModelConfig(4, 128), toy_windows(), FAST.replace(optimizer="lbfgs"))
    with pytest.raises(ValueError):
        train(ModelConfig(4, 128), toy_windows(), FAST.replace(loss=LossConfig(-1, 0)))


# -- LOOCV ---------------------------------------------------------------------------

def test_fold_plan():
    rs = RecordSet("s", [fake_record("b", 10, []), fake_record("a", 10, [(8, 16)]),
                         fake_record("c", 10, [(0, 8)])])
    plan = make_fold_plan(rs)
    assert [f.held_out for f in plan.folds] == ["a", "c"]
    assert [f.train_records for f in plan.folds] == [["b", "c"], ["a", "b"]]
    with pytest.raises(FoldPlanError):
        make_fold_plan(RecordSet("s", [fake_record("a", 10, [(0, 8)]), fake_record("b", 10, [])]))


def test_cell_seed_depends_only_on_position():
    seeds = {cell_seed(0, f, r) for f in range(4) for r in range(5)}
    assert len(seeds) == 20
    assert cell_seed(0, 1, 2) == cell_seed(0, 1, 2) != cell_seed(1, 1, 2)


def test_loocv_protocol_arithmetic_and_no_leakage():
    rs = RecordSet("s", [fake_record("a", 20, [(8, 24)]), fake_record("b", 20, [(40, 60)])])
    seen = []

    class Constant:
        def predict_labels(self, windows):
            return np.zeros(len(windows), np.int8)

    def spy(model_config, windows, train_config):
        seen.append((set(windows.record_ids), train_config.seed))
        return Constant()

    res = run_loocv(rs, ModelConfig(4, 128), FAST, repetitions=5, train_fn=spy)
    assert len(res.runs) == 10 and not res.failed
    assert [ids for ids, _ in seen[:5]] == [{"b"}] * 5
    assert [ids for ids, _ in seen[5:]] == [{"a"}] * 5
    assert [s for _, s in seen] == [cell_seed(0, f, r) for f in range(2) for r in range(5)]
    assert res.raw.sensitivity == 0 and res.raw.total_events == 2
    assert len(loocv_rows(res)) == 20


def test_failing_cells_are_reported_and_excluded():
    rs = RecordSet("s", [fake_record("a", 20, [(8, 24)]), fake_record("b", 20, [(40, 60)])])

    class Perfect:
        def __init__(self, rec):
            self.rec = rec

        def predict_labels(self, windows):
            return np.ones(len(windows), np.int8)

    def flaky(model_config, windows, train_config):
        if train_config.seed == cell_seed(0, 0, 1):
            raise TrainingError("boom")
        return Perfect(None)

    res = run_loocv(rs, ModelConfig(4, 128), FAST, repetitions=2, train_fn=flaky)
    assert len(res.failed) == 1 and "boom" in res.failed[0].status
    assert res.raw.sensitivity == 100
    rows = loocv_rows(res)
    assert sum(r["status"] != "ok" for r in rows) == 1


@pytest.fixture(scope="module")
def tiny_subject():
    spec = SynthSpec(records_per_subject=2, record_duration_s=480, seizures_per_subject=2,
                     seizure_duration_s=(30, 50), sample_rate_hz=32, seed=11)
    return synth_record_sets(spec, window_s=4.0)[0]


def test_zero_weight_sswce_reproduces_cross_entropy_run(tiny_subject, tmp_path):
    ce = run_loocv(tiny_subject, ModelConfig(4, 128), FAST, repetitions=1,
                   checkpoint_dir=str(tmp_path), log_dir=str(tmp_path))
    sw = run_loocv(tiny_subject, ModelConfig(4, 128), FAST.replace(loss=LossConfig(0.0, 0.0)),
                   repetitions=1)
    assert [r.raw for r in ce.runs] == [r.raw for r in sw.runs]
    assert len(list(tmp_path.glob("*.ckpt"))) == 2 and len(list(tmp_path.glob("*.jsonl"))) == 2
