"""Train on one synthetic subject, quantize to INT8 and compare the two paths."""
import json
import tempfile

import numpy as np

from epidenet.dataio import SynthSpec, synth_record_sets
from epidenet.evaluation import window_metrics
from epidenet.model import ModelConfig, count_macs
from epidenet.quantize import calibrate, manifest, quantize_model, read_bundle, write_bundle
from epidenet.train import TrainConfig, WindowSet, train

spec = SynthSpec(records_per_subject=3, record_duration_s=900, seizures_per_subject=4,
                 seizure_duration_s=(30, 60), sample_rate_hz=64, seed=3)
(subject,) = synth_record_sets(spec, window_s=4.0)
fit, test = subject.records[:2], subject.records[2:]
ws = WindowSet.from_records(fit)
print(f"{len(ws)} training windows, {int(ws.y.sum())} seizure")

cfg = ModelConfig(ws.x.shape[1], ws.x.shape[2])
model = train(cfg, ws, TrainConfig(epochs=4, samples_per_epoch=640, seed=0)).model
print(f"{model.n_parameters()} parameters, {count_macs(cfg).total:,} MACs per window")

x = np.concatenate([r.windows for r in test])
y = np.concatenate([r.labels for r in test])
qm = quantize_model(model, calibrate(model, ws.x))
pf, pq = model.predict_labels(x), qm.predict_labels(x)
print(f"float vs int8 agreement {100 * np.mean(pf == pq):.1f}%")
for name, pred in (("float", pf), ("int8", pq)):
    wm = window_metrics(pred, y)
    print(f"{name:5} sensitivity {wm.sensitivity:.1f}%  specificity {wm.specificity:.2f}%")

with tempfile.TemporaryDirectory() as d:
    write_bundle(qm, f"{d}/model.q8")
    assert (read_bundle(f"{d}/model.q8").predict_labels(x) == pq).all()
    man = manifest(qm)
    print(json.dumps({k: man[k] for k in ("bundle_bytes", "input_bytes",
                                          "peak_activation_bytes")}))
