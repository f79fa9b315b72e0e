"""SSWCE on a toy batch, then event scoring of a short prediction track."""
import numpy as np

from epidenet.evaluation import PredictionTrack, event_metrics, majority_smooth
from epidenet.loss import LossConfig, cross_entropy, soft_confusion, sswce

y = [1, 0]
p = [0.8, 0.2]
sc = soft_confusion(y, p)
print(f"soft sn={sc.sn:.4f} sp={sc.sp:.4f}")
print(f"CE={cross_entropy(y, p):.5f}  SSWCE(1,1)={sswce(y, p, LossConfig(1, 1)):.5f}")

# raising beta only costs more while the batch still misses positives
for beta in (0, 1, 4):
    print(f"beta={beta}: {sswce([1, 1, 0], [0.6, 0.3, 0.1], LossConfig(0, beta)):.4f}")

# 4 s windows over one minute; one seizure from 20 s to 36 s
raw = np.array([0, 1, 0, 0, 0, 1, 1, 1, 1, 0, 0, 0, 1, 0, 0])
track = PredictionTrack("demo", 4.0 * np.arange(len(raw)), raw, 4.0, len(raw) * 4 / 3600)
print("raw     ", raw.tolist())
print("smoothed", majority_smooth(raw).tolist())
# the vote lags one window, so at zero tolerance the window just after the
# seizure is still a false alarm; a 30 s tolerance would absorb it
for smoothed in (False, True):
    res = event_metrics(track, [(20.0, 36.0)], tolerance_s=0, smoothed=smoothed)
    print(f"smoothed={smoothed}: detected {res.detected_events}/{res.total_events}, "
          f"false alarms {res.fp_runs} ({res.fp_per_hour:.0f} FP/h)")
