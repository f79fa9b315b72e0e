"""Write a short recording as EDF, read it back, and parse a seizure summary."""
import numpy as np

from epidenet.dataio import Recording, decimate, parse_chbmit_summary, parse_edf, write_edf

rng = np.random.default_rng(0)
rec = Recording("demo", 256, ["F7-T7", "T7-P7", "F8-T8", "T8-P8"], rng.normal(0, 40, (4, 256 * 10)))
data = write_edf(rec)
back = parse_edf(data)
step = (rec.signals.max(axis=1) - rec.signals.min(axis=1)) / 65535
print(f"{len(data)} bytes, labels {back.labels}")
print("max error / quantization step:", np.round(np.abs(back.signals - rec.signals).max(axis=1)
                                                  / step, 3).tolist())
low = decimate(back, 4)
print(f"decimated to {low.sample_rate_hz} Hz, {low.signals.shape[1]} samples per channel")

summary = """File Name: chb00_01.edf
Number of Seizures in File: 1
Seizure Start Time: 120 seconds
Seizure End Time: 155 seconds
"""
print(parse_chbmit_summary(summary))
