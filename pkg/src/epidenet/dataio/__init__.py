"""EEG ingestion: EDF files, CHB-MIT summaries, preprocessing, synthetic data."""
from .records import DataError, LabeledWindow, Recording, RecordSet, WindowedRecord
from .edf import EDFError, parse_edf, read_edf, write_edf
from .chbmit import parse_chbmit_summary
from .preprocess import (TEMPORAL_MONTAGE, LabelRule, decimate, load_edf_subject,
                         select_channels, windowize, windowize_record)
from .synth import SynthSpec, manifest, synth_dataset, synth_record_sets
from .cache import decode_windows, encode_windows, read_windows, write_windows
