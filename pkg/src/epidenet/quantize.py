"""Post-training INT8 quantization with an integer-only inference path.

Scheme:

* weights: symmetric per-tensor INT8 in [-127, 127];
* activations: affine per-tensor INT8 with ranges from calibration, always
  widened to contain 0 so zero padding is exact;
* biases: INT32 at scale ``in_scale * w_scale``;
* requantization: ``out = clamp(rshift_round(acc * m0, 31 - shift) + zp_out)``
  where ``m0 / 2**31 * 2**shift`` approximates ``in_scale * w_scale / out_scale``
  and ``rshift_round`` rounds half away from zero. For ReLU layers the lower
  clamp is ``zp_out`` (the fused activation).

Max pooling works directly on INT8 codes (the affine map is monotone) and
global average pooling sums in integers and divides with rounding.
"""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .model import Model, count_macs, atomic_write
from .tensor import Conv2D, Dense, GlobalAvgPool, MaxPool2D, _pool_tiles, im2col

QMIN, QMAX = -128, 127
WMAX = 127
DEGENERATE_EPS = 1e-6


class QuantizationError(ValueError):
    pass


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int

    def quantize(self, x: np.ndarray) -> np.ndarray:
        q = round_half_away(np.asarray(x, dtype=np.float64) / self.scale) + self.zero_point
        return np.clip(q, QMIN, QMAX).astype(np.int8)

    def dequantize(self, q: np.ndarray) -> np.ndarray:
        return (np.asarray(q, dtype=np.float64) - self.zero_point) * self.scale


def round_half_away(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return (np.sign(x) * np.floor(np.abs(x) + 0.5)).astype(np.int64)


def affine_params(lo: float, hi: float) -> QuantParams:
    """INT8 affine parameters for the range [lo, hi] widened to include 0."""
    lo, hi = min(float(lo), 0.0), max(float(hi), 0.0)
    if hi - lo <= 0:
        lo, hi = -DEGENERATE_EPS, DEGENERATE_EPS
    scale = (hi - lo) / (QMAX - QMIN)
    zp = int(np.clip(round_half_away(QMIN - lo / scale), QMIN, QMAX))
    return QuantParams(scale, zp)


def symmetric_weights(w: np.ndarray) -> tuple[np.ndarray, float]:
    amax = float(np.max(np.abs(w)))
    scale = (amax if amax > 0 else DEGENERATE_EPS) / WMAX
    q = np.clip(round_half_away(np.asarray(w, np.float64) / scale), -WMAX, WMAX)
    return q.astype(np.int8), scale


def quantize_multiplier(real: float) -> tuple[int, int]:
    """(m0, shift) with m0 in [2**30, 2**31) and m0 / 2**31 * 2**shift ~= real."""
    if not real > 0:
        raise QuantizationError(f"requantization multiplier must be positive, got {real}")
    frac, exp = math.frexp(real)
    m0 = int(round(frac * (1 << 31)))
    if m0 == 1 << 31:
        m0 //= 2
        exp += 1
    if 31 - exp < 1:
        raise QuantizationError(f"multiplier {real} too large for a right shift")
    return m0, exp


def rshift_round(x: np.ndarray, s: int) -> np.ndarray:
    """x / 2**s rounded half away from zero, in integers."""
    x = np.asarray(x, dtype=np.int64)
    half = np.int64(1) << np.int64(s - 1)
    mag = (np.abs(x) + half) >> np.int64(s)
    return np.where(x < 0, -mag, mag)


def div_round(x: np.ndarray, n: int) -> np.ndarray:
    """Integer x / n rounded half away from zero."""
    x = np.asarray(x, dtype=np.int64)
    mag = (2 * np.abs(x) + n) // (2 * n)
    return np.where(x < 0, -mag, mag)


# ---------------------------------------------------------------------------
# calibration


def activation_points(model: Model) -> list[str]:
    """Names of the tensors that get their own activation QuantParams."""
    relu = model.config.activation == "relu"
    points = ["input"]
    for name, layer in model.layers:
        if isinstance(layer, Conv2D):
            points.append(name.replace(".conv", ".relu") if relu else name)
        elif isinstance(layer, Dense):
            points.append(name)
    return points


def calibrate(model: Model, windows: np.ndarray, percentile: Optional[float] = None,
              batch_size: int = 256) -> dict[str, tuple[float, float]]:
    """Observed (min, max) per activation point over ``windows``.

    With ``percentile`` (e.g. 99.9) the range is clipped to the
    [100 - percentile, percentile] quantiles instead of the extremes.
    """
    x = np.asarray(windows, dtype=np.float32)
    if x.ndim == 3:
        x = x[:, None]
    if len(x) == 0:
        raise QuantizationError("empty calibration set")
    points = activation_points(model)
    lo = {p: np.inf for p in points}
    hi = {p: -np.inf for p in points}
    seen = {p: [] for p in points}
    for i in range(0, len(x), batch_size):
        xb = x[i:i + batch_size]
        _, outs = model.forward(xb, keep=True)
        outs["input"] = xb * np.float32(model.config.input_scale)
        for p in points:
            v = outs[p]
            if percentile is None:
                lo[p] = min(lo[p], float(v.min()))
                hi[p] = max(hi[p], float(v.max()))
            else:
                seen[p].append(np.ravel(v))
    if percentile is not None:
        for p in points:
            v = np.concatenate(seen[p])
            lo[p], hi[p] = (float(q) for q in np.percentile(v, [100 - percentile, percentile]))
    return {p: (lo[p], hi[p]) for p in points}


# ---------------------------------------------------------------------------
# quantized model


@dataclass
class QLayer:
    kind: str  # conv | maxpool | gap | dense
    name: str
    in_qp: QuantParams
    out_qp: QuantParams
    weights: Optional[np.ndarray] = None  # int8
    bias: Optional[np.ndarray] = None  # int32
    w_scale: float = 0.0
    m0: int = 0
    shift: int = 0
    relu: bool = False
    pool: tuple = ()

    @property
    def real_multiplier(self) -> float:
        return self.in_qp.scale * self.w_scale / self.out_qp.scale


@dataclass
class QuantizedModel:
    channels: int
    samples: int
    input_scale: float
    input_qp: QuantParams
    layers: list = field(default_factory=list)

    @property
    def output_qp(self) -> QuantParams:
        return self.layers[-1].out_qp

    def quantize_input(self, windows: np.ndarray) -> np.ndarray:
        x = np.asarray(windows, dtype=np.float64)
        if x.ndim == 3:
            x = x[:, None]
        return self.input_qp.quantize(x * self.input_scale)

    def predict_labels(self, windows: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = []
        for i in range(0, len(windows), batch_size):
            q, _ = quantized_forward(self, self.quantize_input(windows[i:i + batch_size]))
            out.append(q[:, 1] > q[:, 0])
        return np.concatenate(out).astype(np.int8)


def _weighted(qlayer_kind, name, w, b, in_qp, out_qp, relu):
    wq, ws = symmetric_weights(w)
    bq = np.clip(round_half_away(np.asarray(b, np.float64) / (in_qp.scale * ws)),
                 -(2 ** 31), 2 ** 31 - 1).astype(np.int32)
    m0, shift = quantize_multiplier(in_qp.scale * ws / out_qp.scale)
    return QLayer(qlayer_kind, name, in_qp, out_qp, wq, bq, ws, m0, shift, relu)


def quantize_model(model: Model, ranges: dict) -> QuantizedModel:
    missing = set(activation_points(model)) - set(ranges)
    if missing:
        raise QuantizationError(f"calibration ranges missing for {sorted(missing)}")
    relu = model.config.activation == "relu"
    qp = affine_params(*ranges["input"])
    qm = QuantizedModel(model.config.channels, model.config.samples,
                        model.config.input_scale, qp)
    for name, layer in model.layers:
        if isinstance(layer, Conv2D):
            point = name.replace(".conv", ".relu") if relu else name
            out = affine_params(*ranges[point])
            qm.layers.append(_weighted("conv", name, layer.params["weights"],
                                       layer.params["bias"], qp, out, relu))
            qp = out
        elif isinstance(layer, MaxPool2D):
            qm.layers.append(QLayer("maxpool", name, qp, qp, pool=layer.pool))
        elif isinstance(layer, GlobalAvgPool):
            qm.layers.append(QLayer("gap", name, qp, qp))
        elif isinstance(layer, Dense):
            out = affine_params(*ranges[name])
            qm.layers.append(_weighted("dense", name, layer.params["weights"],
                                       layer.params["bias"], qp, out, False))
            qp = out
    return qm


def _requantize(acc, layer: QLayer) -> np.ndarray:
    r = rshift_round(acc * np.int64(layer.m0), 31 - layer.shift)
    lo = layer.out_qp.zero_point if layer.relu else QMIN
    return np.clip(r + layer.out_qp.zero_point, lo, QMAX).astype(np.int8)


def _check_acc(acc, name):
    if acc.size and np.abs(acc).max() >= 2 ** 31:
        raise OverflowError(f"INT32 accumulator overflow in {name}")


def quantized_forward(qm: QuantizedModel, q_input: np.ndarray, keep: bool = False):
    """Integer-only inference. Returns (INT8 logits, dequantized logits[, per-layer codes])."""
    x = np.asarray(q_input)
    if x.dtype != np.int8:
        raise QuantizationError("quantized_forward expects int8 input codes")
    if x.ndim != 4 or x.shape[1:] != (1, qm.channels, qm.samples):
        raise QuantizationError(f"expected (N, 1, {qm.channels}, {qm.samples}) input, "
                                f"got {x.shape}")
    outs = {}
    for layer in qm.layers:
        if layer.kind == "conv":
            n, _, h, w = x.shape
            cout, _, kh, kw = layer.weights.shape
            centered = x.astype(np.int64) - layer.in_qp.zero_point
            cols = im2col(centered, kh, kw)
            acc = layer.weights.reshape(cout, -1).astype(np.int64) @ cols
            acc += layer.bias.astype(np.int64)[:, None]
            _check_acc(acc, layer.name)
            x = _requantize(acc, layer).reshape(cout, n, h, w).transpose(1, 0, 2, 3)
        elif layer.kind == "maxpool":
            x = _pool_tiles(x, layer.pool).max(axis=-1)
        elif layer.kind == "gap":
            n, c, h, w = x.shape
            x = div_round(x.astype(np.int64).sum(axis=(2, 3)), h * w).astype(np.int8)
        elif layer.kind == "dense":
            centered = x.reshape(len(x), -1).astype(np.int64) - layer.in_qp.zero_point
            acc = centered @ layer.weights.astype(np.int64).T + layer.bias.astype(np.int64)
            _check_acc(acc, layer.name)
            x = _requantize(acc, layer)
        if keep:
            outs[layer.name] = x
    logits = qm.output_qp.dequantize(x)
    return (x, logits, outs) if keep else (x, logits)


# ---------------------------------------------------------------------------
# deployment bundle
#
#   magic "EPQ8BNDL" | u16 version | u32 C | u32 T | f64 input_scale
#   | f64 in_scale | i32 in_zp | u16 n_layers
#   layer table, one fixed-size entry per layer:
#     u8 kind | u8 relu | u16 name_len | 32s name | u32[4] shape or pool
#     | f64 w_scale | f64 in_scale | i32 in_zp | f64 out_scale | i32 out_zp
#     | i32 m0 | i32 shift | u64 w_off | u64 w_len | u64 b_off | u64 b_len
#   payloads: int8 weights, int32 biases (offsets from file start)

BUNDLE_MAGIC = b"EPQ8BNDL"
BUNDLE_VERSION = 1
_KINDS = ("conv", "maxpool", "gap", "dense")
_BHEAD = struct.Struct("<8sHIIddiH")
_BLAYER = struct.Struct("<BBH32s4Iddidiii4Q")


def export_quantized(qm: QuantizedModel) -> bytes:
    n = len(qm.layers)
    table_end = _BHEAD.size + n * _BLAYER.size
    payload = io.BytesIO()
    entries = []
    for layer in qm.layers:
        w_off = w_len = b_off = b_len = 0
        if layer.weights is not None:
            wb = np.ascontiguousarray(layer.weights, "<i1").tobytes()
            bb = np.ascontiguousarray(layer.bias, "<i4").tobytes()
            w_off, w_len = table_end + payload.tell(), len(wb)
            payload.write(wb)
            b_off, b_len = table_end + payload.tell(), len(bb)
            payload.write(bb)
            shape = tuple(layer.weights.shape) + (0,) * (4 - layer.weights.ndim)
        else:
            shape = tuple(layer.pool) + (0,) * (4 - len(layer.pool))
        entries.append(_BLAYER.pack(
            _KINDS.index(layer.kind), int(layer.relu), len(layer.name), layer.name.encode(),
            *shape, layer.w_scale, layer.in_qp.scale, layer.in_qp.zero_point,
            layer.out_qp.scale, layer.out_qp.zero_point, layer.m0, layer.shift,
            w_off, w_len, b_off, b_len))
    head = _BHEAD.pack(BUNDLE_MAGIC, BUNDLE_VERSION, qm.channels, qm.samples, qm.input_scale,
                       qm.input_qp.scale, qm.input_qp.zero_point, n)
    return head + b"".join(entries) + payload.getvalue()


def load_quantized(data: bytes) -> QuantizedModel:
    try:
        magic, version, c, t, iscale, in_s, in_zp, n = _BHEAD.unpack_from(data, 0)
    except struct.error:
        raise QuantizationError("bundle shorter than its header") from None
    if magic != BUNDLE_MAGIC or version != BUNDLE_VERSION:
        raise QuantizationError(f"not a version-{BUNDLE_VERSION} bundle")
    qm = QuantizedModel(c, t, iscale, QuantParams(in_s, in_zp))
    end = _BHEAD.size + n * _BLAYER.size
    for i in range(n):
        try:
            (kind, relu, ln, name, s0, s1, s2, s3, ws, ins, inzp, outs, outzp, m0, shift,
             w_off, w_len, b_off, b_len) = _BLAYER.unpack_from(data, _BHEAD.size + i * _BLAYER.size)
        except struct.error:
            raise QuantizationError(f"layer table entry {i} truncated") from None
        if w_off + w_len > len(data) or b_off + b_len > len(data):
            raise QuantizationError(f"layer {i} payload beyond end of bundle")
        if kind >= len(_KINDS):
            raise QuantizationError(f"layer {i} has unknown kind {kind}")
        end = max(end, w_off + w_len, b_off + b_len)
        layer = QLayer(_KINDS[kind], name[:ln].decode(), QuantParams(ins, inzp),
                       QuantParams(outs, outzp), w_scale=ws, m0=m0, shift=shift,
                       relu=bool(relu))
        if layer.kind in ("conv", "dense"):
            shape = (s0, s1, s2, s3) if layer.kind == "conv" else (s0, s1)
            if int(np.prod(shape)) != w_len or b_len != 4 * s0:
                raise QuantizationError(f"layer {i} payload sizes do not match its shape")
            layer.weights = np.frombuffer(data, "<i1", w_len, w_off).astype(np.int8).reshape(shape)
            layer.bias = np.frombuffer(data, "<i4", b_len // 4, b_off).astype(np.int32)
        else:
            layer.pool = (s0, s1) if layer.kind == "maxpool" else ()
        qm.layers.append(layer)
    if end != len(data):
        raise QuantizationError(f"bundle is {len(data)} bytes, layout implies {end}")
    return qm


def manifest(qm: QuantizedModel) -> dict:
    """Per-layer MACs, parameter bytes and INT8 activation bytes for one window."""
    from .model import ModelConfig
    macs = count_macs(ModelConfig(qm.channels, qm.samples)).per_layer
    shape = (1, qm.channels, qm.samples)
    rows = []
    for layer in qm.layers:
        if layer.kind == "conv":
            shape = (layer.weights.shape[0],) + shape[1:]
        elif layer.kind == "maxpool":
            shape = (shape[0], shape[1] // layer.pool[0], shape[2] // layer.pool[1])
        elif layer.kind == "gap":
            shape = (shape[0], 1, 1)
        else:
            shape = (layer.weights.shape[0],)
        pbytes = 0 if layer.weights is None else layer.weights.size + 4 * layer.bias.size
        rows.append({"name": layer.name, "kind": layer.kind, "macs": macs.get(layer.name, 0),
                     "parameter_bytes": pbytes, "activation_bytes": int(np.prod(shape)),
                     "m0": layer.m0, "shift": layer.shift})
    metadata = _BHEAD.size + len(qm.layers) * _BLAYER.size
    return {
        "input": [1, qm.channels, qm.samples],
        "layers": rows,
        "total_macs": sum(r["macs"] for r in rows),
        "parameter_bytes": sum(r["parameter_bytes"] for r in rows),
        "metadata_bytes": metadata,
        "bundle_bytes": metadata + sum(r["parameter_bytes"] for r in rows),
        "input_bytes": qm.channels * qm.samples,
        "peak_activation_bytes": max(r["activation_bytes"] for r in rows),
    }


def write_bundle(qm: QuantizedModel, bundle_path, manifest_path=None) -> None:
    atomic_write(bundle_path, export_quantized(qm))
    if manifest_path:
        atomic_write(manifest_path, (json.dumps(manifest(qm), indent=2) + "\n").encode())


def read_bundle(path) -> QuantizedModel:
    with open(path, "rb") as f:
        return load_quantized(f.read())
