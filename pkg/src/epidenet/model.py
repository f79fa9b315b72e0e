"""The six-block seizure-detection CNN: construction, passes, MACs, checkpoints.

Block layout (C channels, T samples; ``//`` is integer division)::

    phi1  Conv2D  4 x (1, 4)   -> (4, C, T)       MaxPool (1, 8) -> (4, C, T//8)
    phi2  Conv2D 16 x (1, 16)  -> (16, C, T//8)   MaxPool (1, 4) -> (16, C, T//32)
    phi3  Conv2D 16 x (1, 8)   -> (16, C, T//32)  MaxPool (1, 4) -> (16, C, T//128)
    phi4  Conv2D 16 x (16, 1)  -> (16, C, T//128) MaxPool (4, 1) -> (16, C//4, T//128)
    phi5  Conv2D 16 x (8, 1)   -> (16, C//4, T//128) GlobalAvgPool -> (16, 1, 1)
    phi6  Dense 16 -> 2
"""
from __future__ import annotations

import copy
import dataclasses
import io
import os
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import (Conv2D, Dense, Flatten, GlobalAvgPool, Layer, MaxPool2D,
                     ReLU, ShapeError, count_multiplies)

ACTIVATIONS = ("relu", "none")

# (block, filters, kernel, pool); pool=None means global average pooling
BLOCKS = (
    ("phi1", 4, (1, 4), (1, 8)),
    ("phi2", 16, (1, 16), (1, 4)),
    ("phi3", 16, (1, 8), (1, 4)),
    ("phi4", 16, (16, 1), (4, 1)),
    ("phi5", 16, (8, 1), None),
)
N_CLASSES = 2


class ConfigError(ValueError):
    pass


class CheckpointFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    channels: int
    samples: int
    seed: int = 0
    activation: str = "relu"
    # multiplies the raw input before phi1; set by the trainer from data statistics
    input_scale: float = 1.0

    def validate(self) -> None:
        if self.channels < 1:
            raise ConfigError(f"channels must be >= 1, got {self.channels}")
        if self.samples // 128 < 1:
            raise ConfigError(f"samples={self.samples} too small: T//128 must be >= 1")
        if self.channels // 4 < 1:
            raise ConfigError(f"channels={self.channels} too small: C//4 must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}")
        if not self.input_scale > 0:
            raise ConfigError("input_scale must be positive")

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)


class Model:
    """Ordered named layers plus the config they were built from."""

    def __init__(self, config: ModelConfig, layers: list[tuple[str, Layer]]):
        self.config = config
        self.layers = layers

    # -- parameters --------------------------------------------------------
    def parameters(self) -> list[tuple[str, np.ndarray]]:
        return [(f"{name}.{k}", v) for name, layer in self.layers
                for k, v in layer.params.items()]

    def n_parameters(self) -> int:
        return sum(p.size for _, p in self.parameters())

    def get_layer(self, name: str) -> Layer:
        for n, layer in self.layers:
            if n == name:
                return layer
        raise KeyError(name)

    def astype(self, dtype) -> "Model":
        m = self.copy()
        for _, layer in m.layers:
            for k in layer.params:
                layer.params[k] = layer.params[k].astype(dtype)
        return m

    def copy(self) -> "Model":
        m = copy.deepcopy(self)
        for _, layer in m.layers:
            layer._cache = None
        return m

    # -- passes ------------------------------------------------------------
    def forward(self, batch: np.ndarray, keep: bool = False):
        """Raw logits (N, 2). With ``keep=True`` also return every layer output."""
        c, t = self.config.channels, self.config.samples
        if batch.ndim != 4 or batch.shape[1:] != (1, c, t):
            raise ShapeError(f"expected batch of shape (N, 1, {c}, {t}), got {batch.shape}")
        x = batch * batch.dtype.type(self.config.input_scale) \
            if self.config.input_scale != 1.0 else batch
        outputs = {}
        for name, layer in self.layers:
            x = layer.forward(x)
            if keep:
                outputs[name] = x
        return (x, outputs) if keep else x

    def backward(self, d_logits: np.ndarray) -> dict[str, np.ndarray]:
        grads = {}
        g = d_logits
        for name, layer in reversed(self.layers):
            lg = layer.backward(g)
            if lg.d_weights is not None:
                grads[f"{name}.weights"] = lg.d_weights
                grads[f"{name}.bias"] = lg.d_bias
            g = lg.d_input
        return grads

    def logits(self, windows: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Logits for (N, C, T) or (N, 1, C, T) windows, evaluated in chunks."""
        x = np.asarray(windows, dtype=np.float32)
        if x.ndim == 3:
            x = x[:, None]
        out = [self.forward(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
        if not out:
            return np.zeros((0, N_CLASSES), np.float32)
        return np.concatenate(out)

    def predict_labels(self, windows: np.ndarray) -> np.ndarray:
        z = self.logits(windows)
        return (z[:, 1] > z[:, 0]).astype(np.int8)

    def intermediate_shapes(self) -> list[tuple[str, tuple]]:
        shape = (1, self.config.channels, self.config.samples)
        out = []
        for name, layer in self.layers:
            shape = layer.output_shape(shape)
            out.append((name, shape))
        return out


def _layers(config: ModelConfig) -> list[tuple[str, Layer]]:
    layers: list[tuple[str, Layer]] = []
    cin = 1
    for block, filters, kernel, pool in BLOCKS:
        layers.append((f"{block}.conv", Conv2D(cin, filters, kernel)))
        if config.activation == "relu":
            layers.append((f"{block}.relu", ReLU()))
        layers.append((f"{block}.pool", MaxPool2D(pool) if pool else GlobalAvgPool()))
        cin = filters
    layers.append(("phi6.flatten", Flatten()))
    layers.append(("phi6.dense", Dense(cin, N_CLASSES)))
    return layers


def build(config: ModelConfig, zero: bool = False) -> Model:
    """Instantiate the network with fan-in-scaled uniform weights and zero biases."""
    config.validate()
    model = Model(config, _layers(config))
    model.intermediate_shapes()  # raises on pooling extents that do not fit
    rng = np.random.default_rng(config.seed)
    for _, layer in model.layers:
        if not layer.params:
            continue
        w = layer.params["weights"]
        if zero:
            layer.params["weights"] = np.zeros(w.shape, np.float32)
        else:
            fan_in = int(np.prod(w.shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            layer.params["weights"] = rng.uniform(-bound, bound, w.shape).astype(np.float32)
        layer.params["bias"] = np.zeros(layer.params["bias"].shape, np.float32)
    return model


def forward(model: Model, batch: np.ndarray) -> np.ndarray:
    return model.forward(batch)


# ---------------------------------------------------------------------------
# MAC accounting


@dataclass
class MacCount:
    per_layer: dict
    total: int


def count_macs(config: ModelConfig) -> MacCount:
    """Closed-form multiply-accumulate count; pooling and activations cost 0."""
    model = Model(config, _layers(config))
    shape = (1, config.channels, config.samples)
    per_layer = {}
    for name, layer in model.layers:
        if hasattr(layer, "macs"):
            per_layer[name] = int(layer.macs(shape))
        shape = layer.output_shape(shape)
    return MacCount(per_layer, sum(per_layer.values()))


def count_macs_instrumented(model: Model) -> int:
    """Multiplies actually issued by one single-window forward pass."""
    x = np.zeros((1, 1, model.config.channels, model.config.samples), np.float32)
    with count_multiplies() as counter:
        model.forward(x)
    return counter[0]


# ---------------------------------------------------------------------------
# checkpoints
#
# layout (little-endian):
#   magic "EPDNCKPT" | u16 version | u32 C | u32 T | u8 activation | u64 seed
#   | f64 input_scale | u16 n_records
#   per record: u16 name_len | name utf-8 | u8 ndim | u32 * ndim | f32 payload

CKPT_MAGIC = b"EPDNCKPT"
CKPT_VERSION = 1
_HEAD = struct.Struct("<8sHIIBQdH")


def save_checkpoint(model: Model, path) -> None:
    cfg = model.config
    buf = io.BytesIO()
    params = model.parameters()
    buf.write(_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, cfg.channels, cfg.samples,
                         ACTIVATIONS.index(cfg.activation), cfg.seed & (2**64 - 1),
                         cfg.input_scale, len(params)))
    for name, arr in params:
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)) + raw)
        buf.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    atomic_write(path, buf.getvalue())


def atomic_write(path, data: bytes) -> None:
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def load_checkpoint(path, expect: Optional[tuple[int, int]] = None) -> Model:
    """Read a checkpoint. ``expect`` = (C, T) rejects models built for other extents."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _HEAD.size:
        raise CheckpointFormatError("file shorter than checkpoint header")
    magic, version, c, t, act, seed, scale, n = _HEAD.unpack_from(data, 0)
    if magic != CKPT_MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    if act >= len(ACTIVATIONS):
        raise CheckpointFormatError(f"unknown activation code {act}")
    if expect is not None and tuple(expect) != (c, t):
        raise ShapeError(f"checkpoint built for (C, T)=({c}, {t}), expected {tuple(expect)}")
    config = ModelConfig(c, t, seed=seed, activation=ACTIVATIONS[act], input_scale=scale)
    try:
        config.validate()
    except ConfigError as e:
        raise CheckpointFormatError(f"invalid config block: {e}") from None
    model = build(config, zero=True)
    expected = dict(model.parameters())
    if n != len(expected):
        raise CheckpointFormatError(f"{n} tensors in file, model has {len(expected)}")
    loaded = {}
    off = _HEAD.size
    try:
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + ln].decode()
            off += ln
            (ndim,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            size = int(np.prod(shape)) * 4
            if off + size > len(data):
                raise CheckpointFormatError(f"tensor {name!r} truncated at byte {off}")
            if name not in expected:
                raise CheckpointFormatError(f"unexpected tensor {name!r}")
            if tuple(shape) != expected[name].shape:
                raise ShapeError(f"tensor {name!r} has shape {shape}, "
                                 f"expected {expected[name].shape}")
            loaded[name] = (np.frombuffer(data, "<f4", int(np.prod(shape)), off)
                            .astype(np.float32).reshape(shape))
            off += size
    except struct.error as e:
        raise CheckpointFormatError(f"truncated record header at byte {off}: {e}") from None
    if off != len(data):
        raise CheckpointFormatError(f"{len(data) - off} trailing bytes after last tensor")
    for name, layer in model.layers:
        for k in layer.params:
            layer.params[k] = loaded[f"{name}.{k}"]
    return model
