"""Detector and grasp-regressor networks, preprocessing and checkpoints."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigInvalid, FormatVersionMismatch, IoFailure, MissingMean, ShapeMismatch
from .synth import resize_bilinear
from .tensor import (
    Tensor,
    conv2d,
    decode_hvst,
    encode_hvst,
    linear,
    maxpool2,
    no_grad,
    relu,
    reshape,
    sigmoid,
    transpose,
)

CHECKPOINT_VERSION = 1
HEAD_INIT_SCALE = 0.01


@dataclass(frozen=True)
class DetectorConfig:
    """Backbone of conv+ReLU+pool stages, one extra conv, then a 1x1 head."""

    input_size: int = 416
    S: int = 13
    B: int = 2
    C: int = 3
    widths: tuple[int, ...] = (16, 32, 64, 128, 256)
    head_width: int = 256

    @property
    def depth(self) -> int:
        return self.B * 5 + self.C

    def validate(self) -> None:
        n_pool = len(self.widths)
        if min(self.input_size, self.S, self.B, self.C, self.head_width, *self.widths) < 1:
            raise ConfigInvalid("detector sizes must be positive")
        if self.input_size % (2 ** n_pool) or self.input_size // (2 ** n_pool) != self.S:
            raise ConfigInvalid(
                f"input {self.input_size} with {n_pool} pooling stages does not give S={self.S}")

    @classmethod
    def desk(cls, C: int = 3) -> "DetectorConfig":
        return cls(input_size=64, S=8, B=1, C=C, widths=(16, 32, 64), head_width=64)


@dataclass(frozen=True)
class GrasperConfig:
    """VGG pattern: stages of 3x3 convs each closed by a pool, then fc layers
    and a fixed 4-unit output."""

    input_size: int = 224
    stages: tuple[tuple[int, ...], ...] = ((64, 64), (128, 128), (256, 256, 256),
                                           (512, 512, 512), (512, 512, 512))
    fc: tuple[int, ...] = (4096, 4096)
    outputs: int = 4

    def validate(self) -> None:
        n_pool = len(self.stages)
        if self.outputs != 4:
            raise ConfigInvalid("the grasp regressor has exactly 4 outputs")
        if not self.stages or any(not s for s in self.stages):
            raise ConfigInvalid("every stage needs at least one conv layer")
        if self.input_size < 2 ** n_pool or self.input_size % (2 ** n_pool):
            raise ConfigInvalid(f"input {self.input_size} not divisible by 2^{n_pool}")

    @classmethod
    def desk(cls) -> "GrasperConfig":
        return cls(input_size=32, stages=((8, 8), (16, 16), (32, 32)), fc=(64,))


# ---------------------------------------------------------------- layers


class Conv:
    def __init__(self, cin: int, cout: int, rng: np.random.Generator | None, k: int = 3,
                 scale: float = 1.0):
        fan_in = cin * k * k
        limit = scale * np.sqrt(6.0 / fan_in)
        w = rng.uniform(-limit, limit, size=(cout, cin, k, k)) if rng is not None else np.zeros((cout, cin, k, k))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)
        self.padding = k // 2

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def __call__(self, x):
        return conv2d(x, self.weight, self.bias, 1, self.padding)


class Dense:
    def __init__(self, nin: int, nout: int, rng: np.random.Generator | None):
        limit = np.sqrt(6.0 / nin)
        w = rng.uniform(-limit, limit, size=(nout, nin)) if rng is not None else np.zeros((nout, nin))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(nout), requires_grad=True)

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def __call__(self, x):
        return linear(x, self.weight, self.bias)


class _Fn:
    def __init__(self, name: str, fn):
        self.name, self.fn = name, fn

    def params(self):
        return []

    def __call__(self, x):
        return self.fn(x)


def _flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def _to_grid(x: Tensor) -> Tensor:
    return transpose(x, (0, 2, 3, 1))


class Network:
    """Sequential stack of layers; forward takes a batch [N, 3, D, D]."""

    def __init__(self, kind: str, config, layers: list, metadata: dict | None = None):
        self.kind = kind
        self.config = config
        self.layers = layers
        self.metadata = dict(metadata or {})

    def __call__(self, x) -> Tensor:
        return self.forward(x)

    def forward(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        single = x.ndim == 3
        if single:
            x = reshape(x, (1,) + x.shape)
        for layer in self.layers:
            x = layer(x)
        if single:
            x = reshape(x, x.shape[1:])
        return x

    def predict(self, x) -> np.ndarray:
        with no_grad():
            return self.forward(x).data

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.layers):
            for name, p in layer.params():
                out.append((f"{i}.{name}", p))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def weights(self) -> list[Tensor]:
        """Kernel and matrix weights only (the regularized set); biases excluded."""
        return [p for n, p in self.named_parameters() if n.endswith("weight")]

    @property
    def conv_layers(self) -> int:
        return sum(isinstance(l, Conv) for l in self.layers)

    @property
    def fc_layers(self) -> int:
        return sum(isinstance(l, Dense) for l in self.layers)


def build_detector(cfg: DetectorConfig, seed: int = 0) -> Network:
    cfg.validate()
    rng = np.random.default_rng(seed)
    layers: list = []
    cin = 3
    for w in cfg.widths:
        layers += [Conv(cin, w, rng), _Fn("relu", relu), _Fn("pool", maxpool2)]
        cin = w
    layers += [Conv(cin, cfg.head_width, rng), _Fn("relu", relu),
               # small head init: outputs start near 0.5 instead of saturating the sigmoid
               Conv(cfg.head_width, cfg.depth, rng, k=1, scale=HEAD_INIT_SCALE), _Fn("grid", _to_grid), _Fn("sigmoid", sigmoid)]
    return Network("detector", cfg, layers)


def grasper_layout(cfg: GrasperConfig) -> list[tuple[str, int, int]]:
    """(kind, fan_in, fan_out) for every weighted layer, without allocating weights."""
    cfg.validate()
    plan = []
    cin = 3
    for stage in cfg.stages:
        for w in stage:
            plan.append(("conv", cin, w))
            cin = w
    side = cfg.input_size // (2 ** len(cfg.stages))
    nin = cin * side * side
    for w in (*cfg.fc, cfg.outputs):
        plan.append(("fc", nin, w))
        nin = w
    return plan


def build_grasper(cfg: GrasperConfig, seed: int = 0) -> Network:
    plan = grasper_layout(cfg)
    rng = np.random.default_rng(seed)
    layers: list = []
    convs = iter(p for p in plan if p[0] == "conv")
    for stage in cfg.stages:
        for _ in stage:
            _, cin, cout = next(convs)
            layers += [Conv(cin, cout, rng), _Fn("relu", relu)]
        layers.append(_Fn("pool", maxpool2))
    layers.append(_Fn("flatten", _flatten))
    fcs = [p for p in plan if p[0] == "fc"]
    for i, (_, nin, nout) in enumerate(fcs):
        layers.append(Dense(nin, nout, rng))
        layers.append(_Fn("relu", relu) if i < len(fcs) - 1 else _Fn("sigmoid", sigmoid))
    return Network("grasper", cfg, layers)


# ---------------------------------------------------------------- preprocessing


def preprocess_detector(image: np.ndarray, cfg: DetectorConfig) -> np.ndarray:
    """Resize to the detector input size; values stay in [0, 1]."""
    d = cfg.input_size
    return resize_bilinear(np.asarray(image, dtype=np.float32), d, d)


def preprocess_grasper(crop: np.ndarray, cfg: GrasperConfig, dataset_mean) -> np.ndarray:
    """Resize to the grasper input size, then subtract the per-channel training mean."""
    if dataset_mean is None:
        raise MissingMean("grasper preprocessing needs the training-split channel mean")
    mean = np.asarray(dataset_mean, dtype=np.float32).reshape(3, 1, 1)
    d = cfg.input_size
    return resize_bilinear(np.asarray(crop, dtype=np.float32), d, d) - mean


# ---------------------------------------------------------------- checkpoints


def _config_from_dict(kind: str, d: dict):
    if kind == "detector":
        return DetectorConfig(**{**d, "widths": tuple(d["widths"])})
    if kind == "grasper":
        return GrasperConfig(**{**d, "stages": tuple(tuple(s) for s in d["stages"]), "fc": tuple(d["fc"])})
    raise IoFailure(f"unknown network kind {kind!r}")


def save_checkpoint(net: Network, path) -> None:
    """Length-prefixed JSON header followed by one HVST block per tensor."""
    blobs, directory, offset = [], [], 0
    for name, p in net.named_parameters():
        blob = encode_hvst(p.data)
        directory.append({"name": name, "offset": offset, "length": len(blob), "shape": list(p.shape)})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "kind": net.kind,
        "config": asdict(net.config),
        "tensors": directory,
        "metadata": net.metadata,
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as f:
            f.write(struct.pack("<Q", len(hb)))
            f.write(hb)
            for blob in blobs:
                f.write(blob)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def load_checkpoint(path) -> Network:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if len(buf) < 8:
        raise IoFailure("checkpoint shorter than its header length prefix")
    (hlen,) = struct.unpack_from("<Q", buf, 0)
    if len(buf) < 8 + hlen:
        raise IoFailure("checkpoint header truncated")
    try:
        header = json.loads(buf[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IoFailure(f"unreadable checkpoint header: {exc}") from exc
    if not isinstance(header, dict) or header.get("format_version") != CHECKPOINT_VERSION:
        raise FormatVersionMismatch(
            f"checkpoint format {header.get('format_version') if isinstance(header, dict) else '?'}"
            f" != {CHECKPOINT_VERSION}")
    try:
        kind = header["kind"]
        cfg = _config_from_dict(kind, header["config"])
        directory = header["tensors"]
    except (KeyError, TypeError) as exc:
        raise IoFailure(f"malformed checkpoint header: {exc}") from exc
    try:
        net = build_detector(cfg) if kind == "detector" else build_grasper(cfg)
    except ConfigInvalid as exc:
        raise ShapeMismatch(f"config echo is not buildable: {exc}") from exc
    params = dict(net.named_parameters())
    if sorted(params) != sorted(e["name"] for e in directory):
        raise ShapeMismatch("checkpoint tensors do not match the network built from its config")
    base = 8 + hlen
    for entry in directory:
        start = base + int(entry["offset"])
        arr, end = decode_hvst(buf, start)
        if end != start + int(entry["length"]):
            raise IoFailure(f"tensor {entry['name']} length mismatch")
        p = params[entry["name"]]
        if arr.shape != p.shape:
            raise ShapeMismatch(f"tensor {entry['name']}: stored {arr.shape}, config implies {p.shape}")
        p.data = arr
        p.grad = np.zeros_like(arr)
    net.metadata = dict(header.get("metadata") or {})
    return net
