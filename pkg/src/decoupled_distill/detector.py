"""Tiny single-scale grid detectors and the one-layer feature adaptation block."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .numcore import InvalidInputError, Tensor

PRESETS = {
    "teacher": (16, 32, 64, 64),
    "student": (8, 16, 16),
}
NUM_POOLS = 3
LEAK = 0.1
CONF_PRIOR_BIAS = -4.0


def _init_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed))


@dataclass
class DetectorModel:
    arch: str
    num_classes: int
    channels: tuple[int, ...]
    k: int = 8
    b: int = 2
    image_size: int = 64
    seed: int = 0
    params: list[Tensor] = field(default_factory=list)

    @property
    def slot_size(self) -> int:
        return 5 + self.num_classes

    @property
    def feature_channels(self) -> int:
        return self.channels[-1]

    def layers(self) -> list[tuple[Tensor, Tensor]]:
        return [(self.params[i], self.params[i + 1]) for i in range(0, len(self.params), 2)]

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.params]))

    def forward(self, batch) -> tuple[Tensor, Tensor]:
        return forward(self, batch)

    def copy(self) -> DetectorModel:
        clone = DetectorModel(self.arch, self.num_classes, self.channels, self.k, self.b,
                              self.image_size, self.seed)
        clone.params = [Tensor(p.data.copy(), requires_grad=True, name=p.name) for p in self.params]
        return clone

    def state(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.params]

    def load_state(self, arrays):
        for p, a in zip(self.params, arrays, strict=True):
            if p.data.shape != a.shape:
                raise InvalidInputError(f"parameter {p.name}: shape {a.shape} != {p.data.shape}")
            p.data[...] = a


def build_model(preset: str, num_classes: int, seed: int = 0, b: int = 2,
                image_size: int = 64) -> DetectorModel:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}")
    if num_classes < 1:
        raise ValueError("num_classes must be >= 1")
    channels = PRESETS[preset]
    k = image_size // 2 ** NUM_POOLS
    m = DetectorModel(preset, num_classes, channels, k, b, image_size, seed)
    rng = _init_rng(seed)
    cin = 3
    for i, cout in enumerate(channels):
        fan_in = cin * 9
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, 3, 3))
        m.params += [Tensor(w, True, f"conv{i}.weight"), Tensor(np.zeros(cout), True, f"conv{i}.bias")]
        cin = cout
    nout = b * m.slot_size
    w = rng.normal(0.0, 0.1 * np.sqrt(2.0 / cin), size=(nout, cin, 1, 1))
    bias = np.zeros((b, m.slot_size))
    bias[:, 4] = CONF_PRIOR_BIAS
    m.params += [Tensor(w, True, "head.weight"), Tensor(bias.reshape(-1), True, "head.bias")]
    return m


def backbone(m: DetectorModel, x: Tensor) -> Tensor:
    h = x
    layers = m.layers()[:-1]
    # pools follow the first NUM_POOLS convs; any further convs run at grid resolution
    for i, (w, bias) in enumerate(layers):
        h = nc.leaky_relu(nc.conv2d(h, w, bias, 1, 1), LEAK)
        if i < NUM_POOLS:
            h = nc.max_pool2d(h, 2)
    return h


def head(m: DetectorModel, features: Tensor) -> Tensor:
    w, bias = m.layers()[-1]
    out = nc.conv2d(features, w, bias)
    n = out.shape[0]
    out = nc.transpose(out, (0, 2, 3, 1))
    return nc.reshape(out, (n, m.k, m.k, m.b, m.slot_size))


def forward(m: DetectorModel, batch) -> tuple[Tensor, Tensor]:
    """(last backbone activation [N,C,K,K], head logits [N,K,K,B,5+Nc])."""
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x.data.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (m.image_size, m.image_size):
        raise InvalidInputError(f"expected [N,3,{m.image_size},{m.image_size}] input, got {x.shape}")
    feats = backbone(m, x)
    return feats, head(m, feats)


def predict_raw(m: DetectorModel, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Head logits for a stack of images without building a graph."""
    frozen = DetectorModel(m.arch, m.num_classes, m.channels, m.k, m.b, m.image_size, m.seed,
                           [Tensor(p.data) for p in m.params])
    outs = []
    for i in range(0, len(images), batch_size):
        _, raw = forward(frozen, np.asarray(images[i:i + batch_size], dtype=np.float64))
        outs.append(raw.data)
    if not outs:
        return np.zeros((0, m.k, m.k, m.b, m.slot_size))
    return np.concatenate(outs)


def predict_features(m: DetectorModel, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    frozen = DetectorModel(m.arch, m.num_classes, m.channels, m.k, m.b, m.image_size, m.seed,
                           [Tensor(p.data) for p in m.params])
    feats, raw = forward(frozen, np.asarray(images, dtype=np.float64))
    return feats.data, raw.data


# ---------------------------------------------------------------- adaptation

@dataclass
class AdaptationLayer:
    weight: Tensor
    bias: Tensor

    @property
    def params(self) -> list[Tensor]:
        return [self.weight, self.bias]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]


def build_adaptation(student_channels: int, teacher_channels: int, seed: int = 0,
                     identity: bool = False) -> AdaptationLayer:
    if identity:
        if student_channels != teacher_channels:
            raise ValueError("identity adaptation needs equal channel counts")
        w = np.eye(teacher_channels).reshape(teacher_channels, student_channels, 1, 1)
    else:
        rng = _init_rng(seed + 7919)
        w = rng.normal(0.0, np.sqrt(1.0 / student_channels), size=(teacher_channels, student_channels, 1, 1))
    return AdaptationLayer(Tensor(w, True, "adapt.weight"), Tensor(np.zeros(teacher_channels), True, "adapt.bias"))


def adapt(a: AdaptationLayer, f: Tensor) -> Tensor:
    if f.data.ndim != 4 or f.shape[1] != a.in_channels:
        raise InvalidInputError(f"adaptation expects {a.in_channels} input channels, got shape {f.shape}")
    return nc.conv2d(f, a.weight, a.bias)


# ---------------------------------------------------------------- checkpoints
# File layout: one JSON header line, then float64 little-endian parameters in
# registry order.

def save_checkpoint(m: DetectorModel, path) -> Path:
    path = Path(path)
    header = {
        "arch": m.arch, "K": m.k, "B": m.b, "Nc": m.num_classes, "seed": m.seed,
        "image_size": m.image_size, "channels": list(m.channels),
        "params": [[p.name, list(p.shape)] for p in m.params],
    }
    blob = np.concatenate([p.data.ravel() for p in m.params]).astype("<f8").tobytes()
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode() + b"\n")
        f.write(blob)
    return path


def load_checkpoint(path) -> DetectorModel:
    path = Path(path)
    with open(path, "rb") as f:
        header = json.loads(f.readline())
        blob = np.frombuffer(f.read(), dtype="<f8")
    m = DetectorModel(header["arch"], header["Nc"], tuple(header["channels"]), header["K"],
                      header["B"], header["image_size"], header["seed"])
    offset = 0
    for name, shape in header["params"]:
        n = int(np.prod(shape))
        if offset + n > blob.size:
            raise ValueError(f"{path}: truncated parameter blob at {name}")
        m.params.append(Tensor(blob[offset:offset + n].reshape(shape).copy(), True, name))
        offset += n
    if offset != blob.size:
        raise ValueError(f"{path}: {blob.size - offset} trailing values")
    return m
