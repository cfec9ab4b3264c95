"""A small fully convolutional segmentation network.

Layout: a stack of 3x3 conv + ReLU layers, a head conv (1x1 or 3x3) + ReLU
whose output is the feature map the CAR losses see, then a 1x1 classifier.
Tensors are NHWC. The regularizers only touch the training graph, so inference
is just ``forward`` without them.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple

import numpy as np

from .tensor import Tensor, conv2d, relu

MAGIC = b"CARM"
VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    channels: Tuple[int, ...] = (16, 32, 32)
    head_kernel: int = 1
    num_classes: int = 4
    feature_dim: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.head_kernel not in (1, 3):
            raise ValueError(f"head_kernel must be 1 or 3, got {self.head_kernel}")
        if not 3 <= len(self.channels) <= 4:
            raise ValueError(f"expected 3 or 4 backbone layers, got {len(self.channels)}")


class Model:
    def __init__(self, params: List[Tuple[str, Tensor]]):
        self.params = params
        names = [n for n, _ in params]
        self._by_name = dict(params)
        self.n_backbone = sum(1 for n in names if n.startswith("conv") and n.endswith(".w"))

    @property
    def head_kernel(self) -> int:
        return self._by_name["head.w"].shape[0]

    @property
    def num_classes(self) -> int:
        return self._by_name["cls.w"].shape[-1]

    @property
    def feature_dim(self) -> int:
        return self._by_name["head.w"].shape[-1]

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.params]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def forward(self, images) -> Tuple[Tensor, Tensor]:
        """images: B x H x W x 3 in [0, 1]. Returns (features, logits)."""
        x = Tensor(np.asarray(images, dtype=self._by_name["head.w"].dtype) - 0.5)
        p = self._by_name
        for i in range(self.n_backbone):
            x = relu(conv2d(x, p[f"conv{i}.w"], p[f"conv{i}.b"]))
        features = relu(conv2d(x, p["head.w"], p["head.b"]))
        logits = conv2d(features, p["cls.w"], p["cls.b"])
        return features, logits

    def predict(self, images, batch_size: int = 16) -> np.ndarray:
        out = []
        for i in range(0, len(images), batch_size):
            _, logits = self.forward(images[i:i + batch_size])
            out.append(logits.data.argmax(axis=-1))
        return np.concatenate(out, axis=0)

    def features(self, images, batch_size: int = 16) -> np.ndarray:
        out = []
        for i in range(0, len(images), batch_size):
            feats, _ = self.forward(images[i:i + batch_size])
            out.append(feats.data)
        return np.concatenate(out, axis=0)


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def build_model(cfg: ModelConfig, dtype=np.float32) -> Model:
    """He-uniform weights drawn from ``cfg.seed`` in declaration order; zero biases."""
    rng = np.random.default_rng(cfg.seed)
    params = []
    cin = 3
    for i, cout in enumerate(cfg.channels):
        params.append((f"conv{i}.w", _uniform(rng, (3, 3, cin, cout), 9 * cin, dtype)))
        params.append((f"conv{i}.b", Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)))
        cin = cout
    k = cfg.head_kernel
    params.append(("head.w", _uniform(rng, (k, k, cin, cfg.feature_dim), k * k * cin, dtype)))
    params.append(("head.b", Tensor(np.zeros(cfg.feature_dim, dtype=dtype), requires_grad=True)))
    params.append(("cls.w", _uniform(rng, (1, 1, cfg.feature_dim, cfg.num_classes), cfg.feature_dim, dtype)))
    params.append(("cls.b", Tensor(np.zeros(cfg.num_classes, dtype=dtype), requires_grad=True)))
    return Model(params)


# -- checkpoint ---------------------------------------------------------------
#
# "CARM" | u8 version | u32 tensor count | per tensor: u8 name length, name,
# u8 ndim, u32 dims... | then every tensor's little-endian float32 data in
# declaration order.


def save_checkpoint(model: Model, path) -> None:
    out = bytearray(MAGIC)
    out += struct.pack("<BI", VERSION, len(model.params))
    for name, t in model.params:
        raw = name.encode("ascii")
        out += struct.pack("<B", len(raw)) + raw
        out += struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
    for _, t in model.params:
        out += np.ascontiguousarray(t.data, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> Model:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a CARM checkpoint")
    version, count = struct.unpack_from("<BI", data, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 9
    table = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<B", data, pos)
        name = data[pos + 1:pos + 1 + nlen].decode("ascii")
        pos += 1 + nlen
        (ndim,) = struct.unpack_from("<B", data, pos)
        shape = struct.unpack_from(f"<{ndim}I", data, pos + 1)
        pos += 1 + 4 * ndim
        table.append((name, shape))
    params = []
    for name, shape in table:
        n = int(np.prod(shape))
        if pos + 4 * n > len(data):
            raise ValueError(f"{path}: truncated tensor data for {name}")
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * n
        params.append((name, Tensor(arr, requires_grad=True)))
    return Model(params)
