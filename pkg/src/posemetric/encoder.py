"""Feed-forward encoders with projection heads, Adam, and checkpoint files.

Every layer computes ``x @ W + b``; all but the last are followed by tanh.
The first ``n_backbone`` layers form the backbone parameter group and the rest
the projection head, so the two groups can use separate learning rates.

Checkpoint layout (all integers little endian)::

    b"PMCKPT1\\n" | u32 header length | UTF-8 JSON header | float32 LE blob

The blob holds, for the camera then the render encoder, every layer's weight
matrix (row-major, shape ``(in, out)``) followed by its bias.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CKPT_MAGIC = b"PMCKPT1\n"


class MLP:
    def __init__(self, weights: list[np.ndarray], biases: list[np.ndarray], n_backbone: int | None = None):
        if len(weights) != len(biases) or not weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for k, (w, b) in enumerate(zip(weights, biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {k}: bias shape {b.shape} does not match weight {w.shape}")
            if k and weights[k - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {k}: input width {w.shape[0]} != previous output {weights[k - 1].shape[1]}")
        self.weights = [np.asarray(w, dtype=float) for w in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        self.n_backbone = len(weights) if n_backbone is None else n_backbone

    @classmethod
    def init(cls, sizes, n_backbone: int, rng) -> "MLP":
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            weights.append(rng.normal(scale=np.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases, n_backbone)

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def parameter_groups(self) -> tuple[list[int], list[int]]:
        """Indices into :meth:`parameters` for the backbone and head groups."""
        split = 2 * self.n_backbone
        idx = list(range(2 * len(self.weights)))
        return idx[:split], idx[split:]

    def copy(self) -> "MLP":
        return MLP([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.n_backbone)

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"expected input dimension {self.input_dim}, got {x.shape[-1]}")
        return x

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.forward_cached(x)[0]

    def forward_cached(self, x: np.ndarray):
        x = self._check_input(x)
        single = x.ndim == 1
        h = np.atleast_2d(x)
        inputs = []
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            h = h @ w + b
            if k < last:
                h = np.tanh(h)
        return (h[0] if single else h), inputs

    def backward(self, inputs: list[np.ndarray], grad_out: np.ndarray, weight_decay: float = 0.0) -> list[np.ndarray]:
        """Gradients in :meth:`parameters` order; L2 decay adds ``weight_decay * p``."""
        g = np.atleast_2d(grad_out)
        grads: list[np.ndarray] = [None] * (2 * len(self.weights))
        for k in range(len(self.weights) - 1, -1, -1):
            x = inputs[k]
            grads[2 * k] = x.T @ g
            grads[2 * k + 1] = g.sum(axis=0)
            if k:
                # inputs[k] is tanh output of layer k-1
                g = (g @ self.weights[k].T) * (1.0 - x * x)
        if weight_decay:
            grads = [gp + weight_decay * p for gp, p in zip(grads, self.parameters())]
        return grads


@dataclass
class EncoderPair:
    camera: MLP
    render: MLP

    @classmethod
    def init(cls, input_dim: int, hidden, backbone_out: int, head_hidden, embed_dim: int, rng) -> "EncoderPair":
        sizes = [input_dim, *hidden, backbone_out, *head_hidden, embed_dim]
        n_backbone = len(hidden) + 1
        return cls(MLP.init(sizes, n_backbone, rng), MLP.init(sizes, n_backbone, rng))

    def parameters(self) -> list[np.ndarray]:
        return self.camera.parameters() + self.render.parameters()

    def parameter_groups(self) -> tuple[list[int], list[int]]:
        cb, ch = self.camera.parameter_groups()
        offset = len(self.camera.parameters())
        rb, rh = self.render.parameter_groups()
        return cb + [offset + i for i in rb], ch + [offset + i for i in rh]

    def copy(self) -> "EncoderPair":
        return EncoderPair(self.camera.copy(), self.render.copy())

    def swapped(self) -> "EncoderPair":
        return EncoderPair(self.render.copy(), self.camera.copy())


@dataclass
class Adam:
    """Adam with per-group learning rates; decay is applied by the caller as L2."""

    params: list[np.ndarray]
    group_lrs: list[tuple[list[int], float]]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.lr = np.zeros(len(self.params))
        for idx, lr in self.group_lrs:
            self.lr[idx] = lr

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, (p, g) in enumerate(zip(self.params, grads)):
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.lr[k]:
                p -= self.lr[k] * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------- checkpoints


def _pack(header: dict, arrays) -> bytes:
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays)
    return CKPT_MAGIC + struct.pack("<I", len(head)) + head + blob


def save_checkpoint(path, pair: EncoderPair, seed: int = 0, config_hash: str = "", extra: dict | None = None) -> str:
    """Write ``pair`` to ``path``; returns the file's sha256 hex digest."""
    header = {
        "format": "posemetric-checkpoint",
        "version": 1,
        "architecture": {
            "sizes": pair.camera.sizes,
            "n_backbone": pair.camera.n_backbone,
            "activation": "tanh",
            "encoders": ["camera", "render"],
        },
        "dims": {"input": pair.camera.input_dim, "embed": pair.camera.output_dim},
        "seed": seed,
        "config_hash": config_hash,
        "dtype": "<f4",
    }
    if extra:
        header.update(extra)
    data = _pack(header, pair.parameters())
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read_header(data: bytes, magic: bytes) -> tuple[dict, int]:
    if not data.startswith(magic):
        raise ValueError("bad file magic")
    (length,) = struct.unpack_from("<I", data, len(magic))
    start = len(magic) + 4
    return json.loads(data[start:start + length].decode("utf-8")), start + length


def load_checkpoint(path) -> tuple[EncoderPair, dict]:
    data = Path(path).read_bytes()
    header, offset = read_header(data, CKPT_MAGIC)
    sizes = header["architecture"]["sizes"]
    n_backbone = header["architecture"]["n_backbone"]
    blob = np.frombuffer(data, dtype="<f4", offset=offset).astype(float)
    pos = 0
    encoders = []
    for _ in header["architecture"]["encoders"]:
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            weights.append(blob[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out).copy())
            pos += fan_in * fan_out
            biases.append(blob[pos:pos + fan_out].copy())
            pos += fan_out
        encoders.append(MLP(weights, biases, n_backbone))
    if pos != len(blob):
        raise ValueError("checkpoint blob size does not match its architecture")
    header["sha256"] = hashlib.sha256(data).hexdigest()
    return EncoderPair(*encoders), header
