"""Small hand-written perceptrons with exact reverse-mode gradients."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


@dataclass
class Dense:
    """Affine map ``y = x @ W.T + b`` with ``W`` of shape (out, in)."""

    W: np.ndarray
    b: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.W.shape

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: np.random.Generator) -> "Dense":
        lim = np.sqrt(6.0 / (n_in + n_out))
        return cls(rng.uniform(-lim, lim, size=(n_out, n_in)), np.zeros(n_out))

    def copy(self) -> "Dense":
        return Dense(self.W.copy(), self.b.copy())

    def astype(self, dtype) -> "Dense":
        return Dense(self.W.astype(dtype), self.b.astype(dtype))


@dataclass
class MLP:
    """Affine layers with ReLU between them (none after the last).

    ``in_scale`` is a fixed, untrained per-feature multiplier applied to the input.
    """

    layers: list[Dense]
    in_scale: np.ndarray | None = None

    @classmethod
    def init(cls, sizes: Sequence[int], rng: np.random.Generator, in_scale=None) -> "MLP":
        layers = [Dense.init(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]
        return cls(layers, None if in_scale is None else np.asarray(in_scale, dtype=np.float64))

    @property
    def n_in(self) -> int:
        return self.layers[0].W.shape[1]

    @property
    def n_out(self) -> int:
        return self.layers[-1].W.shape[0]

    def copy(self) -> "MLP":
        return MLP([l.copy() for l in self.layers], None if self.in_scale is None else self.in_scale.copy())

    def astype(self, dtype) -> "MLP":
        return MLP([l.astype(dtype) for l in self.layers],
                   None if self.in_scale is None else self.in_scale.astype(dtype))

    def forward(self, x: np.ndarray):
        x = np.asarray(x, dtype=self.layers[0].W.dtype)
        if self.in_scale is not None:
            x = x * self.in_scale
        acts = [x]
        h = x
        for j, layer in enumerate(self.layers):
            h = h @ layer.W.T + layer.b
            if j < len(self.layers) - 1:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return h, acts

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, acts: list[np.ndarray], dy: np.ndarray, need_dx: bool = False):
        """Return per-layer ``(dW, db)`` and, optionally, the gradient w.r.t. the unscaled input."""
        grads = [None] * len(self.layers)
        g = dy
        for j in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[j]
            x_in = acts[j]
            g2 = g.reshape(-1, g.shape[-1])
            grads[j] = (g2.T @ x_in.reshape(-1, x_in.shape[-1]), g2.sum(axis=0))
            if j > 0 or need_dx:
                g = g @ layer.W
                if j > 0:
                    g = g * (acts[j] > 0)
        dx = None
        if need_dx:
            dx = g if self.in_scale is None else g * self.in_scale
        return grads, dx


def zero_grads(layers: Sequence[Dense]) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(np.zeros_like(l.W), np.zeros_like(l.b)) for l in layers]


def add_grads(acc, grads) -> None:
    for (aW, ab), (gW, gb) in zip(acc, grads):
        aW += gW
        ab += gb


@dataclass
class SGD:
    """SGD with classical momentum over a fixed list of layers."""

    layers: list[Dense]
    momentum: float = 0.9
    velocity: list = field(default_factory=list)

    def __post_init__(self):
        if not self.velocity:
            self.velocity = zero_grads(self.layers)

    def step(self, grads, lr: float) -> None:
        for layer, (vW, vb), (gW, gb) in zip(self.layers, self.velocity, grads):
            vW *= self.momentum
            vW += gW
            vb *= self.momentum
            vb += gb
            if lr != 0.0:
                layer.W -= lr * vW
                layer.b -= lr * vb


def save_layers(layers: Sequence[Dense], path, magic: bytes) -> None:
    Path(path).write_bytes(pack_layers(layers, magic))


def pack_layers(layers: Sequence[Dense], magic: bytes) -> bytes:
    """Little-endian flat binary: magic, u32 layer count, then per layer
    u32 rows, u32 cols, row-major f64 weights, f64 biases (one per row)."""
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    out = [magic, struct.pack("<I", len(layers))]
    for l in layers:
        rows, cols = l.W.shape
        out.append(struct.pack("<II", rows, cols))
        out.append(np.ascontiguousarray(l.W, dtype="<f8").tobytes())
        out.append(np.ascontiguousarray(l.b, dtype="<f8").tobytes())
    return b"".join(out)


def unpack_layers(data: bytes, magic: bytes) -> list[Dense]:
    if data[:4] != magic:
        raise ValueError(f"bad magic {data[:4]!r}, expected {magic!r}")
    (count,) = struct.unpack_from("<I", data, 4)
    off = 8
    layers = []
    for _ in range(count):
        rows, cols = struct.unpack_from("<II", data, off)
        off += 8
        W = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=off).reshape(rows, cols).astype(np.float64)
        off += 8 * rows * cols
        b = np.frombuffer(data, dtype="<f8", count=rows, offset=off).astype(np.float64)
        off += 8 * rows
        layers.append(Dense(W, b))
    if off != len(data):
        raise ValueError("trailing bytes after last layer")
    return layers


def load_layers(path, magic: bytes) -> list[Dense]:
    return unpack_layers(Path(path).read_bytes(), magic)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
