"""Parameterized layers, initialization, Adam, and the checkpoint container."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import engine as E
from .engine import Tensor

CHECKPOINT_MAGIC = b"CPNT"
CHECKPOINT_VERSION = 1


def uniform_init(shape: tuple[int, ...], fan_in: int, rng: np.random.Generator) -> Tensor:
    """Weights ~ U(-sqrt(1/fan_in), sqrt(1/fan_in))."""
    if fan_in < 1:
        raise ValueError("fan_in must be >= 1")
    bound = math.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros_param(shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class Module:
    """Minimal parameter container; children are discovered via attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, child in enumerate(value):
                    yield from child.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        if set(params) != set(state):
            missing = sorted(set(params) ^ set(state))
            raise KeyError(f"state dict does not match module parameters: {missing[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.copy()


class Linear(Module):
    """y = x W^T + b along the trailing axis."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        if in_features < 1 or out_features < 1:
            raise ValueError("Linear extents must be >= 1")
        self.weight = uniform_init((out_features, in_features), in_features, rng)
        self.bias = zeros_param((out_features,))

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise E.ShapeError(f"Linear expects trailing extent {self.in_features}, got {x.shape}")
        if x.ndim == 1:
            x2 = E.reshape(x, (1, x.shape[0]))
            y = E.add(E.matmul(x2, E.transpose(self.weight, (1, 0))), self.bias)
            return E.reshape(y, (self.out_features,))
        return E.add(E.matmul(x, E.transpose(self.weight, (1, 0))), self.bias)


class Conv1d(Module):
    """1D convolution with explicit padding; see :func:`cpnet.engine.conv1d`."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator,
                 stride: int = 1, dilation: int = 1, pad_left: int = 0, pad_right: int = 0):
        if min(in_channels, out_channels, kernel_size) < 1:
            raise ValueError("Conv1d extents must be >= 1")
        self.weight = uniform_init((out_channels, in_channels, kernel_size), in_channels * kernel_size, rng)
        self.bias = zeros_param((out_channels,))
        self.stride = stride
        self.dilation = dilation
        self.pad_left = pad_left
        self.pad_right = pad_right

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    def __call__(self, x: Tensor) -> Tensor:
        return E.conv1d(x, self.weight, self.bias, self.stride, self.dilation, self.pad_left, self.pad_right)


class EquispacedConv1d(Conv1d):
    """Kernel size equals stride: learned pooling over disjoint blocks."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator):
        super().__init__(in_channels, out_channels, kernel_size, rng, stride=kernel_size)


class Conv2d1x1(Module):
    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        self.weight = uniform_init((out_channels, in_channels, 1, 1), in_channels, rng)
        self.bias = zeros_param((out_channels,))

    def __call__(self, x: Tensor) -> Tensor:
        return E.conv2d(x, self.weight, self.bias)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``p == 0`` or ``rng`` is None (eval mode)."""
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return E.mul(x, Tensor(keep))


class MLP2(Module):
    """Two linear layers with relu in between, applied along the trailing axis."""

    def __init__(self, d_in: int, hidden: int, d_out: int, rng: np.random.Generator, dropout: float = 0.0):
        self.first = Linear(d_in, hidden, rng)
        self.second = Linear(hidden, d_out, rng)
        self.dropout = dropout

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        return mlp2_forward(x, (self.first, self.second), self.dropout, rng)


def mlp2_forward(x: Tensor, layers: tuple[Linear, Linear], p_drop: float = 0.0,
                 rng: np.random.Generator | None = None) -> Tensor:
    first, second = layers
    h = E.relu(first(x))
    return second(dropout(h, p_drop, rng))


def mse_loss(pred: Tensor, target) -> Tensor:
    diff = E.sub(pred, target)
    return E.mean(E.mul(diff, diff))


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: AdamState) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``.

    Weight decay (if any) is added to the gradient before the moment update.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if state.lr < 0:
        raise ValueError("learning rate must be >= 0")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape:
            raise E.ShapeError(f"gradient {i} has shape {g.shape}, parameter has {p.shape}")
        if not np.isfinite(g).all():
            raise E.NonFiniteError(f"non-finite gradient for parameter {i} at step {state.step + 1}")
    if not state.m:
        state.m = [np.zeros(p.shape) for p in params]
        state.v = [np.zeros(p.shape) for p in params]
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        if state.lr == 0.0:
            continue
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def clip_grad_norm(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``; return the old norm."""
    total = math.sqrt(float(sum(np.vdot(g, g) for g in grads)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total


def save_checkpoint(path: str | Path, named: list[tuple[str, np.ndarray]]) -> None:
    """Write named float64 arrays in the flat little-endian CPNT container."""
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<IQ", CHECKPOINT_VERSION, len(named))
    for name, arr in named:
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += arr.tobytes(order="C")
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path: str | Path) -> list[tuple[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a CPNT checkpoint")
    version, count = struct.unpack_from("<IQ", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    out = []
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos: pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        size = math.prod(shape)
        arr = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
        out.append((name, arr))
    if pos != len(buf):
        raise ValueError(f"{path}: {len(buf) - pos} trailing bytes")
    return out
