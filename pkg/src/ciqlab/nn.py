"""Small float64 feed-forward networks with exact reverse-mode gradients.

Everything here works on plain numpy arrays. A network is a list of dense
layers; hidden layers use ReLU and the output layer is linear unless
``out_relu`` is set (the CIQ encoder uses that).
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

from .errors import ConfigError, ShapeError, TrainingError

MAGIC = b"CIQP"
FORMAT_VERSION = 1


@dataclass
class Mlp:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    out_relu: bool = False

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_in(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_out(self) -> int:
        return self.weights[-1].shape[0]

    def arrays(self) -> list[np.ndarray]:
        """Parameters in serialization order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.out_relu)

    def zeros_like(self) -> "Mlp":
        return Mlp([np.zeros_like(w) for w in self.weights],
                   [np.zeros_like(b) for b in self.biases], self.out_relu)

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return mlp_forward(self, x)[0]


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]  # input to each layer (post-activation of the previous one)
    pre: list[np.ndarray]  # pre-activation of each layer
    squeeze: bool  # forward was called on a single vector


def mlp_new(layer_sizes, seed: int = 0, out_relu: bool = False) -> Mlp:
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2 or any(s <= 0 for s in sizes):
        raise ConfigError(f"layer_sizes needs >= 2 positive entries, got {list(layer_sizes)}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        # Kaiming-uniform with a=sqrt(5): bound = 1/sqrt(fan_in), bias likewise
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return Mlp(weights, biases, out_relu)


def mlp_forward(params: Mlp, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Forward pass on a vector (n_in,) or a batch (B, n_in)."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.ndim != 2 or h.shape[1] != params.n_in:
        raise ShapeError(f"input shape {x.shape} does not match network input {params.n_in}")
    inputs, pre = [], []
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = h @ w.T + b
        pre.append(z)
        h = np.maximum(z, 0.0) if (k < last or params.out_relu) else z
    out = h[0] if squeeze else h
    return out, ForwardCache(inputs, pre, squeeze)


def mlp_backward(params: Mlp, cache: ForwardCache, output_grad: np.ndarray) -> tuple[Mlp, np.ndarray]:
    """Reverse pass. Returns (parameter gradients as an Mlp, input gradient)."""
    g = np.asarray(output_grad, dtype=np.float64)
    if cache.squeeze:
        g = g[None, :]
    if len(cache.pre) != len(params.weights) or g.shape != cache.pre[-1].shape:
        raise ShapeError(f"output_grad shape {np.shape(output_grad)} does not match cache")
    last = len(params.weights) - 1
    gw: list[np.ndarray] = [None] * (last + 1)  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * (last + 1)  # type: ignore[list-item]
    for k in range(last, -1, -1):
        if k < last or params.out_relu:
            g = g * (cache.pre[k] > 0.0)
        gw[k] = g.T @ cache.inputs[k]
        gb[k] = g.sum(axis=0)
        g = g @ params.weights[k]
    grad_in = g[0] if cache.squeeze else g
    return Mlp(gw, gb, params.out_relu), grad_in


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Mlp) -> "AdamState":
        return cls([np.zeros_like(a) for a in params.arrays()],
                   [np.zeros_like(a) for a in params.arrays()])


def adam_step(state: AdamState, params: Mlp, grads: Mlp, lr: float, weight_decay: float = 0.0) -> None:
    """In-place Adam update with decoupled weight decay."""
    p_arrays, g_arrays = params.arrays(), grads.arrays()
    if len(p_arrays) != len(state.m):
        raise ShapeError("optimizer state does not match parameters")
    for g in g_arrays:
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient (step {state.step + 1}, shape {g.shape})")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(p_arrays, g_arrays, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        if weight_decay:
            p -= lr * weight_decay * p
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def polyak_update(target: Mlp, local: Mlp, tau: float) -> None:
    """target <- (1 - tau) * target + tau * local, in place."""
    if not 0.0 <= tau <= 1.0:
        raise ConfigError(f"tau must be in [0, 1], got {tau}")
    for t, l in zip(target.arrays(), local.arrays()):
        if t.shape != l.shape:
            raise ShapeError("target and local networks differ in shape")
        t *= 1.0 - tau
        t += tau * l


def huber(u, kappa: float = 1.0):
    a = np.abs(u)
    return np.where(a <= kappa, 0.5 * u * u, kappa * (a - 0.5 * kappa))


def quantile_huber(u, kappa: float = 1.0, tau_q: float = 0.5):
    """|tau_q - 1{u<0}| * Huber_kappa(u); scalar in, scalar out (arrays broadcast)."""
    u = np.asarray(u, dtype=np.float64)
    out = np.abs(tau_q - (u < 0.0)) * huber(u, kappa)
    return float(out) if out.ndim == 0 else out


def quantile_huber_grad(u, kappa: float = 1.0, tau_q: float = 0.5):
    u = np.asarray(u, dtype=np.float64)
    return np.abs(tau_q - (u < 0.0)) * np.clip(u, -kappa, kappa)


# -- serialization ---------------------------------------------------------

def write_params(params: Mlp, fh: BinaryIO) -> None:
    sizes = params.layer_sizes
    fh.write(MAGIC)
    fh.write(struct.pack("<II", FORMAT_VERSION, len(sizes)))
    fh.write(struct.pack(f"<{len(sizes)}I", *sizes))
    for a in params.arrays():
        fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_params(fh: BinaryIO, out_relu: bool = False) -> Mlp:
    if fh.read(4) != MAGIC:
        raise ValueError("not a CIQP parameter file")
    version, n = struct.unpack("<II", fh.read(8))
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported parameter format version {version}")
    sizes = struct.unpack(f"<{n}I", fh.read(4 * n))
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = np.frombuffer(fh.read(8 * fan_in * fan_out), dtype="<f8").reshape(fan_out, fan_in)
        b = np.frombuffer(fh.read(8 * fan_out), dtype="<f8")
        weights.append(w.astype(np.float64))
        biases.append(b.astype(np.float64))
    return Mlp(weights, biases, out_relu)


def params_to_bytes(params: Mlp) -> bytes:
    buf = io.BytesIO()
    write_params(params, buf)
    return buf.getvalue()


def params_from_bytes(data: bytes, out_relu: bool = False) -> Mlp:
    return read_params(io.BytesIO(data), out_relu)
