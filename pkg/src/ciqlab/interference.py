"""Observation interference: label processes, generators and the x' = i*I(x) + (1-i)*x composition."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import ConfigError, ShapeError, UsageError
from .nn import Mlp, mlp_backward, mlp_forward

KINDS = ("gaussian", "adversarial", "blackout", "whiteout", "frozen", "none")


# -- label processes ---------------------------------------------------------

@dataclass
class LabelProcess:
    kind: str = "bernoulli"  # bernoulli | markov | cosine
    p: float = 0.0
    p11: float = 0.55  # P(i_t=1 | i_{t-1}=1)
    p10: float = 0.05  # P(i_t=1 | i_{t-1}=0)
    low: float = 0.0
    high: float = 0.3
    period: int = 10
    prev: int = 0

    def __post_init__(self):
        if self.kind not in ("bernoulli", "markov", "cosine"):
            raise ConfigError(f"unknown label process kind {self.kind!r}")
        for name in ("p", "p11", "p10", "low", "high"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"label process {name}={v} outside [0, 1]")
        if self.period <= 0:
            raise ConfigError("cosine period must be positive")

    @property
    def stationary(self) -> float:
        if self.kind == "markov":
            return self.p10 / (self.p10 + 1.0 - self.p11)
        if self.kind == "cosine":
            return 0.5 * (self.low + self.high)
        return self.p

    def rate(self, t: int) -> float:
        if self.kind == "cosine":
            return self.low + (self.high - self.low) * (1.0 + math.cos(2.0 * math.pi * t / self.period)) / 2.0
        if self.kind == "markov":
            return self.p11 if self.prev else self.p10
        return self.p


def sample_label(process: LabelProcess, t: int, rng: np.random.Generator) -> int:
    i = int(rng.random() < process.rate(t))
    process.prev = i
    return i


def sample_labels(process: LabelProcess, n: int, rng: np.random.Generator, t0: int = 0) -> np.ndarray:
    """Vectorized draw of n consecutive labels; Markov chains are walked step by step."""
    u = rng.random(n)
    if process.kind == "bernoulli":
        out = (u < process.p).astype(np.int8)
    elif process.kind == "cosine":
        t = np.arange(t0, t0 + n)
        rate = process.low + (process.high - process.low) * (1.0 + np.cos(2.0 * np.pi * t / process.period)) / 2.0
        out = (u < rate).astype(np.int8)
    else:
        out = np.empty(n, dtype=np.int8)
        prev = process.prev
        for k in range(n):
            prev = int(u[k] < (process.p11 if prev else process.p10))
            out[k] = prev
    if n:
        process.prev = int(out[-1])
    return out


# -- running variance ----------------------------------------------------------

@dataclass
class RunningVariance:
    count: int = 0
    mean: np.ndarray | None = None
    m2: np.ndarray | None = None

    @property
    def ready(self) -> bool:
        return self.count >= 2

    def variance(self) -> np.ndarray:
        if self.count < 2:
            raise UsageError("variance needs at least two recorded states")
        return self.m2 / (self.count - 1)


def record_variance(acc: RunningVariance, x) -> RunningVariance:
    x = np.asarray(x, dtype=np.float64)
    if acc.mean is None:
        acc.mean = np.zeros_like(x)
        acc.m2 = np.zeros_like(x)
    elif acc.mean.shape != x.shape:
        raise ShapeError(f"observation shape {x.shape} != accumulator shape {acc.mean.shape}")
    acc.count += 1
    delta = x - acc.mean
    acc.mean = acc.mean + delta / acc.count
    acc.m2 = acc.m2 + delta * (x - acc.mean)
    return acc


# -- generators ----------------------------------------------------------------

@dataclass
class Interference:
    kind: str = "gaussian"
    epsilon: float = 0.1
    bounds: np.ndarray | None = None  # white-out magnitudes
    variance: RunningVariance = field(default_factory=RunningVariance)
    target: Any = None  # attacked Q-network: an Mlp or an object with attack_gradient()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown interference kind {self.kind!r}; expected one of {KINDS}")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be non-negative")


def attack_gradient_mlp(qnet: Mlp, stacked: np.ndarray) -> np.ndarray:
    """Input gradient of -log softmax(Q)[greedy] for a plain Q-network."""
    q, cache = mlp_forward(qnet, stacked)
    e = np.exp(q - q.max())
    dq = e / e.sum()
    dq[int(np.argmax(q))] -= 1.0
    return mlp_backward(qnet, cache, dq)[1]


def fgsm(qnet, x, epsilon: float, history=None) -> np.ndarray:
    """x + epsilon * sign(grad). With ``history`` the network sees [history, x] and only x moves."""
    x = np.asarray(x, dtype=np.float64)
    if epsilon == 0.0:
        return x.copy()
    stacked = x if history is None else np.concatenate([np.asarray(history, dtype=np.float64).ravel(), x])
    if isinstance(qnet, Mlp):
        grad = attack_gradient_mlp(qnet, stacked)
    else:
        grad = qnet.attack_gradient(stacked)
    grad = grad[-x.size:]
    return x + epsilon * np.sign(grad)


def apply_interference(kind: Interference, x_t, prev, rng: np.random.Generator, history=None) -> np.ndarray:
    x = np.asarray(x_t, dtype=np.float64)
    k = kind.kind
    if k == "none":
        return x.copy()
    if k == "blackout":
        return np.zeros_like(x)
    if k == "whiteout":
        if kind.bounds is None:
            raise UsageError("white-out needs per-dimension bounds")
        return np.asarray(kind.bounds, dtype=np.float64).copy()
    if k == "frozen":
        return np.zeros_like(x) if prev is None else np.asarray(prev, dtype=np.float64).copy()
    if k == "gaussian":
        var = kind.variance.variance()
        return x + rng.standard_normal(x.shape) * np.sqrt(var)
    if k == "adversarial":
        if kind.target is None:
            raise UsageError("adversarial interference has no target network")
        return fgsm(kind.target, x, kind.epsilon, history)
    raise ConfigError(k)


def compose(x_t, i_t: int, interfered) -> np.ndarray:
    return np.asarray(interfered if i_t else x_t, dtype=np.float64).copy()


def compose_multi(x_t, i1: int, i2: int, interfered1, interfered2) -> np.ndarray:
    if not i1:
        return np.asarray(x_t, dtype=np.float64).copy()
    return np.asarray(interfered1 if i2 else interfered2, dtype=np.float64).copy()


# -- per-environment pipeline ----------------------------------------------------

@dataclass
class InterferenceEvent:
    label: int
    clean: np.ndarray
    delivered: np.ndarray
    kind: str
    note: str = ""


class InterferencePipeline:
    """Turns a stream of clean observations into delivered observations.

    One pipeline belongs to one environment instance. Gaussian variance is
    tracked online over every clean observation seen. With ``second`` set,
    interfered steps pick between the two generators using ``type_labels``
    (1 -> primary, 0 -> second).
    """

    def __init__(self, interference: Interference, labels: LabelProcess, rng: np.random.Generator,
                 second: Interference | None = None, type_labels: LabelProcess | None = None):
        self.interference = interference
        self.labels = labels
        self.rng = rng
        self.second = second
        self.type_labels = type_labels or LabelProcess("bernoulli", p=0.5)
        self.prev: np.ndarray | None = None
        self.log: list[str] = []

    def reset_episode(self) -> None:
        self.prev = None

    def _generate(self, kind: Interference, x, history) -> tuple[np.ndarray, str]:
        if kind.kind == "frozen" and self.prev is None:
            return np.zeros_like(x), "frozen-without-predecessor"
        if kind.kind == "gaussian" and not kind.variance.ready:
            return x.copy(), "gaussian-variance-uninitialized"
        return apply_interference(kind, x, self.prev, self.rng, history), ""

    def __call__(self, x, t: int, history=None, label: int | None = None) -> InterferenceEvent:
        x = np.asarray(x, dtype=np.float64)
        for kind in (self.interference, self.second):
            if kind is not None and kind.kind == "gaussian":
                record_variance(kind.variance, x)
        i = sample_label(self.labels, t, self.rng) if label is None else int(label)
        note, applied = "", "none"
        if i:
            if self.second is None:
                interfered, note = self._generate(self.interference, x, history)
                applied = self.interference.kind
                delivered = compose(x, 1, interfered)
            else:
                i2 = sample_label(self.type_labels, t, self.rng)
                chosen = self.interference if i2 else self.second
                interfered, note = self._generate(chosen, x, history)
                applied = chosen.kind
                delivered = compose_multi(x, 1, i2, interfered, interfered)
        else:
            delivered = x.copy()
        if note:
            self.log.append(f"t={t}: {note}")
        self.prev = delivered
        return InterferenceEvent(i, x, delivered, applied, note)
