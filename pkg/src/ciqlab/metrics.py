"""Robustness and treatment-effect measurements over recorded episodes.

A Q-function here is anything with ``q(states) -> (N, A)`` and
``grad(states, out_grad) -> (N, D)`` (input gradient of sum(out_grad * Q)).
Bare ``Mlp`` objects are wrapped automatically.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .agents import MlpQ, greedy
from .errors import ConfigError, UsageError
from .nn import Mlp

log = logging.getLogger(__name__)

GRAD_FLOOR = 1e-12


def as_qfunction(qnet):
    return MlpQ(qnet) if isinstance(qnet, Mlp) else qnet


@dataclass
class EpisodeRecording:
    clean: np.ndarray  # (T, D) clean stacked states S_C
    noisy: np.ndarray  # (T, D) delivered stacked states S_N
    labels: np.ndarray  # (T,) true interference labels
    probs: np.ndarray  # (T,) agent's estimate of the label
    actions: np.ndarray  # (T,) action taken on S_N
    clean_actions: np.ndarray  # (T,) action the agent would take on S_C
    q_clean: np.ndarray  # (T, A)
    q_noisy: np.ndarray  # (T, A)
    episode: int = 0

    def __post_init__(self):
        n = len(self.labels)
        for name in ("clean", "noisy", "probs", "actions", "clean_actions", "q_clean", "q_noisy"):
            if len(getattr(self, name)) != n:
                raise ConfigError(f"recording field {name} has length {len(getattr(self, name))}, expected {n}")

    def __len__(self):
        return len(self.labels)

    def subset(self, mask) -> "EpisodeRecording":
        return EpisodeRecording(self.clean[mask], self.noisy[mask], self.labels[mask], self.probs[mask],
                                self.actions[mask], self.clean_actions[mask], self.q_clean[mask],
                                self.q_noisy[mask], self.episode)

    def with_probs(self, probs) -> "EpisodeRecording":
        return EpisodeRecording(self.clean, self.noisy, self.labels, np.asarray(probs, dtype=np.float64),
                                self.actions, self.clean_actions, self.q_clean, self.q_noisy, self.episode)


# -- CLEVER-Q --------------------------------------------------------------------

@dataclass
class CleverConfig:
    p: float = 2.0
    radius: float = 0.5
    n_batches: int = 50
    n_samples: int = 100
    estimator: str = "sample-max"  # or "weibull-mle"

    def __post_init__(self):
        if self.p not in (1.0, 2.0, math.inf):
            raise ConfigError(f"norm p must be 1, 2 or inf, got {self.p}")
        if self.radius <= 0:
            raise ConfigError("ball radius must be positive")
        if self.n_batches < 1 or self.n_samples < 1:
            raise ConfigError("n_batches and n_samples must be >= 1")
        if self.estimator not in ("sample-max", "weibull-mle"):
            raise ConfigError(f"unknown estimator {self.estimator!r}")

    @property
    def q(self) -> float:
        return dual_norm(self.p)


def dual_norm(p: float) -> float:
    if p == 1.0:
        return math.inf
    if p == math.inf:
        return 1.0
    return p / (p - 1.0)


def sample_ball(n: int, dim: int, radius: float, p: float, rng: np.random.Generator) -> np.ndarray:
    """n points uniformly distributed in the l_p ball of the given radius."""
    if p == math.inf:
        return rng.uniform(-radius, radius, size=(n, dim))
    if p == 2.0:
        g = rng.standard_normal((n, dim))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        return g * radius * rng.random((n, 1)) ** (1.0 / dim)
    if p == 1.0:
        e = rng.exponential(size=(n, dim + 1))
        x = e[:, :dim] / e.sum(axis=1, keepdims=True)
        return x * rng.choice([-1.0, 1.0], size=(n, dim)) * radius
    raise ConfigError(f"unsupported norm {p}")


def sample_sphere(n: int, dim: int, radius: float, p: float, rng: np.random.Generator) -> np.ndarray:
    x = sample_ball(n, dim, 1.0, p, rng)
    norms = np.linalg.norm(x, ord=p, axis=1, keepdims=True)
    return x / np.maximum(norms, 1e-300) * radius


def margin(q, a: int) -> float:
    q = np.asarray(q, dtype=np.float64)
    return float(q.max() - q[a])


def _weibull_location(maxima: np.ndarray) -> float:
    top = float(maxima.max())
    if np.ptp(maxima) <= 1e-12 * max(top, 1.0):
        return top
    try:
        _, loc, _ = stats.weibull_max.fit(maxima)
    except Exception:  # scipy optimizer failures
        return top
    if not np.isfinite(loc) or loc < top:
        return top
    return float(loc)


def lipschitz_estimates(qnet, s, cfg: CleverConfig, rng: np.random.Generator) -> dict[int, float]:
    """Local Lipschitz estimate of g_a in the dual norm for every non-greedy action."""
    qf = as_qfunction(qnet)
    s = np.asarray(s, dtype=np.float64)
    q0 = qf.q(s[None, :])[0]
    best = greedy(q0)
    n = cfg.n_batches * cfg.n_samples
    points = s + sample_ball(n, s.size, cfg.radius, cfg.p, rng)
    out = {}
    for a in range(len(q0)):
        if a == best:
            continue
        w = np.zeros((n, len(q0)))
        w[:, best] = 1.0
        w[:, a] = -1.0
        grads = qf.grad(points, w)
        norms = np.linalg.norm(grads, ord=cfg.q, axis=1).reshape(cfg.n_batches, cfg.n_samples)
        maxima = norms.max(axis=1)
        out[a] = float(maxima.max()) if cfg.estimator == "sample-max" else _weibull_location(maxima)
    return out


def clever_q(qnet, s, cfg: CleverConfig | None = None, rng: np.random.Generator | None = None) -> float:
    """Sampled lower bound on the l_p perturbation needed to change the greedy action."""
    cfg = cfg or CleverConfig()
    rng = rng or np.random.default_rng(0)
    qf = as_qfunction(qnet)
    s = np.asarray(s, dtype=np.float64)
    q0 = qf.q(s[None, :])[0]
    if len(q0) < 2:
        raise UsageError("CLEVER-Q needs at least two actions")
    top = q0.max()
    if np.count_nonzero(q0 == top) > 1:
        return 0.0
    lips = lipschitz_estimates(qf, s, cfg, rng)
    bound = min(margin(q0, a) / max(lip, GRAD_FLOOR) for a, lip in lips.items())
    if all(lip <= GRAD_FLOOR for lip in lips.values()):
        log.info("flat Q-network around state; certifying the sampled ball radius")
    return float(min(bound, cfg.radius))


def verify_theorem1(qnet, s, beta: float, trials: int = 1000, p: float = 2.0,
                    rng: np.random.Generator | None = None) -> bool:
    """True iff no sampled perturbation with ||delta||_p = beta changes the greedy action."""
    if beta < 0:
        raise ConfigError("beta must be non-negative")
    if beta == 0 or trials == 0:
        return True
    rng = rng or np.random.default_rng(0)
    qf = as_qfunction(qnet)
    s = np.asarray(s, dtype=np.float64)
    a0 = greedy(qf.q(s[None, :])[0])
    deltas = sample_sphere(trials, s.size, beta, p, rng)
    q = qf.q(s + deltas)
    return bool(np.all(np.argmax(q, axis=1) == a0))


# -- AC-Rate, ITE, ATE ----------------------------------------------------------------

def ac_rate(recording) -> float:
    """Fraction of steps where the action on S_N equals the action on S_C.

    A list of recordings is averaged per episode.
    """
    if isinstance(recording, (list, tuple)):
        if not recording:
            raise UsageError("no recordings")
        return float(np.mean([ac_rate(r) for r in recording]))
    if len(recording) == 0:
        raise UsageError("empty recording")
    return float(np.mean(np.asarray(recording.actions) == np.asarray(recording.clean_actions)))


def ite(q_clean, q_noisy, p):
    return q_clean * (1.0 - p) + q_noisy * p


def step_effects(rec: EpisodeRecording, probs=None) -> np.ndarray:
    """Per-step treated-minus-counterfactual ITE on the max-Q scalars."""
    p = rec.probs if probs is None else probs
    qc = rec.q_clean.max(axis=1)
    qn = rec.q_noisy.max(axis=1)
    return ite(qc, qn, p) - ite(qn, qc, p)


def ate(recordings) -> float:
    if isinstance(recordings, EpisodeRecording):
        recordings = [recordings]
    recordings = [r for r in recordings if len(r)]
    if not recordings:
        raise UsageError("ATE needs at least one non-empty recording")
    return float(np.mean([step_effects(r).mean() for r in recordings]))


@dataclass
class AteReport:
    ate: float
    common_cause: float
    placebo: float
    subset: float
    error_rate: float = 0.0


def refute(recordings, mode: str, rng: np.random.Generator, subset_fraction: float = 0.2) -> float:
    if isinstance(recordings, EpisodeRecording):
        recordings = [recordings]
    if not recordings:
        raise UsageError("refutation needs recordings")
    if mode == "placebo":
        return ate([r.with_probs(rng.random(len(r))) for r in recordings])
    if mode == "subset":
        kept = []
        for r in recordings:
            n_drop = min(int(round(subset_fraction * len(r))), len(r) - 1)
            mask = np.ones(len(r), dtype=bool)
            if n_drop > 0:
                mask[rng.choice(len(r), size=n_drop, replace=False)] = False
            kept.append(r.subset(mask))
        return ate(kept)
    if mode == "common_cause":
        effects = [step_effects(r) for r in recordings]
        w = [rng.standard_normal(len(e)) for e in effects]
        e_all, w_all = np.concatenate(effects), np.concatenate(w)
        wc = w_all - w_all.mean()
        denom = float(wc @ wc)
        slope = float(wc @ (e_all - e_all.mean())) / denom if denom > 0 else 0.0
        w_mean = w_all.mean()
        return float(np.mean([(e - slope * (wi - w_mean)).mean() for e, wi in zip(effects, w)]))
    raise ConfigError(f"unknown refutation mode {mode!r}")


def with_intervention_error(recordings, n: float, rng: np.random.Generator):
    """Feed wrong interference information: each step's label estimate is flipped with probability n."""
    out = []
    for r in recordings:
        flip = rng.random(len(r)) < n
        probs = np.where(flip, 1.0 - r.probs, r.probs)
        rr = r.with_probs(probs)
        rr.labels = np.where(flip, 1 - r.labels, r.labels)
        out.append(rr)
    return out


def ate_report(recordings, rng: np.random.Generator, error_rate: float = 0.0) -> AteReport:
    if error_rate:
        recordings = with_intervention_error(recordings, error_rate, rng)
    return AteReport(
        ate=ate(recordings),
        common_cause=refute(recordings, "common_cause", rng),
        placebo=refute(recordings, "placebo", rng),
        subset=refute(recordings, "subset", rng),
        error_rate=error_rate,
    )


# -- recording files ----------------------------------------------------------------

def _fmt(x) -> str:
    return repr(float(x))


def write_recordings(path, recordings) -> None:
    if not recordings:
        raise UsageError("nothing to write")
    D = recordings[0].clean.shape[1]
    A = recordings[0].q_clean.shape[1]
    header = (["episode", "t"] + [f"sc_{k}" for k in range(D)] + [f"sn_{k}" for k in range(D)]
              + ["i", "p", "a", "a_star"] + [f"qc_{k}" for k in range(A)] + [f"qn_{k}" for k in range(A)])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for rec in recordings:
            for t in range(len(rec)):
                w.writerow([rec.episode, t] + [_fmt(v) for v in rec.clean[t]] + [_fmt(v) for v in rec.noisy[t]]
                           + [int(rec.labels[t]), _fmt(rec.probs[t]), int(rec.actions[t]), int(rec.clean_actions[t])]
                           + [_fmt(v) for v in rec.q_clean[t]] + [_fmt(v) for v in rec.q_noisy[t]])


def read_recordings(path) -> list[EpisodeRecording]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return []
    keys = rows[0].keys()
    D = sum(1 for k in keys if k.startswith("sc_"))
    A = sum(1 for k in keys if k.startswith("qc_"))
    episodes: dict[int, list[dict]] = {}
    for row in rows:
        episodes.setdefault(int(row["episode"]), []).append(row)
    out = []
    for ep, rs in episodes.items():
        def cols(prefix, n):
            return np.array([[float(r[f"{prefix}_{k}"]) for k in range(n)] for r in rs])
        out.append(EpisodeRecording(
            clean=cols("sc", D), noisy=cols("sn", D),
            labels=np.array([int(r["i"]) for r in rs]),
            probs=np.array([float(r["p"]) for r in rs]),
            actions=np.array([int(r["a"]) for r in rs]),
            clean_actions=np.array([int(r["a_star"]) for r in rs]),
            q_clean=cols("qc", A), q_noisy=cols("qn", A), episode=ep))
    return out
