"""CartPole (classic-control constants, v0 episode cap) and the blackout contextual bandit."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, UsageError

GRAVITY = 9.8
MASS_CART = 1.0
MASS_POLE = 0.1
TOTAL_MASS = MASS_CART + MASS_POLE
HALF_LENGTH = 0.5
POLEMASS_LENGTH = MASS_POLE * HALF_LENGTH
FORCE_MAG = 10.0
TAU = 0.02
X_THRESHOLD = 2.4
THETA_THRESHOLD = 12 * 2 * math.pi / 360
MAX_STEPS = 200
OBS_DIM = 4
N_ACTIONS = 2

# nominal per-dimension magnitudes used by the white-out generator
NOMINAL_BOUNDS = np.array([2.4, 10.0, 0.21, 10.0])


@dataclass(frozen=True)
class CartpoleState:
    x: float
    x_dot: float
    theta: float
    theta_dot: float
    steps: int = 0
    done: bool = False

    def observation(self) -> np.ndarray:
        return np.array([self.x, self.x_dot, self.theta, self.theta_dot])


def cartpole_reset(rng: np.random.Generator) -> tuple[CartpoleState, np.ndarray]:
    x, x_dot, theta, theta_dot = rng.uniform(-0.05, 0.05, size=4)
    s = CartpoleState(float(x), float(x_dot), float(theta), float(theta_dot))
    return s, s.observation()


def cartpole_step(state: CartpoleState, action: int) -> tuple[CartpoleState, np.ndarray, float, bool]:
    if state.done:
        raise UsageError("cartpole_step called on a finished episode; reset first")
    if action not in (0, 1):
        raise UsageError(f"invalid action {action!r}")
    force = FORCE_MAG if action == 1 else -FORCE_MAG
    cos_t = math.cos(state.theta)
    sin_t = math.sin(state.theta)
    temp = (force + POLEMASS_LENGTH * state.theta_dot ** 2 * sin_t) / TOTAL_MASS
    theta_acc = (GRAVITY * sin_t - cos_t * temp) / (
        HALF_LENGTH * (4.0 / 3.0 - MASS_POLE * cos_t ** 2 / TOTAL_MASS))
    x_acc = temp - POLEMASS_LENGTH * theta_acc * cos_t / TOTAL_MASS

    x = state.x + TAU * state.x_dot
    x_dot = state.x_dot + TAU * x_acc
    theta = state.theta + TAU * state.theta_dot
    theta_dot = state.theta_dot + TAU * theta_acc
    steps = state.steps + 1
    done = (abs(x) > X_THRESHOLD or abs(theta) > THETA_THRESHOLD or steps >= MAX_STEPS)
    nxt = CartpoleState(x, x_dot, theta, theta_dot, steps, done)
    return nxt, nxt.observation(), 1.0, done


def cartpole_failed(state: CartpoleState) -> bool:
    """True when the episode ended by leaving the bounds rather than by the step cap."""
    return abs(state.x) > X_THRESHOLD or abs(state.theta) > THETA_THRESHOLD


class CartPole:
    """Stateful convenience wrapper around the pure transition functions."""

    obs_dim = OBS_DIM
    n_actions = N_ACTIONS
    bounds = NOMINAL_BOUNDS

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.state: CartpoleState | None = None

    def reset(self) -> np.ndarray:
        self.state, obs = cartpole_reset(self.rng)
        return obs

    def step(self, action: int) -> tuple[np.ndarray, float, bool]:
        if self.state is None:
            raise UsageError("reset() must be called before step()")
        self.state, obs, reward, done = cartpole_step(self.state, action)
        return obs, reward, done


def is_solved(episode_returns, target: float = 195.0) -> bool:
    if len(episode_returns) == 0:
        return False
    window = list(episode_returns)[-100:]
    return sum(window) / len(window) >= target


# -- contextual bandit with blackout -----------------------------------------

@dataclass(frozen=True)
class BanditConfig:
    q1: float = 0.8
    p_blackout: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.q1 <= 1.0:
            raise ConfigError(f"q1 must be in [0, 1], got {self.q1}")
        if not 0.0 <= self.p_blackout <= 1.0:
            raise ConfigError(f"p_blackout must be in [0, 1], got {self.p_blackout}")

    @property
    def q0(self) -> float:
        return (3.0 - self.q1) / 5.0

    def q(self, x: int) -> float:
        return self.q1 if x == 1 else self.q0

    def with_blackout(self, p: float) -> "BanditConfig":
        return replace(self, p_blackout=p)


def bandit_step(x: int, action: int, cfg: BanditConfig, apply_blackout: bool,
                rng: np.random.Generator) -> tuple[int, int, int]:
    """Returns (observed x', interference label, reward)."""
    if apply_blackout and x == 1 and rng.random() < cfg.p_blackout:
        x_obs, label = 0, 1
    else:
        x_obs, label = x, 0
    if action == 0:
        reward = 0
    else:
        reward = 1 if rng.random() < cfg.q(x) else -1
    return x_obs, label, reward


def bandit_context(rng: np.random.Generator) -> int:
    return int(rng.random() < 0.5)
