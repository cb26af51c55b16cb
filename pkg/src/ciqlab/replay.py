from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, UsageError


@dataclass
class Transition:
    state: np.ndarray
    labels: np.ndarray  # per-frame interference labels of ``state``
    action: int
    reward: float
    next_state: np.ndarray
    next_labels: np.ndarray
    done: bool


@dataclass
class Batch:
    idx: np.ndarray
    states: np.ndarray
    labels: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    next_labels: np.ndarray
    dones: np.ndarray
    weights: np.ndarray  # importance weights, all ones for uniform sampling

    def __len__(self):
        return len(self.idx)

    @classmethod
    def from_transitions(cls, transitions: list[Transition]) -> "Batch":
        n = len(transitions)
        return cls(
            idx=np.arange(n),
            states=np.array([t.state for t in transitions], dtype=np.float64),
            labels=np.array([t.labels for t in transitions], dtype=np.int64),
            actions=np.array([t.action for t in transitions], dtype=np.int64),
            rewards=np.array([t.reward for t in transitions], dtype=np.float64),
            next_states=np.array([t.next_state for t in transitions], dtype=np.float64),
            next_labels=np.array([t.next_labels for t in transitions], dtype=np.int64),
            dones=np.array([t.done for t in transitions], dtype=np.float64),
            weights=np.ones(n),
        )


class SumTree:
    """Binary sum tree over ``capacity`` leaves with vectorized prefix-sum lookup."""

    def __init__(self, capacity: int):
        size = 1
        while size < capacity:
            size *= 2
        self.size = size
        self.capacity = capacity
        self.tree = np.zeros(2 * size)

    @property
    def total(self) -> float:
        return float(self.tree[1])

    def __getitem__(self, idx):
        return self.tree[np.asarray(idx) + self.size]

    def update(self, idx, values) -> None:
        idx = np.atleast_1d(np.asarray(idx, dtype=np.int64))
        values = np.broadcast_to(np.asarray(values, dtype=np.float64), idx.shape)
        for i, v in zip(idx, values):
            node = int(i) + self.size
            self.tree[node] = v
            node //= 2
            while node >= 1:
                self.tree[node] = self.tree[2 * node] + self.tree[2 * node + 1]
                node //= 2

    def find(self, mass: np.ndarray) -> np.ndarray:
        mass = np.array(mass, dtype=np.float64)
        node = np.ones(mass.shape, dtype=np.int64)
        while node[0] < self.size:
            left = 2 * node
            left_sum = self.tree[left]
            go_right = mass > left_sum
            mass = np.where(go_right, mass - left_sum, mass)
            node = np.where(go_right, left + 1, left)
        leaf = node - self.size
        return np.minimum(leaf, self.capacity - 1)


class ReplayBuffer:
    """Ring buffer of transitions; optional proportional prioritization."""

    def __init__(self, capacity: int, state_dim: int, n_frames: int, prioritized: bool = False,
                 alpha: float = 0.6, beta: float = 0.4, eps: float = 1e-6):
        if capacity <= 0:
            raise ConfigError("replay capacity must be positive")
        self.capacity = capacity
        self.prioritized = prioritized
        self.alpha, self.beta, self.eps = alpha, beta, eps
        self.states = np.zeros((capacity, state_dim))
        self.next_states = np.zeros((capacity, state_dim))
        self.labels = np.zeros((capacity, n_frames), dtype=np.int64)
        self.next_labels = np.zeros((capacity, n_frames), dtype=np.int64)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.dones = np.zeros(capacity)
        self.pos = 0
        self.size = 0
        self.tree = SumTree(capacity) if prioritized else None
        self.max_priority = 1.0

    def __len__(self) -> int:
        return self.size

    def add(self, state, labels, action, reward, next_state, next_labels, done) -> None:
        i = self.pos
        self.states[i] = state
        self.labels[i] = labels
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_states[i] = next_state
        self.next_labels[i] = next_labels
        self.dones[i] = float(done)
        if self.tree is not None:
            self.tree.update(i, self.max_priority)
        self.pos = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def push(self, t: Transition) -> None:
        self.add(t.state, t.labels, t.action, t.reward, t.next_state, t.next_labels, t.done)

    def sample_indices(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        if self.size == 0:
            raise UsageError("cannot sample from an empty buffer")
        if self.tree is None:
            return rng.integers(0, self.size, size=n), np.ones(n)
        total = self.tree.total
        segment = total / n
        mass = (np.arange(n) + rng.random(n)) * segment
        idx = self.tree.find(mass)
        probs = self.tree[idx] / total
        weights = (self.size * probs) ** (-self.beta)
        return idx, weights / weights.max()

    def sample(self, n: int, rng: np.random.Generator) -> Batch:
        idx, w = self.sample_indices(n, rng)
        return Batch(idx, self.states[idx], self.labels[idx], self.actions[idx], self.rewards[idx],
                     self.next_states[idx], self.next_labels[idx], self.dones[idx], w)

    def update_priorities(self, idx, td_errors) -> None:
        if self.tree is None:
            return
        pr = (np.abs(np.asarray(td_errors)) + self.eps) ** self.alpha
        self.tree.update(idx, pr)
        self.max_priority = max(self.max_priority, float(pr.max()))
