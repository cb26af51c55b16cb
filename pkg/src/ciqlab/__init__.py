"""Interference-resilient Q-learning: a numpy DQN family, a causal-inference
Q-network that switches heads on predicted interference labels, and tooling to
measure how robust the resulting policies are."""

__version__ = "0.1.0"
