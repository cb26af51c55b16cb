"""Experiment orchestration: training loop, evaluation with paired recordings, reports."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import sys
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .agents import AGENT_KINDS, Controller, Hyper, learn_step, make_agent, make_buffer, train_aux_classifier
from .envs import NOMINAL_BOUNDS, BanditConfig, CartPole, bandit_context, bandit_step, cartpole_failed, is_solved
from .errors import ConfigError, TrainingError
from .interference import KINDS, Interference, InterferencePipeline, LabelProcess
from .metrics import CleverConfig, EpisodeRecording, ac_rate, ate, clever_q, refute

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


# -- configuration ----------------------------------------------------------------

@dataclass
class InterferenceSpec:
    kind: str = "none"
    level: float = 0.0  # p^I for the Bernoulli label process
    process: str = "bernoulli"  # bernoulli | markov | cosine
    p11: float = 0.55
    p10: float = 0.05
    low: float = 0.0
    high: float = 0.3
    period: int = 10
    epsilon: float = 0.1  # FGSM step
    second_kind: str | None = None  # mix in a second interference type
    second_share: float = 0.5  # P(first type | interfered) when mixing

    def validate(self, path: str) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"{path}.kind: unknown interference {self.kind!r}; expected one of {KINDS}")
        if self.second_kind is not None and self.second_kind not in KINDS:
            raise ConfigError(f"{path}.second_kind: unknown interference {self.second_kind!r}")
        for name in ("level", "p11", "p10", "low", "high", "second_share"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{path}.{name}: {v} is outside [0, 1]")
        if self.low > self.high:
            raise ConfigError(f"{path}.low: must not exceed high")
        if self.process not in ("bernoulli", "markov", "cosine"):
            raise ConfigError(f"{path}.process: unknown label process {self.process!r}")
        if self.period <= 0:
            raise ConfigError(f"{path}.period: must be positive")
        if self.epsilon < 0:
            raise ConfigError(f"{path}.epsilon: must be non-negative")

    def label_process(self) -> LabelProcess:
        return LabelProcess(self.process, self.level, self.p11, self.p10, self.low, self.high, self.period)

    @property
    def nominal_rate(self) -> float:
        return self.label_process().stationary

    def name(self) -> str:
        if self.kind == "none":
            return "clean"
        return f"{self.kind}@{self.nominal_rate:g}"


@dataclass
class ExperimentConfig:
    env: str = "cartpole"
    agent: str = "ciq"
    interference: InterferenceSpec = field(default_factory=InterferenceSpec)
    test_interference: InterferenceSpec | None = None  # defaults to the training interference
    max_episodes: int = 400
    target: float = 195.0
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    frames: int = 4
    eval_every: int = 10
    eval_episodes: int = 100  # one snapshot fills the 100-episode solve window
    eps_start: float = 1.0
    eps_decay: float = 0.995
    eps_min: float = 0.01
    eps_decay_steps: int = 0  # >0: linear decay over this many env steps instead of per-episode decay
    learn_start: int = 0  # env steps collected before the first gradient step
    learn_every: int = 1
    updates_per_step: int = 1  # gradient steps each time learning is triggered
    bootstrap_time_limit: bool = True  # store step-cap endings as non-terminal in replay
    label_mode: str = "sampled"  # how CIQ turns label probabilities into bits when evaluating
    classifier_window: int = 5000
    classifier_epochs: int = 5
    record_episodes: int = 10
    clever_states: int = 50
    clever: dict = field(default_factory=lambda: {"p": 2.0, "radius": 0.5, "n_batches": 50,
                                                  "n_samples": 100, "estimator": "sample-max"})
    hyper: Hyper = field(default_factory=Hyper)

    def __post_init__(self):
        self.validate()

    @property
    def eval_interference(self) -> InterferenceSpec:
        return self.test_interference or self.interference

    def validate(self) -> None:
        if self.env != "cartpole":
            raise ConfigError(f"env: only 'cartpole' is supported, got {self.env!r}")
        if self.agent not in AGENT_KINDS:
            raise ConfigError(f"agent: unknown kind {self.agent!r}; expected one of {AGENT_KINDS}")
        self.interference.validate("interference")
        if self.test_interference is not None:
            self.test_interference.validate("test_interference")
        if not self.seeds:
            raise ConfigError("seeds: must be non-empty")
        if self.target <= 0:
            raise ConfigError("target: must be positive")
        for name in ("max_episodes", "record_episodes", "clever_states", "eps_decay_steps", "learn_start"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be non-negative")
        for name in ("frames", "learn_every", "updates_per_step", "eval_every", "eval_episodes", "classifier_window", "classifier_epochs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be >= 1")
        if not 0.0 <= self.eps_min <= self.eps_start <= 1.0:
            raise ConfigError("eps_start: need 0 <= eps_min <= eps_start <= 1")
        if not 0.0 < self.eps_decay <= 1.0:
            raise ConfigError("eps_decay: must be in (0, 1]")
        if self.label_mode not in ("sampled", "hard", "soft"):
            raise ConfigError(f"label_mode: unknown mode {self.label_mode!r}")
        hp = self.hyper
        if not 0.0 <= hp.gamma <= 1.0:
            raise ConfigError("hyper.gamma: must be in [0, 1]")
        if not 0.0 <= hp.tau <= 1.0:
            raise ConfigError("hyper.tau: must be in [0, 1]")
        for name in ("lr", "batch_size", "buffer_size", "hidden", "latent"):
            if getattr(hp, name) <= 0:
                raise ConfigError(f"hyper.{name}: must be positive")
        if hp.batch_size > hp.buffer_size:
            raise ConfigError("hyper.batch_size: larger than the replay buffer")
        try:
            self.clever_config()
        except ConfigError as exc:
            raise ConfigError(f"clever: {exc}") from None

    def clever_config(self) -> CleverConfig:
        c = dict(self.clever)
        if "p" in c:
            c["p"] = math.inf if str(c["p"]).lower() in ("inf", "infinity") else float(c["p"])
        try:
            return CleverConfig(**c)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def with_(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["clever"].get("p") == math.inf:
            d["clever"]["p"] = "inf"
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        _check_keys(data, cls, "")
        for key in ("interference", "test_interference"):
            if data.get(key) is not None:
                _check_keys(data[key], InterferenceSpec, key + ".")
                data[key] = InterferenceSpec(**data[key])
        if "hyper" in data:
            _check_keys(data["hyper"], Hyper, "hyper.")
            data["hyper"] = Hyper(**data["hyper"])
        if "seeds" in data:
            data["seeds"] = [int(s) for s in data["seeds"]]
        return cls(**data)


def _check_keys(data, klass, prefix: str) -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: expected a table")
    known = {f.name for f in dataclasses.fields(klass)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{prefix}{key}: unknown field")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        if path.suffix.lower() == ".json":
            data = json.loads(raw)
        else:
            data = tomllib.loads(raw.decode())
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None
    try:
        return ExperimentConfig.from_dict(data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


# -- environment with interference and frame stacking -------------------------------

def _interference(kind: str, epsilon: float, target) -> Interference:
    return Interference(kind, epsilon, bounds=NOMINAL_BOUNDS, target=target)


class NoisyEnv:
    """CartPole whose observations pass through an interference pipeline.

    Keeps M-frame stacks of clean and delivered observations and the window of
    true labels. The adversary (if any) attacks ``target`` and sees the stacked
    delivered state with the newest frame being perturbed.
    """

    def __init__(self, spec: InterferenceSpec, frames: int, env_rng, noise_rng, target=None):
        self.spec = spec
        self.m = frames
        self.env = CartPole(env_rng)
        second = None
        if spec.second_kind is not None:
            second = _interference(spec.second_kind, spec.epsilon, target)
        self.pipeline = InterferencePipeline(
            _interference(spec.kind, spec.epsilon, target), spec.label_process(), noise_rng,
            second=second, type_labels=LabelProcess("bernoulli", p=spec.second_share))
        self.t = 0  # label-process clock, runs across episodes
        self.steps = 0

    @property
    def clean_state(self) -> np.ndarray:
        return np.concatenate(self._clean)

    @property
    def state(self) -> np.ndarray:
        return np.concatenate(self._noisy)

    @property
    def labels(self) -> np.ndarray:
        return np.array(self._labels, dtype=np.int64)

    def _push(self, obs) -> None:
        history = np.concatenate(list(self._noisy)[1:]) if self.m > 1 else None
        ev = self.pipeline(obs, self.t, history)
        self.t += 1
        self._clean.append(ev.clean)
        self._noisy.append(ev.delivered)
        self._labels.append(ev.label)

    def reset(self) -> np.ndarray:
        obs = self.env.reset()
        self.pipeline.reset_episode()
        d = self.env.obs_dim
        self._clean = deque([np.zeros(d)] * self.m, maxlen=self.m)
        self._noisy = deque([np.zeros(d)] * self.m, maxlen=self.m)
        self._labels = deque([0] * self.m, maxlen=self.m)
        self.steps = 0
        self._push(obs)
        return self.state

    def step(self, action: int) -> tuple[np.ndarray, float, bool]:
        obs, reward, done = self.env.step(action)
        self.steps += 1
        self._push(obs)
        return self.state, reward, done


# -- learning curves ---------------------------------------------------------------

@dataclass
class LearningCurve:
    returns: list = field(default_factory=list)  # training episode returns
    running_mean: list = field(default_factory=list)  # 100-episode running mean of ``returns``
    eval_at: list = field(default_factory=list)  # training episode after which each evaluation ran
    eval_returns: list = field(default_factory=list)  # every evaluation episode's return, in order
    eval_scores: list = field(default_factory=list)  # mean of the last <=100 evaluation returns
    episodes_to_solve: int | None = None
    wall_seconds: float = 0.0

    def add_episode(self, ret: float) -> None:
        self.returns.append(float(ret))
        window = self.returns[-100:]
        self.running_mean.append(sum(window) / len(window))

    def add_evaluation(self, episode: int, returns) -> float:
        self.eval_at.append(int(episode))
        self.eval_returns.extend(float(r) for r in returns)
        window = self.eval_returns[-100:]
        score = sum(window) / len(window)
        self.eval_scores.append(score)
        return score

    @property
    def final_score(self) -> float:
        return self.eval_scores[-1] if self.eval_scores else 0.0

    @property
    def solved(self) -> bool:
        return self.episodes_to_solve is not None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["episode", "return", "running_mean"])
        for k, (r, m) in enumerate(zip(self.returns, self.running_mean), start=1):
            w.writerow([k, repr(r), repr(m)])
        return buf.getvalue()

    def eval_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["episode", "score"])
        for ep, s in zip(self.eval_at, self.eval_scores):
            w.writerow([ep, repr(s)])
        return buf.getvalue()

    def summary(self) -> dict:
        """Deterministic summary (no wall-clock)."""
        return {"episodes": len(self.returns), "episodes_to_solve": self.episodes_to_solve,
                "final_score": self.final_score, "evaluations": len(self.eval_scores),
                "solved": self.solved}


def _streams(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _fit_classifier(agent, xs, ys, seed: int, epochs: int) -> None:
    y = np.asarray(ys)
    if len(y) < 2 or np.all(y == y[0]):
        return
    agent.classifier, agent.classifier_accuracy = train_aux_classifier(np.asarray(xs), y, seed=seed, epochs=epochs)


def run_training(config: ExperimentConfig, seed: int, agent=None):
    """Train one agent under ``config``; returns (agent, LearningCurve)."""
    config.validate()
    started = time.perf_counter()
    env_rng, noise_rng, act_rng, replay_rng, eval_env_rng, eval_noise_rng, eval_act_rng = _streams(seed, 7)
    init_seed = int(np.random.SeedSequence(seed).generate_state(1)[0])
    if agent is None:
        agent = make_agent(config.agent, m=config.frames, hp=dataclasses.replace(config.hyper), seed=init_seed)
    curve = LearningCurve()
    if config.max_episodes == 0:
        return agent, curve

    buffer = make_buffer(agent)
    env = NoisyEnv(config.interference, config.frames, env_rng, noise_rng, target=agent)
    eval_env = NoisyEnv(config.eval_interference, config.frames, eval_env_rng, eval_noise_rng, target=agent)
    ctrl = Controller(agent, training=True, rng=act_rng)
    eval_ctrl = Controller(agent, training=False, rng=eval_act_rng, label_mode=config.label_mode)
    cls_x: deque = deque(maxlen=config.classifier_window)
    cls_y: deque = deque(maxlen=config.classifier_window)
    eps = config.eps_start
    total_steps = 0

    for episode in range(1, config.max_episodes + 1):
        state, labels = env.reset(), env.labels
        ctrl.reset()
        total, done = 0.0, False
        while not done:
            action = ctrl.act(state, labels, eps).action
            next_state, reward, done = env.step(action)
            next_labels = env.labels
            terminal = done and not (config.bootstrap_time_limit and not cartpole_failed(env.env.state))
            buffer.add(state, labels, action, reward, next_state, next_labels, terminal)
            if agent.uses_classifier:
                cls_x.append(state)
                cls_y.append(labels[-1])
            total_steps += 1
            if config.eps_decay_steps:
                frac = min(1.0, total_steps / config.eps_decay_steps)
                eps = config.eps_start + frac * (config.eps_min - config.eps_start)
            if total_steps >= config.learn_start and total_steps % config.learn_every == 0:
                for _ in range(config.updates_per_step):
                    learn_step(agent, buffer, replay_rng)
            state, labels = next_state, next_labels
            total += reward
        curve.add_episode(total)
        if not config.eps_decay_steps:
            eps = max(config.eps_min, eps * config.eps_decay)

        if episode % config.eval_every == 0:
            if agent.uses_classifier:
                _fit_classifier(agent, cls_x, cls_y, init_seed + episode, config.classifier_epochs)
            returns, _ = run_episodes(agent, eval_env, eval_ctrl, config.eval_episodes)
            curve.add_evaluation(episode, returns)
            if is_solved(curve.eval_returns, config.target):
                curve.episodes_to_solve = episode
                break
    if agent.uses_classifier:
        _fit_classifier(agent, cls_x, cls_y, init_seed, config.classifier_epochs)
    curve.wall_seconds = time.perf_counter() - started
    return agent, curve


# -- evaluation and recording --------------------------------------------------------

def run_episodes(agent, env: NoisyEnv, ctrl: Controller, episodes: int, shadow: Controller | None = None,
                 nominal_p: float = 0.0):
    """Greedy episodes. With a ``shadow`` controller every step is also recorded."""
    returns, recordings = [], []
    for ep in range(episodes):
        state = env.reset()
        ctrl.reset()
        if shadow is not None:
            shadow.reset()
            rows = {k: [] for k in ("clean", "noisy", "labels", "probs", "actions", "clean_actions",
                                    "q_clean", "q_noisy")}
        total, done = 0.0, False
        while not done:
            dec = ctrl.act(state)
            if shadow is not None:
                clean = env.clean_state
                ref = shadow.act(clean)
                rows["clean"].append(clean)
                rows["noisy"].append(state)
                rows["labels"].append(env.labels[-1])
                rows["probs"].append(nominal_p if dec.p is None else dec.p)
                rows["actions"].append(dec.action)
                rows["clean_actions"].append(ref.action)
                rows["q_clean"].append(ref.q)
                rows["q_noisy"].append(dec.q)
            state, reward, done = env.step(dec.action)
            total += reward
        returns.append(total)
        if shadow is not None:
            recordings.append(EpisodeRecording(**{k: np.array(v) for k, v in rows.items()}, episode=ep))
    return returns, recordings


def evaluate(agent, config: ExperimentConfig, episodes: int, record: bool = False, seed: int = 0,
             spec: InterferenceSpec | None = None):
    """Greedy evaluation under ``spec`` (default: the config's test interference)."""
    spec = spec or config.eval_interference
    env_rng, noise_rng, act_rng, shadow_rng = _streams(seed + 7919, 4)
    env = NoisyEnv(spec, agent.m, env_rng, noise_rng, target=agent)
    ctrl = Controller(agent, training=False, rng=act_rng, label_mode=config.label_mode)
    shadow = Controller(agent, training=False, rng=shadow_rng, label_mode=config.label_mode) if record else None
    returns, recordings = run_episodes(agent, env, ctrl, episodes, shadow, nominal_p=spec.nominal_rate)
    return returns, (recordings if record else None)


# -- multi-run helpers -----------------------------------------------------------------

def aggregate(curves) -> dict:
    finals = np.array([c.final_score for c in curves], dtype=np.float64)
    return {"runs": len(curves), "mean_final": float(finals.mean()) if len(finals) else 0.0,
            "std_final": float(finals.std()) if len(finals) else 0.0,
            "solve_fraction": float(np.mean([c.solved for c in curves])) if curves else 0.0,
            "final_scores": finals.tolist(),
            "episodes_to_solve": [c.episodes_to_solve for c in curves]}


def transfer_matrix(config: ExperimentConfig, train_specs, test_specs, seeds=None, episodes: int = 20) -> dict:
    """Train once per (train spec, seed), evaluate on every test spec; mean return per cell."""
    seeds = list(config.seeds if seeds is None else seeds)
    grid = np.zeros((len(train_specs), len(test_specs)))
    for r, tr in enumerate(train_specs):
        for seed in seeds:
            agent, _ = run_training(config.with_(interference=tr, test_interference=None), seed)
            for c, te in enumerate(test_specs):
                returns, _ = evaluate(agent, config, episodes, seed=seed, spec=te)
                grid[r, c] += np.mean(returns) / len(seeds)
    return {"agent": config.agent, "train": [s.name() for s in train_specs],
            "test": [s.name() for s in test_specs], "seeds": seeds, "mean_return": grid.tolist()}


def clever_scores(agent, recordings, cfg: CleverConfig, max_states: int, rng: np.random.Generator) -> np.ndarray:
    """CLEVER-Q on up to ``max_states`` clean recorded states.

    CIQ is scored with its label bits frozen at the values predicted for the
    centre state, so the function under analysis is continuous in the ball.
    """
    states = np.concatenate([r.clean for r in recordings])
    if max_states and len(states) > max_states:
        states = states[np.sort(rng.choice(len(states), size=max_states, replace=False))]
    out = []
    for s in states:
        if agent.kind == "ciq":
            labels = agent._pass(agent.online, s, mode="hard").labels[0]
            qf = agent.qfunction(labels)
        else:
            qf = agent.qfunction()
        out.append(clever_q(qf, s, cfg, rng))
    return np.array(out)


def robustness_report(agent, recordings, clever_cfg: CleverConfig, seed: int = 0, max_states: int = 50) -> dict:
    if not recordings or not any(len(r) for r in recordings):
        raise TrainingError("robustness report needs non-empty recordings")
    rng = np.random.default_rng(seed)
    scores = clever_scores(agent, recordings, clever_cfg, max_states, rng) if max_states else np.zeros(0)
    return {
        "agent": agent.kind,
        "episodes": len(recordings),
        "steps": int(sum(len(r) for r in recordings)),
        "ac_rate": ac_rate(recordings),
        "clever_q": {"mean": float(scores.mean()) if len(scores) else None,
                     "median": float(np.median(scores)) if len(scores) else None,
                     "states": int(len(scores)), "p": "inf" if clever_cfg.p == math.inf else clever_cfg.p,
                     "radius": clever_cfg.radius, "estimator": clever_cfg.estimator},
        "ate": ate(recordings),
        "refuted": {mode: refute(recordings, mode, rng) for mode in ("common_cause", "placebo", "subset")},
        "classifier_accuracy": getattr(agent, "classifier_accuracy", None),
    }


# -- contextual bandit ----------------------------------------------------------------

def bandit_label_advantage(cfg: BanditConfig, budget: int, rng: np.random.Generator) -> dict:
    """Estimate q1 from pulls of arm 1 with and without access to interference labels.

    (a) keeps only pulls whose observed context is 1; (b) also recovers the
    blacked-out x=1 pulls through their label.
    """
    if budget < 1000:
        raise ConfigError("budget: must be at least 1000")
    x = np.empty(budget, dtype=np.int64)
    obs = np.empty(budget, dtype=np.int64)
    lab = np.empty(budget, dtype=np.int64)
    rew = np.empty(budget, dtype=np.int64)
    for k in range(budget):
        x[k] = bandit_context(rng)
        obs[k], lab[k], rew[k] = bandit_step(int(x[k]), 1, cfg, True, rng)
    win = rew == 1
    use_a = obs == 1
    use_b = (obs == 1) | (lab == 1)

    def estimate(mask):
        n = int(mask.sum())
        q = float(win[mask].mean()) if n else float("nan")
        return {"samples": n, "q1_hat": q, "std_error": math.sqrt(q * (1 - q) / n) if n else float("nan")}

    a, b = estimate(use_a), estimate(use_b)
    hidden = obs == 0
    return {
        "q1": cfg.q1, "q0": cfg.q0, "p_blackout": cfg.p_blackout, "budget": budget,
        "unlabeled": a, "labeled": b,
        "usable_ratio": a["samples"] / b["samples"] if b["samples"] else float("nan"),
        "p_win_given_observed_0": float(win[hidden].mean()) if hidden.any() else float("nan"),
    }
