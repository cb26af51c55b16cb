"""Q-learning agents: DQN (with DDQN/PER options), DQN-CF, DQN-SA and CIQ.

Every agent consumes a stacked state of M delivered observations. Labels are
always passed per frame (shape (M,) or (B, M)); the current frame is the last.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError, TrainingError, UsageError
from .nn import (AdamState, Mlp, adam_step, mlp_backward, mlp_forward, mlp_new, polyak_update,
                 quantile_huber, quantile_huber_grad, read_params, write_params)
from .replay import Batch, ReplayBuffer

AGENT_KINDS = ("dqn", "ddqn", "dqn_cf", "dqn_sa", "ciq")


@dataclass
class Hyper:
    gamma: float = 0.99
    lr: float = 5e-4
    batch_size: int = 32
    buffer_size: int = 100_000
    tau: float = 5e-3
    weight_decay: float = 1e-4
    kappa: float = 1.0
    tau_q: float = 0.5
    lam: float = 1.0
    double: bool = False
    prioritized: bool = False
    alpha: float = 0.6
    beta: float = 0.4
    hidden: int = 32
    latent: int = 32


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def greedy(q: np.ndarray) -> int:
    # np.argmax returns the lowest index among ties
    return int(np.argmax(q))


def epsilon_greedy(q: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
    if not 0.0 <= epsilon <= 1.0:
        raise ConfigError(f"epsilon must be in [0, 1], got {epsilon}")
    if epsilon > 0.0 and rng.random() < epsilon:
        return int(rng.integers(len(q)))
    return greedy(q)


def td_target(q_next_target, rewards, dones, gamma: float, mode: str = "dqn", q_next_online=None):
    """r + gamma * (1 - done) * bootstrap, vectorized over a batch of next-state Q rows."""
    q_next_target = np.atleast_2d(q_next_target)
    if mode == "ddqn":
        if q_next_online is None:
            raise UsageError("DDQN target needs online Q-values of the next state")
        a = np.argmax(np.atleast_2d(q_next_online), axis=1)
        boot = q_next_target[np.arange(len(a)), a]
    elif mode == "dqn":
        boot = q_next_target.max(axis=1)
    else:
        raise ConfigError(f"unknown target mode {mode!r}")
    return np.asarray(rewards, dtype=np.float64) + gamma * (1.0 - np.asarray(dones, dtype=np.float64)) * boot


def dqn_cf_input(states, labels) -> np.ndarray:
    """Interleave each frame with its label: (..., M*d) + (..., M) -> (..., M*(d+1))."""
    states = np.asarray(states, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    m = labels.shape[-1]
    if states.shape[-1] % m:
        raise ShapeError(f"{labels.shape[-1]} labels do not divide a state of length {states.shape[-1]}")
    lead = states.shape[:-1]
    if labels.shape[:-1] != lead:
        raise ShapeError("label count does not match the state stack")
    frames = states.reshape(*lead, m, -1)
    return np.concatenate([frames, labels[..., None]], axis=-1).reshape(*lead, -1)


def dqn_sa_act(agent, state, label: int, held: int | None, epsilon: float = 0.0, rng=None):
    """Safe-action rule: repeat the last clean action while the current frame is interfered."""
    if label and held is not None:
        return held, held
    q = agent.q_values(state)
    a = epsilon_greedy(q, epsilon, rng) if epsilon > 0 else greedy(q)
    return a, (a if not label else held)


class MlpQ:
    """Adapter giving a bare Q-network the q()/grad() interface used by the metrics."""

    def __init__(self, net: Mlp):
        self.net = net

    def q(self, states):
        return mlp_forward(self.net, np.atleast_2d(states))[0]

    def grad(self, states, out_grad):
        _, cache = mlp_forward(self.net, np.atleast_2d(states))
        return mlp_backward(self.net, cache, np.atleast_2d(out_grad))[1]


# -- DQN family -----------------------------------------------------------------

class DqnAgent:
    """Plain DQN on the stacked delivered state; ``label_input`` turns it into DQN-CF."""

    def __init__(self, obs_dim: int = 4, n_actions: int = 2, m: int = 4, hp: Hyper | None = None,
                 seed: int = 0, kind: str = "dqn"):
        if kind not in ("dqn", "ddqn", "dqn_cf", "dqn_sa"):
            raise ConfigError(f"DqnAgent cannot be of kind {kind!r}")
        self.kind = kind
        self.obs_dim, self.n_actions, self.m = obs_dim, n_actions, m
        self.hp = hp or Hyper()
        if kind == "ddqn":
            self.hp = replace(self.hp, double=True)
        self.label_input = kind == "dqn_cf"
        self.in_dim = m * obs_dim + (m if self.label_input else 0)
        h = self.hp.hidden
        self.online = mlp_new([self.in_dim, h, h, n_actions], seed)
        self.target = self.online.copy()
        self.opt = AdamState.for_params(self.online)
        self.classifier: Mlp | None = None
        self.classifier_accuracy: float | None = None

    @property
    def uses_classifier(self) -> bool:
        return self.kind in ("dqn_cf", "dqn_sa")

    def networks(self) -> dict[str, Mlp]:
        nets = {"online": self.online, "target": self.target}
        if self.classifier is not None:
            nets["classifier"] = self.classifier
        return nets

    def inputs(self, states, labels=None):
        if not self.label_input:
            return states
        if labels is None:
            raise UsageError("DQN-CF needs per-frame labels")
        return dqn_cf_input(states, labels)

    def q_values(self, state, labels=None) -> np.ndarray:
        return mlp_forward(self.online, self.inputs(np.asarray(state, dtype=np.float64), labels))[0]

    def label_prob(self, state) -> float:
        if self.classifier is None:
            raise UsageError(f"{self.kind} agent has no trained interference classifier")
        return float(sigmoid(mlp_forward(self.classifier, state)[0][0]))

    def act(self, state, epsilon: float, rng, labels=None) -> int:
        return epsilon_greedy(self.q_values(state, labels), epsilon, rng)

    def attack_gradient(self, stacked, labels=None) -> np.ndarray:
        x = self.inputs(stacked, np.zeros(self.m) if labels is None and self.label_input else labels)
        q, cache = mlp_forward(self.online, x)
        e = np.exp(q - q.max())
        dq = e / e.sum()
        dq[greedy(q)] -= 1.0
        g = mlp_backward(self.online, cache, dq)[1]
        if self.label_input:
            g = g.reshape(self.m, self.obs_dim + 1)[:, :-1].ravel()
        return g

    def qfunction(self, labels=None):
        if not self.label_input:
            return MlpQ(self.online)
        return _LabelledQ(self, np.zeros(self.m) if labels is None else np.asarray(labels))

    def loss(self, batch: Batch):
        hp = self.hp
        B = len(batch)
        x = self.inputs(batch.states, batch.labels)
        xn = self.inputs(batch.next_states, batch.next_labels)
        q, cache = mlp_forward(self.online, x)
        q_next_t = mlp_forward(self.target, xn)[0]
        q_next_o = mlp_forward(self.online, xn)[0] if hp.double else None
        y = td_target(q_next_t, batch.rewards, batch.dones, hp.gamma,
                      "ddqn" if hp.double else "dqn", q_next_o)
        rows = np.arange(B)
        u = y - q[rows, batch.actions]
        loss = float(np.mean(batch.weights * quantile_huber(u, hp.kappa, hp.tau_q)))
        dq = np.zeros_like(q)
        dq[rows, batch.actions] = -batch.weights * quantile_huber_grad(u, hp.kappa, hp.tau_q) / B
        grads, _ = mlp_backward(self.online, cache, dq)
        return loss, {"online": grads}, u

    def optimizer_pairs(self):
        return [(self.online, self.target, self.opt, "online")]


class _LabelledQ:
    def __init__(self, agent: DqnAgent, labels):
        self.agent, self.labels = agent, labels

    def _x(self, states):
        states = np.atleast_2d(states)
        return dqn_cf_input(states, np.broadcast_to(self.labels, (len(states), self.agent.m)))

    def q(self, states):
        return mlp_forward(self.agent.online, self._x(states))[0]

    def grad(self, states, out_grad):
        _, cache = mlp_forward(self.agent.online, self._x(states))
        g = mlp_backward(self.agent.online, cache, np.atleast_2d(out_grad))[1]
        n = len(g)
        return g.reshape(n, self.agent.m, -1)[:, :, :-1].reshape(n, -1)


# -- CIQ --------------------------------------------------------------------------

def ciq_predict_label(label_net: Mlp, z, rng=None, mode: str = "sampled"):
    """Returns (label estimate, probability). ``mode`` is sampled | hard | soft."""
    p = sigmoid(mlp_forward(label_net, z)[0][..., 0])
    return predict_from_prob(p, rng, mode), p


def predict_from_prob(p, rng=None, mode: str = "sampled"):
    p = np.asarray(p, dtype=np.float64)
    if mode == "soft":
        return p.copy()
    if mode == "hard":
        return (p >= 0.5).astype(np.float64)
    if mode == "sampled":
        if rng is None:
            raise UsageError("sampled label prediction needs an rng")
        return (rng.random(p.shape) < p).astype(np.float64)
    raise ConfigError(f"unknown label mode {mode!r}")


@dataclass
class _CiqPass:
    B: int
    z: np.ndarray
    enc_cache: object
    labels: np.ndarray
    switch: np.ndarray
    sci: np.ndarray
    q: np.ndarray
    c1: object
    c0: object
    probs: np.ndarray | None


class CiqAgent:
    """Encoder f1 per frame, label head f_I, and two Q-heads switched by the current label.

    head1 is used when the switch bit is 1 (interfered), head0 otherwise.
    """

    kind = "ciq"
    uses_classifier = False

    def __init__(self, obs_dim: int = 4, n_actions: int = 2, m: int = 4, hp: Hyper | None = None,
                 seed: int = 0):
        self.obs_dim, self.n_actions, self.m = obs_dim, n_actions, m
        self.hp = hp or Hyper()
        L, h = self.hp.latent, self.hp.hidden
        self.latent = L
        self.online = {
            "encoder": mlp_new([obs_dim, L, L], seed, out_relu=True),
            "label": mlp_new([L, h, 1], seed + 1_000_003),
            "head1": mlp_new([m * (L + 1), h, n_actions], seed + 2_000_006),
            "head0": mlp_new([m * (L + 1), h, n_actions], seed + 3_000_009),
        }
        self.target = {k: v.copy() for k, v in self.online.items()}
        self.opt = {k: AdamState.for_params(v) for k, v in self.online.items()}

    def networks(self) -> dict[str, Mlp]:
        out = dict(self.online)
        out.update({f"target_{k}": v for k, v in self.target.items()})
        return out

    # forward / backward through the whole switched network
    def _pass(self, nets, states, labels=None, mode="hard", rng=None, with_probs=False) -> _CiqPass:
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        B, M, L = states.shape[0], self.m, self.latent
        if states.shape[1] != M * self.obs_dim:
            raise ShapeError(f"state length {states.shape[1]} != {M} x {self.obs_dim}")
        z, enc_cache = mlp_forward(nets["encoder"], states.reshape(B * M, self.obs_dim))
        probs = None
        if labels is None or with_probs:
            probs = sigmoid(mlp_forward(nets["label"], z)[0][:, 0]).reshape(B, M)
        if labels is None:
            labels = predict_from_prob(probs, rng, mode)
        labels = np.atleast_2d(np.asarray(labels, dtype=np.float64))
        sci = np.concatenate([z.reshape(B, M, L), labels[:, :, None]], axis=2).reshape(B, M * (L + 1))
        switch = labels[:, -1] >= 0.5
        q1, c1 = mlp_forward(nets["head1"], sci)
        q0, c0 = mlp_forward(nets["head0"], sci)
        q = np.where(switch[:, None], q1, q0)
        return _CiqPass(B, z, enc_cache, labels, switch, sci, q, c1, c0, probs)

    def _backward(self, nets, fw: _CiqPass, dq: np.ndarray, dz_extra=None):
        on = fw.switch[:, None].astype(np.float64)
        g1, gs1 = mlp_backward(nets["head1"], fw.c1, dq * on)
        g0, gs0 = mlp_backward(nets["head0"], fw.c0, dq * (1.0 - on))
        gsci = (gs1 + gs0).reshape(fw.B, self.m, self.latent + 1)
        dz = gsci[:, :, : self.latent].reshape(fw.B * self.m, self.latent)
        if dz_extra is not None:
            dz = dz + dz_extra
        genc, gx = mlp_backward(nets["encoder"], fw.enc_cache, dz)
        return {"encoder": genc, "head1": g1, "head0": g0}, gx.reshape(fw.B, -1)

    def encode(self, frame) -> np.ndarray:
        return mlp_forward(self.online["encoder"], frame)[0]

    def causal_state(self, state, labels) -> np.ndarray:
        return self._pass(self.online, state, labels).sci[0]

    def q_values(self, state, labels=None, rng=None, mode: str = "hard") -> np.ndarray:
        return self._pass(self.online, state, labels, mode, rng).q[0]

    def label_prob(self, state) -> float:
        """Probability that the current (last) frame is interfered."""
        frame = np.asarray(state, dtype=np.float64)[-self.obs_dim:]
        return float(ciq_predict_label(self.online["label"], self.encode(frame), mode="soft")[1])

    def frame_probs(self, state) -> np.ndarray:
        return self._pass(self.online, state, with_probs=True).probs[0]

    def act(self, state, epsilon: float, rng, labels=None, mode: str = "sampled") -> int:
        return epsilon_greedy(self.q_values(state, labels, rng, mode), epsilon, rng)

    def attack_gradient(self, stacked, labels=None) -> np.ndarray:
        fw = self._pass(self.online, stacked, labels, mode="hard")
        q = fw.q[0]
        e = np.exp(q - q.max())
        dq = e / e.sum()
        dq[greedy(q)] -= 1.0
        return self._backward(self.online, fw, dq[None, :])[1][0]

    def qfunction(self, labels=None):
        return _CiqQ(self, labels)

    def loss(self, batch: Batch, lam: float | None = None):
        """Switched TD loss (quantile Huber) plus lam * BCE of the current-frame label."""
        hp = self.hp
        lam = hp.lam if lam is None else lam
        if batch.labels is None or batch.next_labels is None:
            raise UsageError("the CIQ loss needs the training label of every transition")
        B, M, L = len(batch), self.m, self.latent
        labels = np.asarray(batch.labels, dtype=np.float64)
        next_labels = np.asarray(batch.next_labels, dtype=np.float64)
        fw = self._pass(self.online, batch.states, labels)
        q_next_t = self._pass(self.target, batch.next_states, next_labels).q
        q_next_o = self._pass(self.online, batch.next_states, next_labels).q if hp.double else None
        y = td_target(q_next_t, batch.rewards, batch.dones, hp.gamma,
                      "ddqn" if hp.double else "dqn", q_next_o)
        rows = np.arange(B)
        u = y - fw.q[rows, batch.actions]
        td_loss = float(np.mean(batch.weights * quantile_huber(u, hp.kappa, hp.tau_q)))
        dq = np.zeros_like(fw.q)
        dq[rows, batch.actions] = -batch.weights * quantile_huber_grad(u, hp.kappa, hp.tau_q) / B

        # label head on the current frame's latent
        z_cur = fw.z.reshape(B, M, L)[:, -1]
        logit, lab_cache = mlp_forward(self.online["label"], z_cur)
        logit = logit[:, 0]
        target = labels[:, -1]
        bce = float(np.mean(np.logaddexp(0.0, logit) - target * logit))
        dlogit = lam * (sigmoid(logit) - target) / B
        glab, dz_cur = mlp_backward(self.online["label"], lab_cache, dlogit[:, None])
        dz_extra = np.zeros((B, M, L))
        dz_extra[:, -1] = dz_cur
        grads, _ = self._backward(self.online, fw, dq, dz_extra.reshape(B * M, L))
        grads["label"] = glab
        self.last_parts = {"td": td_loss, "bce": bce}
        return td_loss + lam * bce, grads, u

    def optimizer_pairs(self):
        return [(self.online[k], self.target[k], self.opt[k], k) for k in ("encoder", "label", "head1", "head0")]


class _CiqQ:
    """CIQ as a function of the stacked input with hard labels recomputed at every point."""

    def __init__(self, agent: CiqAgent, labels=None):
        self.agent, self.labels = agent, labels

    def _labels(self, n):
        return None if self.labels is None else np.broadcast_to(self.labels, (n, self.agent.m))

    def q(self, states):
        states = np.atleast_2d(states)
        return self.agent._pass(self.agent.online, states, self._labels(len(states)), mode="hard").q

    def grad(self, states, out_grad):
        states = np.atleast_2d(states)
        fw = self.agent._pass(self.agent.online, states, self._labels(len(states)), mode="hard")
        return self.agent._backward(self.agent.online, fw, np.atleast_2d(out_grad))[1]


# -- shared training step ------------------------------------------------------

def make_agent(kind: str, obs_dim: int = 4, n_actions: int = 2, m: int = 4, hp: Hyper | None = None,
               seed: int = 0):
    if kind == "ciq":
        return CiqAgent(obs_dim, n_actions, m, hp, seed)
    if kind in ("dqn", "ddqn", "dqn_cf", "dqn_sa"):
        return DqnAgent(obs_dim, n_actions, m, hp, seed, kind)
    raise ConfigError(f"unknown agent kind {kind!r}; expected one of {AGENT_KINDS}")


def make_buffer(agent) -> ReplayBuffer:
    hp = agent.hp
    return ReplayBuffer(hp.buffer_size, agent.m * agent.obs_dim, agent.m, hp.prioritized, hp.alpha, hp.beta)


def learn_step(agent, buffer: ReplayBuffer, rng: np.random.Generator):
    """One gradient step plus soft target update; returns diagnostics or None if the buffer is short."""
    hp = agent.hp
    if len(buffer) < hp.batch_size:
        return None
    batch = buffer.sample(hp.batch_size, rng)
    loss, grads, td = agent.loss(batch)
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss}")
    for online, target, opt, name in agent.optimizer_pairs():
        adam_step(opt, online, grads[name], hp.lr, hp.weight_decay)
        polyak_update(target, online, hp.tau)
    buffer.update_priorities(batch.idx, td)
    return {"loss": loss, "td_abs": float(np.mean(np.abs(td)))}


# -- interference classifier for DQN-CF / DQN-SA -----------------------------------

def train_aux_classifier(states, labels, seed: int = 0, epochs: int = 30, lr: float = 1e-3,
                         batch_size: int = 64, hidden: int = 32, holdout: float = 0.2):
    """Two-hidden-layer logistic classifier trained with Adam on BCE.

    Returns (network producing a logit, held-out accuracy).
    """
    X = np.asarray(states, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64).ravel()
    if len(X) == 0 or len(X) != len(y):
        raise TrainingError("classifier dataset is empty or misaligned")
    if np.all(y == y[0]):
        raise TrainingError("classifier dataset contains a single class")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(X))
    n_val = int(round(holdout * len(X))) if len(X) >= 10 else 0
    val, tr = order[:n_val], order[n_val:]
    net = mlp_new([X.shape[1], hidden, hidden, 1], seed)
    opt = AdamState.for_params(net)
    for _ in range(epochs):
        perm = rng.permutation(tr)
        for start in range(0, len(perm), batch_size):
            idx = perm[start:start + batch_size]
            logit, cache = mlp_forward(net, X[idx])
            g = (sigmoid(logit[:, 0]) - y[idx]) / len(idx)
            grads, _ = mlp_backward(net, cache, g[:, None])
            adam_step(opt, net, grads, lr)
    check = val if n_val else tr
    pred = mlp_forward(net, X[check])[0][:, 0] >= 0.0
    acc = float(np.mean(pred == (y[check] >= 0.5)))
    return net, acc


# -- per-episode controllers -------------------------------------------------------

@dataclass
class Decision:
    action: int
    q: np.ndarray
    p: float | None  # agent's estimate that the current frame is interfered


@dataclass
class _Track:
    labels: deque
    held: int | None = None


class Controller:
    """Wraps an agent with the per-episode state its acting rule needs.

    Training controllers receive the true label window; evaluation controllers
    estimate labels themselves (CIQ label head, or the CF/SA classifier). Each
    named track keeps its own state so the same controller can answer
    "what would the agent do on the clean input" without disturbing the
    trajectory it is driving.
    """

    def __init__(self, agent, training: bool, rng: np.random.Generator, label_mode: str = "sampled"):
        self.agent = agent
        self.training = training
        self.rng = rng
        self.label_mode = label_mode
        self.tracks: dict[str, _Track] = {}

    def reset(self) -> None:
        self.tracks = {}

    def _track(self, name) -> _Track:
        if name not in self.tracks:
            self.tracks[name] = _Track(deque([0] * self.agent.m, maxlen=self.agent.m))
        return self.tracks[name]

    def act(self, state, true_labels=None, epsilon: float = 0.0, track: str = "main") -> Decision:
        agent, tr = self.agent, self._track(track)
        kind = agent.kind
        if self.training and true_labels is None:
            raise UsageError("training controllers need the true label window")
        if kind == "ciq":
            if self.training:
                labels = np.asarray(true_labels, dtype=np.float64)
                fw = agent._pass(agent.online, state, labels[None, :], with_probs=True)
            else:
                fw = agent._pass(agent.online, state, None, self.label_mode, self.rng, with_probs=True)
            q = fw.q[0]
            return Decision(epsilon_greedy(q, epsilon, self.rng), q, float(fw.probs[0, -1]))

        p = None
        if self.training:
            label = int(true_labels[-1])
            window = np.asarray(true_labels)
        elif agent.uses_classifier:
            # no classifier means no interference was ever observed
            p = agent.label_prob(state) if agent.classifier is not None else 0.0
            label = int(p >= 0.5)
            tr.labels.append(label)
            window = np.array(tr.labels)
        else:
            label, window = 0, None
        q = agent.q_values(state, window if agent.label_input else None)
        if kind == "dqn_sa":
            if label and tr.held is not None:
                return Decision(tr.held, q, p)
            a = epsilon_greedy(q, epsilon, self.rng)
            if not label:
                tr.held = a
            return Decision(a, q, p)
        return Decision(epsilon_greedy(q, epsilon, self.rng), q, p)


# -- checkpoints ----------------------------------------------------------------

def save_agent(agent, directory, extra: dict | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, net in agent.networks().items():
        fname = f"{name}.ciqp"
        with open(d / fname, "wb") as fh:
            write_params(net, fh)
        files[name] = {"file": fname, "out_relu": net.out_relu}
    manifest = {
        "agent_kind": agent.kind,
        "M": agent.m,
        "L": getattr(agent, "latent", None),
        "obs_dim": agent.obs_dim,
        "n_actions": agent.n_actions,
        "hyperparameters": asdict(agent.hp),
        "networks": files,
        "classifier_accuracy": getattr(agent, "classifier_accuracy", None),
    }
    if extra:
        manifest.update(extra)
    path = d / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_agent(directory):
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    hp = Hyper(**manifest["hyperparameters"])
    agent = make_agent(manifest["agent_kind"], manifest["obs_dim"], manifest["n_actions"], manifest["M"], hp)

    def load(name):
        info = manifest["networks"][name]
        with open(d / info["file"], "rb") as fh:
            return read_params(fh, info["out_relu"])

    if agent.kind == "ciq":
        for k in agent.online:
            agent.online[k] = load(k)
            agent.target[k] = load(f"target_{k}")
        agent.opt = {k: AdamState.for_params(v) for k, v in agent.online.items()}
    else:
        agent.online, agent.target = load("online"), load("target")
        agent.opt = AdamState.for_params(agent.online)
        if "classifier" in manifest["networks"]:
            agent.classifier = load("classifier")
            agent.classifier_accuracy = manifest.get("classifier_accuracy")
    return agent, manifest
