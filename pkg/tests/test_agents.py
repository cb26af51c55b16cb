import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ciqlab.agents import (CiqAgent, Controller, DqnAgent, Hyper, ciq_predict_label, dqn_cf_input, dqn_sa_act,
                           epsilon_greedy, greedy, learn_step, load_agent, make_agent, make_buffer,
                           predict_from_prob, save_agent, sigmoid, td_target, train_aux_classifier)
from ciqlab.errors import ConfigError, ShapeError, TrainingError, UsageError
from ciqlab.nn import mlp_forward
from gradcheck import param_sets, pick_batch, random_batch
from oracles import central_diff, rel_error, relu_net


@pytest.mark.parametrize("kind", ["dqn", "ddqn", "dqn_cf", "ciq"])
@pytest.mark.parametrize("seed", [0, 1])
def test_loss_gradients_match_finite_differences(kind, seed):
    agent = make_agent(kind, hp=Hyper(hidden=8, latent=6), seed=seed)
    batch = pick_batch(agent, seed, n=2 if kind == "ciq" else 8)
    _, grads, _ = agent.loss(batch)
    for name, p, g in param_sets(agent, grads):
        fd = central_diff(lambda: agent.loss(batch)[0], p)
        assert rel_error(fd, g) <= 1e-6, name


@pytest.mark.parametrize("kind", ["dqn", "dqn_cf", "ciq"])
def test_attack_gradient_matches_finite_differences(kind):
    agent = make_agent(kind, hp=Hyper(hidden=8, latent=6), seed=3)
    rng = np.random.default_rng(3)
    s = rng.normal(size=agent.m * agent.obs_dim)
    labels = np.array([0, 1, 0, 1])
    qf = agent.qfunction(labels)

    def objective():
        q = qf.q(s[None])[0]
        return float(-(q[a0] - np.log(np.sum(np.exp(q)))))

    a0 = greedy(qf.q(s[None])[0])
    fd = central_diff(objective, s)
    np.testing.assert_allclose(agent.attack_gradient(s, labels), fd, atol=1e-9)


def test_hyper_defaults():
    hp = Hyper()
    assert (hp.gamma, hp.lr, hp.batch_size, hp.buffer_size, hp.tau, hp.weight_decay) == \
        (0.99, 5e-4, 32, 100_000, 5e-3, 1e-4)
    assert (hp.lam, hp.kappa, hp.hidden, hp.latent) == (1.0, 1.0, 32, 32)


def test_ddqn_does_not_mutate_shared_hyper():
    hp = Hyper()
    DqnAgent(hp=hp, kind="ddqn")
    assert hp.double is False


def test_td_target_cases():
    qn = np.array([[1.0, 3.0], [2.0, -1.0]])
    r = np.array([0.5, -1.0])
    np.testing.assert_allclose(td_target(qn, r, [1.0, 1.0], 0.9), r)
    np.testing.assert_allclose(td_target(qn, r, [0.0, 0.0], 0.0), r)
    np.testing.assert_allclose(td_target(qn, r, [0.0, 0.0], 0.9), r + 0.9 * np.array([3.0, 2.0]))
    online = np.array([[5.0, 0.0], [0.0, 5.0]])
    # exhaustive two-action check: bootstrap with the target value of the online argmax
    expect = [r[i] + 0.9 * qn[i, int(np.argmax(online[i]))] for i in range(2)]
    np.testing.assert_allclose(td_target(qn, r, [0.0, 0.0], 0.9, "ddqn", online), expect)
    with pytest.raises(UsageError):
        td_target(qn, r, [0, 0], 0.9, "ddqn")


def test_greedy_and_epsilon():
    rng = np.random.default_rng(0)
    assert epsilon_greedy(np.array([1.0, 3.0]), 0.0, rng) == 1
    assert epsilon_greedy(np.array([2.0, 2.0]), 0.0, rng) == 0
    draws = np.array([epsilon_greedy(np.array([0.0, 9.0, 1.0]), 1.0, rng) for _ in range(100_000)])
    counts = np.bincount(draws, minlength=3)
    chi2 = np.sum((counts - 100_000 / 3) ** 2 / (100_000 / 3))
    assert chi2 < 13.8  # 99.9% quantile, 2 degrees of freedom
    with pytest.raises(ConfigError):
        epsilon_greedy(np.zeros(2), 1.5, rng)


@given(st.lists(st.floats(-100, 100), min_size=2, max_size=6), st.floats(0.01, 100), st.floats(-100, 100))
def test_greedy_affine_invariance(q, scale, shift):
    q = np.array(q)
    assert greedy(q) == greedy(q * scale + shift) or np.isclose(np.sort(q)[-1], np.sort(q)[-2])


def test_dqn_cf_input_layout():
    s = np.arange(16.0)
    x = dqn_cf_input(s, [1, 0, 0, 1])
    assert x.shape == (20,)
    np.testing.assert_array_equal(x.reshape(4, 5)[:, :4], s.reshape(4, 4))
    np.testing.assert_array_equal(x.reshape(4, 5)[:, 4], [1, 0, 0, 1])
    with pytest.raises(ShapeError):
        dqn_cf_input(s, [1, 0, 1])
    zero = dqn_cf_input(s, [0, 0, 0, 0]).reshape(4, 5)
    assert not zero[:, 4].any()


def test_label_prediction_modes():
    assert predict_from_prob(0.5, mode="hard") == 1.0
    assert predict_from_prob(sigmoid(-20.0), mode="hard") == 0.0
    rng = np.random.default_rng(0)
    assert np.all(predict_from_prob(np.full(10_000, sigmoid(20.0)), rng, "sampled") == 1.0)
    assert predict_from_prob(0.3, mode="soft") == pytest.approx(0.3)
    with pytest.raises(UsageError):
        predict_from_prob(0.3, None, "sampled")
    with pytest.raises(ConfigError):
        predict_from_prob(0.3, rng, "median")
    agent = CiqAgent(seed=0)
    bit, p = ciq_predict_label(agent.online["label"], np.zeros(agent.latent), mode="hard")
    assert 0.0 < p < 1.0 and bit == float(p >= 0.5)


def test_ciq_encoder_matches_reference():
    agent = CiqAgent(seed=4)
    x = np.random.default_rng(4).normal(size=4)
    enc = agent.online["encoder"]
    np.testing.assert_allclose(agent.encode(x), relu_net(enc.weights, enc.biases, x, out_relu=True), atol=1e-14)
    for w in enc.weights:
        w[:] = 0
    for b in enc.biases:
        b[:] = 0
    assert not agent.encode(x).any()


def test_ciq_switch_routes_to_selected_head():
    agent = CiqAgent(seed=5)
    s = np.random.default_rng(5).normal(size=16)
    for bit, head in ((1, "head1"), (0, "head0")):
        labels = np.array([0, 1, 1, bit])
        sci = agent.causal_state(s, labels)
        assert sci.shape == (4 * 33,)
        np.testing.assert_allclose(agent.q_values(s, labels), mlp_forward(agent.online[head], sci)[0], atol=1e-14)
    # identical heads make the switch irrelevant
    agent.online["head0"] = agent.online["head1"].copy()
    sci = agent.causal_state(s, [0, 0, 0, 1])
    np.testing.assert_array_equal(agent.q_values(s, [0, 0, 0, 1]), mlp_forward(agent.online["head0"], sci)[0])
    # an all-zero unselected head does not silence the selected one
    for a in agent.online["head0"].arrays():
        a[:] = 0.0
    assert np.any(agent.q_values(s, [0, 0, 0, 1]) != 0.0)


def test_ciq_unselected_head_does_not_touch_td():
    agent = CiqAgent(hp=Hyper(hidden=8, latent=6), seed=6)
    batch = random_batch(agent, np.random.default_rng(6))
    batch.labels[:, -1] = 1
    grads = agent.loss(batch)[1]
    td_before = agent.last_parts["td"]
    assert all(not g.any() for g in grads["head0"].arrays())
    for a in agent.online["head0"].arrays():
        a += 3.0
    agent.loss(batch)
    assert agent.last_parts["td"] == td_before


def test_ciq_loss_decomposition_and_lambda():
    agent = CiqAgent(hp=Hyper(hidden=8, latent=6), seed=7)
    batch = random_batch(agent, np.random.default_rng(7))
    total, _, u = agent.loss(batch)
    td, bce = agent.last_parts["td"], agent.last_parts["bce"]
    # addends evaluated independently
    w = batch.weights
    qh = 0.5 * np.where(np.abs(u) <= 1, 0.5 * u * u, np.abs(u) - 0.5)
    assert td == pytest.approx(np.mean(w * qh), rel=1e-12)
    z = np.array([agent.encode(f) for f in batch.states.reshape(-1, 4)]).reshape(8, 4, -1)[:, -1]
    p = sigmoid(mlp_forward(agent.online["label"], z)[0][:, 0])
    y = batch.labels[:, -1]
    assert bce == pytest.approx(np.mean(-(y * np.log(p) + (1 - y) * np.log(1 - p))), rel=1e-10)
    assert total == pytest.approx(td + bce, rel=1e-12)
    total0, grads0, _ = agent.loss(batch, lam=0.0)
    assert total0 == pytest.approx(td, rel=1e-12)
    assert all(not g.any() for g in grads0["label"].arrays())


def test_ciq_loss_requires_labels():
    agent = CiqAgent(seed=0)
    batch = random_batch(agent, np.random.default_rng(0))
    batch.labels = None
    with pytest.raises(UsageError):
        agent.loss(batch)


def test_learn_step_noop_then_converges_on_repeated_transition():
    agent = make_agent("dqn", seed=0)
    buf = make_buffer(agent)
    before = [a.copy() for a in agent.online.arrays()]
    assert learn_step(agent, buf, np.random.default_rng(0)) is None
    for a, b in zip(agent.online.arrays(), before):
        np.testing.assert_array_equal(a, b)
    s = np.random.default_rng(1).normal(size=16)
    for _ in range(40):
        buf.add(s, np.zeros(4), 1, 1.0, s, np.zeros(4), True)
    errs = [learn_step(agent, buf, np.random.default_rng(k))["td_abs"] for k in range(300)]
    errs = np.array(errs)
    assert errs.min() < 1e-3 * errs[0]
    # monotone from warm-up until the error is negligible (Adam may then jitter around zero)
    active = errs[50:np.argmax(errs < 1e-3 * errs[0])]
    assert len(active) > 10 and np.all(np.diff(active) < 0)


def test_polyak_bound_in_learn_step():
    agent = make_agent("dqn", seed=2)
    buf = make_buffer(agent)
    rng = np.random.default_rng(2)
    for _ in range(64):
        buf.add(rng.normal(size=16), np.zeros(4), int(rng.integers(2)), 1.0, rng.normal(size=16), np.zeros(4), False)
    gap = [l - t for l, t in zip(agent.online.arrays(), agent.target.arrays())]
    target_before = [t.copy() for t in agent.target.arrays()]
    learn_step(agent, buf, rng)
    for t0, t1, g, l in zip(target_before, agent.target.arrays(), gap, agent.online.arrays()):
        np.testing.assert_allclose(t1 - t0, agent.hp.tau * (l - t0), atol=1e-15)
        assert np.linalg.norm(t1 - t0) <= agent.hp.tau * np.linalg.norm(l - t0) + 1e-15


def test_dqn_sa_hold_rule():
    agent = make_agent("dqn_sa", seed=0)
    s = np.random.default_rng(0).normal(size=16)
    a_clean = greedy(agent.q_values(s))
    held = None
    actions = []
    for label in (0, 1, 1):
        a, held = dqn_sa_act(agent, s if label == 0 else -s, label, held)
        actions.append(a)
    assert actions == [a_clean] * 3
    a, held = dqn_sa_act(agent, s, 1, None)
    assert a == a_clean and held is None


def test_controller_sa_holds_and_dqn_ignores_labels():
    agent = make_agent("dqn_sa", seed=1)
    ctrl = Controller(agent, training=True, rng=np.random.default_rng(0))
    s = np.random.default_rng(1).normal(size=16)
    first = ctrl.act(s, [0, 0, 0, 0]).action
    assert ctrl.act(-s, [0, 0, 0, 1]).action == first
    plain = make_agent("dqn", seed=1)
    c2 = Controller(plain, training=False, rng=np.random.default_rng(0))
    assert c2.act(s).action == greedy(plain.q_values(s))
    with pytest.raises(UsageError):
        Controller(plain, training=True, rng=np.random.default_rng(0)).act(s)


def test_aux_classifier():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2000, 4))
    y = (x @ np.array([1.0, -2.0, 0.5, 0.0]) > 0).astype(int)
    _, acc = train_aux_classifier(x, y, seed=0)
    assert acc >= 0.99
    with pytest.raises(TrainingError):
        train_aux_classifier(x, np.zeros(2000), seed=0)


def test_checkpoint_round_trip(tmp_path):
    for kind in ("dqn_cf", "ciq"):
        agent = make_agent(kind, seed=3)
        if kind == "dqn_cf":
            agent.classifier, agent.classifier_accuracy = train_aux_classifier(
                np.r_[np.zeros((20, 16)), np.ones((20, 16))], np.r_[np.zeros(20), np.ones(20)], epochs=2)
        save_agent(agent, tmp_path / kind)
        back, manifest = load_agent(tmp_path / kind)
        assert manifest["agent_kind"] == kind and manifest["M"] == 4
        s = np.random.default_rng(0).normal(size=16)
        labels = np.array([0, 1, 0, 1])
        np.testing.assert_array_equal(agent.q_values(s, labels), back.q_values(s, labels))
        if kind == "dqn_cf":
            assert back.label_prob(s) == agent.label_prob(s)
        meta = json.loads((tmp_path / kind / "manifest.json").read_text())
        assert meta["hyperparameters"]["gamma"] == 0.99


def test_unknown_kind():
    with pytest.raises(ConfigError):
        make_agent("a3c")
