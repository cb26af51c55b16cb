import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ciqlab.errors import ConfigError, ShapeError, UsageError
from ciqlab.interference import (Interference, InterferencePipeline, LabelProcess, RunningVariance,
                                 apply_interference, compose, compose_multi, fgsm, record_variance,
                                 sample_label, sample_labels)
from ciqlab.nn import Mlp, mlp_new

vec4 = st.lists(st.floats(-5, 5), min_size=4, max_size=4).map(np.array)


def test_label_process_validation():
    with pytest.raises(ConfigError):
        LabelProcess("bernoulli", p=1.2)
    with pytest.raises(ConfigError):
        LabelProcess("poisson")
    with pytest.raises(ConfigError):
        LabelProcess("cosine", period=0)


def test_bernoulli_extremes():
    rng = np.random.default_rng(0)
    assert not sample_labels(LabelProcess(p=0.0), 1000, rng).any()
    assert sample_labels(LabelProcess(p=1.0), 1000, rng).all()
    assert sample_label(LabelProcess(p=0.0), 0, rng) == 0


def test_scalar_and_vector_sampling_agree():
    proc_a, proc_b = LabelProcess("markov"), LabelProcess("markov")
    a = [sample_label(proc_a, t, np.random.default_rng(t)) for t in range(0)]
    assert a == []
    rng1, rng2 = np.random.default_rng(4), np.random.default_rng(4)
    seq = [sample_label(proc_a, t, rng1) for t in range(500)]
    np.testing.assert_array_equal(seq, sample_labels(proc_b, 500, rng2))
    assert proc_a.prev == proc_b.prev


def test_markov_stationary_and_cosine_rate():
    assert LabelProcess("markov", p11=0.55, p10=0.05).stationary == pytest.approx(0.1)
    cos = LabelProcess("cosine", low=0.0, high=0.3, period=10)
    assert cos.rate(0) == pytest.approx(0.3)
    assert cos.rate(5) == pytest.approx(0.0)
    assert cos.rate(10) == pytest.approx(0.3)
    freq = sample_labels(cos, 200_000, np.random.default_rng(1)).mean()
    assert abs(freq - 0.15) < 0.005


def test_markov_persistence():
    labels = sample_labels(LabelProcess("markov", p11=0.55, p10=0.05), 200_000, np.random.default_rng(2))
    prev, cur = labels[:-1], labels[1:]
    assert abs(cur[prev == 1].mean() - 0.55) < 0.02
    assert abs(cur[prev == 0].mean() - 0.05) < 0.005


def test_running_variance_examples():
    acc = RunningVariance()
    with pytest.raises(UsageError):
        acc.variance()
    record_variance(acc, [0.0, 0.0])
    record_variance(acc, [2.0, 2.0])
    np.testing.assert_allclose(acc.variance(), [2.0, 2.0])
    const = RunningVariance()
    for _ in range(10):
        record_variance(const, [3.0, -1.0])
    np.testing.assert_array_equal(const.variance(), [0.0, 0.0])
    with pytest.raises(ShapeError):
        record_variance(const, [1.0, 2.0, 3.0])


def test_running_variance_monte_carlo():
    x = np.random.default_rng(5).standard_normal((100_000, 3))
    acc = RunningVariance()
    for row in x:
        record_variance(acc, row)
    np.testing.assert_allclose(acc.variance(), 1.0, atol=0.02)
    np.testing.assert_allclose(acc.variance(), x.var(axis=0, ddof=1), rtol=1e-10)


@given(vec4)
def test_simple_generators(x):
    rng = np.random.default_rng(0)
    np.testing.assert_array_equal(apply_interference(Interference("blackout"), x, None, rng), np.zeros(4))
    np.testing.assert_array_equal(apply_interference(Interference("none"), x, None, rng), x)
    prev = x + 1.0
    np.testing.assert_array_equal(apply_interference(Interference("frozen"), x, prev, rng), prev)
    bounds = np.array([2.4, 10.0, 0.21, 10.0])
    np.testing.assert_array_equal(apply_interference(Interference("whiteout", bounds=bounds), x, None, rng), bounds)


def test_gaussian_zero_variance_and_uninitialized():
    x = np.array([0.1, -0.2, 0.3, 0.4])
    g = Interference("gaussian")
    with pytest.raises(UsageError):
        apply_interference(g, x, None, np.random.default_rng(0))
    record_variance(g.variance, x)
    record_variance(g.variance, x)
    np.testing.assert_array_equal(apply_interference(g, x, None, np.random.default_rng(0)), x)


def test_gaussian_noise_scale():
    g = Interference("gaussian")
    for v in ([0.0, 0.0], [2.0, 4.0]):
        record_variance(g.variance, v)
    rng = np.random.default_rng(1)
    out = np.array([apply_interference(g, np.zeros(2), None, rng) for _ in range(40_000)])
    np.testing.assert_allclose(out.var(axis=0), g.variance.variance(), rtol=0.03)


def test_whiteout_needs_bounds_and_adversary_needs_target():
    with pytest.raises(UsageError):
        apply_interference(Interference("whiteout"), np.zeros(4), None, np.random.default_rng(0))
    with pytest.raises(UsageError):
        apply_interference(Interference("adversarial"), np.zeros(4), None, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        Interference("snow")
    with pytest.raises(ConfigError):
        Interference("adversarial", epsilon=-1)


def linear_q(w: np.ndarray) -> Mlp:
    return Mlp([w.copy()], [np.zeros(w.shape[0])])


def fgsm_oracle(w, x, eps):
    q = w @ x
    p = np.exp(q - q.max())
    p /= p.sum()
    onehot = np.zeros_like(q)
    onehot[np.argmax(q)] = 1.0
    return x + eps * np.sign(w.T @ (p - onehot))


@given(st.integers(0, 10_000), st.floats(0.0, 1.0))
def test_fgsm_linear_closed_form(seed, eps):
    rng = np.random.default_rng(seed)
    w, x = rng.normal(size=(3, 4)), rng.normal(size=4)
    out = fgsm(linear_q(w), x, eps)
    np.testing.assert_allclose(out, fgsm_oracle(w, x, eps), rtol=0, atol=1e-12)
    assert np.max(np.abs(out - x)) <= eps + 1e-12


def test_fgsm_zero_eps_and_stacked_slot():
    rng = np.random.default_rng(3)
    w = rng.normal(size=(2, 8))
    x, hist = rng.normal(size=4), rng.normal(size=4)
    np.testing.assert_array_equal(fgsm(linear_q(w), x, 0.0), x)
    out = fgsm(linear_q(w), x, 0.1, history=hist)
    full = fgsm_oracle(w, np.concatenate([hist, x]), 0.1)
    np.testing.assert_allclose(out, full[4:], atol=1e-12)


@settings(max_examples=30)
@given(st.integers(0, 10_000), st.floats(0.0, 2.0))
def test_fgsm_bounded_on_relu_nets(seed, eps):
    rng = np.random.default_rng(seed)
    net = mlp_new([4, 16, 16, 2], seed=seed)
    x = rng.normal(size=4)
    out = fgsm(net, x, eps)
    # x + eps is rounded to the float grid, so allow one ulp at the larger magnitude on top of eps
    assert np.all(np.abs(out - x) <= eps + np.spacing(np.maximum(np.abs(x), np.abs(out))))


@given(vec4, vec4, vec4)
def test_compose_identities(x, a, b):
    np.testing.assert_array_equal(compose(x, 0, a), x)
    np.testing.assert_array_equal(compose(x, 1, a), a)
    for i2 in (0, 1):
        np.testing.assert_array_equal(compose_multi(x, 0, i2, a, b), x)
    np.testing.assert_array_equal(compose_multi(x, 1, 1, a, b), a)
    np.testing.assert_array_equal(compose_multi(x, 1, 0, a, b), b)


def test_pipeline_eq1_identity():
    rng = np.random.default_rng(7)
    g = Interference("gaussian")
    pipe = InterferencePipeline(g, LabelProcess(p=0.5), rng)
    xs = rng.normal(size=(500, 4))
    for t, x in enumerate(xs):
        ev = pipe(x, t)
        if ev.label == 0:
            assert ev.delivered.tobytes() == x.tobytes()
    assert pipe.log == ["t=0: gaussian-variance-uninitialized"]


def test_pipeline_frozen_persistence():
    rng = np.random.default_rng(0)
    pipe = InterferencePipeline(Interference("frozen"), LabelProcess(p=0.0), rng)
    xs = rng.normal(size=(20, 4))
    pipe(xs[0], 0)
    pipe(xs[1], 1)
    for t in range(2, 20):
        ev = pipe(xs[t], t, label=1)
        np.testing.assert_array_equal(ev.delivered, xs[1])


def test_pipeline_frozen_at_episode_start():
    pipe = InterferencePipeline(Interference("frozen"), LabelProcess(p=1.0), np.random.default_rng(0))
    ev = pipe(np.ones(4), 0)
    np.testing.assert_array_equal(ev.delivered, np.zeros(4))
    assert ev.note == "frozen-without-predecessor"
    pipe.reset_episode()
    assert pipe(np.ones(4), 1).note == "frozen-without-predecessor"


def test_pipeline_mixture_uses_both_types():
    rng = np.random.default_rng(1)
    pipe = InterferencePipeline(Interference("blackout"), LabelProcess(p=1.0), rng,
                                second=Interference("whiteout", bounds=np.full(4, 9.0)),
                                type_labels=LabelProcess(p=0.5))
    kinds = [pipe(np.ones(4), t).kind for t in range(400)]
    assert 150 < kinds.count("blackout") < 250
    assert kinds.count("blackout") + kinds.count("whiteout") == 400
