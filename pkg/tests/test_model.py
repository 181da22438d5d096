import dataclasses
import itertools
import math

import numpy as np
import pytest
from scipy import stats

from underdamped.model import (check_assumptions, choose_subset, minibatch_gradient,
                               minibatch_quadratic, parse_model, parse_stochastic_gradient,
                               parse_test_function, quadratic_potential, quadratic_sine_potential,
                               quadratic_sine_stochastic_gradient, zero_potential)
from underdamped.streams import RngStream

MODELS = ["quadratic-sine", "quadratic:1", "quadratic:2.5", "minibatch-quadratic:5,2", "zero:2"]


@pytest.fixture
def qs():
    return quadratic_sine_potential()


def test_quadratic_sine_values(qs):
    assert qs.grad(np.array([0.0]))[0] == 1.0
    assert qs.u(np.array([0.0])) == 0.0
    assert qs.grad(np.array([math.pi]))[0] == pytest.approx(math.pi + math.cos(math.pi), rel=1e-15)


def test_quadratic_values():
    q = quadratic_potential(1.0, 2)
    assert np.array_equal(q.grad(np.array([2.0, 0.0])), [2.0, 0.0])
    assert q.u(np.array([1.0, 1.0])) == 1.0
    assert np.array_equal(quadratic_potential(2.0, 3).hessian(np.ones(3)), 2 * np.eye(3))


@pytest.mark.parametrize("k", [0.0, -1.0])
def test_quadratic_rejects_nonpositive(k):
    with pytest.raises(ValueError):
        quadratic_potential(k)


@pytest.mark.parametrize("model_id", MODELS)
def test_gradient_matches_finite_differences(model_id):
    model = parse_model(model_id)
    d = model.dim
    rng = np.random.default_rng(0)
    eps = 1e-5
    for x in rng.uniform(-5, 5, size=(100, d)):
        fd = np.array([(model.u(x + eps * e) - model.u(x - eps * e)) / (2 * eps) for e in np.eye(d)])
        g = model.grad(x)
        assert np.allclose(fd, g, rtol=1e-6, atol=1e-6 * max(1.0, np.abs(g).max()))


@pytest.mark.parametrize("model_id", MODELS)
def test_hessian_matches_finite_differences(model_id):
    model = parse_model(model_id)
    d = model.dim
    eps = 1e-5
    for x in np.random.default_rng(1).uniform(-5, 5, size=(20, d)):
        fd = np.array([(model.grad(x + eps * e) - model.grad(x - eps * e)) / (2 * eps)
                       for e in np.eye(d)])
        assert np.allclose(fd, model.hessian(x), atol=1e-6)


@pytest.mark.parametrize("name", ["x", "v", "cos", "x2", "const:3"])
def test_test_function_gradient(name):
    tf = parse_test_function(name)
    eps = 1e-6
    for z in np.random.default_rng(2).uniform(-3, 3, size=(20, 4)):
        x, v = z[:2], z[2:]
        gx, gv = tf.grad_f(x, v)
        g = np.concatenate([gx, gv])
        for i in range(4):
            e = np.zeros(4)
            e[i] = eps
            fd = (tf.f((z + e)[:2], (z + e)[2:]) - tf.f((z - e)[:2], (z - e)[2:])) / (2 * eps)
            assert fd == pytest.approx(g[i], abs=1e-7)


def test_test_function_batches():
    x = np.arange(6.0).reshape(3, 2)
    assert np.array_equal(parse_test_function("x").f(x, -x), [0.0, 2.0, 4.0])
    assert np.array_equal(parse_test_function("const:2").f(x, x), [2.0, 2.0, 2.0])
    assert parse_test_function("one").constant == 1.0


@pytest.mark.parametrize("bad", ["y", "const:abc", ""])
def test_unknown_test_function(bad):
    with pytest.raises(ValueError):
        parse_test_function(bad)


@pytest.mark.parametrize("bad", ["banana", "quadratic:x", "minibatch-quadratic:5", "zero:q",
                                 "quadratic-sine:1", "quadratic:-1", "minibatch-quadratic:3,4"])
def test_unknown_model(bad):
    with pytest.raises(ValueError):
        parse_model(bad)


def test_registry_names():
    assert parse_model(" Quadratic-Sine ").name == "quadratic-sine"
    assert parse_model("quadratic").name == "quadratic:1"
    assert parse_model("zero").dim == 1
    assert parse_stochastic_gradient("quadratic:2").name == "exact(quadratic:2)"


def test_sg_trivial_value():
    sg = quadratic_sine_stochastic_gradient()
    assert sg.b(np.array([0.0]), (1.0, 0.0))[0] == 1.0
    assert sg.c1 is None


def test_sg_mean_at_one():
    sg = quadratic_sine_stochastic_gradient()
    s = RngStream(2024, 5)
    x = np.array([1.0])
    vals = np.array([sg.b(x, sg.sample_omega(s))[0] for _ in range(100_000)])
    se = vals.std(ddof=1) / math.sqrt(vals.size)
    assert abs(vals.mean() - (1 + math.cos(1.0))) <= 3 * se


def test_sg_variance_at_zero():
    sg = quadratic_sine_stochastic_gradient()
    s = RngStream(7)
    vals = np.array([sg.b(np.array([0.0]), sg.sample_omega(s))[0] for _ in range(100_000)])
    # chi-square standard error of a sample variance
    assert vals.var(ddof=1) == pytest.approx(0.16, abs=3 * 0.16 * math.sqrt(2 / vals.size))


@pytest.mark.parametrize("model_id", ["quadratic-sine", "minibatch-quadratic:5,2", "quadratic:1"])
def test_sg_unbiased_on_grid(model_id):
    sg = parse_stochastic_gradient(model_id)
    s = RngStream(11)
    for x0 in (-3.0, 0.5, 4.0):
        x = np.array([x0])
        diff = np.array([sg.b(x, sg.sample_omega(s))[0] for _ in range(20_000)]) - sg.base.grad(x)[0]
        se = diff.std(ddof=1) / math.sqrt(diff.size)
        assert abs(diff.mean()) <= 3 * se + 1e-15


def test_minibatch_growth_bound():
    _, sg = minibatch_quadratic(5, 2)
    s = RngStream(1)
    for x0 in np.linspace(-10, 10, 41):
        x = np.array([x0])
        for _ in range(10):
            assert abs(sg.b(x, sg.sample_omega(s))[0]) <= sg.c1 * (1 + abs(x0))


def test_full_batch_is_exact():
    parts = [lambda x, k=k: k * x for k in (1.0, 2.0, 3.0, 4.0)]
    x = np.array([1.5])
    assert minibatch_gradient(parts, 4, RngStream(0), x)[0] == pytest.approx(3.75, rel=1e-15)


def test_identical_parts():
    parts = [lambda x: np.array([0.7])] * 6
    for b in range(1, 7):
        assert minibatch_gradient(parts, b, RngStream(b), None)[0] == pytest.approx(0.7)


def test_three_parts_mean():
    parts = [lambda x, k=k: k * x for k in (1.0, 2.0, 3.0)]
    s = RngStream(3)
    vals = np.array([minibatch_gradient(parts, 1, s, np.array([1.0]))[0] for _ in range(30_000)])
    # enumerate the three outcomes: mean 2, variance 2/3
    assert abs(vals.mean() - 2.0) <= 3 * math.sqrt((2 / 3) / vals.size)


@pytest.mark.parametrize("batch", [0, 6])
def test_batch_out_of_range(batch):
    with pytest.raises(ValueError):
        choose_subset(5, batch, RngStream(0))
    with pytest.raises(ValueError):
        minibatch_quadratic(5, batch)


def test_subset_law():
    s = RngStream(99)
    n = 100_000
    counts = {c: 0 for c in itertools.combinations(range(5), 2)}
    for _ in range(n):
        c = choose_subset(5, 2, s)
        assert len(set(c)) == 2
        counts[tuple(sorted(c))] += 1
    freq = np.array(list(counts.values())) / n
    se = math.sqrt(0.1 * 0.9 / n)
    assert np.all(np.abs(freq - 0.1) <= 3 * se)
    assert stats.chisquare(np.array(list(counts.values()))).pvalue > 1e-3


def test_subset_consumes_batch_uniforms():
    s = RngStream(4)
    choose_subset(10, 3, s)
    assert s.counter == 3


def test_assumptions_quadratic():
    grid = np.linspace(-10, 10, 81)
    rep = check_assumptions(quadratic_potential(1.0), grid)
    assert rep.passed and rep.hessian_status == "checked"


def test_assumptions_quadratic_sine(qs):
    grid = np.linspace(-50, 50, 4001)
    assert check_assumptions(qs, grid).passed
    # the documented drift constants m = 0.5, c0 = 2 also hold
    assert check_assumptions(dataclasses.replace(qs, m=0.5, c0=2.0), grid).drift_ok.all()


def test_assumptions_drift_failure_detected(qs):
    grid = np.linspace(-5, 5, 1001)
    rep = check_assumptions(dataclasses.replace(qs, m=0.5, c0=0.1), grid)
    assert not rep.passed
    bad = rep.failures()["drift"][:, 0]
    # oracle: 0.5 x^2 + x cos x < -0.1 only for negative x near -0.9
    brute = grid[0.5 * grid**2 + grid * np.cos(grid) < -0.1]
    assert np.allclose(np.sort(bad), brute)


def test_assumptions_hessian_skipped():
    m = dataclasses.replace(zero_potential(), hessian=None)
    rep = check_assumptions(m, np.linspace(-1, 1, 5))
    assert rep.hessian_status == "skipped" and rep.hessian_ok is None
    assert "hessian" not in rep.failures()


def test_assumptions_empty_grid():
    with pytest.raises(ValueError):
        check_assumptions(quadratic_potential(1.0), [])
