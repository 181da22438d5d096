import dataclasses
import math

import numpy as np
import pytest

from underdamped.brownian import damping, ou_covariance, position_gain
from underdamped.integrators import (EM, INTEGRATORS, SGEM, SGUBU, UBU, State, StepParams,
                                     TrajectoryDivergence, em_step, parse_integrator,
                                     sgem_step, sgubu_step, simulate_checkpoints,
                                     simulate_ensemble, simulate_time_average, step, ubu_step)
from underdamped.model import (exact_stochastic_gradient, minibatch_quadratic,
                               parse_test_function, quadratic_potential, quadratic_sine_potential,
                               quadratic_sine_stochastic_gradient, zero_potential)
from underdamped.streams import RngStream

KINDS = [EM, UBU, SGEM, SGUBU]


def python_only(model):
    """Same model with the kernel code stripped, forcing the NumPy path."""
    if hasattr(model, "base"):
        return dataclasses.replace(model, kernel_code=None,
                                   base=dataclasses.replace(model.base, kernel_code=None))
    return dataclasses.replace(model, kernel_code=None)


@pytest.fixture
def qs():
    return quadratic_sine_potential()


@pytest.fixture
def qsg():
    return quadratic_sine_stochastic_gradient()


def test_kind_metadata():
    assert [(k.strong_order, k.moment_order) for k in KINDS] == [(1, 1), (2, 2), (1, 1), (2, 2)]
    assert parse_integrator(" SG-UBU ") is SGUBU
    assert set(INTEGRATORS) == {"em", "ubu", "sg-em", "sg-ubu"}
    with pytest.raises(ValueError):
        parse_integrator("baoab")


@pytest.mark.parametrize("kw", [dict(gamma=0.0, h=0.1), dict(gamma=1.0, h=-0.1),
                                dict(gamma=1.0, h=0.6)])
def test_bad_step_params(kw):
    with pytest.raises(ValueError):
        StepParams(**kw)


def test_h_max_override():
    assert StepParams(1.0, 1.0, h_max=2.0).h == 1.0


def test_state_shapes():
    assert State(1.0, 2.0).dim == 1
    with pytest.raises(ValueError):
        State([1.0, 2.0], [1.0])


def test_em_zero_gradient_noiseless():
    out = em_step(State(1.0, 2.0), zero_potential(), StepParams(1.0, 0.5, noise_scale=0.0),
                  RngStream(0))
    assert (out.x[0], out.v[0]) == (2.0, 1.0)


def test_em_quadratic_sine_noiseless(qs):
    out = em_step(State(0.0, 0.0), qs, StepParams(2.0, 0.25, noise_scale=0.0), RngStream(0))
    assert out.x[0] == 0.0
    assert out.v[0] == pytest.approx(-0.25, abs=1e-16)


def test_ubu_zero_gradient_noiseless():
    out = ubu_step(State(0.0, 1.0), zero_potential(), StepParams(2.0, 0.5, noise_scale=0.0),
                   RngStream(0))
    f = (1 - math.exp(-0.5)) / 2
    assert out.v[0] == pytest.approx(math.exp(-1.0), rel=1e-15)
    assert out.x[0] == pytest.approx(f + f * math.exp(-0.5), rel=1e-15)
    assert out.x[0] == pytest.approx(0.31606, abs=1e-5)


@pytest.mark.parametrize("kind", KINDS)
def test_zero_step_is_identity(kind, qsg):
    st0 = State(0.3, -1.2)
    out = step(kind, st0, qsg, StepParams(2.0, 0.0), RngStream(1))
    assert np.array_equal(out.x, st0.x) and np.array_equal(out.v, st0.v)


def test_exact_sg_matches_em(qs):
    sg = exact_stochastic_gradient(qs)
    p = StepParams(2.0, 0.25)
    a = em_step(State(0.5, 0.1), qs, p, RngStream(4))
    b = sgem_step(State(0.5, 0.1), sg, p, RngStream(4))
    assert np.array_equal(a.x, b.x) and np.array_equal(a.v, b.v)
    c = ubu_step(State(0.5, 0.1), qs, p, RngStream(4))
    d = sgubu_step(State(0.5, 0.1), sg, p, RngStream(4))
    assert np.array_equal(c.x, d.x) and np.array_equal(c.v, d.v)


def test_sgem_drift_mean_at_zero(qsg):
    h, n = 0.25, 100_000
    p = StepParams(2.0, h, noise_scale=0.0)
    s = RngStream(8)
    dv = np.array([sgem_step(State(0.0, 0.0), qsg, p, s).v[0] for _ in range(n)])
    assert abs(dv.mean() + h) <= 3 * dv.std(ddof=1) / math.sqrt(n)


def test_ubu_one_step_mean_quadratic():
    q = quadratic_potential(1.0)
    p = StepParams(2.0, 0.25)
    n = 100_000
    xs, vs, _ = simulate_checkpoints(UBU, q, p, [1], 5, np.arange(n), State(0.7, -0.4))
    det = ubu_step(State(0.7, -0.4), q, dataclasses.replace(p, noise_scale=0.0), RngStream(0))
    for got, want in ((xs[:, 0, 0], det.x[0]), (vs[:, 0, 0], det.v[0])):
        assert abs(got.mean() - want) <= 3 * got.std(ddof=1) / math.sqrt(n)


def test_ubu_zero_gradient_one_step_law():
    gamma, h, n = 2.0, 0.5, 1_000_000
    x0, v0 = 0.3, -1.1
    xs, vs, _ = simulate_checkpoints(UBU, zero_potential(), StepParams(gamma, h), [1], 12,
                                     np.arange(n), State(x0, v0))
    dx = xs[:, 0, 0] - (x0 + position_gain(gamma, h) * v0)
    dv = vs[:, 0, 0] - damping(gamma, h) * v0
    c = ou_covariance(gamma, h)
    for sample, want in ((dx, 0.0), (dv, 0.0), (dx * dx, c.sigma_xx), (dx * dv, c.sigma_xv),
                         (dv * dv, c.sigma_vv)):
        assert abs(sample.mean() - want) <= 3 * sample.std(ddof=1) / math.sqrt(n)


@pytest.mark.parametrize("kind", KINDS)
def test_kernel_matches_numpy(kind, qsg):
    f = parse_test_function("cos")
    p = StepParams(2.0, 0.125)
    ids = [0, 5, 9]
    init = State(0.2, -0.3)
    fast = simulate_ensemble(kind, qsg, p, f, 3000, 77, ids, init, burn_in=10)
    slow = simulate_ensemble(kind, python_only(qsg), p, python_only(f), 3000, 77, ids, init,
                             burn_in=10)
    assert np.array_equal(fast.counters, slow.counters)
    assert np.allclose(fast.x, slow.x, rtol=1e-12, atol=1e-12)
    assert np.allclose(fast.v, slow.v, rtol=1e-12, atol=1e-12)
    assert np.allclose(fast.averages, slow.averages, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("kind", [SGEM, SGUBU])
def test_kernel_matches_numpy_minibatch(kind):
    _, sg = minibatch_quadratic(7, 3)
    f = parse_test_function("x2")
    p = StepParams(2.0, 0.25)
    fast = simulate_ensemble(kind, sg, p, f, 500, 3, [1, 2], State(1.0, 0.0))
    slow = simulate_ensemble(kind, python_only(sg), p, python_only(f), 500, 3, [1, 2],
                             State(1.0, 0.0))
    assert np.array_equal(fast.counters, slow.counters)
    assert np.allclose(fast.averages, slow.averages, rtol=1e-12)


@pytest.mark.parametrize("kind", KINDS)
def test_checkpoints_kernel_matches_numpy(kind, qsg):
    p = StepParams(2.0, 0.25)
    ck = [0, 1, 1, 7, 40]
    a = simulate_checkpoints(kind, qsg, p, ck, 1, [0, 3], State(0.2, -0.3))
    b = simulate_checkpoints(kind, python_only(qsg), p, ck, 1, [0, 3], State(0.2, -0.3))
    assert np.allclose(a[0], b[0], rtol=1e-12) and np.allclose(a[1], b[1], rtol=1e-12)
    assert np.all(a[0][:, 0, 0] == 0.2)


def test_checkpoint_agrees_with_time_average(qs):
    p = StepParams(2.0, 0.25)
    res = simulate_ensemble(UBU, qs, p, parse_test_function("x"), 100, 9, [4], State(0.2, -0.3))
    xs, vs, _ = simulate_checkpoints(UBU, qs, p, [100], 9, [4], State(0.2, -0.3))
    assert xs[0, 0, 0] == res.x[0, 0] and vs[0, 0, 0] == res.v[0, 0]


def test_bad_checkpoints(qs):
    with pytest.raises(ValueError):
        simulate_checkpoints(EM, qs, StepParams(2.0, 0.25), [3, 1], 0, [0], State(0.0, 0.0))


def test_ensemble_order_independent(qs):
    p = StepParams(2.0, 0.25)
    f = parse_test_function("x")
    both = simulate_ensemble(EM, qs, p, f, 1000, 2, [3, 1], State(0.0, 0.0))
    one = simulate_ensemble(EM, qs, p, f, 1000, 2, [1], State(0.0, 0.0))
    assert both.averages[1] == one.averages[0]


def test_time_average_advances_stream(qs):
    s = RngStream(1, 2)
    simulate_time_average(EM, qs, StepParams(2.0, 0.25), parse_test_function("x"), 10, s,
                          State(0.0, 0.0))
    assert s.counter > 0
    assert simulate_time_average(EM, qs, StepParams(2.0, 0.25), parse_test_function("x"), 10,
                                 RngStream(1, 2, s.counter), State(0.0, 0.0))[0] != 0


@pytest.mark.parametrize("kind", KINDS)
def test_constant_f_average(kind, qsg):
    avg, _ = simulate_time_average(kind, qsg, StepParams(2.0, 0.25), parse_test_function("const:2.5"),
                                   5000, RngStream(0), State(0.2, -0.3))
    assert avg == 2.5


@pytest.mark.parametrize("fast", [True, False])
def test_single_step_average_is_initial_value(fast, qs):
    f = parse_test_function("x")
    m = qs if fast else python_only(qs)
    f = f if fast else python_only(f)
    avg, final = simulate_time_average(EM, m, StepParams(2.0, 0.25), f, 1, RngStream(0),
                                       State(0.2, -0.3))
    assert avg == 0.2
    assert final.x[0] == pytest.approx(0.2 - 0.25 * 0.3)


def test_time_average_argument_checks(qs):
    f = parse_test_function("x")
    with pytest.raises(ValueError):
        simulate_time_average(EM, qs, StepParams(2.0, 0.25), f, 0, RngStream(0), State(0.0, 0.0))
    with pytest.raises(ValueError):
        simulate_time_average(EM, qs, StepParams(2.0, 0.25), f, 5, RngStream(0), State(0.0, 0.0),
                              burn_in=5)


def test_long_run_quadratic_mean_is_zero():
    q = quadratic_potential(1.0)
    res = simulate_ensemble(EM, q, StepParams(2.0, 0.01), parse_test_function("x"), 1_000_000,
                            31, np.arange(20), State(0.0, 0.0))
    # batch means: one batch per independent trajectory
    a = res.averages
    assert abs(a.mean()) <= 3 * a.std(ddof=1) / math.sqrt(a.size)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
@pytest.mark.parametrize("kind", [EM, UBU])
def test_divergence_step_reported(kind):
    stiff = quadratic_potential(1e4)
    p = StepParams(2.0, 0.5)
    f = parse_test_function("x")
    fast = simulate_ensemble(kind, stiff, p, f, 1000, 0, [0], State(1.0, 0.0))
    assert fast.diverged[0] > 0 and np.isnan(fast.averages[0])
    with pytest.raises(TrajectoryDivergence) as exc:
        simulate_time_average(kind, python_only(stiff), p, python_only(f), 1000, RngStream(0, 0),
                              State(1.0, 0.0))
    assert exc.value.step == fast.diverged[0]
    xs, _, div = simulate_checkpoints(kind, stiff, p, [1, 1000], 0, [0], State(1.0, 0.0))
    assert div[0] == fast.diverged[0] and np.isnan(xs[0, 1, 0]) and np.isfinite(xs[0, 0, 0])


def test_diffusion_estimate_linear(qs):
    # E|Z_N - Z_0|^2 <= C N h for N h <= 1
    h = 2.0**-7
    ck = [2**k for k in range(1, 8)]
    xs, vs, _ = simulate_checkpoints(UBU, qs, StepParams(2.0, h), ck, 5, np.arange(20_000),
                                     State(0.2, -0.3))
    msd = ((xs[..., 0] - 0.2) ** 2 + (vs[..., 0] + 0.3) ** 2).mean(axis=0)
    slope = np.polyfit(np.log(np.array(ck) * h), np.log(msd), 1)[0]
    assert slope <= 1.3
