import csv
import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from underdamped.estimator import (SLOPES_HEADER, SWEEP_HEADER, ErrorReport, ReferenceMean,
                                   SweepConfig, SweepError, _domain_half_width, _integrate,
                                   aggregate_errors, fit_slope, reference_mean, run_sweep,
                                   write_slopes_csv, write_sweep_csv)
from underdamped.integrators import EM, SGUBU, UBU, State
from underdamped.model import (parse_test_function, quadratic_potential, quadratic_sine_potential,
                               quadratic_sine_stochastic_gradient)


@pytest.fixture(scope="module")
def qs_ref():
    return reference_mean(quadratic_sine_potential(), parse_test_function("x"))


def make_config(**kw):
    base = dict(h_grid=[0.5, 0.25], total_time=50.0, trajectories=4, integrator=EM, gamma=2.0,
                model=quadratic_sine_potential(), f=parse_test_function("x"), master_seed=1,
                initial_state=State(0.2, -0.3), model_id="quadratic-sine", f_id="x")
    base.update(kw)
    return SweepConfig(**base)


def test_odd_observable_has_zero_mean():
    r = reference_mean(quadratic_potential(1.0), parse_test_function("x"))
    assert abs(r.value) <= r.abs_error_bound + 1e-16


def test_constant_observable():
    r = reference_mean(quadratic_sine_potential(), parse_test_function("const:1"))
    assert (r.value, r.abs_error_bound) == (1.0, 0.0)


def test_normalization_by_quadrature(qs_ref):
    # const:1 short-circuits, so integrate 1 through the general path
    m = quadratic_sine_potential()
    L, u_min, _ = _domain_half_width(m)
    one = parse_test_function("x")
    one = one.__class__(f=lambda x, v: np.ones(np.shape(x)[:-1]), grad_f=one.grad_f)
    value, _ = _integrate(m, one, L, u_min, 64, 16, 32)
    assert value == pytest.approx(1.0, abs=1e-13)


@pytest.mark.parametrize("k", [0.5, 1.0, 3.0])
def test_quadratic_moments(k):
    q = quadratic_potential(k)
    assert reference_mean(q, parse_test_function("x2")).value == pytest.approx(1 / k, rel=1e-12)
    assert reference_mean(q, parse_test_function("cos")).value == pytest.approx(
        math.exp(-0.5 / k), rel=1e-12)


def test_two_dimensional():
    r = reference_mean(quadratic_potential(2.0, 2), parse_test_function("x2"))
    assert r.value == pytest.approx(0.5, rel=1e-12)


def test_dimension_limit():
    with pytest.raises(ValueError):
        reference_mean(quadratic_potential(1.0, 3), parse_test_function("x"))


def test_quadratic_sine_against_trapezoid(qs_ref):
    x = np.linspace(-12, 12, 1_000_001)
    w = np.exp(-(0.5 * x**2 + np.sin(x)))
    oracle = np.trapezoid(x * w, x) / np.trapezoid(w, x)
    assert qs_ref.value == pytest.approx(oracle, abs=1e-8)
    assert qs_ref.value == pytest.approx(-0.5564803021474942, abs=1e-12)


def test_doubling_stays_within_bound(qs_ref):
    m = quadratic_sine_potential()
    L, u_min, _ = _domain_half_width(m)
    finer, _ = _integrate(m, parse_test_function("x"), L, u_min, 2048, 16, 128)
    assert abs(finer - qs_ref.value) <= qs_ref.abs_error_bound


def test_aggregate_hand_values():
    c = aggregate_errors(np.array([1.0, -1.0]), 0.5, 10)
    assert (c.mse, c.bias, c.variance, c.mse_stderr) == (1.0, 0.0, 2.0, 0.0)
    assert c.trajectories == 2 and c.diverged == 0


def test_aggregate_needs_two():
    with pytest.raises(SweepError):
        aggregate_errors(np.array([0.3]))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=200))
def test_mse_decomposition(errors):
    e = np.array(errors)
    c = aggregate_errors(e)
    m = len(e)
    assert c.mse == pytest.approx(c.bias**2 + c.variance * (m - 1) / m, rel=1e-12, abs=1e-9)
    assert c.mse_stderr == pytest.approx((e**2).std(ddof=1) / math.sqrt(m), rel=1e-12, abs=1e-12)


@pytest.mark.parametrize("kw", [dict(h_grid=[]), dict(h_grid=[0.5, 0.0]), dict(trajectories=1),
                                dict(total_time=0.25)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        make_config(**kw)


def test_step_count_rounds():
    c = make_config(total_time=1.0, h_grid=[0.3])
    assert c.n_steps(0.3) == 3
    assert make_config().n_steps(0.25) == 200


def test_constant_observable_sweep():
    rep = run_sweep(make_config(f=parse_test_function("const:3"), f_id="const:3"))
    assert np.all(rep.mse == 0) and np.all(rep.mse_stderr == 0)


def test_sweep_deterministic(qs_ref):
    a = run_sweep(make_config(reference=qs_ref))
    b = run_sweep(make_config(reference=qs_ref))
    assert a == b
    assert a.reference == qs_ref.value
    assert [c.n_steps for c in a.cells] == [100, 200]


def test_sweep_stochastic_gradient_uses_base_reference(qs_ref):
    rep = run_sweep(make_config(integrator=SGUBU, model=quadratic_sine_stochastic_gradient()))
    assert rep.reference == pytest.approx(qs_ref.value, abs=1e-14)


def test_all_diverged_cell():
    stiff = quadratic_potential(1e4)
    cfg = make_config(model=stiff, h_grid=[0.5], total_time=500.0,
                      reference=ReferenceMean(0.0, 0.0, "given"))
    with np.errstate(all="ignore"), pytest.raises(SweepError) as exc:
        run_sweep(cfg)
    assert exc.value.h == 0.5


@pytest.mark.parametrize("mse,slope", [(lambda h: h**2, 2.0), (lambda h: 4 * h**3, 3.0)])
def test_slope_of_power_law(mse, slope):
    h = 2.0 ** -np.arange(1, 7)
    assert fit_slope(ErrorReport.synthetic(h, mse(h))) == pytest.approx(slope, abs=1e-12)


def test_slope_with_constant_floor():
    h = 2.0 ** -np.arange(1, 7)
    rep = ErrorReport.synthetic(h, h**2 + 0.01)
    assert fit_slope(rep, subtract_floor=True, floor=0.01) == pytest.approx(2.0, abs=1e-9)
    # default floor is the smallest-h cell, which then drops out
    assert rep.floor_estimate == rep.mse[-1]
    assert fit_slope(rep, subtract_floor=True) > 2.0


def test_slope_window_and_minimum():
    h = 2.0 ** -np.arange(1, 7)
    rep = ErrorReport.synthetic(h, np.where(h > 0.1, h, h**2))
    assert fit_slope(rep, h_window=(2**-6, 2**-4)) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        fit_slope(rep, h_window=(2**-6, 2**-5))
    with pytest.raises(ValueError):
        fit_slope(ErrorReport.synthetic(h[:3], np.full(3, 1.0)), subtract_floor=True)


def test_report_cell_lookup():
    rep = ErrorReport.synthetic([0.5, 0.25], [1.0, 0.5])
    assert rep.cell(0.25).mse == 0.5
    with pytest.raises(KeyError):
        rep.cell(0.1)


def test_sweep_csv_format(qs_ref):
    rep = run_sweep(make_config(reference=qs_ref))
    buf = io.StringIO()
    write_sweep_csv([rep], buf)
    rows = list(csv.reader(io.StringIO(buf.getvalue())))
    assert rows[0] == SWEEP_HEADER
    assert len(rows) == 3
    row = dict(zip(SWEEP_HEADER, rows[1]))
    assert row["integrator"] == "em" and row["potential"] == "quadratic-sine" and row["N"] == "100"
    # 17 significant digits round-trip exactly
    assert float(row["mse"]) == rep.cells[0].mse
    assert float(row["bias"]) == rep.cells[0].bias


def test_slopes_csv_format():
    buf = io.StringIO()
    row = dict(zip(SLOPES_HEADER, ["ubu", "quadratic:1", "x2", 2.0, 7, 0.125, 0.5, True, 0.1,
                                   3, 1 / 3]))
    write_slopes_csv([row], buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == ",".join(SLOPES_HEADER)
    assert lines[1].endswith(",0.33333333333333331")
    assert ",True," in lines[1]


def test_ubu_beats_em_on_short_sweep(qs_ref):
    kw = dict(h_grid=[0.5], total_time=200.0, trajectories=50, reference=qs_ref)
    em = run_sweep(make_config(**kw)).cells[0]
    ubu = run_sweep(make_config(integrator=UBU, **kw)).cells[0]
    assert ubu.mse <= em.mse + 2 * math.hypot(ubu.mse_stderr, em.mse_stderr)


def test_floor_subtracted_is_squared_bias(qs_ref):
    rep = run_sweep(make_config(reference=qs_ref, trajectories=8))
    bias2 = np.array([c.bias**2 for c in rep.cells])
    assert np.allclose(rep.floor_subtracted_mse, bias2, rtol=1e-9, atol=1e-15)
    assert np.all(rep.statistical_floor <= rep.mse)
