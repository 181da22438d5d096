"""Mean-square error of time averages versus step size, small enough to run in seconds.

At this short horizon only the largest step shows a clear bias (EM and SG-EM
at h = 1/2); below that every scheme sits at the variance of the time average.
The CLI ``sweep`` command runs the long version.

    python demos/time_average_error.py
"""
from underdamped.estimator import SweepConfig, reference_mean, run_sweep
from underdamped.integrators import EM, SGEM, SGUBU, UBU, State
from underdamped.model import (parse_test_function, quadratic_sine_potential,
                               quadratic_sine_stochastic_gradient)

base = quadratic_sine_potential()
sg = quadratic_sine_stochastic_gradient()
f = parse_test_function("x")
ref = reference_mean(base, f)
print(f"pi(f) = {ref.value:.12f}")

h_grid = [2.0**-k for k in range(1, 5)]
for kind, model in ((EM, base), (UBU, base), (SGEM, sg), (SGUBU, sg)):
    rep = run_sweep(SweepConfig(h_grid, 2000.0, 20, kind, 2.0, model, f, 1,
                                State(0.2, -0.3), reference=ref))
    cells = "  ".join(f"{c.mse:.2e}" for c in rep.cells)
    print(f"{kind.cli_name:7s} mse at h = 1/2 .. 1/16: {cells}")
