"""Short runs of the stability and ergodicity diagnostics.

    python demos/diagnostics_tour.py
"""
import numpy as np

from underdamped.diagnostics import (TangentState, discrete_poisson_residual,
                                     lyapunov_drift_check, moment_stability_probe,
                                     sync_coupling_probe)
from underdamped.integrators import UBU, State
from underdamped.model import parse_test_function, quadratic_potential, quadratic_sine_potential
from underdamped.streams import RngStream

qs = quadratic_sine_potential()

g = np.linspace(-5, 5, 41)
x, v = np.meshgrid(g, g)
print(lyapunov_drift_check(quadratic_potential(1.0), 3.0,
                           np.column_stack([x.ravel(), v.ravel()])).verdict()[1])

print(moment_stability_probe(UBU, qs, 2.0, 0.25, 2.0, 5000, 200, 1,
                             initial=State(0.2, -0.3)).verdict()[1])

gap = sync_coupling_probe(qs, 2.0, State(0.0, 0.0), State(1.0, -1.0), 10.0, 0.05, RngStream(3))
print(f"synchronous coupling: gap decays at rate {gap.fit.rate:.3f}")

res = discrete_poisson_residual(qs, 2.0, parse_test_function("x"), 0.25, [(0.0, 0.0)],
                                60, 2000, 5)
print(res.verdict()[1])
print(f"tangent state at t = 0: |Q| + |P| = {TangentState.position(1).norm():g}")
