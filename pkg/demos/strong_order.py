"""Strong convergence of EM and UBU on one shared Brownian path per sample.

    python demos/strong_order.py
"""
from underdamped.diagnostics import strong_order_probe
from underdamped.integrators import EM, UBU
from underdamped.model import quadratic_sine_potential

model = quadratic_sine_potential()
h_grid = [2.0**-k for k in range(4, 9)]

for kind in (EM, UBU):
    res = strong_order_probe(kind, model, 2.5, h_grid, 1.0, 500, 7)
    print(f"{kind.tag}: fitted order {res.slope:.2f}")
    for h, e in zip(res.h, res.rms):
        print(f"  h = {h:<10g} rms error {e:.3e}")
