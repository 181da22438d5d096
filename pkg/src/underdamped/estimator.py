"""Reference means, mean-square-error sweeps and slope fits.

The target factorizes as ``exp(-U(x)) dx`` times a standard Gaussian in
``v``, so reference means use composite Gauss-Legendre panels in ``x`` and
Gauss-Hermite nodes in ``v``, doubled until successive values agree.

A sweep runs ``M`` independent trajectories per step size and reports the
statistics of ``e = time average - pi(f)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from numpy.polynomial.legendre import leggauss

from .integrators import IntegratorKind, State, StepParams, simulate_ensemble
from .model import PotentialModel, StochasticGradientModel, TestFunction

__all__ = [
    "ReferenceMean", "reference_mean", "SweepConfig", "ErrorCell", "ErrorReport",
    "aggregate_errors", "run_sweep", "fit_slope", "fit_loglog",
    "write_sweep_csv", "write_slopes_csv", "SWEEP_HEADER", "SLOPES_HEADER",
    "SweepError",
]

SWEEP_HEADER = ["integrator", "potential", "f", "gamma", "seed", "h", "N", "M",
                "mse", "mse_stderr", "bias", "variance", "diverged"]
SLOPES_HEADER = ["integrator", "potential", "f", "gamma", "seed", "h_lo", "h_hi",
                 "floor_subtracted", "floor", "n_cells", "slope"]


class SweepError(RuntimeError):
    """A sweep cell could not produce a statistic (e.g. every trajectory diverged)."""

    def __init__(self, message, h=None):
        super().__init__(message)
        self.h = h


# -- reference mean ---------------------------------------------------------

@dataclass(frozen=True)
class ReferenceMean:
    value: float
    abs_error_bound: float
    method: str


def _domain_half_width(model: PotentialModel, tail=1e-17):
    """Smallest tried L with exp(-(U - min U)) <= tail on the box boundary."""
    d = model.dim
    L = 4.0
    for _ in range(40):
        edge = np.linspace(-L, L, 201)
        if d == 1:
            inner = edge[:, None]
            boundary = np.array([[-L], [L]])
        else:
            a, b = np.meshgrid(edge, edge, indexing="ij")
            inner = np.stack([a.ravel(), b.ravel()], axis=-1)
            side = np.full_like(edge, L)
            boundary = np.concatenate([
                np.stack([edge, side], -1), np.stack([edge, -side], -1),
                np.stack([side, edge], -1), np.stack([-side, edge], -1)])
        u_min = float(np.min(model.u(inner)))
        gap = float(np.min(model.u(boundary))) - u_min
        if gap >= -math.log(tail):
            return L, u_min, math.exp(-gap)
        L *= 1.25
    raise ValueError("potential does not confine within |x| <= 1e4; no reference mean")


def _tensor_nodes(nodes, weights, d):
    if d == 1:
        return nodes[:, None], weights
    a, b = np.meshgrid(nodes, nodes, indexing="ij")
    wa, wb = np.meshgrid(weights, weights, indexing="ij")
    return np.stack([a.ravel(), b.ravel()], axis=-1), (wa * wb).ravel()


def _x_rule(L, panels, order, d):
    t, w = leggauss(order)
    edges = np.linspace(-L, L, panels + 1)
    half = 0.5 * (edges[1:] - edges[:-1])
    mid = 0.5 * (edges[1:] + edges[:-1])
    nodes = (mid[:, None] + half[:, None] * t[None, :]).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    return _tensor_nodes(nodes, weights, d)


def _v_rule(n, d):
    t, w = hermegauss(n)
    return _tensor_nodes(t, w / w.sum(), d)


def _integrate(model, f, L, u_min, panels, order, n_v, chunk=1 << 22):
    X, wx = _x_rule(L, panels, order, model.dim)
    V, wv = _v_rule(n_v, model.dim)
    dens = wx * np.exp(-(model.u(X) - u_min))
    rows = max(1, chunk // len(wv))
    num = 0.0
    mag = 0.0
    for s in range(0, len(wx), rows):
        xs = X[s:s + rows]
        vals = np.broadcast_to(np.asarray(f.f(xs[:, None, :], V[None, :, :]), dtype=float),
                               (len(xs), len(wv)))
        fx = vals @ wv
        num += float(dens[s:s + rows] @ fx)
        mag += float(dens[s:s + rows] @ (np.abs(vals) @ wv))
    z = float(dens.sum())
    return num / z, mag / z


def reference_mean(model: PotentialModel, f: TestFunction, tol: float = 1e-13,
                   max_levels: int = 7) -> ReferenceMean:
    """pi(f) for d <= 2 by resolution doubling.

    ``abs_error_bound`` covers the last doubling difference (with a
    safety factor), round-off in the weighted sum and the truncated tails.
    """
    d = model.dim
    if d > 2:
        raise ValueError(f"reference_mean supports d <= 2 (tensor quadrature), got d={d}")
    if f.constant is not None:
        return ReferenceMean(float(f.constant), 0.0, "constant observable")
    L, u_min, edge = _domain_half_width(model)
    panels, order, n_v = (8, 16, 16) if d == 1 else (4, 12, 12)
    prev, _ = _integrate(model, f, L, u_min, panels, order, n_v)
    diffs = []
    for _ in range(max_levels):
        panels *= 2
        n_v = min(2 * n_v, 128 if d == 1 else 48)
        value, mag = _integrate(model, f, L, u_min, panels, order, n_v)
        diffs.append(abs(value - prev))
        prev = value
        noise = 64 * np.finfo(float).eps * max(mag, 1.0)
        if diffs[-1] <= max(tol * max(abs(value), 1.0), noise):
            bound = 4.0 * diffs[-1] + noise + edge * (2 * L) ** d * max(mag, 1.0)
            method = (f"gauss-legendre x[{-L:g},{L:g}]^{d} ({panels} panels x {order}), "
                      f"gauss-hermite v ({n_v})")
            return ReferenceMean(float(value), float(bound), method)
        if len(diffs) >= 3 and diffs[-1] >= diffs[-2] >= diffs[-3]:
            break
    raise ValueError(f"reference quadrature did not converge (doubling differences {diffs})")


# -- sweeps -----------------------------------------------------------------

@dataclass
class SweepConfig:
    """One integrator over a grid of step sizes at fixed horizon T (N = round(T/h))."""

    h_grid: list
    total_time: float
    trajectories: int
    integrator: IntegratorKind
    gamma: float
    model: PotentialModel | StochasticGradientModel
    f: TestFunction
    master_seed: int
    initial_state: State
    model_id: str = ""
    f_id: str = ""
    burn_in: int = 0
    reference: ReferenceMean | None = None

    def __post_init__(self):
        self.h_grid = [float(h) for h in self.h_grid]
        if not self.h_grid:
            raise ValueError("h_grid is empty")
        if any(not h > 0 for h in self.h_grid):
            raise ValueError(f"every h must be positive: {self.h_grid}")
        if self.trajectories < 2:
            raise ValueError("need at least 2 trajectories")
        if self.total_time < max(self.h_grid):
            raise ValueError("total_time must be at least max(h_grid)")
        if not self.model_id:
            self.model_id = self.model.name
        if not self.f_id:
            self.f_id = self.f.name

    def n_steps(self, h):
        return max(1, int(round(self.total_time / h)))


@dataclass(frozen=True)
class ErrorCell:
    h: float
    n_steps: int
    trajectories: int  # finite trajectories entering the statistics
    mse: float
    mse_stderr: float
    bias: float
    variance: float  # sample variance, ddof = 1
    diverged: int = 0


def aggregate_errors(errors, h: float = float("nan"), n_steps: int = 0,
                     diverged: int = 0) -> ErrorCell:
    """Statistics of per-trajectory errors ``e`` (non-finite entries must be removed)."""
    e = np.asarray(errors, dtype=float)
    m = e.size
    if m < 2:
        raise SweepError(f"need at least 2 finite trajectories, got {m}", h)
    sq = e * e
    return ErrorCell(
        h=float(h), n_steps=int(n_steps), trajectories=int(m),
        mse=float(sq.mean()), mse_stderr=float(sq.std(ddof=1) / math.sqrt(m)),
        bias=float(e.mean()), variance=float(e.var(ddof=1)), diverged=int(diverged))


@dataclass
class ErrorReport:
    integrator: str
    potential: str
    f: str
    gamma: float
    seed: int
    reference: float
    cells: list = field(default_factory=list)

    @property
    def h(self):
        return np.array([c.h for c in self.cells])

    @property
    def mse(self):
        return np.array([c.mse for c in self.cells])

    @property
    def mse_stderr(self):
        return np.array([c.mse_stderr for c in self.cells])

    @property
    def floor_estimate(self):
        """mse at the smallest h."""
        return self.cells[int(np.argmin(self.h))].mse

    @property
    def statistical_floor(self):
        """Per-cell variance part of the mse, ``variance (M - 1) / M``."""
        return np.array([c.variance * (c.trajectories - 1) / c.trajectories
                         for c in self.cells])

    @property
    def floor_subtracted_mse(self):
        """mse minus :attr:`statistical_floor`, i.e. the squared sample bias."""
        return self.mse - self.statistical_floor

    def cell(self, h):
        for c in self.cells:
            if math.isclose(c.h, h, rel_tol=1e-12):
                return c
        raise KeyError(h)

    @classmethod
    def synthetic(cls, h, mse):
        """Report with only ``h`` and ``mse`` filled in (for fitting checks)."""
        cells = [ErrorCell(float(a), 0, 0, float(b), 0.0, 0.0, 0.0) for a, b in zip(h, mse)]
        return cls("synthetic", "", "", 0.0, 0, 0.0, cells)


def run_sweep(config: SweepConfig) -> ErrorReport:
    """Simulate every cell; trajectory ``i`` uses stream ``(master_seed, i)``."""
    ref = config.reference or reference_mean(
        config.model.base if isinstance(config.model, StochasticGradientModel)
        else config.model, config.f)
    report = ErrorReport(config.integrator.cli_name, config.model_id, config.f_id,
                         float(config.gamma), int(config.master_seed), ref.value)
    ids = np.arange(config.trajectories, dtype=np.uint64)
    for h in config.h_grid:
        n = config.n_steps(h)
        params = StepParams(config.gamma, h, h_max=max(0.5, h))
        res = simulate_ensemble(config.integrator, config.model, params, config.f, n,
                                config.master_seed, ids, config.initial_state,
                                burn_in=min(config.burn_in, n - 1))
        ok = res.diverged == 0
        if not ok.any():
            raise SweepError(f"all {config.trajectories} trajectories diverged at h={h:g}", h)
        report.cells.append(aggregate_errors(res.averages[ok] - ref.value, h, n,
                                             int((~ok).sum())))
    return report


# -- slopes -----------------------------------------------------------------

def fit_loglog(h, y):
    """Least-squares slope of log y against log h."""
    lh = np.log(np.asarray(h, dtype=float))
    ly = np.log(np.asarray(y, dtype=float))
    return float(np.polyfit(lh, ly, 1)[0])


def fit_slope(report: ErrorReport, h_window=None, subtract_floor: bool = False,
              floor: float | None = None) -> float:
    """Slope of log mse vs log h over cells with ``h_lo <= h <= h_hi``.

    With ``subtract_floor`` the floor (default: mse at the smallest h of the
    report) is removed first and cells left nonpositive are dropped.
    """
    h, mse = report.h, report.mse
    if h_window is not None:
        lo, hi = h_window
        keep = (h >= lo * (1 - 1e-12)) & (h <= hi * (1 + 1e-12))
        h, mse = h[keep], mse[keep]
    if subtract_floor:
        mse = mse - (report.floor_estimate if floor is None else floor)
        keep = mse > 0
        h, mse = h[keep], mse[keep]
    if len(h) < 3:
        raise ValueError(f"slope fit needs at least 3 cells, {len(h)} usable")
    return fit_loglog(h, mse)


# -- CSV --------------------------------------------------------------------

def _g(x):
    return "%.17g" % x


def sweep_rows(report: ErrorReport):
    for c in report.cells:
        yield [report.integrator, report.potential, report.f, _g(report.gamma),
               str(report.seed), _g(c.h), str(c.n_steps), str(c.trajectories),
               _g(c.mse), _g(c.mse_stderr), _g(c.bias), _g(c.variance), str(c.diverged)]


def write_sweep_csv(reports, stream):
    """One row per (integrator, h) to an open text stream."""
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for r in reports:
        w.writerows(sweep_rows(r))


def write_slopes_csv(rows, stream):
    """``rows`` are dicts keyed by :data:`SLOPES_HEADER`."""
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(SLOPES_HEADER)
    for row in rows:
        w.writerow([_g(v) if isinstance(v, float) else str(v)
                    for v in (row[k] for k in SLOPES_HEADER)])
