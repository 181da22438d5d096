"""Numerical probes of strong order, drift, moments, tangent decay and the
discrete Poisson identity.

Every probe returns a result object with ``rows()`` (CSV body), a class
level ``header`` and ``verdict()`` giving ``(passed, one_line_message)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .brownian import brownian_path, ou_covariance, ou_factor, ou_window_noise, refine
from .estimator import ReferenceMean, fit_loglog, reference_mean
from .integrators import (EM, SGEM, UBU, IntegratorKind, State, StepParams, em_update,
                          simulate_checkpoints, step, ubu_update)
from .model import PotentialModel, StochasticGradientModel, TestFunction
from .streams import RngStream

__all__ = [
    "DecayFit", "fit_decay", "TangentState", "lyapunov_matrix", "lyapunov_function",
    "lyapunov_generator", "lyapunov_drift_check", "generator_fd_check",
    "strong_order_probe", "moment_stability_probe", "tangent_decay_probe",
    "tangent_coupling_probe", "sync_coupling_probe", "kolmogorov_probe",
    "discrete_poisson_residual", "sg_unbiasedness_check", "PROBES",
]

PROBES = ("lyapunov", "moments", "tangent", "tangent-coupling", "coupling",
          "kolmogorov", "poisson")


# -- exponential fits -------------------------------------------------------

@dataclass(frozen=True)
class DecayFit:
    """y(t) ~ prefactor * exp(-rate t) on ``window``; decay means rate > 0."""

    rate: float
    prefactor: float
    r2: float
    window: tuple

    @property
    def identically_zero(self):
        return self.prefactor == 0.0 and math.isinf(self.rate)


def fit_decay(t, y, skip=0.1, noise_floor=0.0) -> DecayFit:
    """Least-squares fit of log y on ``t``.

    Drops the first ``skip`` fraction of the horizon and every point after
    the signal first falls below ``3 * noise_floor``.
    """
    t = np.asarray(t, dtype=float)
    y = np.abs(np.asarray(y, dtype=float))
    if np.all(y == 0):
        return DecayFit(math.inf, 0.0, 1.0, (float(t[0]), float(t[-1])))
    t0 = t[0] + skip * (t[-1] - t[0])
    keep = t >= t0
    low = np.nonzero(keep & (y <= 3.0 * noise_floor))[0]
    if low.size:
        keep[low[0]:] = False
    keep &= y > 0
    if keep.sum() < 3:
        raise ValueError("fewer than 3 points left in the decay-fit window")
    tt, ly = t[keep], np.log(y[keep])
    slope, icpt = np.polyfit(tt, ly, 1)
    resid = ly - (slope * tt + icpt)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return DecayFit(float(-slope), float(math.exp(icpt)), float(min(max(r2, 0.0), 1.0)),
                    (float(tt[0]), float(tt[-1])))


def _g(x):
    return "%.17g" % x


# -- strong order -----------------------------------------------------------

@dataclass
class StrongOrderResult:
    integrator: str
    h: np.ndarray
    rms: np.ndarray
    rms_stderr: np.ndarray
    slope: float
    h_ref: float
    band: tuple = (0.8, 1.2)

    header = ["integrator", "h", "rms_error", "rms_stderr"]

    def rows(self):
        for h, e, s in zip(self.h, self.rms, self.rms_stderr):
            yield [self.integrator, _g(h), _g(e), _g(s)]

    def verdict(self):
        lo, hi = self.band
        ok = lo <= self.slope <= hi
        return ok, (f"{'PASS' if ok else 'FAIL'} strong-order {self.integrator}: "
                    f"slope {self.slope:.4f} in [{lo:g}, {hi:g}]")


def _dyadic_exponent(ratio, what):
    k = int(round(math.log2(ratio)))
    if k < 0 or not math.isclose(2.0**k, ratio, rel_tol=1e-9):
        raise ValueError(f"{what} must be a power of two, got {ratio}")
    return k


def _run_on_path_batch(kind, model, gamma, h, xi_x, xi_v, inc, x0, v0):
    """Drive a batch of trajectories with path noise.

    ``xi_x``/``xi_v`` hold exact OU half-step noise (UBU), ``inc`` the
    Brownian increments over whole steps (EM); both ``(n_paths, steps, d)``.
    """
    x, v = x0.copy(), v0.copy()
    if kind.code == EM.code:
        root = math.sqrt(2.0 * gamma)
        for n in range(inc.shape[1]):
            x, v = em_update(x, v, model.grad(x), gamma, h, root * inc[:, n])
    else:
        for n in range(xi_x.shape[1] // 2):
            n1 = (xi_x[:, 2 * n], xi_v[:, 2 * n])
            n2 = (xi_x[:, 2 * n + 1], xi_v[:, 2 * n + 1])
            x, v = ubu_update(x, v, model.grad, gamma, h, n1, n2)
    return x, v


def strong_order_probe(kind: IntegratorKind, model: PotentialModel, gamma: float, h_grid,
                       horizon: float, n_paths: int, master_seed: int,
                       initial: State | None = None, ref_factor: int = 16,
                       band=None) -> StrongOrderResult:
    """RMS endpoint error against a fine UBU reference on the same Brownian path.

    Each path is drawn at the resolution of the coarsest step, carrying the
    damped integrals, and bridge-refined to half the reference step.  The
    reference and every probed run then read their noise off this one path:
    EM sums increments over its steps and UBU takes the exact OU noise of
    each half-step window, so the coupling is exact for both schemes.
    """
    if n_paths < 2:
        raise ValueError("need at least 2 paths")
    if horizon > 4:
        raise ValueError("horizon must be at most 4")
    if ref_factor < 16:
        raise ValueError("reference step must be at least 16x finer than the smallest h")
    hs = np.sort(np.asarray(h_grid, dtype=float))[::-1]
    h_ref = hs[-1] / ref_factor
    _dyadic_exponent(ref_factor, "ref_factor")
    for h in hs:
        _dyadic_exponent(horizon / h, "horizon / h")
    top = _dyadic_exponent(2 * horizon / hs[0], "2 horizon / h_max")
    level = _dyadic_exponent(2 * horizon / h_ref, "2 horizon / h_ref")
    initial = initial or State(np.zeros(model.dim), np.zeros(model.dim))
    d = model.dim
    x0 = np.tile(initial.x, (n_paths, 1))
    v0 = np.tile(initial.v, (n_paths, 1))

    def ou_batch(length):
        pairs = [ou_window_noise(p, length) for p in paths]
        return np.stack([a for a, _ in pairs]), np.stack([b for _, b in pairs])

    def increment_batch(length):
        m = int(round(length / paths[0].cell))
        return np.stack([p.increments.reshape(-1, m, d).sum(axis=1) for p in paths])

    paths = []
    for i in range(n_paths):
        stream = RngStream(master_seed, i)
        coarse = brownian_path(horizon, top, d, stream, gamma=gamma)
        paths.append(refine(coarse, level, stream))
    xr, vr = ou_batch(0.5 * h_ref)
    x_ref, v_ref = _run_on_path_batch(UBU, model, gamma, h_ref, xr, vr, None, x0, v0)
    if not (np.all(np.isfinite(x_ref)) and np.all(np.isfinite(v_ref))):
        raise FloatingPointError("reference trajectory diverged")
    rms, se = [], []
    for h in hs:
        if kind.code == EM.code:
            x, v = _run_on_path_batch(kind, model, gamma, h, None, None, increment_batch(h),
                                      x0, v0)
        else:
            xi_x, xi_v = ou_batch(0.5 * h)
            x, v = _run_on_path_batch(kind, model, gamma, h, xi_x, xi_v, None, x0, v0)
        sq = np.sum((x - x_ref) ** 2 + (v - v_ref) ** 2, axis=1)
        mean_sq = float(sq.mean())
        rms.append(math.sqrt(mean_sq))
        # delta method for sqrt of a mean
        se.append(float(sq.std(ddof=1) / math.sqrt(n_paths)) / (2 * rms[-1])
                  if rms[-1] > 0 else 0.0)
    rms = np.array(rms)
    slope = fit_loglog(hs, rms) if len(hs) >= 2 and np.all(rms > 0) else math.nan
    if band is None:
        band = (0.8, 1.2) if kind.strong_order == 1 else (1.8, 2.2)
    return StrongOrderResult(kind.cli_name, hs, rms, np.array(se), slope, float(h_ref),
                             tuple(band))


# -- Lyapunov function ------------------------------------------------------

def lyapunov_matrix(gamma: float) -> np.ndarray:
    """S = [[gamma, 1], [1, 1]], positive definite iff gamma > 1."""
    return np.array([[gamma, 1.0], [1.0, 1.0]])


def lyapunov_function(gamma, x, v):
    """gamma |x|^2 + 2 x.v + |v|^2 over the last axis."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    return np.sum(gamma * x * x + 2.0 * x * v + v * v, axis=-1)


def lyapunov_generator(model: PotentialModel, gamma, x, v):
    """Closed-form generator applied to the Lyapunov function.

    -2((gamma - 1)|v|^2 + x.grad U + v.grad U) + 2 gamma d
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    g = model.grad(x)
    return (-2.0 * np.sum((gamma - 1.0) * v * v + x * g + v * g, axis=-1)
            + 2.0 * gamma * x.shape[-1])


@dataclass
class LyapunovResult:
    gamma: float
    a_fit: float
    b_fit: float
    n_points: int
    shell_level: float
    violations: np.ndarray  # states (x, v) on the shell where the drift is not negative

    header = ["gamma", "a_fit", "b_fit", "n_points", "shell_level", "violations"]

    @property
    def feasible(self):
        return self.a_fit > 0

    def rows(self):
        yield [_g(self.gamma), _g(self.a_fit), _g(self.b_fit), str(self.n_points),
               _g(self.shell_level), str(len(self.violations))]

    def verdict(self):
        ok = self.feasible
        return ok, (f"{'PASS' if ok else 'FAIL'} lyapunov: a_fit {self.a_fit:.6g} "
                    f"(need > 0), b_fit {self.b_fit:.6g}")


def _split_grid(grid, d):
    g = np.asarray(grid, dtype=float)
    if g.ndim != 2 or g.shape[1] != 2 * d:
        raise ValueError(f"grid must have shape (n, {2 * d}) of stacked (x, v)")
    return g[:, :d], g[:, d:]


def lyapunov_drift_check(model: PotentialModel, gamma: float, grid,
                         shell: float = 0.75) -> LyapunovResult:
    """Fit ``a`` and ``b`` in  L H <= -a H + b  on a finite grid of states.

    On a bounded grid any ``a`` can be paired with a large enough ``b``, so
    ``a`` is taken as the worst decay rate ``-L H / H`` over the outer shell
    (points with ``H`` above the ``shell`` quantile) and ``b`` is then the
    smallest offset making the inequality hold everywhere on the grid.
    A nonpositive ``a`` is reported with the offending shell points.
    """
    if not gamma > 1:
        raise ValueError("the Lyapunov function needs gamma > 1")
    x, v = _split_grid(grid, model.dim)
    H = lyapunov_function(gamma, x, v)
    LH = lyapunov_generator(model, gamma, x, v)
    level = float(np.quantile(H, shell))
    outer = H >= level
    outer &= H > 0
    ratio = LH[outer] / H[outer]
    a = float(-np.max(ratio))
    b = float(np.max(LH + a * H))
    bad = np.concatenate([x, v], axis=1)[outer][ratio >= 0]
    return LyapunovResult(float(gamma), a, b, int(len(H)), level, bad)


@dataclass(frozen=True)
class GeneratorCheck:
    closed_form: float
    estimate: float
    stderr: float
    delta: float


def generator_fd_check(model: PotentialModel, gamma: float, state: State, delta: float = 1e-3,
                       n_samples: int = 100_000, master_seed: int = 0) -> GeneratorCheck:
    """Compare the closed-form generator with (E H(z_delta) - H(z)) / delta.

    One UBU step of length ``delta`` stands in for the flow; noise is used
    in antithetic pairs so the first-order noise terms cancel.
    """
    stream = RngStream(master_seed, 0)
    d = state.dim
    half = n_samples // 2
    a, b, c = ou_factor(ou_covariance(gamma, 0.5 * delta))
    z = stream.normal((half, 4, d))
    x0 = np.tile(state.x, (half, 1))
    v0 = np.tile(state.v, (half, 1))
    h0 = float(lyapunov_function(gamma, state.x, state.v))
    vals = []
    for sign in (1.0, -1.0):
        zz = sign * z
        n1 = (b * zz[:, 0] + c * zz[:, 1], a * zz[:, 0])
        n2 = (b * zz[:, 2] + c * zz[:, 3], a * zz[:, 2])
        x, v = ubu_update(x0, v0, model.grad, gamma, delta, n1, n2)
        vals.append(lyapunov_function(gamma, x, v))
    pair = 0.5 * (vals[0] + vals[1])
    est = (pair.mean() - h0) / delta
    se = pair.std(ddof=1) / math.sqrt(half) / delta
    closed = float(lyapunov_generator(model, gamma, state.x, state.v))
    return GeneratorCheck(closed, float(est), float(se), float(delta))


# -- moments ----------------------------------------------------------------

@dataclass
class MomentSeries:
    steps: np.ndarray
    moment: np.ndarray
    stderr: np.ndarray
    diverged: int
    limit: float

    header = ["step", "moment", "stderr"]

    @property
    def initial(self):
        return float(self.moment[0])

    @property
    def max_ratio(self):
        return float(np.max(self.moment) / self.initial)

    def rows(self):
        for n, m, s in zip(self.steps, self.moment, self.stderr):
            yield [str(n), _g(m), _g(s)]

    def verdict(self):
        ok = self.diverged == 0 and self.max_ratio <= self.limit
        return ok, (f"{'PASS' if ok else 'FAIL'} moments: max/initial {self.max_ratio:.4g} "
                    f"(limit {self.limit:g}), diverged {self.diverged}")


def moment_stability_probe(kind: IntegratorKind, model, gamma: float, h: float, r: float,
                           n_steps: int, ensemble: int, master_seed: int,
                           initial: State | None = None, n_checkpoints: int = 50,
                           limit: float = 50.0, noise_scale: float = 1.0) -> MomentSeries:
    """Ensemble estimate of E(|X_n| + |V_n| + 1)^(2r) at evenly spaced steps."""
    if gamma <= 1:
        warnings.warn("moment bounds are only guaranteed for gamma > 1", stacklevel=2)
    base = getattr(model, "base", model)
    initial = initial or State(np.zeros(base.dim), np.zeros(base.dim))
    ck = np.unique(np.linspace(0, n_steps, n_checkpoints + 1).round().astype(np.int64))
    params = StepParams(gamma, h, h_max=max(0.5, h), noise_scale=noise_scale)
    xs, vs, div = simulate_checkpoints(kind, model, params, ck, master_seed,
                                       np.arange(ensemble), initial)
    w = (np.linalg.norm(xs, axis=-1) + np.linalg.norm(vs, axis=-1) + 1.0) ** (2 * r)
    ok = div == 0
    w = w[ok]
    se = w.std(axis=0, ddof=1) / math.sqrt(len(w)) if len(w) > 1 else np.zeros(len(ck))
    return MomentSeries(ck, w.mean(axis=0), se, int((~ok).sum()), float(limit))


# -- tangent processes ------------------------------------------------------

@dataclass
class TangentState:
    """First-variation pair (Q, P), each d x d."""

    q: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        self.q = np.atleast_2d(np.asarray(self.q, dtype=float)).copy()
        self.p = np.atleast_2d(np.asarray(self.p, dtype=float)).copy()
        if self.q.shape != self.p.shape or self.q.shape[0] != self.q.shape[1]:
            raise ValueError("q and p must be square matrices of equal size")
        if not (np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.p))):
            raise ValueError("tangent state must be finite")

    @classmethod
    def position(cls, d):
        """(I, O): derivative with respect to the initial position."""
        return cls(np.eye(d), np.zeros((d, d)))

    @classmethod
    def velocity(cls, d):
        """(O, I): derivative with respect to the initial velocity."""
        return cls(np.zeros((d, d)), np.eye(d))

    def norm(self):
        return float(np.linalg.norm(self.q) + np.linalg.norm(self.p))

    def lyapunov(self, gamma):
        """Tr[W^T S W] for W = (Q; P)."""
        q, p = self.q, self.p
        return float(np.trace(gamma * q.T @ q + q.T @ p + p.T @ q + p.T @ p))


def _qp_rhs(hess, gamma, q, p):
    return p, -hess @ q - gamma * p


def _rk4(hess, gamma, q, p, dt):
    k1 = _qp_rhs(hess, gamma, q, p)
    k2 = _qp_rhs(hess, gamma, q + 0.5 * dt * k1[0], p + 0.5 * dt * k1[1])
    k3 = _qp_rhs(hess, gamma, q + 0.5 * dt * k2[0], p + 0.5 * dt * k2[1])
    k4 = _qp_rhs(hess, gamma, q + dt * k3[0], p + dt * k3[1])
    q = q + dt / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
    p = p + dt / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
    return q, p


def _state_noise(gamma, h_state, n_steps, d, stream):
    a, b, c = ou_factor(ou_covariance(gamma, 0.5 * h_state))
    z = stream.normal((n_steps, 4, d))
    return (b * z[:, 0] + c * z[:, 1], a * z[:, 0]), (b * z[:, 2] + c * z[:, 3], a * z[:, 2])


def _tangent_path(model, gamma, z0: State, init: TangentState, noise, h_state, substeps):
    """States and tangent pairs at every state step (hessian frozen per step)."""
    n1, n2 = noise
    n_steps = n1[0].shape[0]
    x, v = z0.x.copy(), z0.v.copy()
    q, p = init.q.copy(), init.p.copy()
    qs = np.empty((n_steps + 1,) + q.shape)
    ps = np.empty_like(qs)
    xs = np.empty((n_steps + 1, z0.dim))
    vs = np.empty_like(xs)
    qs[0], ps[0], xs[0], vs[0] = q, p, x, v
    dt = h_state / substeps
    for n in range(n_steps):
        hess = np.atleast_2d(model.hessian(x))
        for _ in range(substeps):
            q, p = _rk4(hess, gamma, q, p, dt)
        x, v = ubu_update(x, v, model.grad, gamma, h_state,
                          (n1[0][n], n1[1][n]), (n2[0][n], n2[1][n]))
        qs[n + 1], ps[n + 1], xs[n + 1], vs[n + 1] = q, p, x, v
    return xs, vs, qs, ps


def _wnorm(qs, ps):
    return np.linalg.norm(qs, axis=(1, 2)) + np.linalg.norm(ps, axis=(1, 2))


@dataclass
class DecayProbeResult:
    name: str
    t: np.ndarray
    signal: np.ndarray
    fit: DecayFit
    extra: dict = field(default_factory=dict)
    min_r2: float = 0.95

    header = ["t", "signal"]

    def rows(self):
        for a, b in zip(self.t, self.signal):
            yield [_g(a), _g(b)]

    def verdict(self):
        f = self.fit
        ok = f.identically_zero or (f.rate > 0 and f.r2 >= self.min_r2)
        return ok, (f"{'PASS' if ok else 'FAIL'} {self.name}: rate {f.rate:.6g} (need > 0), "
                    f"r2 {f.r2:.4f} (need >= {self.min_r2:g})")


def _check_hessian(model):
    if model.hessian is None:
        raise ValueError(f"model {model.name} has no hessian")


def tangent_decay_probe(model: PotentialModel, gamma: float, init: TangentState,
                        horizon: float, dt_ode: float, stream: RngStream,
                        z0: State | None = None) -> DecayProbeResult:
    """Tangent pair along a UBU path (state step ``4 dt_ode``), RK4 in between.

    The signal is |Q_t| + |P_t| (Frobenius norms); ``extra['lyapunov']``
    holds Tr[W^T S W] at the same times.
    """
    _check_hessian(model)
    h_state = 4.0 * dt_ode
    n_steps = int(round(horizon / h_state))
    z0 = z0 or State(np.zeros(model.dim), np.zeros(model.dim))
    noise = _state_noise(gamma, h_state, n_steps, model.dim, stream)
    _, _, qs, ps = _tangent_path(model, gamma, z0, init, noise, h_state, 4)
    t = h_state * np.arange(n_steps + 1)
    sig = _wnorm(qs, ps)
    lyap = np.array([TangentState(q, p).lyapunov(gamma) for q, p in zip(qs, ps)])
    fit = fit_decay(t, sig, noise_floor=1e-13 * max(sig[0], 1e-300))
    return DecayProbeResult("tangent", t, sig, fit, {"lyapunov": lyap})


def tangent_coupling_probe(model: PotentialModel, gamma: float, z0: State, z0p: State,
                           init: TangentState, horizon: float, stream: RngStream,
                           dt_ode: float = 0.0025, scales=(1.0, 0.5)) -> DecayProbeResult:
    """|Q - Q'| + |P - P'| for tangent pairs along synchronously coupled paths.

    The run is repeated with the initial gap scaled by each entry of
    ``scales`` (same noise).  ``extra['amplitude']`` holds the time-averaged
    difference per scale over the fit window of the first one, and
    ``extra['amplitude_ratio']`` the first over the last.
    """
    _check_hessian(model)
    h_state = 4.0 * dt_ode
    n_steps = int(round(horizon / h_state))
    noise = _state_noise(gamma, h_state, n_steps, model.dim, stream)
    t = h_state * np.arange(n_steps + 1)
    _, _, q0, p0 = _tangent_path(model, gamma, z0, init, noise, h_state, 4)
    gap_x, gap_v = z0p.x - z0.x, z0p.v - z0.v
    signals = []
    for s in scales:
        zs = State(z0.x + s * gap_x, z0.v + s * gap_v)
        _, _, q1, p1 = _tangent_path(model, gamma, zs, init, noise, h_state, 4)
        signals.append(_wnorm(q1 - q0, p1 - p0))
    sig = signals[0]
    fit = fit_decay(t, sig, noise_floor=1e-13)
    lo, hi = fit.window
    inside = (t >= lo) & (t <= hi)
    amps = [float(np.mean(s[inside])) for s in signals]
    ratio = amps[0] / amps[-1] if amps[-1] > 0 else math.nan
    extra = {"amplitude": amps, "amplitude_ratio": ratio, "scales": list(scales)}
    return DecayProbeResult("tangent-coupling", t, sig, fit, extra, min_r2=0.0)


def sync_coupling_probe(model: PotentialModel, gamma: float, z0: State, z0p: State,
                        horizon: float, h: float, stream: RngStream) -> DecayProbeResult:
    """|x_t - x'_t| + |v_t - v'_t| (Euclidean norms) for two UBU paths on shared noise."""
    n_steps = int(round(horizon / h))
    n1, n2 = _state_noise(gamma, h, n_steps, z0.dim, stream)
    x, v = z0.x.copy(), z0.v.copy()
    xp, vp = z0p.x.copy(), z0p.v.copy()
    gap = np.empty(n_steps + 1)
    gap[0] = np.linalg.norm(x - xp) + np.linalg.norm(v - vp)
    scale = 1.0
    for n in range(n_steps):
        a = (n1[0][n], n1[1][n])
        b = (n2[0][n], n2[1][n])
        x, v = ubu_update(x, v, model.grad, gamma, h, a, b)
        xp, vp = ubu_update(xp, vp, model.grad, gamma, h, a, b)
        gap[n + 1] = np.linalg.norm(x - xp) + np.linalg.norm(v - vp)
        scale = max(scale, float(np.abs(x).max()), float(np.abs(v).max()))
    t = h * np.arange(n_steps + 1)
    fit = fit_decay(t, gap, noise_floor=1e-14 * scale)
    return DecayProbeResult("coupling", t, gap, fit)


# -- Kolmogorov equation and the discrete Poisson identity -------------------

def _resolve_reference(model, f, reference):
    if reference is None:
        return reference_mean(model, f)
    if isinstance(reference, ReferenceMean):
        return reference
    return ReferenceMean(float(reference), 0.0, "given")


def _as_state(p):
    if isinstance(p, State):
        return p
    a = np.asarray(p, dtype=float).ravel()
    return State(a[: a.size // 2], a[a.size // 2:])


def _fine_run(model, gamma, h_mc, start: State, checkpoints, master_seed, ids):
    params = StepParams(gamma, h_mc, h_max=max(0.5, h_mc))
    xs, vs, div = simulate_checkpoints(UBU, model, params, checkpoints, master_seed, ids, start)
    if np.any(div):
        raise FloatingPointError(f"{int(np.count_nonzero(div))} fine trajectories diverged")
    return xs, vs


@dataclass
class KolmogorovResult:
    points: list
    t: np.ndarray
    u: np.ndarray  # (n_points, n_t)
    stderr: np.ndarray
    fits: list

    header = ["point", "t", "u", "stderr"]

    def rows(self):
        for i in range(len(self.points)):
            for j, t in enumerate(self.t):
                yield [str(i), _g(t), _g(self.u[i, j]), _g(self.stderr[i, j])]

    def inconclusive(self):
        """Points whose estimate is within stderr of zero at every t > 0."""
        pos = self.t > 0
        return [i for i in range(len(self.points))
                if np.all(np.abs(self.u[i, pos]) <= self.stderr[i, pos])]

    def verdict(self):
        last = np.abs(self.u[:, -1]) <= 3 * self.stderr[:, -1]
        ok = bool(np.all(last))
        return ok, (f"{'PASS' if ok else 'FAIL'} kolmogorov: |u(t_end)| within 3 stderr of 0 "
                    f"at {int(last.sum())}/{len(last)} points")


def kolmogorov_probe(model: PotentialModel, gamma: float, f: TestFunction, points, t_grid,
                     n_mc: int, master_seed: int, h_mc: float = 1 / 64,
                     reference=None) -> KolmogorovResult:
    """MC estimate of u(z, t) = E_z f(z_t) - pi(f) with a fine UBU step ``h_mc``."""
    ref = _resolve_reference(model, f, reference).value
    t = np.asarray(t_grid, dtype=float)
    ck = np.round(t / h_mc).astype(np.int64)
    if np.any(np.abs(ck * h_mc - t) > 1e-9 * np.maximum(t, 1)):
        raise ValueError("every t must be a multiple of h_mc")
    pts = [_as_state(p) for p in points]
    u = np.empty((len(pts), len(t)))
    se = np.empty_like(u)
    fits = []
    for i, z in enumerate(pts):
        if f.constant is not None:
            u[i] = f.constant - ref
            se[i] = 0.0
        else:
            ids = np.arange(n_mc, dtype=np.uint64) + np.uint64(i * n_mc)
            xs, vs = _fine_run(model, gamma, h_mc, z, ck, master_seed, ids)
            vals = np.asarray(f.f(xs, vs), dtype=float) - ref
            u[i] = vals.mean(axis=0)
            se[i] = vals.std(axis=0, ddof=1) / math.sqrt(n_mc)
            zero = ck == 0
            u[i, zero] = float(f.f(z.x, z.v)) - ref
            se[i, zero] = 0.0
        try:
            fits.append(fit_decay(t, u[i], skip=0.0, noise_floor=float(np.max(se[i]))))
        except ValueError:
            fits.append(None)
    return KolmogorovResult(pts, t, u, se, fits)


@dataclass
class PoissonResult:
    points: list
    f_minus_mean: np.ndarray
    phi: np.ndarray
    phi_stderr: np.ndarray
    e_phi: np.ndarray
    e_phi_stderr: np.ndarray
    residual: np.ndarray
    stderr: np.ndarray  # combined stderr of the residual
    tail: np.ndarray  # |u(z, n_max h)| estimate
    tail_stderr: np.ndarray

    header = ["point", "x", "v", "f_minus_mean", "phi", "phi_stderr", "e_phi",
              "e_phi_stderr", "residual", "stderr", "tail", "tail_stderr"]

    def rows(self):
        for i, z in enumerate(self.points):
            yield [str(i), _g(z.x[0]), _g(z.v[0]), _g(self.f_minus_mean[i]), _g(self.phi[i]),
                   _g(self.phi_stderr[i]), _g(self.e_phi[i]), _g(self.e_phi_stderr[i]),
                   _g(self.residual[i]), _g(self.stderr[i]), _g(self.tail[i]),
                   _g(self.tail_stderr[i])]

    @property
    def tail_ok(self):
        return bool(np.all(self.tail <= 3 * self.tail_stderr))

    def verdict(self):
        within = np.abs(self.residual) <= 3 * self.stderr
        ok = bool(np.all(within)) and self.tail_ok
        worst = float(np.max(np.abs(self.residual) / np.where(self.stderr > 0, self.stderr, 1)))
        msg = (f"{'PASS' if ok else 'FAIL'} poisson: |residual| <= 3 stderr at "
               f"{int(within.sum())}/{len(within)} points (worst {worst:.3g} stderr)")
        if not self.tail_ok:
            msg += "; truncation tail not negligible, raise n_max"
        return ok, msg


def discrete_poisson_residual(model: PotentialModel, gamma: float, f: TestFunction, h: float,
                              points, n_max: int, n_mc: int, master_seed: int,
                              substeps: int = 8, coupled: bool = False,
                              reference=None) -> PoissonResult:
    """Residual (phi_h(z) - E phi_h(z_h)) / h - (f(z) - pi(f)) estimated by Monte Carlo.

    ``phi_h(z) = h sum_{n=0}^{n_max} u(z, n h)``.  The flow is a UBU run at
    step ``h / substeps``.  The second term starts each trajectory with one
    evolution over ``h`` and then accumulates ``phi_h`` from there.  By
    default the two terms use independent trajectories and the combined
    stderr adds their variances.  With ``coupled`` the second term continues
    the first term's trajectories, and the stderr comes from the per-path
    differences.
    """
    ref = _resolve_reference(model, f, reference).value
    pts = [_as_state(p) for p in points]
    h_mc = h / substeps
    ck = substeps * np.arange(n_max + 2, dtype=np.int64)
    k = len(pts)
    out = {name: np.zeros(k) for name in ("fm", "phi", "phise", "ephi", "ephise",
                                          "res", "se", "tail", "tailse")}
    for i, z in enumerate(pts):
        fz = float(f.f(z.x, z.v)) - ref
        out["fm"][i] = fz
        if f.constant is not None:
            continue  # u vanishes identically, so does every term
        ids = np.arange(n_mc, dtype=np.uint64) + np.uint64(2 * i * n_mc)
        xs, vs = _fine_run(model, gamma, h_mc, z, ck, master_seed, ids)
        vals = np.asarray(f.f(xs, vs), dtype=float) - ref  # (n_mc, n_max + 2)
        phi = h * vals[:, : n_max + 1].sum(axis=1)
        if coupled:
            ephi = h * vals[:, 1:].sum(axis=1)
        else:
            xs2, vs2 = _fine_run(model, gamma, h_mc, z, ck, master_seed, ids + np.uint64(n_mc))
            vals2 = np.asarray(f.f(xs2, vs2), dtype=float) - ref
            ephi = h * vals2[:, 1:].sum(axis=1)
        root = math.sqrt(n_mc)
        out["phi"][i], out["phise"][i] = phi.mean(), phi.std(ddof=1) / root
        out["ephi"][i], out["ephise"][i] = ephi.mean(), ephi.std(ddof=1) / root
        out["res"][i] = (phi.mean() - ephi.mean()) / h - fz
        if coupled:
            out["se"][i] = (phi - ephi).std(ddof=1) / root / h
        else:
            out["se"][i] = math.hypot(out["phise"][i], out["ephise"][i]) / h
        last = vals[:, n_max]
        out["tail"][i] = abs(last.mean())
        out["tailse"][i] = last.std(ddof=1) / root
    return PoissonResult(pts, out["fm"], out["phi"], out["phise"], out["ephi"], out["ephise"],
                         out["res"], out["se"], out["tail"], out["tailse"])


# -- stochastic-gradient unbiasedness ---------------------------------------

@dataclass
class UnbiasednessResult:
    integrator: str
    n_draws: int
    mean_gap: np.ndarray  # (x, v) stacked
    stderr: np.ndarray

    header = ["integrator", "component", "mean_gap", "stderr"]

    @property
    def z_scores(self):
        return np.divide(np.abs(self.mean_gap), self.stderr,
                         out=np.zeros_like(self.mean_gap), where=self.stderr > 0)

    @property
    def passed(self):
        exact = (self.stderr == 0) & (self.mean_gap == 0)
        return bool(np.all(exact | (np.abs(self.mean_gap) <= 3 * self.stderr)))

    def rows(self):
        d = self.mean_gap.size // 2
        names = [f"x{i}" for i in range(d)] + [f"v{i}" for i in range(d)]
        for n, m, s in zip(names, self.mean_gap, self.stderr):
            yield [self.integrator, n, _g(m), _g(s)]

    def verdict(self):
        ok = self.passed
        return ok, (f"{'PASS' if ok else 'FAIL'} sg-unbiasedness {self.integrator}: "
                    f"max |gap|/stderr {float(np.max(self.z_scores)):.3g} over "
                    f"{self.n_draws} draws (limit 3)")


def sg_unbiasedness_check(sg_model: StochasticGradientModel, kind: IntegratorKind,
                          state: State, params: StepParams, n_draws: int,
                          master_seed: int) -> UnbiasednessResult:
    """Mean one-step gap between a stochastic-gradient step and its exact twin.

    Draw ``i`` uses stream ``(master_seed, i)`` for both steps.  The Gaussian
    noise comes first in both, so the two steps share it and differ only
    through omega.
    """
    if not kind.uses_stochastic_gradient:
        raise ValueError(f"{kind.tag} does not use a stochastic gradient")
    twin = EM if kind.code == SGEM.code else UBU
    gaps = np.empty((n_draws, 2 * state.dim))
    for i in range(n_draws):
        a = RngStream(master_seed, i)
        b = a.copy()
        z_sg = step(kind, state, sg_model, params, a)
        z_ex = step(twin, state, sg_model.base, params, b)
        gaps[i] = z_sg.as_array() - z_ex.as_array()
    return UnbiasednessResult(kind.cli_name, n_draws, gaps.mean(axis=0),
                              gaps.std(axis=0, ddof=1) / math.sqrt(n_draws))
