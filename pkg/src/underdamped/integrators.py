"""EM, UBU and their stochastic-gradient versions.

The single-step functions are written in NumPy and are the readable
reference.  Ensemble drivers dispatch to the compiled kernels in
:mod:`underdamped._kernels` when the model, surrogate and test function
all carry kernel codes; both paths consume a stream identically, so a
trajectory does not depend on which path produced it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .brownian import damping, ou_covariance, ou_factor, position_gain, sample_ou_increment
from .model import (PotentialModel, StochasticGradientModel, TestFunction,
                    exact_stochastic_gradient)
from .streams import RngStream

__all__ = [
    "State", "IntegratorKind", "StepParams", "TrajectoryDivergence",
    "EM", "UBU", "SGEM", "SGUBU", "INTEGRATORS", "parse_integrator",
    "em_step", "ubu_step", "sgem_step", "sgubu_step", "step",
    "em_update", "ubu_update",
    "simulate_time_average", "simulate_ensemble", "simulate_checkpoints",
    "EnsembleResult",
]


@dataclass(frozen=True)
class State:
    x: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.x, dtype=float)).copy()
        v = np.atleast_1d(np.asarray(self.v, dtype=float)).copy()
        if x.shape != v.shape or x.ndim != 1:
            raise ValueError(f"x and v must be matching vectors, got {x.shape} and {v.shape}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "v", v)

    @property
    def dim(self):
        return self.x.shape[0]

    def as_array(self):
        return np.concatenate([self.x, self.v])

    def is_finite(self):
        return bool(np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.v)))


@dataclass(frozen=True)
class IntegratorKind:
    tag: str
    strong_order: int
    moment_order: int
    uses_stochastic_gradient: bool
    code: int
    cli_name: str


EM = IntegratorKind("EM", 1, 1, False, K.K_EM, "em")
UBU = IntegratorKind("UBU", 2, 2, False, K.K_UBU, "ubu")
SGEM = IntegratorKind("SGEM", 1, 1, True, K.K_SGEM, "sg-em")
SGUBU = IntegratorKind("SGUBU", 2, 2, True, K.K_SGUBU, "sg-ubu")
INTEGRATORS = {k.cli_name: k for k in (EM, UBU, SGEM, SGUBU)}


def parse_integrator(name: str) -> IntegratorKind:
    try:
        return INTEGRATORS[name.strip().lower()]
    except KeyError:
        raise ValueError(f"unknown integrator {name!r}; expected one of "
                         f"{', '.join(INTEGRATORS)}") from None


@dataclass(frozen=True)
class StepParams:
    """Damping rate and step size.

    ``noise_scale`` multiplies the Brownian forcing (0 gives the
    deterministic damped flow, used only in tests and diagnostics).
    """

    gamma: float
    h: float
    h_max: float = 0.5
    noise_scale: float = 1.0

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if not self.h >= 0:
            raise ValueError(f"h must be non-negative, got {self.h}")
        if self.h > self.h_max:
            raise ValueError(f"h={self.h} exceeds h_max={self.h_max} "
                             "(raise h_max explicitly to allow it)")

    def ou_array(self):
        """``[E(h/2), F(h/2), a, b, c]`` for the compiled UBU step."""
        t = 0.5 * self.h
        a, b, c = ou_factor(ou_covariance(self.gamma, t))
        return np.array([damping(self.gamma, t), position_gain(self.gamma, t), a, b, c])


class TrajectoryDivergence(RuntimeError):
    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"trajectory produced a non-finite state at step {step}")


def em_update(x, v, g, gamma, h, xi):
    """Euler-Maruyama map given the drift force ``g`` and scaled noise ``xi``.

    ``xi`` is the velocity increment ``sqrt(2 gamma) dB`` (variance 2 gamma h).
    """
    return x + h * v, v - h * g - gamma * h * v + xi


def ubu_update(x, v, grad, gamma, h, noise1, noise2):
    """U(h/2) B(h) U(h/2) with OU noise pairs ``noise1``/``noise2`` = (xi_x, xi_v)."""
    e = damping(gamma, 0.5 * h)
    f = position_gain(gamma, 0.5 * h)
    y = x + f * v + noise1[0]
    w = e * v + noise1[1]
    w = w - h * grad(y)
    return y + f * w + noise2[0], e * w + noise2[1]


def _checked(x, v):
    s = State(x, v)
    if not s.is_finite():
        raise TrajectoryDivergence(None)
    return s


def em_step(state: State, model: PotentialModel, params: StepParams, stream: RngStream) -> State:
    xi = stream.normal(state.dim)
    scale = params.noise_scale * math.sqrt(2.0 * params.gamma * params.h)
    x, v = em_update(state.x, state.v, model.grad(state.x), params.gamma, params.h, scale * xi)
    return _checked(x, v)


def sgem_step(state: State, sg_model: StochasticGradientModel, params: StepParams,
              stream: RngStream) -> State:
    xi = stream.normal(state.dim)
    omega = sg_model.sample_omega(stream)
    scale = params.noise_scale * math.sqrt(2.0 * params.gamma * params.h)
    g = sg_model.b(state.x, omega)
    x, v = em_update(state.x, state.v, g, params.gamma, params.h, scale * xi)
    return _checked(x, v)


def _ubu_noise(params, d, stream):
    cov = ou_covariance(params.gamma, 0.5 * params.h)
    n1 = sample_ou_increment(cov, d, stream)
    n2 = sample_ou_increment(cov, d, stream)
    s = params.noise_scale
    return (s * n1[0], s * n1[1]), (s * n2[0], s * n2[1])


def ubu_step(state: State, model: PotentialModel, params: StepParams, stream: RngStream) -> State:
    n1, n2 = _ubu_noise(params, state.dim, stream)
    x, v = ubu_update(state.x, state.v, model.grad, params.gamma, params.h, n1, n2)
    return _checked(x, v)


def sgubu_step(state: State, sg_model: StochasticGradientModel, params: StepParams,
               stream: RngStream) -> State:
    """UBU with one surrogate gradient b(., omega) per step, omega drawn after the noise."""
    n1, n2 = _ubu_noise(params, state.dim, stream)
    omega = sg_model.sample_omega(stream)
    x, v = ubu_update(state.x, state.v, lambda y: sg_model.b(y, omega),
                      params.gamma, params.h, n1, n2)
    return _checked(x, v)


_STEPS = {K.K_EM: em_step, K.K_UBU: ubu_step, K.K_SGEM: sgem_step, K.K_SGUBU: sgubu_step}


def _resolve(kind: IntegratorKind, model):
    """Split ``model`` into (potential, surrogate) for ``kind``."""
    if isinstance(model, StochasticGradientModel):
        sg, base = model, model.base
    else:
        base, sg = model, None
    if kind.uses_stochastic_gradient and sg is None:
        sg = exact_stochastic_gradient(base)
    return base, sg


def step(kind: IntegratorKind, state: State, model, params: StepParams,
         stream: RngStream) -> State:
    base, sg = _resolve(kind, model)
    return _STEPS[kind.code](state, sg if kind.uses_stochastic_gradient else base,
                             params, stream)


def _kernel_args(kind, model, f=None):
    base, sg = _resolve(kind, model)
    if base.kernel_code is None:
        return None
    if kind.uses_stochastic_gradient and sg.kernel_code is None:
        return None
    if f is not None and f.kernel_code is None:
        return None
    sgcode = sg.kernel_code if sg is not None else K.SG_EXACT
    sgparams = sg.kernel_params if sg is not None else np.zeros(1)
    return (int(base.kernel_code), np.asarray(base.kernel_params, dtype=float),
            int(sgcode), np.asarray(sgparams, dtype=float))


def simulate_time_average(kind: IntegratorKind, model, params: StepParams, f: TestFunction,
                          n_steps: int, stream: RngStream, initial: State,
                          burn_in: int = 0):
    """Mean of f(Z_n) for burn_in <= n < n_steps (Z_0 counted, Z_N not) and Z_N.

    Advances ``stream``.  Raises :class:`TrajectoryDivergence` with the step index.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if not 0 <= burn_in < n_steps:
        raise ValueError("burn_in must lie in [0, n_steps)")
    args = _kernel_args(kind, model, f)
    if args is not None:
        res = _run_kernel_average(kind, args, params, f, n_steps, burn_in, stream.master_seed,
                                  np.array([stream.stream_id], dtype=np.uint64), initial,
                                  np.array([stream.counter], dtype=np.uint64))
        stream.counter = int(res.counters[0])
        if res.diverged[0]:
            raise TrajectoryDivergence(int(res.diverged[0]))
        return float(res.averages[0]), State(res.x[0], res.v[0])

    base, sg = _resolve(kind, model)
    target = sg if kind.uses_stochastic_gradient else base
    fn = _STEPS[kind.code]
    state = initial
    total = comp = block = 0.0
    for n in range(n_steps):
        if n >= burn_in:
            block += float(f.f(state.x, state.v))
            if (n - burn_in) % K.SUM_BLOCK == K.SUM_BLOCK - 1:
                total, comp = _neumaier(total, comp, block)
                block = 0.0
        try:
            state = fn(state, target, params, stream)
        except TrajectoryDivergence:
            raise TrajectoryDivergence(n + 1) from None
    total, comp = _neumaier(total, comp, block)
    return (total + comp) / (n_steps - burn_in), state


def _neumaier(total, comp, y):
    t = total + y
    comp += (total - t) + y if abs(total) >= abs(y) else (y - t) + total
    return t, comp


@dataclass
class EnsembleResult:
    averages: np.ndarray
    x: np.ndarray
    v: np.ndarray
    diverged: np.ndarray  # 1-based divergence step, 0 when finite
    counters: np.ndarray


def _initial_arrays(initial, n):
    if isinstance(initial, State):
        x0 = np.tile(initial.x, (n, 1))
        v0 = np.tile(initial.v, (n, 1))
    else:
        x0, v0 = (np.asarray(a, dtype=float) for a in initial)
        x0 = np.broadcast_to(x0, (n, x0.shape[-1])).copy()
        v0 = np.broadcast_to(v0, (n, v0.shape[-1])).copy()
    return np.ascontiguousarray(x0), np.ascontiguousarray(v0)


def _run_kernel_average(kind, args, params, f, n_steps, burn_in, master_seed, ids, initial,
                        counters):
    gcode, gparams, sgcode, sgparams = args
    n = len(ids)
    x0, v0 = _initial_arrays(initial, n)
    avg = np.empty(n)
    xo = np.empty_like(x0)
    vo = np.empty_like(v0)
    div = np.zeros(n, dtype=np.int64)
    counters = counters.copy()
    K.run_time_average(kind.code, x0, v0, float(params.gamma), float(params.h), int(n_steps),
                       int(burn_in), float(params.noise_scale), params.ou_array(),
                       gcode, gparams, sgcode, sgparams, int(f.kernel_code),
                       np.asarray(f.kernel_params, dtype=float), np.uint64(master_seed),
                       ids, counters, avg, xo, vo, div)
    return EnsembleResult(avg, xo, vo, div, counters)


def simulate_ensemble(kind: IntegratorKind, model, params: StepParams, f: TestFunction,
                      n_steps: int, master_seed: int, stream_ids, initial,
                      burn_in: int = 0) -> EnsembleResult:
    """Independent trajectories, trajectory ``i`` driven by stream ``(master_seed, stream_ids[i])``.

    ``initial`` is a :class:`State` shared by all trajectories or a pair of
    ``(n, d)`` arrays.  Divergence is recorded, not raised.
    """
    ids = np.asarray(stream_ids, dtype=np.uint64)
    if n_steps < 1 or not 0 <= burn_in < n_steps:
        raise ValueError("need n_steps >= 1 and 0 <= burn_in < n_steps")
    args = _kernel_args(kind, model, f)
    if args is not None:
        return _run_kernel_average(kind, args, params, f, n_steps, burn_in, master_seed, ids,
                                   initial, np.zeros(len(ids), dtype=np.uint64))
    x0, v0 = _initial_arrays(initial, len(ids))
    res = EnsembleResult(np.empty(len(ids)), np.empty_like(x0), np.empty_like(v0),
                         np.zeros(len(ids), dtype=np.int64), np.zeros(len(ids), dtype=np.uint64))
    for i, sid in enumerate(ids):
        stream = RngStream(master_seed, int(sid))
        try:
            avg, final = simulate_time_average(kind, model, params, f, n_steps, stream,
                                               State(x0[i], v0[i]), burn_in)
            res.averages[i], res.x[i], res.v[i] = avg, final.x, final.v
        except TrajectoryDivergence as exc:
            res.averages[i] = np.nan
            res.x[i] = res.v[i] = np.nan
            res.diverged[i] = exc.step
        res.counters[i] = stream.counter
    return res


def simulate_checkpoints(kind: IntegratorKind, model, params: StepParams, checkpoints,
                         master_seed: int, stream_ids, initial):
    """States at the given step counts, shape ``(n_traj, n_checkpoints, d)`` each.

    Returns ``(xs, vs, diverged)``; diverged trajectories hold NaN after divergence.
    """
    ids = np.asarray(stream_ids, dtype=np.uint64)
    ck = np.asarray(checkpoints, dtype=np.int64)
    if np.any(np.diff(ck) < 0) or np.any(ck < 0):
        raise ValueError("checkpoints must be sorted and non-negative")
    x0, v0 = _initial_arrays(initial, len(ids))
    n, d = x0.shape
    xs = np.empty((n, len(ck), d))
    vs = np.empty((n, len(ck), d))
    div = np.zeros(n, dtype=np.int64)
    args = _kernel_args(kind, model)
    if args is not None:
        gcode, gparams, sgcode, sgparams = args
        K.run_checkpoints(kind.code, x0, v0, float(params.gamma), float(params.h), ck,
                          float(params.noise_scale), params.ou_array(), gcode, gparams,
                          sgcode, sgparams, np.uint64(master_seed), ids,
                          np.zeros(n, dtype=np.uint64), xs, vs, div)
        return xs, vs, div
    base, sg = _resolve(kind, model)
    target = sg if kind.uses_stochastic_gradient else base
    fn = _STEPS[kind.code]
    for i, sid in enumerate(ids):
        stream = RngStream(master_seed, int(sid))
        state = State(x0[i], v0[i])
        done = 0
        for k, target_n in enumerate(ck):
            while done < target_n and not div[i]:
                try:
                    state = fn(state, target, params, stream)
                except TrajectoryDivergence:
                    div[i] = done + 1
                done += 1
            if div[i]:
                xs[i, k] = vs[i, k] = np.nan
            else:
                xs[i, k], vs[i, k] = state.x, state.v
    return xs, vs, div
