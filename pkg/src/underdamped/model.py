"""Potentials, test functions and stochastic-gradient oracles.

Models are plain dataclasses holding NumPy callables plus the constants of
the growth/convexity/drift assumptions.  Built-in models also carry a
kernel code so the compiled ensemble drivers can evaluate them; models
without one still work with the (slower) NumPy step functions.

Registry strings (used by the CLI):

    potentials          quadratic-sine | quadratic:k | minibatch-quadratic:M,B | zero[:d]
    test functions      x | v | cos | x2 | const:c
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from . import _kernels as K
from .streams import RngStream

__all__ = [
    "PotentialModel", "TestFunction", "StochasticGradientModel", "AssumptionReport",
    "quadratic_sine_potential", "quadratic_sine_stochastic_gradient", "quadratic_potential",
    "zero_potential", "minibatch_quadratic", "minibatch_gradient", "choose_subset",
    "exact_stochastic_gradient", "check_assumptions",
    "parse_model", "parse_stochastic_gradient", "parse_test_function",
    "MODEL_HELP", "TEST_FUNCTION_HELP",
]

MODEL_HELP = ("quadratic-sine | quadratic:k | minibatch-quadratic:M,B | zero[:d]")
TEST_FUNCTION_HELP = "x | v | cos | x2 | const:c"


@dataclass(frozen=True)
class PotentialModel:
    """A potential U on R^d with its derivatives and assumption constants.

    ``grad`` and ``hessian`` accept a single point of shape ``(d,)``;
    ``u`` and ``grad`` also accept batches ``(..., d)``.
    """

    dim: int
    u: Callable
    grad: Callable
    hessian: Callable | None = None
    m: float = 0.0
    big_r: float = 0.0
    c1: float = 1.0
    c0: float = 0.0
    name: str = "custom"
    kernel_code: int | None = None
    kernel_params: np.ndarray = field(default_factory=lambda: np.zeros(1))


@dataclass(frozen=True)
class TestFunction:
    """Observable f(x, v) with gradient ``grad_f`` returning ``(grad_x, grad_v)``."""

    __test__ = False  # keep pytest from collecting this class

    f: Callable
    grad_f: Callable
    c2: float = 1.0
    name: str = "custom"
    constant: float | None = None
    kernel_code: int | None = None
    kernel_params: np.ndarray = field(default_factory=lambda: np.zeros(1))


@dataclass(frozen=True)
class StochasticGradientModel:
    """Unbiased random surrogate b(x, omega) for the gradient of ``base``.

    ``c1`` is the almost-sure linear-growth constant, or ``None`` when the
    noise is unbounded (no such constant exists).
    """

    base: PotentialModel
    sample_omega: Callable[[RngStream], Any]
    b: Callable[[np.ndarray, Any], np.ndarray]
    c1: float | None = None
    name: str = "custom"
    kernel_code: int | None = None
    kernel_params: np.ndarray = field(default_factory=lambda: np.zeros(1))


def _hessian_const(k, d):
    eye = k * np.eye(d)
    return lambda x: eye.copy()


def quadratic_potential(k: float, d: int = 1) -> PotentialModel:
    """U(x) = k |x|^2 / 2."""
    if not k > 0:
        raise ValueError(f"quadratic stiffness must be positive, got {k}")
    k = float(k)
    return PotentialModel(
        dim=d,
        u=lambda x: 0.5 * k * np.sum(np.asarray(x) ** 2, axis=-1),
        grad=lambda x: k * np.asarray(x, dtype=float),
        hessian=_hessian_const(k, d),
        m=k, big_r=0.0, c1=k, c0=0.0,
        name=f"quadratic:{k:g}",
        kernel_code=K.G_QUADRATIC, kernel_params=np.array([k]),
    )


def zero_potential(d: int = 1) -> PotentialModel:
    """U = 0: the free damped particle (no confinement, so no invariant law)."""
    return PotentialModel(
        dim=d,
        u=lambda x: np.zeros(np.shape(x)[:-1]),
        grad=lambda x: np.zeros_like(np.asarray(x, dtype=float)),
        hessian=lambda x: np.zeros((d, d)),
        m=0.0, big_r=0.0, c1=1.0, c0=0.0,
        name="zero" if d == 1 else f"zero:{d}",
        kernel_code=K.G_ZERO,
    )


def quadratic_sine_potential() -> PotentialModel:
    """U(x) = x^2/2 + sin x on the real line.

    U'' = 1 - sin x touches zero, so only m = 0 holds as a Hessian bound.
    The drift condition x U'(x) >= 0.5 x^2 - c0 holds with c0 = 2 (in fact
    0.5 suffices since 0.5 x^2 + x cos x >= 0.5 x^2 - |x|).
    """
    return PotentialModel(
        dim=1,
        u=lambda x: np.sum(0.5 * np.asarray(x) ** 2 + np.sin(x), axis=-1),
        grad=lambda x: np.asarray(x, dtype=float) + np.cos(x),
        hessian=lambda x: np.atleast_2d(1.0 - np.sin(np.asarray(x, dtype=float)[0])),
        m=0.0, big_r=0.0, c1=2.0, c0=2.0,
        name="quadratic-sine",
        kernel_code=K.G_QSINE,
    )


def quadratic_sine_stochastic_gradient() -> StochasticGradientModel:
    """b(x, w) = w1 x + w2 + cos x with w1 ~ U(0.2, 1.8), w2 ~ N(0, 0.4^2).

    omega is drawn as one uniform followed by one normal.  The Gaussian
    offset is unbounded, so there is no almost-sure growth constant.
    """
    lo, hi, sd = 0.2, 1.8, 0.4

    def sample_omega(stream):
        u = stream.uniform()
        z = stream.normal()
        return (lo + (hi - lo) * u, sd * z)

    def b(x, omega):
        w1, w2 = omega
        x = np.asarray(x, dtype=float)
        return w1 * x + w2 + np.cos(x)

    return StochasticGradientModel(
        base=quadratic_sine_potential(), sample_omega=sample_omega, b=b, c1=None,
        name="quadratic-sine", kernel_code=K.SG_QSINE,
        kernel_params=np.array([lo, hi, sd]))


def exact_stochastic_gradient(model: PotentialModel) -> StochasticGradientModel:
    """Degenerate surrogate b(x, .) = grad U(x); draws nothing."""
    return StochasticGradientModel(
        base=model, sample_omega=lambda stream: None, b=lambda x, omega: model.grad(x),
        c1=model.c1, name=f"exact({model.name})", kernel_code=K.SG_EXACT)


def choose_subset(n_parts: int, batch: int, stream: RngStream) -> np.ndarray:
    """Uniform size-``batch`` subset of ``range(n_parts)`` via partial Fisher-Yates.

    Consumes exactly ``batch`` uniforms; the compiled kernel does the same.
    """
    if not 1 <= batch <= n_parts:
        raise ValueError(f"batch size {batch} outside [1, {n_parts}]")
    idx = np.arange(n_parts)
    u = stream.uniform(batch)
    for i in range(batch):
        j = min(i + int(u[i] * (n_parts - i)), n_parts - 1)
        idx[i], idx[j] = idx[j], idx[i]
    return idx[:batch].copy()


def minibatch_gradient(parts, batch: int, stream: RngStream, x) -> np.ndarray:
    """(1/B) sum_{j in C} grad U_j(x) for a uniform random subset C of size B."""
    subset = choose_subset(len(parts), batch, stream)
    return sum(parts[j](x) for j in subset) / batch


def minibatch_quadratic(n_parts: int, batch: int, d: int = 1):
    """Average of quadratics U_j = k_j |x|^2/2 with k_j = 2j/(M+1), mean 1.

    Returns ``(model, stochastic_gradient)``; the stochastic gradient is the
    mini-batch average over ``batch`` of the ``n_parts`` components.
    """
    if n_parts < 1:
        raise ValueError("need at least one part")
    if not 1 <= batch <= n_parts:
        raise ValueError(f"batch size {batch} outside [1, {n_parts}]")
    ks = 2.0 * np.arange(1, n_parts + 1) / (n_parts + 1)
    kbar = float(ks.mean())
    params = np.concatenate([[n_parts, batch], ks])
    base = PotentialModel(
        dim=d,
        u=lambda x: 0.5 * kbar * np.sum(np.asarray(x) ** 2, axis=-1),
        grad=lambda x: kbar * np.asarray(x, dtype=float),
        hessian=_hessian_const(kbar, d),
        m=kbar, big_r=0.0, c1=kbar, c0=0.0,
        name=f"minibatch-quadratic:{n_parts},{batch}",
        kernel_code=K.G_MINIBATCH, kernel_params=params,
    )
    parts = [(lambda x, k=k: k * np.asarray(x, dtype=float)) for k in ks]

    def b(x, omega):
        return sum(parts[j](x) for j in omega) / batch

    sg = StochasticGradientModel(
        base=base, sample_omega=lambda stream: choose_subset(n_parts, batch, stream),
        b=b, c1=float(ks.max()), name=base.name,
        kernel_code=K.SG_MINIBATCH, kernel_params=params)
    return base, sg


# -- test functions ---------------------------------------------------------

def _first(a):
    return np.asarray(a, dtype=float)[..., 0]


def _unit_first(a, scale):
    g = np.zeros_like(np.asarray(a, dtype=float))
    g[..., 0] = scale
    return g


def parse_test_function(text: str) -> TestFunction:
    """Resolve a test-function id (see :data:`TEST_FUNCTION_HELP`)."""
    s = text.strip().lower()
    if s == "x":
        return TestFunction(f=lambda x, v: _first(x),
                            grad_f=lambda x, v: (_unit_first(x, 1.0), np.zeros_like(v)),
                            c2=1.0, name="x", kernel_code=K.F_X)
    if s == "v":
        return TestFunction(f=lambda x, v: _first(v),
                            grad_f=lambda x, v: (np.zeros_like(x), _unit_first(v, 1.0)),
                            c2=1.0, name="v", kernel_code=K.F_V)
    if s == "cos":
        return TestFunction(f=lambda x, v: np.cos(_first(x)),
                            grad_f=lambda x, v: (_unit_first(x, 1.0) * -np.sin(_first(x))[..., None],
                                                 np.zeros_like(v)),
                            c2=1.0, name="cos", kernel_code=K.F_COS)
    if s == "x2":
        return TestFunction(f=lambda x, v: _first(x) ** 2,
                            grad_f=lambda x, v: (_unit_first(x, 1.0) * 2 * _first(x)[..., None],
                                                 np.zeros_like(v)),
                            c2=np.inf, name="x2", kernel_code=K.F_X2)
    if s.startswith("const:") or s == "one":
        c = 1.0 if s == "one" else _parse_float(s.split(":", 1)[1], text)
        return TestFunction(f=lambda x, v: np.full(np.shape(x)[:-1], c),
                            grad_f=lambda x, v: (np.zeros_like(x), np.zeros_like(v)),
                            c2=0.0, name=f"const:{c:g}", constant=c,
                            kernel_code=K.F_CONST, kernel_params=np.array([c]))
    raise ValueError(f"unknown test function {text!r}; expected {TEST_FUNCTION_HELP}")


def _parse_float(tok, text):
    try:
        return float(tok)
    except ValueError:
        raise ValueError(f"bad number {tok!r} in {text!r}") from None


def _parse_int(tok, text):
    try:
        return int(tok)
    except ValueError:
        raise ValueError(f"bad integer {tok!r} in {text!r}") from None


def parse_model(text: str) -> PotentialModel:
    """Resolve a potential id (see :data:`MODEL_HELP`)."""
    s = text.strip().lower()
    name, _, arg = s.partition(":")
    if name == "quadratic-sine" and not arg:
        return quadratic_sine_potential()
    if name == "quadratic":
        return quadratic_potential(_parse_float(arg, text) if arg else 1.0)
    if name == "zero":
        return zero_potential(_parse_int(arg, text) if arg else 1)
    if name == "minibatch-quadratic":
        toks = arg.split(",")
        if len(toks) != 2:
            raise ValueError(f"expected minibatch-quadratic:M,B, got {text!r}")
        return minibatch_quadratic(_parse_int(toks[0], text), _parse_int(toks[1], text))[0]
    raise ValueError(f"unknown model {text!r}; expected {MODEL_HELP}")


def parse_stochastic_gradient(text: str) -> StochasticGradientModel:
    """Stochastic gradient registered for a potential id.

    Potentials without a registered surrogate get the exact (degenerate) one.
    """
    s = text.strip().lower()
    name, _, arg = s.partition(":")
    if name == "quadratic-sine" and not arg:
        return quadratic_sine_stochastic_gradient()
    if name == "minibatch-quadratic":
        parse_model(text)  # validates the argument list
        n, b = (int(t) for t in arg.split(","))
        return minibatch_quadratic(n, b)[1]
    return exact_stochastic_gradient(parse_model(text))


# -- assumption checks ------------------------------------------------------

@dataclass
class AssumptionReport:
    points: np.ndarray
    growth_ok: np.ndarray
    drift_ok: np.ndarray
    hessian_ok: np.ndarray | None
    hessian_status: str  # "checked" | "skipped"

    @property
    def passed(self) -> bool:
        ok = bool(self.growth_ok.all() and self.drift_ok.all())
        if self.hessian_ok is not None:
            ok = ok and bool(self.hessian_ok.all())
        return ok

    def failures(self):
        out = {"growth": self.points[~self.growth_ok], "drift": self.points[~self.drift_ok]}
        if self.hessian_ok is not None:
            out["hessian"] = self.points[~self.hessian_ok]
        return out


def check_assumptions(model: PotentialModel, grid, rtol: float = 1e-12) -> AssumptionReport:
    """Check growth, drift and (outside the ball of radius R) convexity on ``grid``.

    Failures are reported per point; nothing is raised for a failing model.
    """
    pts = np.asarray(grid, dtype=float).reshape(-1, model.dim)
    if len(pts) == 0:
        raise ValueError("empty grid")
    g = np.array([model.grad(p) for p in pts]).reshape(len(pts), model.dim)
    r = np.linalg.norm(pts, axis=1)
    growth = np.linalg.norm(g, axis=1) <= model.c1 * (r + 1) * (1 + rtol)
    drift = np.einsum("ij,ij->i", pts, g) >= model.m * r**2 - model.c0 - rtol * (1 + r**2)
    if model.hessian is None:
        return AssumptionReport(pts, growth, drift, None, "skipped")
    hess_ok = np.ones(len(pts), dtype=bool)
    for i, p in enumerate(pts):
        if r[i] >= model.big_r:
            lam = np.linalg.eigvalsh(np.atleast_2d(model.hessian(p)))[0]
            hess_ok[i] = lam >= model.m - rtol * max(1.0, abs(model.m))
    return AssumptionReport(pts, growth, drift, hess_ok, "checked")
