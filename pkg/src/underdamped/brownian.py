"""Brownian paths and the Gaussian integrals of the damped (OU) sub-flow.

The velocity/position noise of an OU sub-step of length ``t`` is the pair

    xi_v = sqrt(2 gamma) * int_0^t exp(-gamma (t - s)) dB_s
    xi_x = sqrt(2 gamma) * int_0^t (1 - exp(-gamma (t - s))) / gamma dB_s

whose per-coordinate covariance follows from the Ito isometry.

A :class:`BrownianPath` stores dyadic increments.  When built with a
damping rate it also carries, per cell ``[s_k, s_{k+1}]``, the damped
integral ``J_k = int exp(-gamma (s_{k+1} - s)) dB_s``.  Because the
exponential weight factorizes across cells, the OU noise of any
cell-aligned window is an exact finite sum of ``(dB_k, J_k)``; this is what
the strong-order probe uses to couple coarse and fine integrators.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .streams import RngStream

__all__ = [
    "OuCovariance", "ou_covariance", "sample_ou_increment", "ou_factor",
    "damping", "position_gain",
    "BrownianPath", "brownian_path", "refine", "weighted_integral",
    "ou_window_noise",
]


def damping(gamma, t):
    """E(t) = exp(-gamma t)."""
    return np.exp(-gamma * t)


def position_gain(gamma, t):
    """F(t) = (1 - exp(-gamma t)) / gamma."""
    return -np.expm1(-gamma * t) / gamma


def _sxx_series(a):
    # a + 2 expm1(-a) - expm1(-2a)/2 = sum_{n>=3} (-1)^(n+1) (2^(n-1) - 2) a^n / n!
    total = 0.0
    term = a * a / 2.0  # a^n / n! at n = 2
    for n in range(3, 25):
        term *= a / n
        total += (-1) ** (n + 1) * (2.0 ** (n - 1) - 2.0) * term
    return total


@dataclass(frozen=True)
class OuCovariance:
    """Per-coordinate covariance of ``(xi_x, xi_v)`` for an OU step of length ``t``."""

    gamma: float
    t: float
    sigma_xx: float
    sigma_xv: float
    sigma_vv: float

    def matrix(self):
        return np.array([[self.sigma_xx, self.sigma_xv], [self.sigma_xv, self.sigma_vv]])


def ou_covariance(gamma: float, t: float) -> OuCovariance:
    if not gamma > 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    if not t >= 0:
        raise ValueError(f"t must be non-negative, got {t}")
    a = gamma * t
    e1 = np.expm1(-a)
    e2 = np.expm1(-2.0 * a)
    s_vv = -e2
    s_xv = e1 * e1 / gamma
    if a < 0.1:
        g = _sxx_series(a)
    else:
        g = a + 2.0 * e1 - 0.5 * e2
    s_xx = 2.0 * g / gamma**2
    return OuCovariance(float(gamma), float(t), float(s_xx), float(s_xv), float(s_vv))


def ou_factor(cov: OuCovariance):
    """Factor ``(a, b, c)`` with ``xi_v = a z1`` and ``xi_x = b z1 + c z2``.

    This is the Cholesky factor of the covariance with the velocity
    coordinate ordered first.
    """
    sxx, sxv, svv = cov.sigma_xx, cov.sigma_xv, cov.sigma_vv
    scale = max(1.0, sxx * svv)
    if sxx < 0 or svv < 0 or sxx * svv - sxv * sxv < -1e-14 * scale:
        raise ValueError(f"OU covariance is not positive semidefinite: {cov}")
    if svv == 0.0:
        return 0.0, 0.0, float(np.sqrt(sxx))
    a = np.sqrt(svv)
    b = sxv / a
    c = np.sqrt(max(sxx - b * b, 0.0))
    return float(a), float(b), float(c)


def sample_ou_increment(cov: OuCovariance, d: int, stream: RngStream):
    """Draw ``(xi_x, xi_v)``, each in R^d, with exact covariance ``cov``.

    Consumes ``2 d`` normals: the first ``d`` drive the velocity component.
    """
    a, b, c = ou_factor(cov)
    z = stream.normal(2 * d)
    z1, z2 = z[:d], z[d:]
    return b * z1 + c * z2, a * z1


@dataclass(frozen=True)
class BrownianPath:
    """Dyadic increments of a d-dimensional Brownian motion on ``[0, horizon]``.

    ``increments[k]`` is ``B_{s_{k+1}} - B_{s_k}`` with ``s_k = k horizon / 2^level``.
    ``damped`` (optional, with ``gamma``) holds the per-cell damped integrals.
    """

    horizon: float
    level: int
    increments: np.ndarray
    gamma: float | None = None
    damped: np.ndarray | None = None

    @property
    def n_cells(self):
        return self.increments.shape[0]

    @property
    def dim(self):
        return self.increments.shape[1]

    @property
    def cell(self):
        return self.horizon / 2**self.level

    def values(self):
        """B at the grid points ``s_0, ..., s_n`` (starting from 0)."""
        out = np.zeros((self.n_cells + 1, self.dim))
        np.cumsum(self.increments, axis=0, out=out[1:])
        return out


def _cell_covariance(gamma, dt):
    """Covariance of (dB, J) over one cell of width dt."""
    return np.array([
        [dt, position_gain(gamma, dt)],
        [position_gain(gamma, dt), -np.expm1(-2.0 * gamma * dt) / (2.0 * gamma)],
    ])


def brownian_path(horizon: float, level: int, d: int, stream: RngStream,
                  gamma: float | None = None) -> BrownianPath:
    if horizon <= 0 or level < 0:
        raise ValueError("need horizon > 0 and level >= 0")
    n = 2**level
    dt = horizon / n
    if gamma is None:
        inc = np.sqrt(dt) * stream.normal((n, d))
        return BrownianPath(float(horizon), int(level), inc)
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    chol = np.linalg.cholesky(_cell_covariance(gamma, dt))
    z = stream.normal((n, d, 2))
    pair = z @ chol.T
    return BrownianPath(float(horizon), int(level), pair[..., 0].copy(), float(gamma),
                        pair[..., 1].copy())


def _refine_once(path: BrownianPath, stream: RngStream) -> BrownianPath:
    n, d = path.increments.shape
    dt = path.cell
    parent = path.increments
    if path.damped is None:
        z = stream.normal((n, d))
        first = 0.5 * parent + np.sqrt(dt / 4.0) * z
        second = parent - first
        inc = np.stack([first, second], axis=1).reshape(2 * n, d)
        return replace(path, level=path.level + 1, increments=inc)

    gamma = path.gamma
    half = 0.5 * dt
    e = damping(gamma, half)
    child = _cell_covariance(gamma, half)
    # children w = (dB1, J1, dB2, J2), parent y = A w
    sigma = np.zeros((4, 4))
    sigma[:2, :2] = child
    sigma[2:, 2:] = child
    A = np.array([[1.0, 0.0, 1.0, 0.0], [0.0, e, 0.0, 1.0]])
    gain = sigma @ A.T @ np.linalg.inv(A @ sigma @ A.T)
    cond = sigma - gain @ A @ sigma
    c11 = 0.5 * (cond[:2, :2] + cond[:2, :2].T)
    vals, vecs = np.linalg.eigh(c11)
    root = vecs * np.sqrt(np.clip(vals, 0.0, None))
    y = np.stack([parent, path.damped], axis=-1)  # (n, d, 2)
    z = stream.normal((n, d, 2))
    w1 = y @ gain[:2].T + z @ root.T
    db1, j1 = w1[..., 0], w1[..., 1]
    db2 = parent - db1
    j2 = path.damped - e * j1
    inc = np.stack([db1, db2], axis=1).reshape(2 * n, d)
    dmp = np.stack([j1, j2], axis=1).reshape(2 * n, d)
    return replace(path, level=path.level + 1, increments=inc, damped=dmp)


def refine(path: BrownianPath, target_level: int, stream: RngStream) -> BrownianPath:
    """Brownian-bridge refinement to ``target_level`` (midpoint insertion per level).

    Every coarse increment equals the sum of its children.  For damped
    paths the children are drawn from the exact Gaussian conditional given
    both parent quantities, so ``J`` is preserved too.
    """
    if target_level < path.level:
        raise ValueError(f"target level {target_level} below current level {path.level}")
    while path.level < target_level:
        path = _refine_once(path, stream)
    return path


def _window_cells(path: BrownianPath, start: float, length: float, min_cells: int):
    dt = path.cell
    i0 = start / dt
    m = length / dt
    k0, km = int(round(i0)), int(round(m))
    tol = 1e-9
    if start < -tol * dt or start + length > path.horizon * (1 + 1e-12) + tol * dt:
        raise ValueError(f"window [{start}, {start + length}] outside [0, {path.horizon}]")
    if abs(i0 - k0) > tol or abs(m - km) > tol:
        raise ValueError("window is not aligned with the path grid")
    if km < min_cells:
        raise ValueError(f"window spans {km} cells; at least {min_cells} required "
                         "(refine the path first)")
    return k0, km


def weighted_integral(path: BrownianPath, weight, window, min_cells: int = 64):
    """Left-point Riemann sum of ``int_0^t weight(s) dB_{a+s}`` over ``window = (a, t)``.

    ``weight`` maps local times ``s in [0, t)`` to reals (vectorized).
    """
    a, t = window
    k0, km = _window_cells(path, a, t, min_cells)
    s = np.arange(km) * path.cell
    w = np.broadcast_to(np.asarray(weight(s), dtype=float), (km,))
    return w @ path.increments[k0:k0 + km]


def ou_window_noise(path: BrownianPath, length: float, start: float = 0.0,
                    count: int | None = None):
    """Exact OU noise pairs for consecutive windows of ``length``.

    Returns ``(xi_x, xi_v)`` of shape ``(count, d)``; window ``j`` covers
    ``[start + j length, start + (j + 1) length]``.  Requires a damped path.
    """
    if path.damped is None:
        raise ValueError("path carries no damped integrals (build it with gamma)")
    gamma = path.gamma
    k0, m = _window_cells(path, start, length, 1)
    if count is None:
        count = (path.n_cells - k0) // m
    dt = path.cell
    stop = k0 + count * m
    if stop > path.n_cells:
        raise ValueError("windows run past the path horizon")
    d = path.dim
    inc = path.increments[k0:stop].reshape(count, m, d)
    dmp = path.damped[k0:stop].reshape(count, m, d)
    # weight of cell j inside a window: E(t - s_{j+1})
    decay = damping(gamma, (m - 1 - np.arange(m)) * dt)
    root = np.sqrt(2.0 * gamma)
    int_e = np.einsum("j,wjd->wd", decay, dmp)
    xi_v = root * int_e
    xi_x = root * (inc.sum(axis=1) - int_e) / gamma
    return xi_x, xi_v
