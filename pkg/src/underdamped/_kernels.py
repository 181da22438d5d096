"""Compiled one-step maps and ensemble drivers.

Built-in models, stochastic gradients and test functions are dispatched by
integer code so every driver compiles once and caches to disk.  The draw
order inside a step is fixed (Gaussian noise first, then the stochastic
gradient's omega) and mirrored exactly by the NumPy step functions in
:mod:`underdamped.integrators`.
"""

import warnings

import numba as nb
import numpy as np

from .streams import draw_normal, draw_uniform, key_from_seeds

# try OpenMP before TBB; an outdated TBB only triggers a warning on every run
nb.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

# The per-trajectory helpers below contain no parallel loop, but compiling
# them through the parallel pipeline makes the serial code several times
# faster.  numba notes the missing parallel transform; that note is expected.
warnings.filterwarnings("ignore", message=r"\s*The keyword argument 'parallel=True' was specified",
                        category=nb.NumbaPerformanceWarning)

# potential gradients
G_ZERO, G_QUADRATIC, G_QSINE, G_MINIBATCH = 0, 1, 2, 3
# stochastic gradients
SG_EXACT, SG_QSINE, SG_MINIBATCH = 0, 1, 2
# test functions
F_CONST, F_X, F_V, F_COS, F_X2 = 0, 1, 2, 3, 4
# integrators
K_EM, K_UBU, K_SGEM, K_SGUBU = 0, 1, 2, 3

# time averages add plain block sums of this length with compensation
SUM_BLOCK = 1024


@nb.njit(inline="always", cache=True)
def grad_into(code, params, x, out):
    d = x.shape[0]
    if code == G_ZERO:
        for i in range(d):
            out[i] = 0.0
    elif code == G_QUADRATIC:
        for i in range(d):
            out[i] = params[0] * x[i]
    elif code == G_QSINE:
        for i in range(d):
            out[i] = x[i] + np.cos(x[i])
    elif code == G_MINIBATCH:
        # params = [M, B, k_1..k_M]; full gradient is mean(k) x
        n = int(params[0])
        s = 0.0
        for j in range(n):
            s += params[2 + j]
        s /= n
        for i in range(d):
            out[i] = s * x[i]
    else:
        raise ValueError("unknown gradient code")


@nb.njit(inline="always", cache=True)
def sg_into(code, params, gcode, gparams, x, key, ctr, out, scratch):
    d = x.shape[0]
    if code == SG_EXACT:
        grad_into(gcode, gparams, x, out)
    elif code == SG_QSINE:
        # params = [lo, hi, sd] for omega_1 ~ U(lo, hi), omega_2 ~ N(0, sd^2)
        u, ctr = draw_uniform(key, ctr)
        z, ctr = draw_normal(key, ctr)
        w1 = params[0] + (params[1] - params[0]) * u
        w2 = params[2] * z
        for i in range(d):
            out[i] = w1 * x[i] + w2 + np.cos(x[i])
    elif code == SG_MINIBATCH:
        n = int(params[0])
        b = int(params[1])
        for j in range(n):
            scratch[j] = j
        s = 0.0
        for i in range(b):
            u, ctr = draw_uniform(key, ctr)
            j = i + int(u * (n - i))
            if j >= n:
                j = n - 1
            t = scratch[i]
            scratch[i] = scratch[j]
            scratch[j] = t
            s += params[2 + scratch[i]]
        s /= b
        for i in range(d):
            out[i] = s * x[i]
    else:
        raise ValueError("unknown stochastic gradient code")
    return ctr


@nb.njit(inline="always", cache=True)
def f_eval(code, fparams, x, v):
    if code == F_CONST:
        return fparams[0]
    if code == F_X:
        return x[0]
    if code == F_V:
        return v[0]
    if code == F_COS:
        return np.cos(x[0])
    if code == F_X2:
        return x[0] * x[0]
    raise ValueError("unknown test function code")


@nb.njit(inline="always", cache=True)
def step_inplace(kind, x, v, gamma, h, noise, ou, gcode, gparams, sgcode, sgparams,
                 key, ctr, g, z, scratch):
    """Advance (x, v) by one step in place; returns the new counter.

    ``ou = [E(h/2), F(h/2), a, b, c]`` is the half-step OU factorization.
    """
    d = x.shape[0]
    if kind == K_EM or kind == K_SGEM:
        for i in range(d):
            z[i], ctr = draw_normal(key, ctr)
        if kind == K_SGEM:
            ctr = sg_into(sgcode, sgparams, gcode, gparams, x, key, ctr, g, scratch)
        else:
            grad_into(gcode, gparams, x, g)
        s = noise * np.sqrt(2.0 * gamma * h)
        for i in range(d):
            vi = v[i]
            x[i] = x[i] + h * vi
            v[i] = vi - h * g[i] - gamma * h * vi + s * z[i]
    else:
        for i in range(4 * d):
            z[i], ctr = draw_normal(key, ctr)
        e, f, a, b, c = ou[0], ou[1], noise * ou[2], noise * ou[3], noise * ou[4]
        for i in range(d):
            x[i] = x[i] + f * v[i] + b * z[i] + c * z[d + i]
            v[i] = e * v[i] + a * z[i]
        if kind == K_SGUBU:
            ctr = sg_into(sgcode, sgparams, gcode, gparams, x, key, ctr, g, scratch)
        else:
            grad_into(gcode, gparams, x, g)
        for i in range(d):
            v[i] = v[i] - h * g[i]
        for i in range(d):
            x[i] = x[i] + f * v[i] + b * z[2 * d + i] + c * z[3 * d + i]
            v[i] = e * v[i] + a * z[2 * d + i]
    return ctr


@nb.njit(inline="always", cache=True)
def _neumaier(total, comp, y):
    t = total + y
    if abs(total) >= abs(y):
        comp += (total - t) + y
    else:
        comp += (y - t) + total
    return t, comp


@nb.njit(inline="always", cache=True)
def _finite(x, v):
    for i in range(x.shape[0]):
        if not (np.isfinite(x[i]) and np.isfinite(v[i])):
            return False
    return True


@nb.njit(parallel=True, cache=True)
def _average_one(m, kind, x0, v0, gamma, h, n_steps, burn_in, noise, ou,
                 gcode, gparams, sgcode, sgparams, fcode, fparams,
                 seed, stream_ids, counters, n_scratch, avg_out, x_out, v_out, div_out):
    d = x0.shape[1]
    key = key_from_seeds(seed, stream_ids[m])
    ctr = counters[m]
    x = x0[m].copy()
    v = v0[m].copy()
    g = np.empty(d)
    z = np.empty(4 * d)
    scratch = np.empty(n_scratch, dtype=np.int64)
    total = 0.0
    comp = 0.0
    block = 0.0
    div_out[m] = 0
    for n in range(n_steps):
        if n >= burn_in:
            block += f_eval(fcode, fparams, x, v)
            if (n - burn_in) % SUM_BLOCK == SUM_BLOCK - 1:
                total, comp = _neumaier(total, comp, block)
                block = 0.0
        ctr = step_inplace(kind, x, v, gamma, h, noise, ou, gcode, gparams,
                           sgcode, sgparams, key, ctr, g, z, scratch)
        if not _finite(x, v):
            div_out[m] = n + 1
            break
    counters[m] = ctr
    if div_out[m] > 0:
        avg_out[m] = np.nan
    else:
        total, comp = _neumaier(total, comp, block)
        avg_out[m] = (total + comp) / (n_steps - burn_in)
    x_out[m] = x
    v_out[m] = v


@nb.njit(parallel=True, cache=True)
def run_time_average(kind, x0, v0, gamma, h, n_steps, burn_in, noise, ou,
                     gcode, gparams, sgcode, sgparams, fcode, fparams,
                     seed, stream_ids, counters, avg_out, x_out, v_out, div_out):
    """Per-trajectory mean of f(Z_n) over burn_in <= n < n_steps.

    ``counters`` holds start positions and receives final positions.
    ``div_out[m]`` is the 1-based step index that produced a non-finite
    state, or 0.
    """
    n_scratch = 1
    if sgcode == SG_MINIBATCH:
        n_scratch = int(sgparams[0])
    # a single call as the loop body lets prange split the trajectories
    for m in nb.prange(x0.shape[0]):
        _average_one(m, kind, x0, v0, gamma, h, n_steps, burn_in, noise, ou,
                     gcode, gparams, sgcode, sgparams, fcode, fparams,
                     seed, stream_ids, counters, n_scratch, avg_out, x_out, v_out, div_out)


@nb.njit(parallel=True, cache=True)
def _checkpoints_one(m, kind, x0, v0, gamma, h, checkpoints, noise, ou,
                     gcode, gparams, sgcode, sgparams,
                     seed, stream_ids, counters, n_scratch, xs_out, vs_out, div_out):
    d = x0.shape[1]
    key = key_from_seeds(seed, stream_ids[m])
    ctr = counters[m]
    x = x0[m].copy()
    v = v0[m].copy()
    g = np.empty(d)
    z = np.empty(4 * d)
    scratch = np.empty(n_scratch, dtype=np.int64)
    div_out[m] = 0
    n = 0
    alive = True
    for k in range(checkpoints.shape[0]):
        n_k = checkpoints[k] - n
        if alive:
            for _ in range(n_k):
                ctr = step_inplace(kind, x, v, gamma, h, noise, ou, gcode, gparams,
                                   sgcode, sgparams, key, ctr, g, z, scratch)
                n += 1
                if alive and not _finite(x, v):
                    alive = False
                    div_out[m] = n
                    n = checkpoints[k]
                    break
        if not alive:
            for i in range(d):
                xs_out[m, k, i] = np.nan
                vs_out[m, k, i] = np.nan
        else:
            for i in range(d):
                xs_out[m, k, i] = x[i]
                vs_out[m, k, i] = v[i]
    counters[m] = ctr


@nb.njit(parallel=True, cache=True)
def run_checkpoints(kind, x0, v0, gamma, h, checkpoints, noise, ou,
                    gcode, gparams, sgcode, sgparams,
                    seed, stream_ids, counters, xs_out, vs_out, div_out):
    """Record states at the (sorted, non-negative) step counts in ``checkpoints``.

    Diverged trajectories leave NaN in the remaining checkpoint slots.
    """
    n_scratch = 1
    if sgcode == SG_MINIBATCH:
        n_scratch = int(sgparams[0])
    for m in nb.prange(x0.shape[0]):
        _checkpoints_one(m, kind, x0, v0, gamma, h, checkpoints, noise, ou,
                         gcode, gparams, sgcode, sgparams,
                         seed, stream_ids, counters, n_scratch, xs_out, vs_out, div_out)
