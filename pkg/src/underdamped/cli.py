"""Command-line front end.

Each run resolves its parameters from built-in defaults, then an optional
``--config`` key=value file, then explicit flags (later wins), and writes a
sorted ``manifest`` next to its outputs.  Passing that manifest back via
``--config`` reproduces the run's CSV files byte for byte.

Exit codes: 0 success/PASS, 1 quantitative FAIL, 2 usage or config error,
3 divergence.
"""

from __future__ import annotations

import argparse
import io
import math
import os
import re
import sys
import tempfile
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from . import diagnostics as D
from .estimator import (SweepConfig, SweepError, fit_slope, reference_mean, run_sweep,
                        write_slopes_csv, write_sweep_csv)
from .integrators import State, parse_integrator
from .model import (MODEL_HELP, TEST_FUNCTION_HELP, parse_model, parse_stochastic_gradient,
                    parse_test_function)
from .streams import RngStream

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3

FULL_SCALE_T = 1e7


class ConfigError(ValueError):
    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


# -- value parsing ----------------------------------------------------------

_POW2 = re.compile(r"^2\s*(?:\^|\*\*)\s*(-?\d+)$")


def parse_h_token(tok: str) -> float:
    """A step size written as a float or as ``2^-k``."""
    t = tok.strip()
    m = _POW2.match(t)
    if m:
        return 2.0 ** int(m.group(1))
    return float(t)


def _floats(key, text, n=None):
    toks = [t for t in str(text).split(",") if t.strip()]
    out = []
    for t in toks:
        try:
            out.append(parse_h_token(t) if key == "h" else float(t))
        except ValueError:
            raise ConfigError(key, f"malformed value {t.strip()!r}") from None
    if not out:
        raise ConfigError(key, "empty list")
    if n is not None and len(out) != n:
        raise ConfigError(key, f"expected {n} values, got {len(out)}")
    return out


def _scalar(cast):
    def parse(key, text):
        try:
            v = cast(str(text).strip())
        except ValueError:
            raise ConfigError(key, f"malformed value {str(text).strip()!r}") from None
        return v
    return parse


def _int(key, text):
    v = _scalar(float)(key, text)
    if v != int(v):
        raise ConfigError(key, f"expected an integer, got {text!r}")
    return int(v)


def _seed(key, text):
    try:
        v = int(str(text).strip(), 0)
    except ValueError:
        raise ConfigError(key, f"malformed seed {str(text).strip()!r}") from None
    if v < 0:
        raise ConfigError(key, "seed must be non-negative")
    return v


def _bool(key, text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(key, f"expected true/false, got {text!r}")


def _points(key, text):
    pts = []
    for chunk in str(text).split(";"):
        if chunk.strip():
            pts.append(_floats(key, chunk, 2))
    if not pts:
        raise ConfigError(key, "no points given")
    return pts


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        if v and isinstance(v[0], (list, tuple)):
            return ";".join(_fmt(p) for p in v)
        return ",".join(_fmt(x) for x in v)
    return str(v)


PARAMS = {
    "model": (str, f"potential id: {MODEL_HELP}"),
    "integrator": (lambda k, t: [s.strip() for s in str(t).split(",") if s.strip()],
                   "comma-separated: em, ubu, sg-em, sg-ubu"),
    "f": (str, f"test function: {TEST_FUNCTION_HELP}"),
    "gamma": (_scalar(float), "damping rate"),
    "h": (_floats, "step sizes, e.g. 2^-1,2^-2,0.1"),
    "T": (_scalar(float), "total simulated time per trajectory (or horizon)"),
    "M": (_int, "trajectories / Monte Carlo samples"),
    "seed": (_seed, "master seed (decimal or 0x-prefixed hex)"),
    "x0": (_floats, "initial position"),
    "v0": (_floats, "initial velocity"),
    "burn_in": (_int, "steps skipped before averaging"),
    "workers": (_int, "compiled-kernel threads"),
    "full_scale": (_bool, "use the long horizon T=1e7 unless T is given"),
    "band": (lambda k, t: _floats(k, t, 2), "accepted slope interval lo,hi"),
    "r": (_scalar(float), "moment exponent"),
    "steps": (_int, "number of steps"),
    "limit": (_scalar(float), "allowed growth factor of the moment"),
    "grid_half_width": (_scalar(float), "Lyapunov grid covers [-w, w]^2"),
    "grid_n": (_int, "Lyapunov grid points per axis"),
    "dt_ode": (_scalar(float), "RK4 step for tangent processes"),
    "z0": (lambda k, t: _floats(k, t, 2), "first initial state x,v"),
    "z0p": (lambda k, t: _floats(k, t, 2), "second initial state x,v"),
    "points": (_points, "states x,v;x,v;..."),
    "t_grid": (_floats, "times for the Kolmogorov probe"),
    "n_max": (_int, "terms in the truncated Poisson sum"),
    "substeps": (_int, "fine steps per h in the Poisson probe"),
    "coupled": (_bool, "reuse trajectories for both Poisson terms"),
    "out": (str, "output directory"),
}

_COMMON = {"seed": 2024, "workers": 0, "out": "."}

DEFAULTS = {
    "sweep": dict(_COMMON, model="quadratic-sine", integrator=["em", "ubu", "sg-em", "sg-ubu"],
                  f="x", gamma=2.0, h=[2.0**-k for k in range(1, 7)], T=1e5, M=100,
                  x0=[0.2], v0=[-0.3], burn_in=0, full_scale=False),
    "strong-order": dict(_COMMON, model="quadratic:1", integrator=["em"], gamma=2.5,
                         h=[2.0**-k for k in range(4, 9)], T=1.0, M=1000, x0=[0.0],
                         v0=[0.0], band=None),
    "reference-mean": dict(_COMMON, model="quadratic-sine", f="x", out=None),
    ("diagnose", "lyapunov"): dict(_COMMON, model="quadratic:1", gamma=3.0,
                                   grid_half_width=5.0, grid_n=41),
    ("diagnose", "moments"): dict(_COMMON, model="quadratic-sine", integrator=["ubu"], gamma=2.0,
                                  h=[0.25], r=2.0, steps=100000, M=1000, x0=[0.2],
                                  v0=[-0.3], limit=50.0),
    ("diagnose", "tangent"): dict(_COMMON, model="quadratic:1", gamma=2.5, T=20.0,
                                  dt_ode=0.0025, z0=[0.2, -0.3]),
    ("diagnose", "tangent-coupling"): dict(_COMMON, model="quadratic-sine", gamma=2.5, T=20.0,
                                           dt_ode=0.0025, z0=[0.2, -0.3], z0p=[0.4, -0.3]),
    ("diagnose", "coupling"): dict(_COMMON, model="quadratic:1", gamma=2.5, T=20.0,
                                   h=[0.01], z0=[0.2, -0.3], z0p=[1.2, 0.3]),
    ("diagnose", "kolmogorov"): dict(_COMMON, model="quadratic-sine", f="x", gamma=2.0,
                                     points=[[2.0, 0.0]],
                                     t_grid=[0.0, 1.0, 2.0, 4.0, 8.0, 12.0, 16.0, 20.0],
                                     M=20000, h=[1 / 64]),
    ("diagnose", "poisson"): dict(_COMMON, model="quadratic-sine", f="x", gamma=2.0, h=[0.25],
                                  points=[[0.0, 0.0], [1.0, -1.0], [-2.0, 0.5]], n_max=80,
                                  M=20000, substeps=8, coupled=False),
}

# manifest bookkeeping keys that a config file may carry but not override
_META = {"command", "probe", "version"}


def _parse_value(key, text):
    cast = PARAMS[key][0]
    if cast is str:
        return str(text).strip()
    return cast(key, text)


def read_config(path):
    """Parse a flat key=value file (``#`` comments, blank lines allowed)."""
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    for no, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("config", f"{path}:{no}: expected key=value")
        key, _, val = line.partition("=")
        key = key.strip().replace("-", "_")
        if key in _META:
            out[key] = val.strip()
            continue
        if key not in PARAMS:
            raise ConfigError(key, f"unknown key in {path}:{no}")
        out[key] = val.strip()
    return out


def resolve(command, probe, config_file, given):
    """Merge defaults, config file and flags into typed values."""
    base = dict(DEFAULTS[(command, probe) if probe else command])
    raw = {}
    if config_file:
        cfg = read_config(config_file)
        for meta in _META - {"version"}:
            want = command if meta == "command" else probe
            if meta in cfg and cfg[meta] != (want or ""):
                raise ConfigError(meta, f"config is for {cfg[meta]!r}, not {want!r}")
        raw.update({k: v for k, v in cfg.items() if k not in _META})
    raw.update(given)
    for key, text in raw.items():
        if key not in base:
            raise ConfigError(key, f"not used by {probe or command}")
        base[key] = _parse_value(key, text)
    if command == "sweep" and base.get("full_scale") and "T" not in raw:
        base["T"] = FULL_SCALE_T
    return base


# -- output -----------------------------------------------------------------

def atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_manifest(out: Path, command, probe, values):
    items = {k: _fmt(v) for k, v in values.items() if v is not None}
    items["command"] = command
    if probe:
        items["probe"] = probe
    items["version"] = __version__
    atomic_write(out / "manifest", "".join(f"{k}={items[k]}\n" for k in sorted(items)))


def _csv_text(header, rows):
    import csv
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def loglog_svg(series, xlabel="h", ylabel="mse", width=640, height=440) -> str:
    """Log-log line plot; ``series`` maps a label to ``(x, y)`` arrays."""
    pts = [(x, y) for xs, ys in series.values() for x, y in zip(xs, ys) if x > 0 and y > 0]
    if not pts:
        pts = [(1.0, 1.0)]
    lx = [math.log10(p[0]) for p in pts]
    ly = [math.log10(p[1]) for p in pts]
    x0, x1 = math.floor(min(lx)), math.ceil(max(lx))
    y0, y1 = math.floor(min(ly)), math.ceil(max(ly))
    x1 = x1 if x1 > x0 else x0 + 1
    y1 = y1 if y1 > y0 else y0 + 1
    ml, mr, mt, mb = 70, 150, 20, 50
    pw, ph = width - ml - mr, height - mt - mb

    def px(v):
        return ml + (math.log10(v) - x0) / (x1 - x0) * pw

    def py(v):
        return mt + (y1 - math.log10(v)) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="12">',
           f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for k in range(x0, x1 + 1):
        X = px(10.0**k)
        out.append(f'<line x1="{X:.1f}" y1="{mt}" x2="{X:.1f}" y2="{mt + ph}" stroke="#ddd"/>')
        out.append(f'<text x="{X:.1f}" y="{mt + ph + 16}" text-anchor="middle">1e{k}</text>')
    for k in range(y0, y1 + 1):
        Y = py(10.0**k)
        out.append(f'<line x1="{ml}" y1="{Y:.1f}" x2="{ml + pw}" y2="{Y:.1f}" stroke="#ddd"/>')
        out.append(f'<text x="{ml - 6}" y="{Y + 4:.1f}" text-anchor="end">1e{k}</text>')
    out.append(f'<text x="{ml + pw / 2}" y="{height - 10}" text-anchor="middle">{xlabel}</text>')
    out.append(f'<text x="16" y="{mt + ph / 2}" text-anchor="middle" '
               f'transform="rotate(-90 16 {mt + ph / 2})">{ylabel}</text>')
    for i, (label, (xs, ys)) in enumerate(series.items()):
        c = _COLORS[i % len(_COLORS)]
        good = [(px(a), py(b)) for a, b in zip(xs, ys) if a > 0 and b > 0]
        if len(good) > 1:
            path = " ".join(f"{a:.1f},{b:.1f}" for a, b in good)
            out.append(f'<polyline points="{path}" fill="none" stroke="{c}"/>')
        out.extend(f'<circle cx="{a:.1f}" cy="{b:.1f}" r="3" fill="{c}"/>' for a, b in good)
        ly_ = mt + 16 + 18 * i
        out.append(f'<line x1="{ml + pw + 12}" y1="{ly_}" x2="{ml + pw + 32}" y2="{ly_}" '
                   f'stroke="{c}"/>')
        out.append(f'<text x="{ml + pw + 38}" y="{ly_ + 4}">{label}</text>')
    out.append("</svg>\n")
    return "\n".join(out)


# -- commands ---------------------------------------------------------------

def _initial(values):
    return State(values["x0"], values["v0"])


def _check_h(values):
    for h in values["h"]:
        if not h > 0:
            raise ConfigError("h", f"step sizes must be positive, got {h!r}")


def cmd_sweep(v, out: Path):
    _check_h(v)
    kinds = [parse_integrator(name) for name in v["integrator"]]
    f = parse_test_function(v["f"])
    base = parse_model(v["model"])
    ref = reference_mean(base, f)
    reports, slopes = [], []
    for kind in kinds:
        model = parse_stochastic_gradient(v["model"]) if kind.uses_stochastic_gradient else base
        cfg = SweepConfig(v["h"], v["T"], v["M"], kind, v["gamma"], model, f, v["seed"],
                          _initial(v), model_id=v["model"], f_id=v["f"],
                          burn_in=v["burn_in"], reference=ref)
        started = time.perf_counter()
        rep = run_sweep(cfg)
        print(f"{kind.cli_name}: {len(rep.cells)} cells in "
              f"{time.perf_counter() - started:.1f}s", file=sys.stderr)
        reports.append(rep)
        for sub in (False, True):
            try:
                s = fit_slope(rep, subtract_floor=sub)
            except ValueError:
                continue
            slopes.append(dict(integrator=kind.cli_name, potential=v["model"], f=v["f"],
                               gamma=float(v["gamma"]), seed=v["seed"], h_lo=min(rep.h),
                               h_hi=max(rep.h), floor_subtracted=int(sub),
                               floor=rep.floor_estimate if sub else 0.0,
                               n_cells=len(rep.cells), slope=s))
    buf = io.StringIO()
    write_sweep_csv(reports, buf)
    atomic_write(out / "sweep.csv", buf.getvalue())
    buf = io.StringIO()
    write_slopes_csv(slopes, buf)
    atomic_write(out / "slopes.csv", buf.getvalue())
    atomic_write(out / "mse.svg", loglog_svg({r.integrator: (r.h, r.mse) for r in reports}))
    for r in reports:
        for c in r.cells:
            print(f"{r.integrator:7s} h={c.h:<10.6g} N={c.n_steps:<10d} mse={c.mse:.6e} "
                  f"+/- {c.mse_stderr:.2e}")
    return EXIT_OK


def cmd_strong_order(v, out: Path):
    _check_h(v)
    if v["M"] < 2:
        raise ConfigError("M", f"need at least 2 paths, got {v['M']}")
    status = EXIT_OK
    rows = []
    header = None
    for name in v["integrator"]:
        kind = parse_integrator(name)
        if kind.uses_stochastic_gradient:
            raise ConfigError("integrator", f"{name} has no strong-order probe")
        res = D.strong_order_probe(kind, parse_model(v["model"]), v["gamma"], v["h"], v["T"],
                                   v["M"], v["seed"], initial=_initial(v), band=v["band"])
        header = res.header
        rows.extend(res.rows())
        ok, msg = res.verdict()
        print(msg)
        status = max(status, EXIT_OK if ok else EXIT_FAIL)
    atomic_write(out / "strong_order.csv", _csv_text(header, rows))
    return status


def _lyapunov_grid(w, n):
    g = np.linspace(-w, w, n)
    X, V = np.meshgrid(g, g, indexing="ij")
    return np.stack([X.ravel(), V.ravel()], axis=1)


def _state(pair):
    return State([pair[0]], [pair[1]])


def run_probe(probe, v):
    """Dispatch one diagnostics probe; returns its result object."""
    model = parse_model(v["model"])
    if model.dim != 1 and probe != "moments":
        raise ConfigError("model", f"probe {probe} works with one-dimensional models")
    if probe == "lyapunov":
        if not v["gamma"] > 1:
            raise ConfigError("gamma", "the Lyapunov function needs gamma > 1")
        grid = _lyapunov_grid(v["grid_half_width"], v["grid_n"])
        return D.lyapunov_drift_check(model, v["gamma"], grid)
    if probe == "moments":
        kind = parse_integrator(v["integrator"][0])
        m = parse_stochastic_gradient(v["model"]) if kind.uses_stochastic_gradient else model
        return D.moment_stability_probe(kind, m, v["gamma"], v["h"][0], v["r"], v["steps"],
                                        v["M"], v["seed"], initial=_initial(v),
                                        limit=v["limit"])
    if probe == "tangent":
        return D.tangent_decay_probe(model, v["gamma"], D.TangentState.position(model.dim),
                                     v["T"], v["dt_ode"], RngStream(v["seed"]),
                                     z0=_state(v["z0"]))
    if probe == "tangent-coupling":
        return D.tangent_coupling_probe(model, v["gamma"], _state(v["z0"]), _state(v["z0p"]),
                                        D.TangentState.position(model.dim), v["T"],
                                        RngStream(v["seed"]), dt_ode=v["dt_ode"])
    if probe == "coupling":
        return D.sync_coupling_probe(model, v["gamma"], _state(v["z0"]), _state(v["z0p"]),
                                     v["T"], v["h"][0], RngStream(v["seed"]))
    f = parse_test_function(v["f"])
    if probe == "kolmogorov":
        return D.kolmogorov_probe(model, v["gamma"], f, v["points"], v["t_grid"], v["M"],
                                  v["seed"], h_mc=v["h"][0])
    if probe == "poisson":
        return D.discrete_poisson_residual(model, v["gamma"], f, v["h"][0], v["points"],
                                           v["n_max"], v["M"], v["seed"],
                                           substeps=v["substeps"], coupled=v["coupled"])
    raise ConfigError("probe", f"unknown probe {probe!r}")


def cmd_diagnose(probe, v, out: Path):
    res = run_probe(probe, v)
    atomic_write(out / f"{probe}.csv", _csv_text(res.header, res.rows()))
    ok, msg = res.verdict()
    print(msg)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_reference_mean(v, out):
    model = parse_model(v["model"])
    if model.dim > 2:
        raise ConfigError("model", f"reference means need d <= 2, got d={model.dim}")
    ref = reference_mean(model, parse_test_function(v["f"]))
    print(f"pi(f) = {ref.value:.17g} +/- {ref.abs_error_bound:.3g}  ({ref.method})")
    if out is not None:
        atomic_write(out / "reference_mean.csv",
                     _csv_text(["potential", "f", "value", "abs_error_bound"],
                               [[v["model"], v["f"], "%.17g" % ref.value,
                                 "%.17g" % ref.abs_error_bound]]))
    return EXIT_OK


# -- entry point ------------------------------------------------------------

def _add_flags(p, keys):
    for key in keys:
        flag = "--" + key.replace("_", "-")
        if PARAMS[key][0] is _bool:
            p.add_argument(flag, dest=key, action="store_const", const="true",
                           default=argparse.SUPPRESS, help=PARAMS[key][1])
        else:
            p.add_argument(flag, dest=key, default=argparse.SUPPRESS, metavar="VALUE",
                           help=PARAMS[key][1])
    p.add_argument("--config", default=None, help="key=value file (flags override it)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="underdamped",
        description="Statistical error of underdamped Langevin integrators.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    _add_flags(sub.add_parser("sweep", help="mean-square error against step size"),
               DEFAULTS["sweep"])
    _add_flags(sub.add_parser("strong-order", help="strong convergence order"),
               DEFAULTS["strong-order"])
    _add_flags(sub.add_parser("reference-mean", help="pi(f) by quadrature"),
               DEFAULTS["reference-mean"])
    diag = sub.add_parser("diagnose", help="run one diagnostics probe")
    diag.add_argument("probe", choices=D.PROBES)
    keys = sorted({k for key, d in DEFAULTS.items() if isinstance(key, tuple) for k in d})
    _add_flags(diag, keys)
    return parser


def _set_workers(n):
    import numba
    if n and n > 0:
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def main(argv=None) -> int:
    warnings.filterwarnings("ignore", message=".*TBB.*")
    args = build_parser().parse_args(argv)
    ns = vars(args)
    command = ns.pop("command")
    probe = ns.pop("probe", None)
    config_file = ns.pop("config", None)
    given = dict(ns)
    try:
        values = resolve(command, probe, config_file, given)
        _set_workers(values.get("workers", 0))
        out = Path(values["out"]) if values.get("out") is not None else None
        if command == "sweep":
            status = cmd_sweep(values, out)
        elif command == "strong-order":
            status = cmd_strong_order(values, out)
        elif command == "diagnose":
            status = cmd_diagnose(probe, values, out)
        else:
            status = cmd_reference_mean(values, out)
    except ConfigError as exc:
        print(f"underdamped: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SweepError, FloatingPointError) as exc:
        print(f"underdamped: divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as exc:
        print(f"underdamped: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if out is not None:
        write_manifest(out, command, probe, values)
    return status


if __name__ == "__main__":
    sys.exit(main())
