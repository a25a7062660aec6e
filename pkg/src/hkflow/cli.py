"""Command-line interface.

Subcommands
-----------
hk-dist        squared distance between two measures given as CSV files
jko-run        run the minimizing-movement scheme from a JSON config
verify         compare scheme runs with the finite-difference reference
subdiff-check  difference quotients against the superdifferential element
cone           sample a cone geodesic between two points

Exit codes: 0 on success, 1 on invalid input or usage, 2 on solver failure.
``HKFLOW_THREADS`` caps the number of worker processes.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .cone import ConeError, ConePoint, cone_distance, geodesic, geodesic_right_derivatives
from .energy import EnergyError, EnergySpec, energy_spec_from_dict
from .hk_solver import SolverConfig, SolverError, solve_hk
from .jko import SchemeConfig, Trajectory, dissipation_diagnostics, run_scheme
from .measures import DiscreteMeasure, GridDensity, MeasureError, Params, PerturbationField, read_grid_csv, read_measure_csv, write_grid_csv
from .subdiff import superdiff_check
from .verification import FDError, fd_reference_solve, psi_battery, psi_norm, relative_l1, slope_lower_bound_check, weak_form_residual

EXIT_OK, EXIT_INPUT, EXIT_SOLVER = 0, 1, 2

DIAG_HEADER = ["n", "t", "energy", "mass", "step_hk2", "metric_derivative"]


class ConfigError(ValueError):
    """Invalid or incomplete run configuration."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_INPUT)


# ----------------------------------------------------------------------------
# output helpers
# ----------------------------------------------------------------------------


def _atomic_write(path: str, text: str) -> None:
    """Write ``text`` to a temporary file next to ``path`` and rename it into place."""
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _json_text(obj) -> str:
    def conv(o):
        if isinstance(o, (np.floating,)):
            return float(o)
        if isinstance(o, (np.integer,)):
            return int(o)
        if isinstance(o, np.bool_):
            return bool(o)
        if isinstance(o, np.ndarray):
            return o.tolist()
        raise TypeError(type(o))

    return json.dumps(obj, indent=2, sort_keys=True, default=conv) + "\n"


def _grid_text(g: GridDensity) -> str:
    buf = io.StringIO()
    write_grid_csv(buf, g)
    return buf.getvalue()


def write_svg_plot(path: str, series: list, xlabel: str, ylabel: str, title: str = "", logy: bool = False) -> None:
    """Line plot of ``series = [(label, x, y), ...]`` written as SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "hkflow"
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, x, y in series:
        ax.plot(x, y, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if logy:
        ax.set_yscale("log")
    if title:
        ax.set_title(title)
    if len(series) > 1:
        ax.legend(fontsize=8)
    fig.tight_layout()
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    _atomic_write(path, buf.getvalue())


def _workers(n_jobs: int) -> int:
    env = os.environ.get("HKFLOW_THREADS")
    cap = os.cpu_count() or 1
    if env:
        try:
            cap = max(1, int(env))
        except ValueError:
            raise ConfigError(f"HKFLOW_THREADS must be an integer, got {env!r}") from None
    return max(1, min(cap, n_jobs))


# ----------------------------------------------------------------------------
# configuration
# ----------------------------------------------------------------------------


@dataclass
class RunConfig:
    """Validated content of a run configuration file."""

    lo: np.ndarray
    hi: np.ndarray
    dims: tuple
    params: Params
    energy: EnergySpec
    scheme: SchemeConfig
    u0: GridDensity
    verify: dict = field(default_factory=dict)
    subdiff: dict = field(default_factory=dict)
    seed: int = 0
    base_dir: str = "."

    @property
    def domain_volume(self) -> float:
        return float(np.prod(self.hi - self.lo))


def _initial_density(d: dict, lo, hi, dims, base_dir) -> GridDensity:
    kind = d.get("kind", "constant")
    if kind == "constant":
        return GridDensity.on_box(lo, hi, dims, np.full(dims, float(d.get("value", 1.0))))
    if kind == "cosine":
        mean, amp, mode = float(d.get("mean", 1.0)), float(d.get("amplitude", 0.5)), int(d.get("mode", 1))
        span = hi - lo

        def f(x):
            z = (x - lo) / span
            return mean + amp * np.prod(np.cos(mode * math.pi * z), axis=1)

        return GridDensity.on_box(lo, hi, dims, f)
    if kind == "csv":
        path = d.get("path")
        if not path:
            raise ConfigError("initial density of kind 'csv' needs a 'path'")
        path = path if os.path.isabs(path) else os.path.join(base_dir, path)
        if not os.path.exists(path):
            raise ConfigError(f"initial density file not found: {path}")
        g = read_grid_csv(path)
        if g.dims != tuple(dims):
            raise ConfigError(f"initial density has {g.dims} cells, config says {tuple(dims)}")
        return g
    raise ConfigError(f"unknown initial density kind {kind!r}")


def _solver_config(d: dict, default: SolverConfig) -> SolverConfig:
    allowed = {"eps_start", "eps_end", "eps_factor", "max_iters", "dual_tol", "relaxation", "value_mode"}
    extra = set(d) - allowed
    if extra:
        raise ConfigError(f"unknown solver keys: {sorted(extra)}")
    kw = {k: getattr(default, k) for k in allowed}
    kw.update(d)
    try:
        return SolverConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid solver settings: {exc}") from None


def load_config(path: str) -> RunConfig:
    """Read and validate a JSON run configuration.

    Raises
    ------
    ConfigError
        On a missing file, malformed JSON or invalid entries.
    """
    if not path or not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path) as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {path}: {exc}") from None
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    base = os.path.dirname(os.path.abspath(path))
    for key in ("domain", "grid", "params", "energy"):
        if key not in d:
            raise ConfigError(f"config is missing '{key}'")
    try:
        lo = np.atleast_1d(np.asarray(d["domain"]["lo"], float))
        hi = np.atleast_1d(np.asarray(d["domain"]["hi"], float))
        dims = tuple(int(n) for n in np.atleast_1d(d["grid"]["dims"]))
        if lo.shape != hi.shape or len(dims) != lo.size or np.any(hi <= lo) or min(dims) < 1:
            raise ConfigError("domain and grid dimensions are inconsistent")
        params = Params(float(d["params"]["lam"]), float(d["params"]["sigma"]))
        energy = energy_spec_from_dict(d["energy"], base)
        sd = dict(d.get("scheme", {}))
        solver = _solver_config(dict(d.get("solver", {})), SolverConfig(eps_end=1e-5))
        allowed = {"tau", "T", "prox_tol", "outer_max_iters", "record_every", "warm_eps", "subcell"}
        extra = set(sd) - allowed
        if extra:
            raise ConfigError(f"unknown scheme keys: {sorted(extra)}")
        if "tau" not in sd or "T" not in sd:
            raise ConfigError("scheme needs 'tau' and 'T'")
        scheme = SchemeConfig(solver=solver, **sd)
        u0 = _initial_density(d.get("initial", {}), lo, hi, dims, base)
    except ConfigError:
        raise
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"invalid config entry: {exc}") from None
    except (ValueError, MeasureError, EnergyError) as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(lo, hi, dims, params, energy, scheme, u0, dict(d.get("verify", {})), dict(d.get("subdiff", {})), int(d.get("seed", 0)), base)


# ----------------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------------


def cmd_hk_dist(args) -> int:
    for p in (args.mu1, args.mu2):
        if not os.path.exists(p):
            raise ConfigError(f"measure file not found: {p}")
    try:
        mu1 = read_measure_csv(args.mu1)
        mu2 = read_measure_csv(args.mu2)
        params = Params(args.lam, args.sigma)
        cfg = SolverConfig(eps_end=args.eps_end, max_iters=args.max_iters)
    except (ValueError, MeasureError) as exc:
        raise ConfigError(str(exc)) from None
    sol = solve_hk(mu1, mu2, params, cfg)
    out = {
        "hk2": sol.hk2,
        "iterations": sol.iterations,
        "dual_residual": sol.dual_residual,
        "singular_mass_0": sol.singular0.mass,
        "singular_mass_1": sol.singular_star.mass,
    }
    text = _json_text(out)
    if args.out:
        _atomic_write(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _diagnostics_rows(traj: Trajectory):
    rows = [[0, 0.0, traj.energies[0], traj.masses[0], "", ""]]
    for n in range(1, traj.n_steps + 1):
        rows.append([n, n * traj.tau, traj.energies[n], traj.masses[n], traj.step_hk2[n - 1], traj.metric_derivative[n - 1]])
    return rows


def _run_job(job):
    u0, spec, params, cfg = job
    return run_scheme(u0, spec, params, cfg)


def cmd_jko_run(args) -> int:
    rc = load_config(args.config)
    out = args.out
    traj = run_scheme(rc.u0, rc.energy, rc.params, rc.scheme)
    for k, g in zip(traj.step_index, traj.densities):
        _atomic_write(os.path.join(out, f"density_{k:05d}.csv"), _grid_text(g))
    _atomic_write(os.path.join(out, "diagnostics.csv"), _csv_text(DIAG_HEADER, _diagnostics_rows(traj)))
    V_min = float(np.min(rc.energy.V(rc.u0.centers())))
    diag = dissipation_diagnostics(traj, rc.energy, rc.params, rc.domain_volume, V_min=min(V_min, 0.0))
    summary = {
        "steps": traj.n_steps,
        "tau": rc.scheme.tau,
        "T": rc.scheme.T,
        "final_energy": traj.energies[-1],
        "final_mass": traj.masses[-1],
        "flags": traj.flags,
        "error": traj.error,
        "dissipation": diag,
    }
    _atomic_write(os.path.join(out, "summary.json"), _json_text(summary))
    if traj.n_steps:
        t = np.arange(traj.n_steps + 1) * traj.tau
        write_svg_plot(os.path.join(out, "energy.svg"), [("energy", t, traj.energies), ("mass", t, traj.masses)], "t", "value")
    if traj.error:
        sys.stderr.write(f"solver failure: {traj.error}\n")
        return EXIT_SOLVER
    return EXIT_OK


def cmd_verify(args) -> int:
    rc = load_config(args.config)
    out = args.out
    v = rc.verify
    taus = [float(t) for t in v.get("taus", [rc.scheme.tau])]
    T = float(v.get("T", rc.scheme.T))
    battery = v.get("battery", "all")
    if battery not in ("all", "interior", "full"):
        raise ConfigError("verify.battery must be 'all', 'interior' or 'full'")
    if rc.u0.dim != 1:
        raise ConfigError("verify runs on 1-D grids")
    jobs = [(rc.u0, rc.energy, rc.params, SchemeConfig(tau=t, T=T, solver=rc.scheme.solver, prox_tol=rc.scheme.prox_tol, outer_max_iters=rc.scheme.outer_max_iters, warm_eps=rc.scheme.warm_eps, subcell=rc.scheme.subcell)) for t in taus]
    nw = _workers(len(jobs))
    if nw > 1:
        with ProcessPoolExecutor(nw) as ex:
            trajs = list(ex.map(_run_job, jobs))
    else:
        trajs = [_run_job(j) for j in jobs]
    failed = [f"tau={t}: {tr.error}" for t, tr in zip(taus, trajs) if tr.error]
    if failed:
        sys.stderr.write("solver failure: " + "; ".join(failed) + "\n")
        return EXIT_SOLVER
    ref = fd_reference_solve(rc.u0, rc.energy, rc.params, T, float(v.get("dt_safety", 0.25)))
    psis = [p for p in psi_battery(T, float(rc.lo[0]), float(rc.hi[0])) if battery == "all" or p.cls == battery]
    rows = []
    for p in psis:
        nrm = psi_norm(p, rc.u0, rc.params)
        for t, tr in zip(taus, trajs):
            rows.append([p.psi_id, t, weak_form_residual(tr, p, rc.energy, rc.params) / nrm])
    _atomic_write(os.path.join(out, "residuals.csv"), _csv_text(["psi_id", "tau", "residual"], rows))
    l1 = [relative_l1(tr.final(), ref.final()) for tr in trajs]
    _atomic_write(os.path.join(out, "l1_error.csv"), _csv_text(["tau", "relative_l1"], zip(taus, l1)))
    x = rc.u0.centers()[:, 0]
    series = [("reference", x, ref.final().values)] + [(f"tau={t:g}", x, tr.final().values) for t, tr in zip(taus, trajs)]
    write_svg_plot(os.path.join(out, "final_density.svg"), series, "x", "u", f"t = {T:g}")
    write_svg_plot(os.path.join(out, "l1_error.svg"), [("relative L1", taus, l1)], "tau", "error", logy=True)
    summary = {"taus": taus, "T": T, "relative_l1": l1, "psi_ids": [p.psi_id for p in psis], "normalization": "int int |d_t psi| + lam |grad psi| + sigma |psi|"}
    if "slope" in v:
        sd = v["slope"]
        est, bound = slope_lower_bound_check(Params(rc.params.lam, float(sd.get("sigma", rc.params.sigma))), (rc.lo, rc.hi), float(sd.get("p", 2.0)))
        summary["slope"] = {"estimate": est, "bound": bound}
    _atomic_write(os.path.join(out, "summary.json"), _json_text(summary))
    return EXIT_OK


def _sample_instance(rng, n, lo, hi, amplitude):
    span = hi - lo
    pad = 0.05 * span
    nu0 = DiscreteMeasure(rng.uniform(lo + pad, hi - pad, (n, 1)), rng.uniform(0.2, 1.0, n), domain=(lo, hi))
    mu = DiscreteMeasure(rng.uniform(lo + pad, hi - pad, (n, 1)), rng.uniform(0.2, 1.0, n), domain=(lo, hi))
    a, b, c = rng.uniform(-1, 1, 3)
    fld = PerturbationField(
        lambda x, a=a: amplitude * a * np.sin(np.pi * (x - lo) / span),
        lambda x, b=b, c=c: amplitude * (b + c * (x[:, 0] - lo) / span),
        interior_support=True,
    )
    return nu0, mu, fld


def cmd_subdiff_check(args) -> int:
    rc = load_config(args.config)
    sd = rc.subdiff
    n_inst = int(sd.get("instances", 20))
    n_pts = int(sd.get("points", 5))
    amp = float(sd.get("amplitude", 0.05))
    hs = [float(h) for h in sd.get("hs", [1e-2, -1e-2, 1e-3, -1e-3, 1e-4, -1e-4])]
    cfg = _solver_config(dict(sd.get("solver", {})), SolverConfig())
    rng = np.random.default_rng(rc.seed)
    lo, hi = float(rc.lo[0]), float(rc.hi[0])
    rows = []
    all_pass = True
    for i in range(n_inst):
        nu0, mu, fld = _sample_instance(rng, n_pts, lo, hi, amp)
        for r in superdiff_check(nu0, mu, fld, rc.params, cfg, hs):
            rows.append([i, r["h"], r["quotient"], r["element"], r["pass"]])
            all_pass &= r["pass"]
    _atomic_write(os.path.join(args.out, "subdiff.csv"), _csv_text(["instance", "h", "quotient", "element", "pass"], rows))
    _atomic_write(os.path.join(args.out, "summary.json"), _json_text({"instances": n_inst, "all_pass": all_pass, "seed": rc.seed}))
    return EXIT_OK


def cmd_cone(args) -> int:
    try:
        params = Params(args.lam, args.sigma)
        p = ConePoint(np.asarray(args.x1, float), args.r1)
        q = ConePoint(np.asarray(args.x2, float), args.r2)
        if p.x.shape != q.x.shape:
            raise ConfigError("x1 and x2 must have the same dimension")
        if args.samples < 2:
            raise ConfigError("--samples must be at least 2")
        geo = geodesic(p, q, params)
    except (ValueError, MeasureError, ConeError) as exc:
        raise ConfigError(str(exc)) from None
    ts = np.linspace(0.0, 1.0, args.samples)
    cols = ["x"] if p.x.size == 1 else [f"x{k}" for k in range(p.x.size)]
    rows = []
    for t in ts:
        z = geo(t)
        rows.append([float(t)] + [float(c) for c in z.x] + [z.r])
    try:
        dtheta, dR = geodesic_right_derivatives(p, q, params)
    except ConeError:
        dtheta, dR = None, None
    info = {"distance": cone_distance(p, q, params), "angle": geo.ell, "theta_right_derivative": dtheta, "r_right_derivative": dR}
    if args.out:
        _atomic_write(os.path.join(args.out, "geodesic.csv"), _csv_text(["t"] + cols + ["r"], rows))
        _atomic_write(os.path.join(args.out, "cone.json"), _json_text(info))
    else:
        sys.stdout.write(_json_text(info))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="hkflow", description="Hellinger-Kantorovich distances and gradient flows")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("hk-dist", help="squared distance between two CSV measures (columns x..., w)")
    p.add_argument("mu1")
    p.add_argument("mu2")
    p.add_argument("--lam", type=float, default=1.0)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--eps-end", type=float, default=1e-4)
    p.add_argument("--max-iters", type=int, default=50000)
    p.add_argument("--out", help="JSON output file (default: stdout)")
    p.set_defaults(func=cmd_hk_dist)

    for name, fn, hlp in (
        ("jko-run", cmd_jko_run, "run the minimizing-movement scheme"),
        ("verify", cmd_verify, "compare scheme runs with the finite-difference reference"),
        ("subdiff-check", cmd_subdiff_check, "difference quotients of -HK^2/2 on random instances"),
    ):
        p = sub.add_parser(name, help=hlp)
        p.add_argument("--config", required=True)
        p.add_argument("--out", required=True, help="output directory")
        p.set_defaults(func=fn)

    p = sub.add_parser("cone", help="sample the cone geodesic between [x1, r1] and [x2, r2]")
    p.add_argument("--x1", type=float, nargs="+", required=True)
    p.add_argument("--r1", type=float, required=True)
    p.add_argument("--x2", type=float, nargs="+", required=True)
    p.add_argument("--r2", type=float, required=True)
    p.add_argument("--lam", type=float, default=1.0)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--samples", type=int, default=11)
    p.add_argument("--out", help="output directory (default: summary to stdout)")
    p.set_defaults(func=cmd_cone)
    return ap


def main(argv: Optional[list] = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_INPUT
    try:
        return args.func(args)
    except ConfigError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_INPUT
    except (SolverError, FDError, FloatingPointError) as exc:
        sys.stderr.write(f"solver failure: {exc}\n")
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
