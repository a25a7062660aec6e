"""Acceptance criteria, one test per criterion.

Each test prints a single ``CRITERION k: PASS|FAIL`` line to the terminal
before asserting. Criteria 8, 9 and 11 share one set of scheme runs.
"""

import math
import os
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from hkflow.cone import ConePoint, cone_distance, geodesic, geodesic_right_derivatives
from hkflow.energy import AffinePotential, EnergySpec, LogEntropy, PowerLaw, dF_directional, energy_of
from hkflow.hk_solver import SolverConfig, cost_matrix, hk2, hk_tiny_oracle, solve_hk
from hkflow.jko import SchemeConfig, dissipation_diagnostics, first_order_residual, run_scheme
from hkflow.measures import DiscreteMeasure, GridDensity, Params, PerturbationField, density_after_pushforward
from hkflow.subdiff import TestFunction, connection_gap, superdiff_check
from hkflow.verification import fd_reference_solve, psi_battery, psi_norm, relative_l1, slope_lower_bound_check, weak_form_residual

SEED = 20240601


def report(capsys, k, ok, detail):
    with capsys.disabled():
        print(f"\nCRITERION {k}: {'PASS' if ok else 'FAIL'}  {detail}")


def _measure(rng, n, lo=0.0, hi=1.0, dim=1):
    return DiscreteMeasure(rng.uniform(lo, hi, (n, dim)), rng.uniform(0.1, 1.0, n))


# ----------------------------------------------------------------------------
# 1-4: distance solver
# ----------------------------------------------------------------------------


def test_c01_null_measure_identity(capsys):
    rng = np.random.default_rng(SEED + 1)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(20):
        prm = Params(rng.uniform(0.1, 5), rng.uniform(0.1, 5))
        mu = _measure(rng, int(rng.integers(1, 30)), dim=int(rng.integers(1, 3)))
        exact = 4.0 / prm.sigma * mu.mass
        worst = max(worst, abs(hk2(mu, DiscreteMeasure.empty(mu.dim), prm) - exact) / exact)
    dt = time.perf_counter() - t0
    ok = worst <= 1e-6 and dt < 5.0
    report(capsys, 1, ok, f"max rel err {worst:.2e}, {dt:.2f} s")
    assert ok


def _dirac_oracle(a, b, d, prm):
    """One-variable minimization of the entropy-transport objective over the coupling mass."""
    lam = prm.entropy_weight
    c = float(cost_matrix(np.array([[0.0]]), np.array([[d]]), prm)[0, 0])
    if not np.isfinite(c):
        return lam * (a + b)

    def obj(g):
        out = c * g
        for w in (a, b):
            s = g / w
            out += lam * w * ((s * math.log(s) - s + 1) if s > 0 else 1.0)
        return out

    r = minimize_scalar(obj, bounds=(0.0, a + b), method="bounded", options={"xatol": 1e-14})
    return min(float(r.fun), lam * (a + b))


def test_c02_dirac_closed_form(capsys):
    rng = np.random.default_rng(SEED + 2)
    cfg = SolverConfig(eps_end=1e-4)
    t0 = time.perf_counter()
    worst, regimes = 0.0, set()
    for k in range(20):
        prm = Params(rng.uniform(0.2, 3), rng.uniform(0.5, 5))
        a, b = rng.uniform(0.2, 3, 2)
        # alternate between angles below and above pi/2
        ell = rng.uniform(0.2, 1.4) if k % 2 == 0 else rng.uniform(1.65, 4.0)
        regimes.add(ell < math.pi / 2)
        d = ell / prm.ell_factor
        ref = _dirac_oracle(a, b, d, prm)
        closed = 4 / prm.sigma * (a + b - 2 * math.sqrt(a * b) * math.cos(min(ell, math.pi / 2)))
        assert ref == pytest.approx(closed, rel=1e-8)
        got = hk2(DiscreteMeasure(np.array([[0.0]]), np.array([a])), DiscreteMeasure(np.array([[d]]), np.array([b])), prm, cfg)
        worst = max(worst, abs(got - ref) / ref)
    dt = time.perf_counter() - t0
    ok = worst <= 1e-3 and dt < 30 and regimes == {True, False}
    report(capsys, 2, ok, f"max rel err {worst:.2e}, {dt:.1f} s")
    assert ok


def _axiom_job(seed):
    rng = np.random.default_rng(seed)
    prm = Params(rng.uniform(0.3, 2), rng.uniform(0.5, 4))
    a, b, c = (_measure(rng, 10) for _ in range(3))
    dab, dbc, dac = (math.sqrt(hk2(p, q, prm)) for p, q in ((a, b), (b, c), (a, c)))
    dba = math.sqrt(hk2(b, a, prm))
    s = rng.uniform(0.3, 3)
    hs = hk2(a.scaled(s), b.scaled(s), prm)
    sym = abs(dba**2 - dab**2) / dab**2
    tri = (dac - dab - dbc) / (dab + dbc + dac)
    hom = abs(hs - s * dab**2) / (s * dab**2)
    return sym, tri, hom


def _workers():
    return max(1, min(int(os.environ.get("HKFLOW_THREADS", os.cpu_count() or 1)), 8))


@pytest.mark.slow
def test_c03_metric_axioms(capsys):
    seeds = [SEED + 300 + k for k in range(50)]
    with ProcessPoolExecutor(_workers()) as ex:
        res = np.array(list(ex.map(_axiom_job, seeds)))
    sym, tri, hom = res.max(axis=0)
    ok = sym <= 1e-6 and tri <= 1e-3 and hom <= 1e-6
    report(capsys, 3, ok, f"symmetry {sym:.1e}, triangle slack {tri:.1e} (scale units), homogeneity {hom:.1e}")
    assert ok


def test_c04_tiny_oracle(capsys):
    rng = np.random.default_rng(SEED + 4)
    worst = -np.inf
    for _ in range(20):
        prm = Params(rng.uniform(0.2, 3), rng.uniform(0.5, 5))
        dim = int(rng.integers(1, 3))
        mu1 = _measure(rng, int(rng.integers(1, 5)), dim=dim)
        mu2 = _measure(rng, int(rng.integers(1, 5)), dim=dim)
        v = hk2(mu1, mu2, prm)
        worst = max(worst, abs(v - hk_tiny_oracle(mu1, mu2, prm)) / (1 + v))
    ok = worst <= 1e-3
    report(capsys, 4, ok, f"max |diff|/(1+value) {worst:.2e}")
    assert ok


# ----------------------------------------------------------------------------
# 5: cone geometry
# ----------------------------------------------------------------------------


def test_c05_cone_geometry(capsys):
    rng = np.random.default_rng(SEED + 5)
    geo = speed = rd = 0.0
    h = 1e-4
    for _ in range(20):
        prm = Params(rng.uniform(0.3, 2), rng.uniform(0.3, 2))
        dim = int(rng.integers(1, 3))
        x1 = rng.uniform(0, 1, dim)
        dvec = rng.normal(size=dim)
        dvec *= rng.uniform(0.05, 0.95) * 2 * prm.cutoff / np.linalg.norm(dvec)
        p, q = ConePoint(x1, rng.uniform(0.1, 2)), ConePoint(x1 + dvec, rng.uniform(0.1, 2))
        g = geodesic(p, q, prm)
        D = cone_distance(p, q, prm)
        dx = float(np.linalg.norm(dvec))
        for t in rng.uniform(0.01, 0.99, 10):
            s = rng.uniform(0, 1)
            geo = max(geo, abs(cone_distance(g(s), g(t), prm) - abs(t - s) * D))
            # five-point central differences
            (R2m, T2m), (Rm, Tm), (R0, _), (Rp, Tp), (R2p, T2p) = (g.radius_angle(t + k * h) for k in (-2, -1, 0, 1, 2))
            dR = (R2m - 8 * Rm + 8 * Rp - R2p) / (12 * h)
            dT = (T2m - 8 * Tm + 8 * Tp - T2p) / (12 * h)
            speed = max(speed, abs(4 / prm.sigma * dR**2 + R0**2 * dT**2 * dx**2 / prm.lam - D**2) / max(1.0, D**2))
        th, dr = geodesic_right_derivatives(p, q, prm)
        e = 1e-7
        R1, T1 = g.radius_angle(e)
        R2, T2 = g.radius_angle(2 * e)
        R0, T0 = g.radius_angle(0.0)
        # second-order one-sided differences
        fth = (-3 * T0 + 4 * T1 - T2) / (2 * e)
        fdr = (-3 * R0 + 4 * R1 - R2) / (2 * e)
        rd = max(rd, abs(fth - th) / abs(th), abs(fdr - dr) / max(abs(dr), 1e-300))
    ok = geo <= 1e-10 and speed <= 1e-8 and rd <= 1e-6
    report(capsys, 5, ok, f"geodesic {geo:.1e}, speed {speed:.1e}, right derivative rel {rd:.1e}")
    assert ok


# ----------------------------------------------------------------------------
# 6: superdifferential and connection bound
# ----------------------------------------------------------------------------


def _instance(rng, n, amp=0.05):
    nu0 = DiscreteMeasure(rng.uniform(0.05, 0.95, (n, 1)), rng.uniform(0.2, 1.0, n), ((0.0,), (1.0,)))
    mu = DiscreteMeasure(rng.uniform(0.05, 0.95, (n, 1)), rng.uniform(0.2, 1.0, n), ((0.0,), (1.0,)))
    a, b, c = rng.uniform(-1, 1, 3)
    fld = PerturbationField(
        lambda x, a=a: amp * a * np.sin(np.pi * x),
        lambda x, b=b, c=c: amp * (b + c * x[:, 0]),
        True,
    )
    return nu0, mu, fld


def _superdiff_job(seed):
    rng = np.random.default_rng(seed)
    prm = Params(rng.uniform(0.3, 1.5), rng.uniform(1, 4))
    nu0, mu, fld = _instance(rng, 5)
    rows = superdiff_check(nu0, mu, fld, prm)
    return min(r["quotient"] / (1 + r["hk2"]) for r in rows), all(r["pass"] for r in rows)


def _phi_cos(k, a, c):
    return TestFunction(
        lambda x: a * np.cos(k * x[:, 0] + c),
        lambda x: (-a * k * np.sin(k * x[:, 0] + c))[:, None],
        lambda x: np.abs(a * k * k * np.cos(k * x[:, 0] + c)),
        a * (1 + k + k * k),
    )


def _phi_quad(a, c):
    m = max(abs(c), abs(1 - c))
    return TestFunction(
        lambda x: a * (x[:, 0] - c) ** 2,
        lambda x: (2 * a * (x[:, 0] - c))[:, None],
        lambda x: np.full(len(x), 2 * abs(a)),
        abs(a) * (m * m + 2 * m + 2),
    )


def _gap_job(seed):
    rng = np.random.default_rng(seed)
    prm = Params(rng.uniform(0.3, 1.5), rng.uniform(1, 4))
    phi = _phi_cos(rng.uniform(0.5, 6), rng.uniform(0.1, 1), rng.uniform(0, 6)) if seed % 2 else _phi_quad(rng.uniform(-1, 1), rng.uniform(0, 1))
    phi.certify(np.linspace(0, 1, 1001)[:, None])
    # Dirac pairs and small clouds
    n = 1 if seed % 3 == 0 else int(rng.integers(2, 4))
    nu0 = DiscreteMeasure(rng.uniform(0, 1, (n, 1)), rng.uniform(0.2, 1.0, n))
    mu = DiscreteMeasure(rng.uniform(0, 1, (n, 1)), rng.uniform(0.2, 1.0, n))
    lhs, bound = connection_gap(solve_hk(nu0, mu, prm), phi, mu, nu0, prm)
    return lhs, bound


@pytest.mark.slow
def test_c06_superdifferential(capsys):
    with ProcessPoolExecutor(_workers()) as ex:
        sd = list(ex.map(_superdiff_job, [SEED + 600 + k for k in range(20)]))
        gaps = list(ex.map(_gap_job, [SEED + 700 + k for k in range(30)]))
    worst = min(q for q, _ in sd)
    ok_sd = all(p for _, p in sd) and worst >= -1e-3
    ratio = max(l / b if b > 0 else (0.0 if l == 0 else math.inf) for l, b in gaps)
    ok_gap = all(l <= b for l, b in gaps)
    ok = ok_sd and ok_gap
    report(capsys, 6, ok, f"worst quotient/(1+hk2) {worst:.2e}; connection lhs/bound max {ratio:.2e} over {len(gaps)} cases")
    assert ok


# ----------------------------------------------------------------------------
# 7: energy derivative
# ----------------------------------------------------------------------------


def test_c07_energy_derivative(capsys):
    g = GridDensity.on_box([0.0], [1.0], [800])
    x = g.centers()[:, 0]
    u0 = g.with_values(1.0 + 0.3 * np.cos(2 * np.pi * x) + 0.2 * x)

    def bump(z):
        t = np.clip((z - 0.2) / 0.6, 0, 1)
        return np.sin(np.pi * t) ** 4

    fld = PerturbationField(lambda z: (0.3 * bump(z[:, 0]))[:, None], lambda z: 0.2 * np.cos(3 * z[:, 0]), True, 0.2)
    h = 1e-4
    errs = {}
    for name, fam in (("log_entropy", LogEntropy(1.0)), ("power_law", PowerLaw(1.0, 1.0, 2.0, 0.5))):
        spec = EnergySpec(fam, AffinePotential([0.7], 0.1))
        d = dF_directional(u0, fld, spec)
        fd = (energy_of(density_after_pushforward(u0, fld, h), spec) - energy_of(density_after_pushforward(u0, fld, -h), spec)) / (2 * h)
        errs[name] = abs(fd - d) / abs(d)
    ok = max(errs.values()) <= 1e-4
    report(capsys, 7, ok, ", ".join(f"{k} rel err {v:.1e}" for k, v in errs.items()))
    assert ok


# ----------------------------------------------------------------------------
# 8, 9, 11: scheme against the reference solution
# ----------------------------------------------------------------------------

TAUS = (0.02, 0.01, 0.005)
P11 = Params(1.0, 1.0)
SPEC8 = EnergySpec(LogEntropy(1.0), AffinePotential([1.0], 0.0))


def _u0_64():
    g = GridDensity.on_box([0.0], [1.0], [64])
    return g.with_values(1.0 + 0.5 * np.cos(np.pi * g.centers()[:, 0]))


def _scheme_job(tau):
    t0 = time.perf_counter()
    traj = run_scheme(_u0_64(), SPEC8, P11, SchemeConfig(tau=tau, T=0.1, subcell=4))
    return traj, time.perf_counter() - t0


@pytest.fixture(scope="module")
def scheme_runs():
    t0 = time.perf_counter()
    with ProcessPoolExecutor(min(3, _workers())) as ex:
        out = list(ex.map(_scheme_job, TAUS))
    wall = time.perf_counter() - t0
    ref = fd_reference_solve(_u0_64(), SPEC8, P11, 0.1)
    return {"trajs": [o[0] for o in out], "ref": ref, "wall": wall}


@pytest.mark.slow
def test_c08_scheme_vs_pde(capsys, scheme_runs):
    trajs = scheme_runs["trajs"]
    errs = [relative_l1(tr.final(), scheme_runs["ref"].final()) for tr in trajs]
    decreasing = all(b < a for a, b in zip(errs, errs[1:]))
    ok = all(tr.error is None for tr in trajs) and decreasing and errs[-1] <= 0.05 and scheme_runs["wall"] <= 600
    report(capsys, 8, ok, "L1 rel " + ", ".join(f"tau={t}: {e:.2e}" for t, e in zip(TAUS, errs)) + f"; wall {scheme_runs['wall']:.0f} s")
    assert ok


@pytest.mark.slow
def test_c09_dissipation(capsys, scheme_runs):
    reps = [dissipation_diagnostics(tr, SPEC8, P11, 1.0, V_min=0.0) for tr in scheme_runs["trajs"]]
    ok = all(r["monotone"] and r["holds_bound"] for r in reps)
    detail = "; ".join(f"tau={t}: sum {r['sum_hk2']:.2e} <= {r['bound']:.2e}, monotone {r['monotone']}" for t, r in zip(TAUS, reps))
    report(capsys, 9, ok, detail)
    assert ok


@pytest.mark.slow
def test_c11_weak_form(capsys, scheme_runs):
    trajs = scheme_runs["trajs"]
    grid = trajs[0].densities[0]
    battery = psi_battery(0.1)
    res = {}
    for p in battery:
        nrm = psi_norm(p, grid, P11)
        res[p.psi_id] = (p.cls, [weak_form_residual(tr, p, SPEC8, P11) / nrm for tr in trajs])
    classes = {c for c, _ in res.values()}
    decreasing = all(r[-1] < r[0] for _, r in res.values())
    full = max(r[-1] for c, r in res.values() if c == "full")
    interior = max(r[-1] for c, r in res.values() if c == "interior")
    ok = len(battery) >= 6 and classes == {"full", "interior"} and decreasing and full <= 2 * interior
    report(capsys, 11, ok, f"{len(battery)} psi, all decreasing {decreasing}; normalized max at tau=0.005: full {full:.2e}, interior {interior:.2e}")
    assert ok


# ----------------------------------------------------------------------------
# 10: first-order condition
# ----------------------------------------------------------------------------


def _bump(z, a, b):
    t = np.clip((z - a) / (b - a), 0, 1)
    return np.where((z > a) & (z < b), np.sin(np.pi * t) ** 4, 0.0)


@pytest.mark.slow
def test_c10_first_order_condition(capsys):
    g = GridDensity.on_box([0.0], [1.0], [32])
    u0 = g.with_values(1.0 + 0.5 * np.cos(np.pi * g.centers()[:, 0]))
    tau = 0.01
    cfg = SchemeConfig(tau=tau, T=0.03, solver=SolverConfig(eps_end=1e-4), keep_solutions=True, subcell=4)
    traj = run_scheme(u0, SPEC8, P11, cfg)
    assert traj.error is None
    rng = np.random.default_rng(SEED + 10)
    margin = 2 * g.spacing[0]
    worst = 0.0
    for n, sol in enumerate(traj.solutions):
        nxt = traj.densities[n + 1]
        for _ in range(10):
            a, b = rng.uniform(margin, 0.4), rng.uniform(0.6, 1 - margin)
            c1, c2 = rng.normal(size=2)
            fld = PerturbationField(
                lambda x, a=a, b=b, c1=c1: (c1 * _bump(x[:, 0], a, b))[:, None],
                lambda x, a=a, b=b, c2=c2: c2 * _bump(x[:, 0], a, b),
                True,
                margin,
            )
            lhs, rhs, scale = first_order_residual(sol, nxt, fld, SPEC8, P11, tau)
            worst = max(worst, abs(lhs - rhs) / scale)
    ok = worst <= 1e-2
    report(capsys, 10, ok, f"max |lhs - rhs|/scale {worst:.2e} over {len(traj.solutions)} steps x 10 fields")
    assert ok


# ----------------------------------------------------------------------------
# 12: slope at the null measure
# ----------------------------------------------------------------------------


def test_c12_slope_bound(capsys):
    est, bound, qs = slope_lower_bound_check(Params(1.0, 4.0), ((0.0,), (1.0,)), return_all=True)
    ok = bound == pytest.approx(1.0) and abs(qs[-1] - bound) <= 0.02 * bound and max(qs) <= bound + 1e-12
    report(capsys, 12, ok, f"estimate at N=1e6 {qs[-1]:.9f}, bound {bound}")
    assert ok
