"""Minimizing-movement scheme in the Hellinger-Kantorovich metric.

One step maps a grid density ``u_prev`` to a minimizer of

.. math:: \\nu \\mapsto \\mathcal{E}(\\nu) + \\frac{1}{2\\tau} HK^2(\\nu, u_{prev}).

The coupling and the new density are found together by log-domain scaling:
the update for the target side is the usual KL step towards ``u_prev``; the
update for the source side minimizes jointly over the plan marginal and the
cell density, which reduces to a monotone scalar equation per cell.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import minimize_scalar

from .energy import EnergySpec, dF_directional, energy_of, coercivity_constants, solve_prox_equation
from .hk_solver import (
    HKSolution,
    SolverConfig,
    SolverError,
    _assemble,
    _plan_from_potentials,
    cost_matrix,
    hk_tiny_oracle,
    kl_prox_potential,
    let_objective,
    scaling_solve,
)
from .measures import DiscreteMeasure, GridDensity, Params, PerturbationField

__all__ = [
    "SchemeConfig",
    "StepResult",
    "Trajectory",
    "jko_step",
    "run_scheme",
    "dissipation_diagnostics",
    "first_order_residual",
    "jko_step_oracle",
    "step_functional",
]


@dataclass(frozen=True)
class SchemeConfig:
    """Time stepping and inner-solver settings.

    Attributes
    ----------
    tau : float
        Time step.
    T : float
        Horizon; the scheme performs ``ceil(T / tau)`` steps (none if
        ``T < tau``).
    solver : SolverConfig
        Settings for the scaling iterations of each step.
    prox_tol : float
        Allowed excess of the step functional over the stay-put value.
    outer_max_iters : int
        Iteration cap per regularization level within a step.
    record_every : int
        Keep every ``record_every``-th density in the trajectory (the last
        one is always kept).
    warm_eps : float
        When potentials from the previous step are available, the
        regularization schedule restarts from ``min(warm_eps, eps_start)``.
    keep_solutions : bool
        Store the per-step coupling (needed for first-order diagnostics).
    subcell : int
        Each cell enters the distance term as ``subcell**d`` equal point
        masses on a refined grid. Values above 1 reduce the pinning of
        sub-cell displacements on coarse grids.
    """

    tau: float
    T: float
    solver: SolverConfig = field(default_factory=lambda: SolverConfig(eps_end=1e-5))
    prox_tol: float = 1e-6
    outer_max_iters: int = 100000
    record_every: int = 1
    warm_eps: float = 1e-2
    keep_solutions: bool = False
    subcell: int = 1

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not self.T >= 0:
            raise ValueError("T must be nonnegative")
        if self.record_every < 1:
            raise ValueError("record_every must be >= 1")
        if int(self.subcell) != self.subcell or self.subcell < 1:
            raise ValueError("subcell must be a positive integer")

    @property
    def n_steps(self) -> int:
        if self.T < self.tau * (1 - 1e-12):
            return 0
        return int(math.ceil(self.T / self.tau - 1e-9))


@dataclass
class StepResult:
    """Outcome of one minimizing-movement step."""

    density: GridDensity
    step_hk2: float
    solution: HKSolution
    iterations: int
    dual_residual: float
    energy: float
    certificate_gap: float


@dataclass
class Trajectory:
    """Discrete solution with per-step diagnostics.

    ``densities[k]`` is the density at ``times[k]``. Step arrays have one
    entry per step ``n = 1..N``.
    """

    tau: float
    times: list = field(default_factory=list)
    densities: list = field(default_factory=list)
    step_index: list = field(default_factory=list)
    energies: list = field(default_factory=list)
    masses: list = field(default_factory=list)
    step_hk2: list = field(default_factory=list)
    metric_derivative: list = field(default_factory=list)
    certificate_gap: list = field(default_factory=list)
    iterations: list = field(default_factory=list)
    solutions: list = field(default_factory=list)
    flags: list = field(default_factory=list)
    error: Optional[str] = None

    @property
    def n_steps(self) -> int:
        return len(self.step_hk2)

    def density_at(self, t: float) -> GridDensity:
        """Piecewise-constant interpolant: the step ``n`` density on ``((n-1) tau, n tau]``."""
        n = int(math.ceil(t / self.tau - 1e-9)) if t > 0 else 0
        n = min(max(n, 0), self.n_steps)
        if n not in self.step_index:
            raise KeyError(f"density of step {n} was not recorded")
        return self.densities[self.step_index.index(n)]

    def final(self) -> GridDensity:
        return self.densities[-1]


def step_functional(nu: GridDensity, prev: GridDensity, spec: EnergySpec, params: Params, tau: float, hk2_value: float) -> float:
    """``E(nu) + hk2_value / (2 tau)``."""
    return energy_of(nu, spec) + hk2_value / (2.0 * tau)


def jko_step(
    prev: GridDensity,
    spec: EnergySpec,
    params: Params,
    cfg: SchemeConfig,
    warm: Optional[tuple] = None,
) -> StepResult:
    """One minimizing-movement step from ``prev``.

    Parameters
    ----------
    prev : GridDensity
    spec : EnergySpec
    params : Params
    cfg : SchemeConfig
    warm : tuple, optional
        ``(f, g)`` potentials from a previous step on the same grid.

    Returns
    -------
    StepResult

    Raises
    ------
    SolverError
        If the scaling iterations fail at the final regularization level.
    """
    tau = cfg.tau
    lam = params.entropy_weight
    kappa = lam / (2.0 * tau)
    X = prev.centers()
    vol = prev.cell_volume
    n = X.shape[0]
    V = spec.V(X)
    fam = spec.family
    scfg = cfg.solver
    k = cfg.subcell ** prev.dim  # quadrature points per cell
    prev_m = prev.to_measure(cfg.subcell)
    Y = prev_m.points
    b = prev_m.weights
    act = np.nonzero(b > 0)[0]
    N = Y.shape[0]

    if act.size == 0:
        # nothing to transport: each cell solves the prox problem with zero plan marginal
        s = solve_prox_equation(-np.inf, 1.0, kappa, V, fam)
        nxt = prev.with_values(s.reshape(prev.dims))
        sol = _assemble(np.zeros((N, N)), np.zeros(N), np.zeros(N), scfg.eps_end, nxt.to_measure(cfg.subcell), prev_m, params, 0, 0.0)
        return _finish(prev, nxt, sol, spec, params, cfg, 0, 0.0)

    C = cost_matrix(Y, Y[act], params)
    lw = math.log(vol / k)
    la = np.full(N, lw)
    lb = np.log(b[act])
    state = {"s": None}

    def row_update(Lr, eps):
        # the k rows of a cell share one density; their KL terms enter through a log-mean-exp
        A = ((Lr - eps * lw) / (lam + eps)).reshape(n, k)
        A = _lse(A) - math.log(k)
        s = solve_prox_equation(A, eps / (lam + eps), kappa, V, fam)
        state["s"] = s
        with np.errstate(divide="ignore"):
            logm = np.repeat(np.log(s) + lw, k)
        return np.where(logm > -np.inf, kl_prox_potential(Lr, logm, lam, eps), -np.inf)

    def col_update(Lc, eps):
        return kl_prox_potential(Lc, lb, lam, eps)

    levels = scfg.schedule()
    f0 = g0 = None
    if warm is not None:
        f0, g0 = warm
        if f0 is not None and f0.shape == (N,) and g0 is not None and g0.shape == (N,):
            g0 = g0[act]
            start = min(cfg.warm_eps, scfg.eps_start)
            levels = [e for e in levels if e <= start * (1 + 1e-12)] or [scfg.eps_end]
        else:
            f0 = g0 = None
    run_cfg = SolverConfig(
        eps_start=scfg.eps_start,
        eps_end=scfg.eps_end,
        eps_factor=scfg.eps_factor,
        max_iters=cfg.outer_max_iters,
        dual_tol=scfg.dual_tol,
        relaxation=scfg.relaxation,
    )
    f, g, iters, res = scaling_solve(C, la, lb, row_update, col_update, run_cfg, f0, g0, levels)
    eps = scfg.eps_end
    # final consistent pass: density from the converged row update
    Lr = eps * (_lse((-C + g[None, :]) / eps + lb[None, :]) + la)
    f = row_update(Lr, eps)
    s = state["s"]
    gamma = np.zeros((N, N))
    fin = np.where(np.isfinite(f), f, 0.0)
    gam_act = _plan_from_potentials(C, fin, g, la, lb, eps)
    gam_act[~np.isfinite(f)] = 0.0
    gamma[:, act] = gam_act
    nxt = prev.with_values(s.reshape(prev.dims))
    g_full = np.zeros(N)
    g_full[act] = g
    sol = _assemble(gamma, fin, g_full, eps, nxt.to_measure(cfg.subcell), prev_m, params, iters, res)
    return _finish(prev, nxt, sol, spec, params, cfg, iters, res)


def _lse(A: np.ndarray) -> np.ndarray:
    M = np.max(A, axis=1)
    Mf = np.where(np.isfinite(M), M, 0.0)
    with np.errstate(divide="ignore"):
        return Mf + np.log(np.sum(np.exp(A - Mf[:, None]), axis=1))


def _finish(prev, nxt, sol, spec, params, cfg, iters, res) -> StepResult:
    e_next = energy_of(nxt, spec)
    gap = e_next + sol.hk2 / (2.0 * cfg.tau) - energy_of(prev, spec)
    return StepResult(nxt, sol.hk2, sol, iters, res, e_next, gap)


def run_scheme(
    u0: GridDensity,
    spec: EnergySpec,
    params: Params,
    cfg: SchemeConfig,
    callback: Optional[Callable[[int, StepResult], None]] = None,
) -> Trajectory:
    """Iterate :func:`jko_step` up to the horizon.

    A failing step stops the iteration; the partial trajectory is returned
    with ``error`` set.
    """
    traj = Trajectory(tau=cfg.tau)
    traj.times.append(0.0)
    traj.densities.append(u0)
    traj.step_index.append(0)
    traj.energies.append(energy_of(u0, spec))
    traj.masses.append(u0.mass())
    cur = u0
    warm = None
    N = cfg.n_steps
    for k in range(1, N + 1):
        try:
            st = jko_step(cur, spec, params, cfg, warm)
        except (SolverError, ValueError, FloatingPointError) as exc:
            traj.error = f"step {k}: {exc}"
            break
        warm = (st.solution.plan.f, st.solution.plan.g)
        cur = st.density
        traj.energies.append(st.energy)
        traj.masses.append(cur.mass())
        traj.step_hk2.append(st.step_hk2)
        traj.metric_derivative.append(math.sqrt(max(st.step_hk2, 0.0)) / cfg.tau)
        traj.certificate_gap.append(st.certificate_gap)
        traj.iterations.append(st.iterations)
        if st.certificate_gap > cfg.prox_tol:
            traj.flags.append(f"step {k}: step functional exceeds stay-put value by {st.certificate_gap:.3e}")
        if cfg.keep_solutions:
            traj.solutions.append(st.solution)
        if k % cfg.record_every == 0 or k == N:
            traj.times.append(k * cfg.tau)
            traj.densities.append(cur)
            traj.step_index.append(k)
        if callback is not None:
            callback(k, st)
    return traj


def dissipation_diagnostics(traj: Trajectory, spec: EnergySpec, params: Params, domain_volume: float, V_min: float = 0.0, tol: float = 1e-8) -> dict:
    """A-priori estimates and the discrete energy inequality along a run.

    Returns a dict with

    - ``sum_hk2`` and ``bound``: ``sum_n HK^2(mu^n, mu^{n-1})`` against
      ``2 tau (E(mu^0) + A + B HK(mu^N, 0)^2)``, with ``holds_bound``;
    - ``sup_mass``: running maximum of the masses;
    - ``metric_action``: ``sum_n tau |mu'|_n^2``;
    - ``energy_drop`` and ``holds_energy_inequality``:
      ``E(mu^0) - E(mu^N) >= metric_action / 2 - tol``;
    - ``monotone``: energies nonincreasing up to ``tol``.
    """
    tau = traj.tau
    A, B = coercivity_constants(spec, domain_volume, params, V_min)
    hk = np.asarray(traj.step_hk2, float)
    E = np.asarray(traj.energies, float)
    md = np.asarray(traj.metric_derivative, float)
    massN = traj.masses[-1]
    sum_hk2 = float(hk.sum())
    bound = 2.0 * tau * (E[0] + A + B * params.entropy_weight * massN)
    action = float(np.sum(tau * md**2))
    drop = float(E[0] - E[-1])
    return {
        "A": A,
        "B": B,
        "sum_hk2": sum_hk2,
        "bound": bound,
        "holds_bound": bool(sum_hk2 <= bound + tol),
        "sup_mass": float(np.max(traj.masses)),
        "metric_action": action,
        "energy_drop": drop,
        "holds_energy_inequality": bool(drop >= 0.5 * action - tol),
        "monotone": bool(np.all(np.diff(E) <= tol)),
    }


def first_order_residual(step_sol: HKSolution, nxt: GridDensity, fld: PerturbationField, spec: EnergySpec, params: Params, tau: float) -> tuple[float, float, float]:
    """Residual of the first-order optimality condition of a step.

    Returns ``(lhs, rhs, scale)`` with ``lhs`` the energy derivative along
    ``(v, R)`` at the new density, ``rhs`` the superdifferential element of
    ``-HK^2/2`` divided by ``tau``, and ``scale`` the sum of the absolute
    values of the individual terms.
    """
    from .subdiff import superdiff_element

    internal, pot = dF_directional(nxt, fld, spec, parts=True)
    lhs = internal + pot
    rhs = superdiff_element(step_sol, fld, params) / tau
    scale = abs(internal) + abs(pot) + abs(rhs)
    return lhs, rhs, scale


def jko_step_oracle(
    prev: GridDensity,
    spec: EnergySpec,
    params: Params,
    tau: float,
    sweeps: int = 60,
    tol: float = 1e-9,
    subcell: int = 1,
) -> tuple[GridDensity, float]:
    """Derivative-free minimization of the step functional on tiny grids.

    Cyclic coordinate search over the cell densities with bounded Brent
    line searches; the distance term is evaluated with
    :func:`hkflow.hk_solver.hk_tiny_oracle` on the same point clouds as
    :func:`jko_step` with the given ``subcell``. At most 4 points in total.
    """
    n = prev.values.size
    if n * subcell**prev.dim > 4:
        raise ValueError("the step oracle accepts at most 4 quadrature points")
    mu = prev.to_measure(subcell)

    def phi(s):
        nu = prev.with_values(np.maximum(s, 0.0).reshape(prev.dims))
        return energy_of(nu, spec) + hk_tiny_oracle(nu.to_measure(subcell), mu, params, n_starts=2) / (2.0 * tau)

    s = prev.values.reshape(-1).copy()
    best = phi(s)
    upper = 4.0 * (float(np.max(s)) + 1.0)
    for _ in range(sweeps):
        moved = 0.0
        for i in range(n):
            def line(t, i=i):
                z = s.copy()
                z[i] = t
                return phi(z)

            r = minimize_scalar(line, bounds=(0.0, upper), method="bounded", options={"xatol": 1e-12})
            if r.fun < best:
                moved = max(moved, abs(r.x - s[i]))
                s[i] = r.x
                best = r.fun
        if moved <= tol:
            break
    return prev.with_values(s.reshape(prev.dims)), best
