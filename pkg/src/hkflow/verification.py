"""Reference solutions and consistency checks for the reaction-diffusion flow.

The flow is

.. math::

    \\partial_t u = \\Lambda\\,\\mathrm{div}\\big(\\nabla L_F(u) + u \\nabla V\\big)
    - \\Sigma\\big(\\hat L_F(u) + V u\\big)

on a box with zero normal flux. :func:`fd_reference_solve` integrates it
with conservative face fluxes; :func:`weak_form_residual` measures how far
a discrete trajectory is from satisfying the weak formulation against a
space-time test function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.integrate import trapezoid

from .energy import EnergySpec, L_F, L_hat_F, PowerLaw, ZeroPotential, energy_of
from .jko import Trajectory
from .measures import GridDensity, Params

__all__ = [
    "TestFunctionST",
    "FDError",
    "fd_reference_solve",
    "weak_form_residual",
    "psi_battery",
    "psi_norm",
    "time_cutoff",
    "slope_lower_bound_check",
    "relative_l1",
]


class FDError(RuntimeError):
    """Raised when the explicit reference solver loses positivity."""


@dataclass(frozen=True)
class TestFunctionST:
    """Space-time test function with closed-form derivatives.

    Attributes
    ----------
    psi, dt, grad, lap : callable
        ``(t, x) -> array``; ``x`` has shape (n, d), ``grad`` returns (n, d).
    horizon : float
        ``psi(t, .) = 0`` for ``t >= horizon``.
    cls : str
        ``"interior"`` (vanishes near the boundary) or ``"full"``.
    psi_id : str
    """

    __test__ = False  # not a pytest class

    psi: Callable
    dt: Callable
    grad: Callable
    lap: Callable
    horizon: float
    cls: str = "interior"
    psi_id: str = "psi"

    def __post_init__(self):
        if self.cls not in ("interior", "full"):
            raise ValueError(f"unknown test function class {self.cls!r}")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")


# ----------------------------------------------------------------------------
# finite-difference reference
# ----------------------------------------------------------------------------


def _rhs(u, dx, Vc, params: Params, spec: EnergySpec):
    """Cell rates ``div J - sigma (L_hat_F(u) + V u)`` with no flux through the ends."""
    LF = np.asarray(L_F(spec, u), float)
    u_face = 0.5 * (u[1:] + u[:-1])
    J = params.lam * ((LF[1:] - LF[:-1]) + u_face * (Vc[1:] - Vc[:-1])) / dx
    flux = np.concatenate(([0.0], J, [0.0]))
    div = (flux[1:] - flux[:-1]) / dx
    return div - params.sigma * (np.asarray(L_hat_F(spec, u), float) + Vc * u)


def _max_diffusivity(u, spec: EnergySpec) -> float:
    pos = u[u > 0]
    if pos.size == 0:
        return 0.0
    return float(np.max(np.abs(spec.family.sd2F(pos))))


def fd_reference_solve(
    u0: GridDensity,
    spec: EnergySpec,
    params: Params,
    T: float,
    dt_safety: float = 0.25,
    record_times: Optional[Sequence[float]] = None,
) -> Trajectory:
    """Explicit conservative finite-volume solution on a 1-D grid.

    Time stepping is the two-stage strong-stability-preserving Runge-Kutta
    method (Heun) with
    ``dt = dt_safety dx^2 / (lam max(u F''(u)) + 1)``, further limited so
    that the reaction rate times ``dt`` stays below ``dt_safety``.

    Parameters
    ----------
    u0 : GridDensity
        Initial density on a 1-D grid.
    spec : EnergySpec
    params : Params
    T : float
        Final time.
    dt_safety : float
    record_times : sequence of float, optional
        Times at which to store the solution (``T`` is always stored). The
        step size is shortened to land on them exactly.

    Returns
    -------
    Trajectory
        ``tau`` is the nominal step of the first step; ``times`` and
        ``densities`` hold the recorded states.

    Raises
    ------
    FDError
        If some cell value drops below ``-1e-12``.
    """
    if u0.dim != 1:
        raise ValueError("the reference solver is one-dimensional")
    dx = float(u0.spacing[0])
    Vc = np.asarray(spec.V(u0.centers()), float)
    u = np.array(u0.values, float).reshape(-1)
    rec = [] if record_times is None else [float(t) for t in np.ravel(record_times)]
    stops = sorted({t for t in rec if 0 < t < T * (1 - 1e-12)} | {float(T)})

    def step_size(w):
        dt = dt_safety * dx * dx / (params.lam * _max_diffusivity(w, spec) + 1.0)
        pos = w > 0
        if pos.any():
            rate = params.sigma * float(np.max(np.abs(np.asarray(L_hat_F(spec, w[pos])) / w[pos] + Vc[pos])))
            if rate > 0:
                dt = min(dt, dt_safety / rate)
        return dt

    traj = Trajectory(tau=step_size(u) if T > 0 else 0.0)
    traj.times.append(0.0)
    traj.densities.append(u0)
    traj.step_index.append(0)
    traj.energies.append(energy_of(u0, spec))
    traj.masses.append(u0.mass())
    t = 0.0
    k = 0
    for stop in stops:
        while t < stop * (1 - 1e-14):
            dt = min(step_size(u), stop - t)
            k1 = _rhs(u, dx, Vc, params, spec)
            u1 = np.maximum(u + dt * k1, 0.0) if np.all(u + dt * k1 >= -1e-12) else None
            if u1 is None:
                raise FDError(f"negative density at t = {t:.6g}; reduce dt_safety")
            w = 0.5 * u + 0.5 * (u1 + dt * _rhs(u1, dx, Vc, params, spec))
            if np.any(w < -1e-12):
                raise FDError(f"negative density at t = {t:.6g}; reduce dt_safety")
            u = np.maximum(w, 0.0)
            t = stop if stop - t <= dt * (1 + 1e-12) else t + dt
            k += 1
        g = u0.with_values(u.reshape(u0.dims))
        traj.times.append(t)
        traj.densities.append(g)
        traj.step_index.append(k)
        traj.energies.append(energy_of(g, spec))
        traj.masses.append(g.mass())
    return traj


def relative_l1(a: GridDensity, b: GridDensity) -> float:
    """``||a - b||_1 / ||b||_1`` on a common grid."""
    den = float(np.sum(np.abs(b.values)))
    return float(np.sum(np.abs(a.values - b.values))) / den if den > 0 else float(np.sum(np.abs(a.values)))


# ----------------------------------------------------------------------------
# weak formulation
# ----------------------------------------------------------------------------


def _grad_1d(w: np.ndarray, dx: float, u: np.ndarray) -> np.ndarray:
    """Central differences; one-sided at the ends and next to cells with ``u = 0``."""
    n = w.size
    g = np.zeros(n)
    if n < 2:
        return g
    live = u > 0
    for i in range(n):
        left = i > 0 and (live[i - 1] or not live[i])
        right = i < n - 1 and (live[i + 1] or not live[i])
        if left and right:
            g[i] = (w[i + 1] - w[i - 1]) / (2 * dx)
        elif right:
            g[i] = (w[i + 1] - w[i]) / dx
        elif left:
            g[i] = (w[i] - w[i - 1]) / dx
    return g


_GAUSS_X, _GAUSS_W = np.polynomial.legendre.leggauss(4)


def weak_form_residual(traj: Trajectory, psi: TestFunctionST, spec: EnergySpec, params: Params, u0: Optional[GridDensity] = None) -> float:
    """``|I(psi, u) - int int u d_t psi - int u(0) psi(0)|`` for a piecewise-constant trajectory.

    ``densities[k]`` is taken as the value on ``(times[k-1], times[k]]``.
    Space integrals use the midpoint rule at cell centres; time integrals of
    ``d_t psi`` are exact on each interval, the others use 4-point Gauss
    quadrature. ``u0`` defaults to the first stored density.

    Raises
    ------
    ValueError
        If the trajectory stops before ``psi.horizon`` or its times are not
        increasing. Every step must be recorded for the result to be the
        residual of the scheme.
    """
    times = np.asarray(traj.times, float)
    if times[-1] < psi.horizon * (1 - 1e-12):
        raise ValueError("trajectory does not cover the support of psi")
    if not np.all(np.diff(times) > 0):
        raise ValueError("trajectory times must be increasing")
    first = traj.densities[0] if u0 is None else u0
    if first.dim != 1:
        raise ValueError("weak_form_residual is implemented on 1-D grids")
    X = first.centers()
    dx = float(first.spacing[0])
    vol = first.cell_volume
    gradV = np.asarray(spec.V.grad(X), float).reshape(X.shape)[:, 0]
    Vc = np.asarray(spec.V(X), float)

    initial = float(np.sum(first.values.reshape(-1) * psi.psi(0.0, X))) * vol
    lhs = 0.0
    dtpart = 0.0
    for k in range(1, len(times)):
        a, b = times[k - 1], min(times[k], psi.horizon)
        if a >= psi.horizon:
            break
        u = traj.densities[k].values.reshape(-1)
        dtpart += float(np.sum(u * (psi.psi(b, X) - psi.psi(a, X)))) * vol
        flux = params.lam * (_grad_1d(np.asarray(L_F(spec, u), float), dx, u) + u * gradV)
        react = params.sigma * (np.asarray(L_hat_F(spec, u), float) + Vc * u)
        half = 0.5 * (b - a)
        for gx, gw in zip(_GAUSS_X, _GAUSS_W):
            t = a + half * (gx + 1.0)
            gpsi = np.asarray(psi.grad(t, X), float).reshape(X.shape)[:, 0]
            lhs += gw * half * float(np.sum(flux * gpsi + react * psi.psi(t, X))) * vol
    return abs(lhs - dtpart - initial)


def psi_norm(psi: TestFunctionST, grid: GridDensity, params: Params, n_t: int = 2001) -> float:
    """Size of the residual functional: ``int int |d_t psi| + lam |grad psi| + sigma |psi|``.

    The weak-form residual is linear in ``psi``; dividing by this number
    makes residuals of different test functions comparable.
    """
    X = grid.centers()
    ts = np.linspace(0.0, psi.horizon, n_t)
    vals = [
        float(np.sum(np.abs(psi.dt(t, X)) + params.lam * np.linalg.norm(np.asarray(psi.grad(t, X), float).reshape(X.shape), axis=1) + params.sigma * np.abs(psi.psi(t, X))))
        * grid.cell_volume
        for t in ts
    ]
    return float(trapezoid(vals, ts))


def time_cutoff(horizon: float, poly: Sequence[float] = (1.0,)):
    """``c(t) = p(t/horizon) (1 - t/horizon)^3`` for ``t < horizon`` and 0 after; C^2 at the horizon.

    Returns ``(c, dc)``.
    """
    P = np.polynomial.Polynomial(poly)
    dP = P.deriv()

    def c(t):
        s = t / horizon
        return float(P(s) * (1 - s) ** 3) if s < 1 else 0.0

    def dc(t):
        s = t / horizon
        if s >= 1:
            return 0.0
        return float(dP(s) * (1 - s) ** 3 - 3.0 * P(s) * (1 - s) ** 2) / horizon

    return c, dc


def _bump(a: float, b: float):
    """``sin^4(pi (x-a)/(b-a))`` on ``[a, b]``, zero outside; C^3 with derivatives."""
    L = b - a
    w = math.pi / L

    def inside(x):
        return (x > a) & (x < b)

    def f(x):
        s = np.sin(w * (x - a))
        return np.where(inside(x), s**4, 0.0)

    def df(x):
        s, c = np.sin(w * (x - a)), np.cos(w * (x - a))
        return np.where(inside(x), 4 * w * s**3 * c, 0.0)

    def d2f(x):
        s, c = np.sin(w * (x - a)), np.cos(w * (x - a))
        return np.where(inside(x), 4 * w * w * (3 * s * s * c * c - s**4), 0.0)

    return f, df, d2f


def _separable(space, cut, cls, psi_id, horizon):
    f, df, d2f = space
    c, dc = cut
    return TestFunctionST(
        psi=lambda t, x: c(t) * f(np.asarray(x, float)[:, 0]),
        dt=lambda t, x: dc(t) * f(np.asarray(x, float)[:, 0]),
        grad=lambda t, x: (c(t) * df(np.asarray(x, float)[:, 0]))[:, None],
        lap=lambda t, x: c(t) * d2f(np.asarray(x, float)[:, 0]),
        horizon=horizon,
        cls=cls,
        psi_id=psi_id,
    )


def psi_battery(horizon: float, lo: float = 0.0, hi: float = 1.0) -> list[TestFunctionST]:
    """Test functions on ``(lo, hi)``: four of full class and four of interior class.

    Full class: ``1``, ``cos(pi x)``, a linear ramp and a quadratic, which
    do not vanish at the boundary. Interior class: ``sin^4`` bumps and a
    modulated bump supported away from the ends. Each is multiplied by a
    smooth time cutoff of the form ``p(t) (1 - t/horizon)^3``.
    """
    L = hi - lo

    def z(x):
        return (x - lo) / L

    const = (lambda x: np.ones_like(x), lambda x: np.zeros_like(x), lambda x: np.zeros_like(x))
    cosk = (
        lambda x: np.cos(math.pi * z(x)),
        lambda x: -math.pi / L * np.sin(math.pi * z(x)),
        lambda x: -((math.pi / L) ** 2) * np.cos(math.pi * z(x)),
    )
    ramp = (lambda x: z(x), lambda x: np.full_like(x, 1.0 / L), lambda x: np.zeros_like(x))
    quad = (lambda x: z(x) ** 2, lambda x: 2 * z(x) / L, lambda x: np.full_like(x, 2.0 / L**2))
    b1 = _bump(lo + 0.1 * L, hi - 0.1 * L)
    b2 = _bump(lo + 0.2 * L, lo + 0.6 * L)
    b3 = _bump(lo + 0.4 * L, hi - 0.1 * L)
    f3, df3, d2f3 = b1
    k = 2 * math.pi / L
    mod = (
        lambda x: np.cos(k * (x - lo)) * f3(x),
        lambda x: -k * np.sin(k * (x - lo)) * f3(x) + np.cos(k * (x - lo)) * df3(x),
        lambda x: -k * k * np.cos(k * (x - lo)) * f3(x) - 2 * k * np.sin(k * (x - lo)) * df3(x) + np.cos(k * (x - lo)) * d2f3(x),
    )
    flat = time_cutoff(horizon)
    lin = time_cutoff(horizon, (1.0, 1.0))
    sq = time_cutoff(horizon, (1.0, 0.0, -1.0))
    return [
        _separable(const, flat, "full", "full_const", horizon),
        _separable(cosk, lin, "full", "full_cos", horizon),
        _separable(ramp, flat, "full", "full_ramp", horizon),
        _separable(quad, sq, "full", "full_quad", horizon),
        _separable(b1, flat, "interior", "int_bump_wide", horizon),
        _separable(b2, lin, "interior", "int_bump_left", horizon),
        _separable(b3, sq, "interior", "int_bump_right", horizon),
        _separable(mod, flat, "interior", "int_modulated", horizon),
    ]


# ----------------------------------------------------------------------------
# slope at the null measure
# ----------------------------------------------------------------------------


def slope_lower_bound_check(
    params: Params,
    domain: tuple,
    p: float = 2.0,
    Ns: Sequence[int] = (10, 100, 1000, 10_000, 100_000, 1_000_000),
    return_all: bool = False,
):
    """Lower estimate of the slope of ``E = int -sqrt(u) + u^p`` at the null measure.

    With ``eta_N = (1/N) Lebesgue`` on the box ``domain = (lo, hi)``,
    ``HK(eta_N, 0)^2 = (4/sigma) |Omega| / N`` and the quotient
    ``-E(eta_N) / HK(eta_N, 0)`` increases to ``sqrt(sigma |Omega|) / 2``.

    Returns
    -------
    estimate : float
        Largest quotient over ``Ns``.
    bound : float
        ``sqrt(sigma |Omega|) / 2``.
    quotients : list of float
        Only when ``return_all`` is true.
    """
    lo = np.atleast_1d(np.asarray(domain[0], float))
    hi = np.atleast_1d(np.asarray(domain[1], float))
    if lo.size not in (1, 2) or np.any(hi <= lo):
        raise ValueError("domain must be a 1-D or 2-D box with hi > lo")
    spec = EnergySpec(PowerLaw(c1=1.0, c2=1.0, p=p, q=0.5), ZeroPotential())
    grid = GridDensity.on_box(lo, hi, (4,) * lo.size)
    vol = grid.volume
    qs = []
    for N in Ns:
        eta = grid.with_values(np.full(grid.dims, 1.0 / N))
        hk = math.sqrt(params.entropy_weight * vol / N)
        qs.append(-energy_of(eta, spec) / hk)
    bound = math.sqrt(params.sigma * vol) / 2.0
    est = max(qs)
    return (est, bound, qs) if return_all else (est, bound)
