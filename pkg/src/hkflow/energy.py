"""Internal energies, potentials and the per-cell proximal problem.

The energy of a density ``u`` on a grid is

.. math:: \\mathcal{E}(u) = \\int F(u(x))\\,dx + \\int V(x) u(x)\\,dx

with ``F`` from one of two convex families. The pressure-like functions

.. math:: L_F(s) = s F'(s) - F(s), \\qquad \\hat L_F(s) = s F'(s)

enter the weak form of the associated reaction-diffusion equation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .measures import GridDensity, PerturbationField, central_jacobian

__all__ = [
    "EnergyError",
    "LogEntropy",
    "PowerLaw",
    "Potential",
    "ZeroPotential",
    "AffinePotential",
    "SampledPotential",
    "EnergySpec",
    "F_eval",
    "F_prime",
    "L_F",
    "L_hat_F",
    "L_F_inverse",
    "energy_of",
    "solve_prox_equation",
    "jko_cell_prox",
    "dF_directional",
    "linear_lower_bound",
    "coercivity_constants",
    "energy_spec_from_dict",
]


class EnergyError(ValueError):
    """Invalid energy parameters or failed scalar solves."""


# ----------------------------------------------------------------------------
# families of internal energies
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class LogEntropy:
    """``F(s) = c1 s log s`` with ``F(0) = 0``."""

    c1: float = 1.0

    def __post_init__(self):
        if not self.c1 > 0:
            raise EnergyError("log_entropy requires c1 > 0")

    def F(self, s):
        s = np.asarray(s, float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(s > 0, self.c1 * s * np.log(np.where(s > 0, s, 1.0)), 0.0)

    def dF(self, s):
        return self.c1 * (np.log(s) + 1.0)

    def sd2F(self, s):
        """``s F''(s)``."""
        return np.full_like(np.asarray(s, float), self.c1)

    def LF(self, s):
        return self.c1 * np.asarray(s, float)

    def LhatF(self, s):
        s = np.asarray(s, float)
        return self.c1 * s + self.F(s)

    @property
    def dF_at_zero(self) -> float:
        return -math.inf

    def to_dict(self) -> dict:
        return {"family": "log_entropy", "c1": self.c1}


@dataclass(frozen=True)
class PowerLaw:
    """``F(s) = -c1 s^q + c2 s^p`` with ``c1 >= 0, c2 > 0, p > 1, 0 < q < 1``."""

    c1: float = 0.0
    c2: float = 1.0
    p: float = 2.0
    q: float = 0.5

    def __post_init__(self):
        if not (self.c1 >= 0 and self.c2 > 0 and self.p > 1 and 0 < self.q < 1):
            raise EnergyError("power_law requires c1 >= 0, c2 > 0, p > 1, 0 < q < 1")

    def F(self, s):
        s = np.asarray(s, float)
        return -self.c1 * s**self.q + self.c2 * s**self.p

    def dF(self, s):
        s = np.asarray(s, float)
        return -self.c1 * self.q * s ** (self.q - 1) + self.c2 * self.p * s ** (self.p - 1)

    def sd2F(self, s):
        s = np.asarray(s, float)
        return -self.c1 * self.q * (self.q - 1) * s ** (self.q - 1) + self.c2 * self.p * (self.p - 1) * s ** (self.p - 1)

    def LF(self, s):
        s = np.asarray(s, float)
        return self.c1 * (1 - self.q) * s**self.q + self.c2 * (self.p - 1) * s**self.p

    def LhatF(self, s):
        s = np.asarray(s, float)
        return -self.c1 * self.q * s**self.q + self.c2 * self.p * s**self.p

    @property
    def dF_at_zero(self) -> float:
        return -math.inf if self.c1 > 0 else 0.0

    def to_dict(self) -> dict:
        return {"family": "power_law", "c1": self.c1, "c2": self.c2, "p": self.p, "q": self.q}


# ----------------------------------------------------------------------------
# potentials
# ----------------------------------------------------------------------------


class Potential:
    """External potential ``V`` with gradient. Points have shape (n, d)."""

    def __call__(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grad(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


class ZeroPotential(Potential):
    def __call__(self, x):
        return np.zeros(np.atleast_2d(x).shape[0])

    def grad(self, x):
        return np.zeros_like(np.atleast_2d(np.asarray(x, float)))

    def to_dict(self):
        return {"kind": "zero"}


class AffinePotential(Potential):
    """``V(x) = <a, x> + b``."""

    def __init__(self, a, b: float = 0.0):
        self.a = np.atleast_1d(np.asarray(a, float))
        self.b = float(b)

    def __call__(self, x):
        x = np.atleast_2d(np.asarray(x, float))
        return x @ self.a + self.b

    def grad(self, x):
        x = np.atleast_2d(np.asarray(x, float))
        return np.broadcast_to(self.a, x.shape).copy()

    def to_dict(self):
        return {"kind": "affine", "a": self.a.tolist(), "b": self.b}


class SampledPotential(Potential):
    """Potential given by values at cell centres, linearly interpolated.

    The gradient is taken from centred differences of the samples
    (one-sided at the ends) and interpolated in the same way.
    """

    def __init__(self, grid: GridDensity, source: Optional[str] = None):
        self.grid = grid
        self.source = source
        axes = grid.axes()
        self._V = RegularGridInterpolator(axes, grid.values, bounds_error=False, fill_value=None)
        grads = np.gradient(grid.values, *axes, edge_order=2) if grid.dim > 1 else [np.gradient(grid.values, axes[0], edge_order=2)]
        self._G = [RegularGridInterpolator(axes, gk, bounds_error=False, fill_value=None) for gk in grads]

    def __call__(self, x):
        return self._V(np.atleast_2d(np.asarray(x, float)))

    def grad(self, x):
        x = np.atleast_2d(np.asarray(x, float))
        return np.stack([G(x) for G in self._G], axis=1)

    def to_dict(self):
        return {"kind": "sampled", "file": self.source}


@dataclass(frozen=True)
class EnergySpec:
    """Internal energy family plus external potential."""

    family: object
    V: Potential = field(default_factory=ZeroPotential)

    def to_dict(self) -> dict:
        return {"F": self.family.to_dict(), "V": self.V.to_dict()}


# ----------------------------------------------------------------------------
# pointwise functions
# ----------------------------------------------------------------------------


def F_eval(spec: EnergySpec, s):
    """Internal energy density ``F(s)`` for ``s >= 0``."""
    s = np.asarray(s, float)
    if np.any(s < 0):
        raise EnergyError("F is defined for s >= 0 only")
    out = spec.family.F(s)
    return out if np.ndim(out) else float(out)


def F_prime(spec: EnergySpec, s):
    """Derivative ``F'(s)`` for ``s > 0``; raises at ``s <= 0``."""
    s = np.asarray(s, float)
    if np.any(s <= 0):
        raise EnergyError("F' is only available for s > 0 (it may diverge at 0)")
    out = spec.family.dF(s)
    return out if np.ndim(out) else float(out)


def L_F(spec: EnergySpec, s):
    """``s F'(s) - F(s)``, extended by ``-F(0)`` at zero."""
    s = np.asarray(s, float)
    out = spec.family.LF(s)
    return out if np.ndim(out) else float(out)


def L_hat_F(spec: EnergySpec, s):
    """``s F'(s)``, extended by 0 at zero."""
    s = np.asarray(s, float)
    out = spec.family.LhatF(s)
    return out if np.ndim(out) else float(out)


def L_F_inverse(spec: EnergySpec, value: float, hi: float = 1.0, tol: float = 1e-14) -> float:
    """Solve ``L_F(s) = value`` for ``s >= 0`` by bisection (``L_F`` is increasing)."""
    lo = 0.0
    if value <= float(L_F(spec, 0.0)):
        return 0.0
    while float(L_F(spec, hi)) < value:
        hi *= 2.0
        if hi > 1e300:
            raise EnergyError("L_F inverse: value out of range")
    for _ in range(2000):
        mid = 0.5 * (lo + hi)
        if float(L_F(spec, mid)) < value:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol * max(1.0, hi):
            break
    return 0.5 * (lo + hi)


def energy_of(u: GridDensity, spec: EnergySpec) -> float:
    """Midpoint-rule value of ``int F(u) + V u``."""
    vals = u.values.reshape(-1)
    V = spec.V(u.centers())
    return float(np.sum(spec.family.F(vals) + V * vals) * u.cell_volume)


# ----------------------------------------------------------------------------
# proximal problem
# ----------------------------------------------------------------------------


def solve_prox_equation(A, beta, kappa, V, family, tol: float = 1e-13, max_iter: int = 100):
    """Solve ``kappa (1 - exp(A - beta y)) + F'(exp y) + V = 0`` for ``y`` elementwise.

    The left-hand side is strictly increasing in ``y``. Safeguarded Newton
    with a bisection fallback is applied in ``y = log s``. ``A = -inf`` is
    allowed. Returns ``s = exp(y)``, set to 0 where no root exists because
    the left-hand side stays positive as ``s -> 0``.

    Raises
    ------
    EnergyError
        If the iteration fails to converge within ``max_iter`` steps.
    """
    A = np.asarray(A, float)
    V = np.asarray(V, float)
    shape = np.broadcast(A, V, np.asarray(beta, float), np.asarray(kappa, float)).shape
    A = np.broadcast_to(A, shape).astype(float).ravel()
    V = np.broadcast_to(V, shape).astype(float).ravel()
    beta = np.broadcast_to(np.asarray(beta, float), shape).ravel()
    kappa = np.broadcast_to(np.asarray(kappa, float), shape).ravel()

    YMIN, YMAX = -740.0, 700.0

    def G(y):
        e = np.exp(np.minimum(A - beta * y, 700.0))
        return kappa * (1.0 - e) + family.dF(np.exp(y)) + V

    def dG(y):
        e = np.exp(np.minimum(A - beta * y, 700.0))
        return kappa * beta * e + family.sd2F(np.exp(y))

    # start at s = 1; the bracket grows geometrically from there
    y = np.zeros(A.shape)
    g0 = G(y)
    up = g0 < 0  # root lies above y
    lo = np.where(up, y, np.nan)
    hi = np.where(up, np.nan, y)
    zero = np.zeros(y.shape, bool)
    step = 1.0
    for _ in range(12):
        open_hi = np.isnan(hi)
        open_lo = np.isnan(lo) & ~zero
        if not (open_hi.any() or open_lo.any()):
            break
        if open_hi.any():
            cand = np.minimum(lo + step, YMAX)
            ok = open_hi & (G(cand) >= 0)
            hi = np.where(ok, cand, hi)
            lo = np.where(open_hi & ~ok, cand, lo)
            if np.any(open_hi & ~ok & (cand >= YMAX)):
                raise EnergyError("prox equation has no root below exp(700)")
        if open_lo.any():
            cand = np.maximum(hi - step, YMIN)
            ok = open_lo & (G(cand) < 0)
            lo = np.where(ok, cand, lo)
            hi = np.where(open_lo & ~ok, cand, hi)
            zero = zero | (open_lo & ~ok & (cand <= YMIN))
        step *= 4.0
    if np.any(np.isnan(hi)) or np.any(np.isnan(lo) & ~zero):
        raise EnergyError("failed to bracket the prox equation")
    lo = np.where(zero, YMIN, lo)
    y = np.where((y > lo) & (y < hi), y, 0.5 * (lo + hi))

    done = zero.copy()
    scale = kappa + np.abs(V) + 1.0
    width = [hi - lo, hi - lo]
    for _ in range(max_iter):
        g = G(y)
        dg = dG(y)
        hit = np.abs(g) <= tol * scale
        lo = np.where(g < 0, y, lo)
        hi = np.where(g >= 0, y, hi)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            y_new = y - g / dg
        # bisect where Newton stays in the bracket but fails to shrink it fast enough
        slow = (hi - lo) > 0.5 * width[0]
        width = [width[1], hi - lo]
        bad = ~np.isfinite(y_new) | (y_new <= lo) | (y_new >= hi) | slow
        y_new = np.where(bad, 0.5 * (lo + hi), y_new)
        tiny = np.abs(y_new - y) <= 4e-16 * np.maximum(1.0, np.abs(y))
        y = np.where(done | hit, y, y_new)
        done = done | hit | tiny
        if done.all():
            break
    else:
        raise EnergyError("prox Newton iteration did not converge in %d steps" % max_iter)
    s = np.where(zero, 0.0, np.exp(y))
    return s.reshape(shape)


def jko_cell_prox(g, kappa: float, V_x, spec: EnergySpec):
    """Minimize ``kappa (g log(g/s) - g + s) + F(s) + V_x s`` over ``s >= 0``.

    Vectorized over ``g`` and ``V_x``. The optimality condition
    ``kappa (1 - g/s) + F'(s) + V_x = 0`` is solved with
    :func:`solve_prox_equation`.
    """
    if kappa <= 0:
        raise EnergyError("kappa must be positive")
    g = np.asarray(g, float)
    if np.any(g < 0):
        raise EnergyError("g must be nonnegative")
    with np.errstate(divide="ignore"):
        A = np.log(g)
    s = solve_prox_equation(A, 1.0, kappa, V_x, spec.family)
    return s if np.ndim(s) else float(s)


# ----------------------------------------------------------------------------
# directional derivative and bounds
# ----------------------------------------------------------------------------


def dF_directional(u0: GridDensity, fld: PerturbationField, spec: EnergySpec, parts: bool = False):
    """Derivative of the energy along ``(I + h v)_# (1 + h R)^2 u0`` at ``h = 0``.

    .. math::

        \\int [-L_F(u_0)\\,\\mathrm{tr}\\,Dv + 2 \\hat L_F(u_0) R]\\,dx
        + \\int [\\langle \\nabla V, v\\rangle + 2 V R] u_0\\,dx

    ``Dv`` uses central differences at the grid spacing, as in
    :func:`hkflow.measures.density_after_pushforward`.

    Parameters
    ----------
    parts : bool
        If True return ``(internal, potential)`` instead of their sum.
    """
    x = u0.centers()
    u = u0.values.reshape(-1)
    div = np.trace(central_jacobian(fld.eval_v, x, u0.spacing), axis1=1, axis2=2)
    R = fld.eval_R(x)
    v = fld.eval_v(x)
    internal = float(np.sum(-spec.family.LF(u) * div + 2.0 * spec.family.LhatF(u) * R) * u0.cell_volume)
    pot = float(np.sum((np.sum(spec.V.grad(x) * v, axis=1) + 2.0 * spec.V(x) * R) * u) * u0.cell_volume)
    return (internal, pot) if parts else internal + pot


def linear_lower_bound(spec: EnergySpec) -> float:
    """A constant ``C_F > 0`` with ``F(s) >= -C_F s - C_F`` for all ``s >= 0``.

    ``c1 s log s >= -c1/e`` and ``-c1 s^q >= -c1 (1 + s)``.
    """
    fam = spec.family
    if isinstance(fam, LogEntropy):
        return fam.c1 / math.e
    if isinstance(fam, PowerLaw):
        return max(fam.c1, 1e-300)
    raise EnergyError(f"unknown family {fam!r}")


def coercivity_constants(spec: EnergySpec, domain_volume: float, params, V_min: float = 0.0) -> tuple[float, float]:
    """Constants ``(A, B)`` with ``E(u) >= -A - B HK(u, 0)^2``.

    ``A = C_F |Omega|`` and ``B = (sigma/4)(C_F + max(0, -V_min))``; the
    potential term is absorbed through ``int V u >= V_min int u``.
    """
    C = linear_lower_bound(spec)
    return C * domain_volume, 0.25 * params.sigma * (C + max(0.0, -V_min))


def energy_spec_from_dict(d: dict, base_dir: Optional[str] = None) -> EnergySpec:
    """Build an :class:`EnergySpec` from its JSON description.

    ``{"F": {"family": "log_entropy", "c1": 1.0}, "V": {"kind": "affine", "a": [1.0], "b": 0.0}}``.
    ``V`` kinds are ``zero``, ``affine`` and ``sampled`` (``{"kind": "sampled", "file": "v.csv"}``
    with columns ``cell_index, x..., u``).
    """
    import os

    from .measures import read_grid_csv

    if not isinstance(d, dict) or "F" not in d:
        raise EnergyError("energy description needs an 'F' entry")
    Fd = dict(d["F"])
    fam = Fd.pop("family", None)
    try:
        if fam == "log_entropy":
            family = LogEntropy(**{k: float(v) for k, v in Fd.items()})
        elif fam == "power_law":
            family = PowerLaw(**{k: float(v) for k, v in Fd.items()})
        else:
            raise EnergyError(f"unknown F family {fam!r}")
    except TypeError as exc:
        raise EnergyError(f"bad parameters for {fam}: {exc}") from None
    Vd = d.get("V", {"kind": "zero"}) or {"kind": "zero"}
    kind = Vd.get("kind", "zero")
    if kind == "zero":
        V = ZeroPotential()
    elif kind == "affine":
        V = AffinePotential(Vd.get("a", [0.0]), Vd.get("b", 0.0))
    elif kind == "sampled":
        path = Vd.get("file")
        if not path:
            raise EnergyError("sampled potential needs a 'file'")
        if base_dir and not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        if not os.path.exists(path):
            raise EnergyError(f"potential file not found: {path}")
        V = SampledPotential(read_grid_csv(path), source=path)
    else:
        raise EnergyError(f"unknown V kind {kind!r}")
    return EnergySpec(family, V)
