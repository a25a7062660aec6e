"""Superdifferential formulas for the squared distance along perturbations.

For an optimal plan between ``nu0`` and ``mu`` and a direction ``(v, R)``
the map ``h -> -HK^2(nu_h, mu)/2`` with
``nu_h = (I + h v)_# (1 + h R)^2 nu0`` admits the Frechet subgradient

.. math::

    \\mathfrak{F}(v, R) - \\frac{4}{\\Sigma}\\int R\\,d\\nu_0^\\perp

at ``h = 0``, where ``F`` integrates, against the plan,

.. math::

    \\frac{4}{\\Sigma}\\left[-\\rho_0 R(x) + \\sqrt{\\rho_0\\rho_\\star}\\,R(x)\\cos\\ell
    + \\sqrt{\\Sigma/4\\Lambda}\\sqrt{\\rho_0\\rho_\\star}\\,\\langle S(x, y), v(x)\\rangle\\right].
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .cone import sinc
from .hk_solver import ConePlan, HKSolution, SolverConfig, homogeneous_marginal, lift_to_cone, solve_hk
from .measures import DiscreteMeasure, Params, PerturbationField, perturb

__all__ = [
    "TestFunction",
    "frak_F",
    "frak_F_cone",
    "frak_F_phi",
    "superdiff_element",
    "connection_gap",
    "field_from_phi",
    "difference_quotient",
    "superdiff_check",
]


@dataclass(frozen=True)
class TestFunction:
    """Twice differentiable ``phi`` with the bound ``c_phi >= sup(|phi| + |grad phi| + |hess phi|)``.

    Parameters
    ----------
    phi, grad_phi : callable
        Map points of shape (n, d) to shape (n,) and (n, d).
    hess_norm : callable
        Operator norm of the Hessian at points, shape (n,).
    c_phi : float
        Upper bound of ``|phi| + |grad phi| + |hess phi|`` over the domain.
    compact_interior : bool
        Whether ``phi`` vanishes near the boundary.
    """

    __test__ = False  # not a pytest class

    phi: Callable
    grad_phi: Callable
    hess_norm: Callable
    c_phi: float
    compact_interior: bool = False

    def certify(self, samples: np.ndarray) -> float:
        """Largest sampled ``|phi| + |grad phi| + |hess phi|``; raises if it exceeds ``c_phi``."""
        x = np.atleast_2d(samples)
        val = np.abs(self.phi(x)) + np.linalg.norm(np.atleast_2d(self.grad_phi(x)).reshape(x.shape), axis=1) + np.abs(self.hess_norm(x))
        m = float(np.max(val))
        if m > self.c_phi * (1 + 1e-12):
            raise ValueError(f"c_phi = {self.c_phi} is below the sampled bound {m}")
        return m


def _diag_s(x, y, params: Params) -> np.ndarray:
    """Row-wise ``S(x_k, y_k)``."""
    d = y - x
    k = params.ell_factor
    return (k * sinc(k * np.linalg.norm(d, axis=1)))[:, None] * d


def frak_F(sol: HKSolution, fld: PerturbationField, params: Params) -> float:
    """Plan form of ``F(v, R)``; linear in ``(v, R)``."""
    i, j, w = sol.plan.pairs()
    if w.size == 0:
        return 0.0
    x = sol.mu1.points[i]
    y = sol.mu2.points[j]
    rho0 = sol.rho0[i]
    root = np.sqrt(rho0 * sol.rho_star[j])
    k = params.ell_factor
    ell = k * np.linalg.norm(x - y, axis=1)
    R = fld.eval_R(x)
    v = fld.eval_v(x)
    inner = np.sum(_diag_s(x, y, params) * v, axis=1)
    terms = -rho0 * R + root * R * np.cos(ell) + k * root * inner
    return params.entropy_weight * float(np.sum(w * terms))


def frak_F_cone(beta: ConePlan, fld: PerturbationField, params: Params) -> float:
    """Cone-plan form of ``F(v, R)``, integrating over lifted pairs ``([x1, r1], [x2, r2])``."""
    if len(beta) == 0:
        return 0.0
    x, y, r1, r2, w = beta.x1, beta.x2, beta.r1, beta.r2, beta.mass
    k = params.ell_factor
    ell = k * np.linalg.norm(x - y, axis=1)
    R = fld.eval_R(x)
    inner = np.sum(_diag_s(x, y, params) * fld.eval_v(x), axis=1)
    terms = -(r1**2) * R + r1 * r2 * R * np.cos(ell) + k * r1 * r2 * inner
    return params.entropy_weight * float(np.sum(w * terms))


def superdiff_element(sol: HKSolution, fld: PerturbationField, params: Params) -> float:
    """``F(v, R)`` minus ``(4/sigma) int R d nu0_singular``."""
    sing = sol.singular0
    corr = float(np.sum(fld.eval_R(sing.points) * sing.weights)) if len(sing) else 0.0
    return frak_F(sol, fld, params) - params.entropy_weight * corr


def frak_F_phi(beta: ConePlan, phi: TestFunction, params: Params) -> float:
    """Cone-plan functional for the direction generated by a test function ``phi``.

    Integrand ``-2 r1^2 phi(x1) + 2 r1 r2 phi(x1) cos(ell) + r1 r2 sqrt(4 lam/sigma) <S, grad phi(x1)>``,
    scaled by ``4/sigma``.
    """
    if len(beta) == 0:
        return 0.0
    x, y, r1, r2, w = beta.x1, beta.x2, beta.r1, beta.r2, beta.mass
    ell = params.ell_factor * np.linalg.norm(x - y, axis=1)
    p = np.asarray(phi.phi(x), float).reshape(-1)
    gp = np.asarray(phi.grad_phi(x), float).reshape(x.shape)
    inner = np.sum(_diag_s(x, y, params) * gp, axis=1)
    c = math.sqrt(4.0 * params.lam / params.sigma)
    terms = -2.0 * r1**2 * p + 2.0 * r1 * r2 * p * np.cos(ell) + c * r1 * r2 * inner
    return params.entropy_weight * float(np.sum(w * terms))


def field_from_phi(phi: TestFunction, params: Params) -> PerturbationField:
    """Direction ``v = (4 lam/sigma) grad phi``, ``R = 2 phi``."""
    a = 4.0 * params.lam / params.sigma
    return PerturbationField(
        lambda x: a * np.asarray(phi.grad_phi(x), float).reshape(np.shape(x)),
        lambda x: 2.0 * np.asarray(phi.phi(x), float).reshape(-1),
        phi.compact_interior,
    )


def connection_gap(sol: HKSolution, phi: TestFunction, mu: DiscreteMeasure, nu0: DiscreteMeasure, params: Params) -> tuple[float, float]:
    """Gap between the change of ``int phi`` and the cone functional, with its bound.

    Returns
    -------
    lhs : float
        ``|(4/sigma)(int phi dmu - int phi dnu0) - (F_phi - (8/sigma) int phi d(nu0 - h alpha0))|``
        where ``h alpha0`` is the homogeneous first marginal of the lifted plan.
    bound : float
        ``c_phi (6 + 16 lam/sigma) hk2``.
    """
    beta = lift_to_cone(sol)
    h0 = homogeneous_marginal(beta, "first", support=nu0)
    lam4 = params.entropy_weight
    int_mu = float(np.sum(np.asarray(phi.phi(mu.points), float).reshape(-1) * mu.weights)) if len(mu) else 0.0
    pn = np.asarray(phi.phi(nu0.points), float).reshape(-1) if len(nu0) else np.zeros(0)
    int_nu = float(np.sum(pn * nu0.weights))
    sing = float(np.sum(pn * (nu0.weights - h0.weights)))
    lhs = abs(lam4 * (int_mu - int_nu) - (frak_F_phi(beta, phi, params) - 2.0 * lam4 * sing))
    bound = phi.c_phi * (6.0 + 16.0 * params.lam / params.sigma) * sol.hk2
    return lhs, bound


def difference_quotient(
    nu0: DiscreteMeasure,
    mu: DiscreteMeasure,
    fld: PerturbationField,
    h: float,
    params: Params,
    cfg: Optional[SolverConfig] = None,
    base: Optional[HKSolution] = None,
) -> tuple[float, float, HKSolution]:
    """One-sided quotient of ``-HK^2(nu_h, mu)/2`` against the subgradient.

    Returns ``(quotient, element, base_solution)`` with
    ``quotient = [-hk2(nu_h, mu)/2 + hk2(nu0, mu)/2 - h element] / |h|``.
    """
    base = base or solve_hk(nu0, mu, params, cfg)
    elem = superdiff_element(base, fld, params)
    nuh = perturb(nu0, fld, h)
    hk_h = solve_hk(nuh, mu, params, cfg, warm=base.plan).hk2
    q = (-0.5 * hk_h + 0.5 * base.hk2 - h * elem) / abs(h)
    return q, elem, base


def superdiff_check(
    nu0: DiscreteMeasure,
    mu: DiscreteMeasure,
    fld: PerturbationField,
    params: Params,
    cfg: Optional[SolverConfig] = None,
    hs: Sequence[float] = (1e-2, -1e-2, 1e-3, -1e-3, 1e-4, -1e-4),
    rel_tol: float = 1e-3,
) -> list[dict]:
    """Subgradient inequality over a sweep of ``h``.

    Each row holds ``h``, ``quotient``, ``element``, ``slack_tol`` and
    ``pass`` (``quotient >= -rel_tol (1 + hk2)``).
    """
    base = solve_hk(nu0, mu, params, cfg)
    rows = []
    for h in hs:
        q, elem, _ = difference_quotient(nu0, mu, fld, h, params, cfg, base)
        tol = rel_tol * (1.0 + base.hk2)
        rows.append({"h": h, "quotient": q, "element": elem, "hk2": base.hk2, "slack_tol": tol, "pass": bool(q >= -tol)})
    return rows
