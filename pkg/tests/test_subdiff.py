import math

import numpy as np
import pytest

from hkflow.hk_solver import lift_to_cone, solve_hk
from hkflow.measures import DiscreteMeasure, Params, PerturbationField
from hkflow.subdiff import (
    TestFunction,
    connection_gap,
    difference_quotient,
    field_from_phi,
    frak_F,
    frak_F_cone,
    frak_F_phi,
    superdiff_check,
    superdiff_element,
)

PRM = Params(0.5, 2.0)


def _measure(rng, n, domain=((0.0,), (1.0,))):
    return DiscreteMeasure(rng.uniform(0.15, 0.85, (n, 1)), rng.uniform(0.2, 1.0, n), domain)


def _field(rng, amp=0.05):
    a, b, c, d = rng.normal(size=4)
    return PerturbationField(
        lambda x: (amp * np.tanh(a * np.sin(3 * x[:, 0] + b)))[:, None],
        lambda x: amp * np.tanh(c * np.cos(2 * x[:, 0] + d)),
    )


def cos_phi(k=2.0, a=0.3):
    """phi = a cos(k x); |phi| + |phi'| + |phi''| <= a (1 + k + k^2)."""
    return TestFunction(
        lambda x: a * np.cos(k * x[:, 0]),
        lambda x: (-a * k * np.sin(k * x[:, 0]))[:, None],
        lambda x: np.abs(a * k * k * np.cos(k * x[:, 0])),
        a * (1 + k + k * k),
    )


def quad_phi(a=0.2, c=0.5):
    """phi = a (x - c)^2 on [0, 1]."""
    m = max(c, 1 - c)
    return TestFunction(
        lambda x: a * (x[:, 0] - c) ** 2,
        lambda x: (2 * a * (x[:, 0] - c))[:, None],
        lambda x: np.full(len(x), 2 * a),
        a * (m * m + 2 * m + 2),
    )


def test_diagonal_plan_gives_zero(rng):
    mu = _measure(rng, 5)
    sol = solve_hk(mu, mu, PRM)
    fld = _field(rng, 1.0)
    # the plan leaks a little mass off the diagonal at positive eps
    assert abs(frak_F(sol, fld, PRM)) <= 1e-3
    assert abs(superdiff_element(sol, fld, PRM)) <= 1e-3


def test_term_dropout_and_cone_form(rng):
    nu0, mu = _measure(rng, 4), _measure(rng, 5)
    sol = solve_hk(nu0, mu, PRM)
    one = PerturbationField(lambda x: np.zeros_like(x), lambda x: np.ones(len(x)))
    i, j, w = sol.plan.pairs()
    ell = PRM.ell_factor * np.abs(sol.mu1.points[i, 0] - sol.mu2.points[j, 0])
    ref = PRM.entropy_weight * np.sum(w * (-sol.rho0[i] + np.sqrt(sol.rho0[i] * sol.rho_star[j]) * np.cos(ell)))
    assert frak_F(sol, one, PRM) == pytest.approx(ref, rel=1e-12)
    fld = _field(rng, 1.0)
    assert frak_F(sol, fld, PRM) == pytest.approx(frak_F_cone(lift_to_cone(sol), fld, PRM), rel=1e-12, abs=1e-14)


def test_linearity(rng):
    nu0, mu = _measure(rng, 4), _measure(rng, 4)
    sol = solve_hk(nu0, mu, PRM)
    f1, f2 = _field(rng, 1.0), _field(rng, 1.0)
    comb = PerturbationField.combine(0.7, f1, -1.3, f2)
    lhs = frak_F(sol, comb, PRM)
    rhs = 0.7 * frak_F(sol, f1, PRM) - 1.3 * frak_F(sol, f2, PRM)
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-14)


def test_null_target_exact(rng):
    nu0 = _measure(rng, 4)
    mu = DiscreteMeasure.empty(1)
    fld = _field(rng, 0.5)
    sol = solve_hk(nu0, mu, PRM)
    R = fld.eval_R(nu0.points)
    expect = -PRM.entropy_weight * np.sum(R * nu0.weights)
    assert superdiff_element(sol, fld, PRM) == pytest.approx(expect, rel=1e-12)
    for h in (1e-2, -1e-3):
        q, elem, _ = difference_quotient(nu0, mu, fld, h, PRM, base=sol)
        # exact remainder -(2/sigma) h^2 int R^2 / |h|
        assert q == pytest.approx(-0.5 * PRM.entropy_weight * abs(h) * np.sum(R**2 * nu0.weights), rel=1e-8, abs=1e-14)


def test_superdiff_inequality(rng):
    for _ in range(2):
        nu0, mu = _measure(rng, 4), _measure(rng, 4)
        rows = superdiff_check(nu0, mu, _field(rng), PRM)
        assert all(r["pass"] for r in rows)


def test_phi_direction_two_paths_agree(rng):
    nu0, mu = _measure(rng, 4), _measure(rng, 5)
    sol = solve_hk(nu0, mu, PRM)
    phi = cos_phi()
    fld = field_from_phi(phi, PRM)
    beta = lift_to_cone(sol)
    sing = float(np.sum(phi.phi(sol.singular0.points) * sol.singular0.weights))
    lhs = superdiff_element(sol, fld, PRM)
    rhs = frak_F_phi(beta, phi, PRM) - 2 * PRM.entropy_weight * sing
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-14)


def test_connection_gap_bound(rng):
    grid = np.linspace(0, 1, 501)[:, None]
    for phi in (cos_phi(), cos_phi(4.0, 0.1), quad_phi()):
        phi.certify(grid)
        for _ in range(2):
            nu0, mu = _measure(rng, 3), _measure(rng, 3)
            lhs, bound = connection_gap(solve_hk(nu0, mu, PRM), phi, mu, nu0, PRM)
            assert lhs <= bound


def test_connection_gap_trivial(rng):
    nu0 = _measure(rng, 3)
    zero = TestFunction(lambda x: np.zeros(len(x)), lambda x: np.zeros_like(x), lambda x: np.zeros(len(x)), 0.0)
    lhs, bound = connection_gap(solve_hk(nu0, nu0, PRM), zero, nu0, nu0, PRM)
    assert lhs == 0.0 and bound == 0.0


def test_certify_rejects_low_constant():
    bad = TestFunction(lambda x: np.ones(len(x)), lambda x: np.zeros_like(x), lambda x: np.zeros(len(x)), 0.5)
    with pytest.raises(ValueError):
        bad.certify(np.linspace(0, 1, 5)[:, None])
