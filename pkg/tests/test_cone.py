import cmath
import math

import numpy as np
import pytest

from hkflow.cone import (
    ConeError,
    ConePoint,
    cone_distance,
    geodesic,
    geodesic_right_derivatives,
    s_map,
    s_map_pairs,
    sinc,
    transport_cost,
)
from hkflow.measures import Params

P14 = Params(1.0, 4.0)


def test_distance_examples():
    p = ConePoint([0.3], 1.0)
    assert cone_distance(p, p, P14) == 0.0
    assert cone_distance(p, ConePoint([0.9], 0.0), P14) == pytest.approx(1.0)
    a, b = ConePoint([0.0], 1.0), ConePoint([4.0], 1.0)
    assert cone_distance(a, b, P14) == pytest.approx(2.0)


def test_distance_matches_cosine_law(rng):
    for _ in range(50):
        prm = Params(rng.uniform(0.2, 3), rng.uniform(0.2, 3))
        x1, x2 = rng.normal(size=2), rng.normal(size=2)
        r1, r2 = rng.uniform(0, 2, 2)
        ell = min(prm.ell_factor * np.linalg.norm(x1 - x2), math.pi)
        ref = math.sqrt(max(4 / prm.sigma * (r1**2 + r2**2 - 2 * r1 * r2 * math.cos(ell)), 0))
        assert cone_distance(ConePoint(x1, r1), ConePoint(x2, r2), prm) == pytest.approx(ref, rel=1e-12, abs=1e-13)


def test_vertex_canonical():
    assert ConePoint([0.0], 0.0).close_to(ConePoint([5.0], 1e-16))
    with pytest.raises(ConeError):
        ConePoint([0.0], -1.0)


def test_geodesic_examples():
    p, q = ConePoint([0.2], 1.0), ConePoint([0.2], 3.0)
    mid = geodesic(p, q, P14)(0.5)
    assert mid.r == pytest.approx(2.0) and mid.x[0] == pytest.approx(0.2)
    a, b = ConePoint([0.0], 1.0), ConePoint([math.pi / 2], 1.0)
    g = geodesic(a, b, P14)
    R, theta = g.radius_angle(0.5)
    assert R == pytest.approx(abs((1 + 1j) / 2))
    assert theta == pytest.approx(0.5)
    assert g(0).close_to(a) and g(1).close_to(b)


def test_geodesic_complex_oracle(rng):
    # independent construction with cmath
    for _ in range(20):
        prm = Params(rng.uniform(0.3, 2), rng.uniform(0.3, 2))
        x1 = rng.uniform(0, 1, 2)
        d = rng.normal(size=2)
        d *= rng.uniform(0.05, 0.99) * prm.cutoff * 2 / np.linalg.norm(d)  # ell < pi
        x2 = x1 + d
        r1, r2 = rng.uniform(0.1, 2, 2)
        ell = prm.ell_factor * np.linalg.norm(d)
        z1 = 2 / math.sqrt(prm.sigma) * r1
        z2 = 2 / math.sqrt(prm.sigma) * r2 * cmath.exp(1j * ell)
        g = geodesic(ConePoint(x1, r1), ConePoint(x2, r2), prm)
        for t in np.linspace(0, 1, 7):
            z = z1 + t * (z2 - z1)
            pt = g(t)
            assert pt.r == pytest.approx(math.sqrt(prm.sigma) / 2 * abs(z), rel=1e-12)
            assert np.allclose(pt.x, x1 + cmath.phase(z) / ell * d, atol=1e-12)


def test_geodesic_rejects_large_angle():
    with pytest.raises(ConeError):
        geodesic(ConePoint([0.0], 1.0), ConePoint([3.5], 1.0), P14)


def test_geodesic_vertex_endpoint():
    g = geodesic(ConePoint([0.0], 0.0), ConePoint([0.7], 2.0), P14)
    pt = g(0.25)
    assert pt.r == pytest.approx(0.5) and pt.x[0] == pytest.approx(0.7)


def test_right_derivative_examples():
    assert geodesic_right_derivatives(ConePoint([0.1], 1.0), ConePoint([0.1], 2.5), P14) == (0.0, 1.5)
    th, dr = geodesic_right_derivatives(ConePoint([0.0], 1.0), ConePoint([math.pi / 2], 1.0), P14)
    assert th == pytest.approx(2 / math.pi) and dr == pytest.approx(-1.0, abs=1e-15)
    with pytest.raises(ConeError):
        geodesic_right_derivatives(ConePoint([0.0], 0.0), ConePoint([0.3], 1.0), P14)


def test_right_derivative_fd(rng):
    for _ in range(10):
        prm = Params(rng.uniform(0.3, 2), rng.uniform(0.3, 2))
        x1 = rng.uniform(0, 1, 1)
        x2 = x1 + rng.uniform(0.1, 0.9) * 2 * prm.cutoff
        r1, r2 = rng.uniform(0.2, 2, 2)
        g = geodesic(ConePoint(x1, r1), ConePoint(x2, r2), prm)
        th, dr = geodesic_right_derivatives(ConePoint(x1, r1), ConePoint(x2, r2), prm)
        h = 1e-6
        R0, T0 = g.radius_angle(0.0)
        R1, T1 = g.radius_angle(h)
        assert (T1 - T0) / h == pytest.approx(th, rel=1e-5)
        assert (R1 - R0) / h == pytest.approx(dr, rel=1e-5, abs=1e-6)


def test_s_map_examples():
    assert np.all(s_map([0.3, 0.1], [0.3, 0.1], P14) == 0)
    assert np.allclose(s_map([0.0, 0.0], [math.pi / 2, 0.0], P14), [1.0, 0.0])
    d = np.array([1e-6, -2e-6])
    k = Params(0.7, 1.3).ell_factor
    assert np.allclose(s_map([0, 0], d, Params(0.7, 1.3)), k * d, rtol=1e-10)
    X = np.array([[0.0], [0.5]])
    Y = np.array([[0.2], [0.9], [0.5]])
    S = s_map_pairs(X, Y, P14)
    for i in range(2):
        for j in range(3):
            assert np.allclose(S[i, j], s_map(X[i], Y[j], P14))


def test_sinc_series_branch():
    t = np.array([0.0, 1e-5, 1e-4, 0.3])
    ref = np.array([1.0, math.sin(1e-5) / 1e-5, math.sin(1e-4) / 1e-4, math.sin(0.3) / 0.3])
    assert np.allclose(sinc(t), ref, rtol=1e-15, atol=0)


def test_transport_cost_examples():
    P11 = Params(1.0, 1.0)
    assert transport_cost(0.0, P11) == 0.0
    assert transport_cost(2 * math.pi / 3, P11) == pytest.approx(8 * math.log(2))
    assert transport_cost(math.pi, P11) == math.inf
    c = transport_cost(np.array([0.0, 1.0, 10.0]), P11)
    assert c[0] == 0 and np.isfinite(c[1]) and c[2] == math.inf


def _random_pair(rng, dim=2):
    prm = Params(rng.uniform(0.3, 2), rng.uniform(0.3, 2))
    x1 = rng.uniform(0, 1, dim)
    d = rng.normal(size=dim)
    d *= rng.uniform(0.05, 0.95) * 2 * prm.cutoff / np.linalg.norm(d)
    r1, r2 = rng.uniform(0.1, 2, 2)
    return prm, ConePoint(x1, r1), ConePoint(x1 + d, r2)


def test_geodesic_constant_speed_property(rng):
    for _ in range(5):
        prm, p, q = _random_pair(rng)
        g = geodesic(p, q, prm)
        D = cone_distance(p, q, prm)
        for s, t in rng.uniform(0, 1, (10, 2)):
            assert abs(cone_distance(g(s), g(t), prm) - abs(t - s) * D) <= 1e-10


def test_speed_identity_and_second_derivative_bound(rng):
    h = 1e-4
    for _ in range(5):
        prm, p, q = _random_pair(rng)
        g = geodesic(p, q, prm)
        D2 = cone_distance(p, q, prm) ** 2
        dx = np.linalg.norm(q.x - p.x)
        for t in rng.uniform(0.05, 0.95, 10):
            (R2m, T2m), (Rm, Tm), (R0, T0), (Rp, Tp), (R2p, T2p) = (g.radius_angle(t + k * h) for k in (-2, -1, 0, 1, 2))
            dR = (R2m - 8 * Rm + 8 * Rp - R2p) / (12 * h)
            dT = (T2m - 8 * Tm + 8 * Tp - T2p) / (12 * h)
            lhs = 4 / prm.sigma * dR**2 + R0**2 * dT**2 * dx**2 / prm.lam
            assert abs(lhs - D2) <= 1e-8 * max(1.0, D2)
            d2T = (Tp - 2 * T0 + Tm) / h**2
            assert abs(d2T * R0**2 * dx) <= dR**2 + R0**2 * dT**2 * dx**2 + 1e-4
