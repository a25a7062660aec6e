"""Geometry of the metric cone over a Euclidean base.

Points of the cone are pairs ``[x, r]`` with ``r >= 0``, all pairs with
``r = 0`` identified to the vertex. The angle between two base points is
``ell = sqrt(sigma / (4 lam)) |x1 - x2|`` and the cone distance is

.. math:: d^2 = \\frac{4}{\\Sigma}\\left(r_1^2 + r_2^2 - 2 r_1 r_2 \\cos(\\ell \\wedge \\pi)\\right).

Geodesics are obtained by straight-line interpolation in the complex plane,
where the cone point ``[x, r]`` with angle ``ell`` corresponds to
``(2/sqrt(sigma)) r exp(i ell)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .measures import Params

__all__ = [
    "VERTEX_TOL",
    "ConePoint",
    "ConeGeodesic",
    "ConeError",
    "sinc",
    "cone_distance",
    "cone_distance_sq",
    "geodesic",
    "geodesic_right_derivatives",
    "s_map",
    "s_map_pairs",
    "transport_cost",
    "pairwise_distance",
]

VERTEX_TOL = 1e-15


class ConeError(ValueError):
    """Raised when a cone construction is undefined for the given input."""


def sinc(t):
    """``sin(t)/t`` with the value 1 at 0 and a series below 1e-4."""
    t = np.asarray(t, dtype=float)
    small = np.abs(t) < 1e-4
    safe = np.where(small, 1.0, t)
    t2 = t * t
    out = np.where(small, 1.0 - t2 / 6.0 + t2 * t2 / 120.0, np.sin(safe) / safe)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class ConePoint:
    """Point ``[x, r]`` of the cone. ``r < VERTEX_TOL`` is the vertex."""

    x: np.ndarray
    r: float

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.x, dtype=float)).copy()
        x.setflags(write=False)
        if not (self.r >= 0):
            raise ConeError(f"radial coordinate must be nonnegative, got {self.r}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "r", float(self.r))

    @property
    def is_vertex(self) -> bool:
        return self.r < VERTEX_TOL

    def close_to(self, other: "ConePoint", atol: float = 1e-12) -> bool:
        """Equality on the cone: vertices compare equal regardless of ``x``."""
        if self.is_vertex and other.is_vertex:
            return True
        return abs(self.r - other.r) <= atol and bool(np.all(np.abs(self.x - other.x) <= atol))


def _angle(x1, x2, params: Params) -> float:
    return params.ell_factor * float(np.linalg.norm(np.asarray(x1, float) - np.asarray(x2, float)))


def cone_distance_sq(p: ConePoint, q: ConePoint, params: Params) -> float:
    """Squared cone distance, written as ``(r1-r2)^2 + 4 r1 r2 sin^2(ell/2)`` to avoid cancellation."""
    if p.is_vertex or q.is_vertex:
        return params.entropy_weight * (p.r**2 + q.r**2)
    ell = min(_angle(p.x, q.x, params), math.pi)
    s = math.sin(0.5 * ell)
    return params.entropy_weight * ((p.r - q.r) ** 2 + 4.0 * p.r * q.r * s * s)


def cone_distance(p: ConePoint, q: ConePoint, params: Params) -> float:
    """Cone distance between ``p`` and ``q``."""
    return math.sqrt(max(cone_distance_sq(p, q, params), 0.0))


class ConeGeodesic:
    """Constant-speed geodesic between two cone points.

    Built by :func:`geodesic`. Call :meth:`eval` (or the instance) with
    ``t`` in ``[0, 1]``.
    """

    def __init__(self, p: ConePoint, q: ConePoint, params: Params):
        self.p = p
        self.q = q
        self.params = params
        x1, x2 = p.x, q.x
        # the vertex carries no base point; borrow the other endpoint's
        if p.is_vertex and not q.is_vertex:
            x1 = x2
        elif q.is_vertex and not p.is_vertex:
            x2 = x1
        self.x1 = np.asarray(x1, float)
        self.x2 = np.asarray(x2, float)
        self.ell = _angle(self.x1, self.x2, params)
        if self.ell > math.pi * (1 + 1e-14):
            raise ConeError("endpoints are more than pi apart in angle; no geodesic of this form")
        self.degenerate = p.is_vertex or q.is_vertex or self.ell == 0.0
        scale = 2.0 / math.sqrt(params.sigma)
        self.z1 = complex(scale * p.r, 0.0)
        self.z2 = scale * q.r * complex(math.cos(self.ell), math.sin(self.ell))

    def radius_angle(self, t):
        """Return ``(R(t), theta(t))`` with ``theta`` the fraction of the base segment."""
        t = np.asarray(t, dtype=float)
        r1, r2 = self.p.r, self.q.r
        if self.degenerate:
            R = r1 + t * (r2 - r1)
            return R, np.zeros_like(t)
        z = self.z1 + t * (self.z2 - self.z1)
        R = 0.5 * math.sqrt(self.params.sigma) * np.abs(z)
        theta = np.clip(np.angle(z), 0.0, math.pi) / self.ell
        return R, theta

    def eval(self, t: float) -> ConePoint:
        R, theta = self.radius_angle(float(t))
        x = self.x1 + float(theta) * (self.x2 - self.x1)
        return ConePoint(x, float(R))

    __call__ = eval

    def length(self) -> float:
        return cone_distance(self.p, self.q, self.params)


def geodesic(p: ConePoint, q: ConePoint, params: Params) -> ConeGeodesic:
    """Geodesic from ``p`` to ``q``.

    Raises
    ------
    ConeError
        If the angle between the base points exceeds pi.
    """
    return ConeGeodesic(p, q, params)


def geodesic_right_derivatives(p: ConePoint, q: ConePoint, params: Params) -> tuple[float, float]:
    """Right derivatives ``(theta'(0+), R'(0+))`` of the geodesic from ``p`` to ``q``.

    ``theta'(0+) = (r2/r1) sin(ell)/ell`` and ``R'(0+) = r2 cos(ell) - r1``.
    When the base points coincide the angle path is constant and
    ``theta'(0+) = 0``.
    """
    r1, r2 = p.r, q.r
    if p.is_vertex or q.is_vertex:
        if p.is_vertex and not q.is_vertex and not np.allclose(p.x, q.x, rtol=0, atol=0):
            raise ConeError("theta'(0+) is undefined when the start point is the vertex")
        return 0.0, r2 - r1
    ell = _angle(p.x, q.x, params)
    if ell == 0.0:
        return 0.0, r2 - r1
    return (r2 / r1) * sinc(ell), r2 * math.cos(ell) - r1


def s_map(x1, x2, params: Params) -> np.ndarray:
    """``sin(k |x2 - x1|)/|x2 - x1| (x2 - x1)`` with ``k = sqrt(sigma/(4 lam))``; zero if ``x1 = x2``."""
    d = np.atleast_1d(np.asarray(x2, float) - np.asarray(x1, float))
    k = params.ell_factor
    return k * sinc(k * float(np.linalg.norm(d))) * d


def s_map_pairs(X: np.ndarray, Y: np.ndarray, params: Params) -> np.ndarray:
    """All-pairs ``S(x_i, y_j)``, shape (n, m, d)."""
    X = np.atleast_2d(X)
    Y = np.atleast_2d(Y)
    D = Y[None, :, :] - X[:, None, :]
    k = params.ell_factor
    return (k * sinc(k * np.linalg.norm(D, axis=-1)))[..., None] * D


def pairwise_distance(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Euclidean distance matrix between two point sets."""
    X = np.atleast_2d(X)
    Y = np.atleast_2d(Y)
    if X.shape[1] == 1:
        return np.abs(X[:, 0][:, None] - Y[:, 0][None, :])
    return np.sqrt(np.maximum(((X[:, None, :] - Y[None, :, :]) ** 2).sum(-1), 0.0))


def transport_cost(d, params: Params):
    """Log-cosine transport cost ``-(8/sigma) log cos(k d)``, ``+inf`` beyond the cutoff.

    Accepts scalars or arrays. Evaluated through ``log1p(-2 sin^2(k d / 2))``
    for accuracy at short range.
    """
    d = np.asarray(d, dtype=float)
    a = params.ell_factor * d
    ok = a < 0.5 * math.pi
    a_ok = np.where(ok, a, 0.0)
    s = np.sin(0.5 * a_ok)
    with np.errstate(divide="ignore"):
        c = np.where(ok, -(8.0 / params.sigma) * np.log1p(-2.0 * s * s), np.inf)
    return c if c.ndim else float(c)
