"""Finite nonnegative measures as weighted point clouds and grid densities.

Point clouds are the representation used by the transport solvers. Grid
densities are cell-centred samples of an absolutely continuous measure and
convert to point clouds by the midpoint rule.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.ndimage import map_coordinates

__all__ = [
    "Params",
    "DiscreteMeasure",
    "GridDensity",
    "PerturbationField",
    "MeasureError",
    "total_mass",
    "perturb",
    "density_after_pushforward",
    "central_jacobian",
    "read_measure_csv",
    "write_measure_csv",
    "read_grid_csv",
    "write_grid_csv",
]


class MeasureError(ValueError):
    """Raised for invalid measures or inadmissible perturbations."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Params:
    """Transport weight ``lam`` and reaction weight ``sigma``.

    Attributes
    ----------
    lam : float
        Weight of the transport part (Lambda > 0).
    sigma : float
        Weight of the reaction part (Sigma > 0).
    """

    lam: float
    sigma: float

    def __post_init__(self):
        for name in ("lam", "sigma"):
            val = getattr(self, name)
            if not (np.isfinite(val) and val > 0):
                raise MeasureError(f"{name} must be a positive finite number, got {val!r}")

    @property
    def ell_factor(self) -> float:
        """Scale turning Euclidean distance into cone angle, sqrt(sigma/(4 lam))."""
        return math.sqrt(self.sigma / (4.0 * self.lam))

    @property
    def entropy_weight(self) -> float:
        """Weight 4/sigma of the marginal entropies."""
        return 4.0 / self.sigma

    @property
    def cutoff(self) -> float:
        """Distance pi*sqrt(lam/sigma) beyond which no mass is transported."""
        return math.pi * math.sqrt(self.lam / self.sigma)


@dataclass(frozen=True)
class DiscreteMeasure:
    """Weighted point cloud ``sum_i w_i delta_{x_i}`` in R^d.

    Parameters
    ----------
    points : array_like, shape (n, d) or (n,)
        Support points. One-dimensional input is read as ``d = 1``.
    weights : array_like, shape (n,)
        Nonnegative masses.
    domain : tuple of array_like, optional
        Box ``(lo, hi)`` containing the support. When given, perturbations
        that push points outside the box are rejected.
    """

    points: np.ndarray
    weights: np.ndarray
    domain: Optional[tuple] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if pts.ndim == 1:
            pts = pts.reshape(-1, 1)
        if pts.size == 0:
            pts = pts.reshape(0, pts.shape[1] if pts.ndim == 2 and pts.shape[1] else 1)
        if pts.ndim != 2 or pts.shape[0] != w.shape[0]:
            raise MeasureError("points and weights must have matching lengths")
        if not np.all(np.isfinite(pts)) or not np.all(np.isfinite(w)):
            raise MeasureError("points and weights must be finite")
        if np.any(w < 0):
            raise MeasureError("weights must be nonnegative")
        dom = None
        if self.domain is not None:
            lo = np.broadcast_to(np.asarray(self.domain[0], float), (pts.shape[1],))
            hi = np.broadcast_to(np.asarray(self.domain[1], float), (pts.shape[1],))
            if np.any(hi <= lo):
                raise MeasureError("domain box must have hi > lo")
            tol = 1e-12 * (1.0 + np.max(np.abs(np.concatenate([lo, hi]))))
            if pts.size and (np.any(pts < lo - tol) or np.any(pts > hi + tol)):
                raise MeasureError("support points lie outside the domain box")
            dom = (_frozen(lo), _frozen(hi))
        object.__setattr__(self, "points", _frozen(pts))
        object.__setattr__(self, "weights", _frozen(w))
        object.__setattr__(self, "domain", dom)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return self.weights.shape[0]

    @property
    def mass(self) -> float:
        return float(np.sum(self.weights))

    def scaled(self, a: float) -> "DiscreteMeasure":
        """Return ``a * self`` for ``a >= 0``."""
        return DiscreteMeasure(self.points, a * self.weights, self.domain)

    def with_weights(self, weights) -> "DiscreteMeasure":
        return DiscreteMeasure(self.points, weights, self.domain)

    @classmethod
    def empty(cls, dim: int = 1, domain=None) -> "DiscreteMeasure":
        return cls(np.zeros((0, dim)), np.zeros(0), domain)


@dataclass(frozen=True)
class GridDensity:
    """Cell-centred density on a regular box grid.

    Parameters
    ----------
    origin : array_like, shape (d,)
        Lower corner of the grid box.
    spacing : array_like, shape (d,)
        Cell widths per axis.
    values : array_like, shape dims
        Nonnegative density value per cell. A 1-D array describes a 1-D grid.
    """

    origin: np.ndarray
    spacing: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim == 0:
            raise MeasureError("values must have at least one axis")
        d = vals.ndim
        org = np.broadcast_to(np.asarray(self.origin, float), (d,))
        sp = np.broadcast_to(np.asarray(self.spacing, float), (d,))
        if np.any(sp <= 0):
            raise MeasureError("grid spacing must be positive")
        if not np.all(np.isfinite(vals)) or np.any(vals < 0):
            raise MeasureError("density values must be finite and nonnegative")
        object.__setattr__(self, "origin", _frozen(org))
        object.__setattr__(self, "spacing", _frozen(sp))
        object.__setattr__(self, "values", _frozen(vals))

    @classmethod
    def on_box(cls, lo, hi, dims, values=None) -> "GridDensity":
        """Grid with ``dims`` cells covering the box ``[lo, hi]``."""
        dims = tuple(np.atleast_1d(dims).astype(int))
        lo = np.broadcast_to(np.asarray(lo, float), (len(dims),))
        hi = np.broadcast_to(np.asarray(hi, float), (len(dims),))
        sp = (hi - lo) / np.asarray(dims, float)
        if values is None:
            values = np.zeros(dims)
        elif callable(values):
            g = cls(lo, sp, np.zeros(dims))
            values = np.asarray(values(g.centers()), float).reshape(dims)
        return cls(lo, sp, np.asarray(values, float).reshape(dims))

    @property
    def dims(self) -> tuple:
        return self.values.shape

    @property
    def dim(self) -> int:
        return self.values.ndim

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def box(self) -> tuple:
        return self.origin, self.origin + self.spacing * np.asarray(self.dims)

    @property
    def volume(self) -> float:
        return self.cell_volume * self.values.size

    def axes(self) -> list:
        """Cell-centre coordinates along each axis."""
        return [self.origin[k] + (np.arange(n) + 0.5) * self.spacing[k] for k, n in enumerate(self.dims)]

    def centers(self) -> np.ndarray:
        """Cell centres in C order, shape (ncells, d)."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=1)

    def with_values(self, values) -> "GridDensity":
        return GridDensity(self.origin, self.spacing, np.asarray(values, float).reshape(self.dims))

    def subcell_points(self, subcell: int = 1) -> np.ndarray:
        """Centres of a ``subcell``-fold refinement of every cell, shape (ncells * subcell**d, d).

        Points are grouped by cell (cells in C order), so the points of cell
        ``i`` occupy rows ``i * subcell**d`` to ``(i + 1) * subcell**d - 1``.
        """
        m = int(subcell)
        if m < 1:
            raise MeasureError("subcell must be a positive integer")
        d = self.dim
        frac = (np.arange(m) + 0.5) / m - 0.5
        offs = np.stack([g.reshape(-1) for g in np.meshgrid(*([frac] * d), indexing="ij")], axis=1) * self.spacing
        return (self.centers()[:, None, :] + offs[None, :, :]).reshape(-1, d)

    def to_measure(self, subcell: int = 1) -> DiscreteMeasure:
        """Point cloud of the density.

        With ``subcell = 1`` each cell centre carries ``u * cell_volume``;
        otherwise the cell mass is split evenly over the points of
        :meth:`subcell_points`.
        """
        if subcell == 1:
            return DiscreteMeasure(self.centers(), self.values.reshape(-1) * self.cell_volume, self.box)
        k = int(subcell) ** self.dim
        w = np.repeat(self.values.reshape(-1) * (self.cell_volume / k), k)
        return DiscreteMeasure(self.subcell_points(subcell), w, self.box)

    def mass(self) -> float:
        return float(np.sum(self.values) * self.cell_volume)


@dataclass(frozen=True)
class PerturbationField:
    """Direction ``(v, R)`` of a transport-reaction perturbation.

    Parameters
    ----------
    v : callable
        Maps points of shape (n, d) to vectors of shape (n, d).
    R : callable
        Maps points of shape (n, d) to reals of shape (n,).
    interior_support : bool
        Declares that ``v`` vanishes within ``margin`` of the boundary.
    margin : float
        Width of the boundary layer where ``v`` vanishes.
    """

    v: Callable[[np.ndarray], np.ndarray]
    R: Callable[[np.ndarray], np.ndarray]
    interior_support: bool = False
    margin: float = 0.0

    def eval_v(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, float))
        return np.asarray(self.v(x), float).reshape(x.shape)

    def eval_R(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, float))
        return np.broadcast_to(np.asarray(self.R(x), float).reshape(-1), (x.shape[0],)).copy()

    def scaled(self, a: float) -> "PerturbationField":
        v, R = self.v, self.R
        return PerturbationField(lambda x: a * v(x), lambda x: a * np.asarray(R(x)), self.interior_support, self.margin)

    @classmethod
    def zero(cls) -> "PerturbationField":
        return cls(lambda x: np.zeros_like(x), lambda x: np.zeros(len(x)), True, 0.0)

    @classmethod
    def combine(cls, a: float, f1: "PerturbationField", b: float, f2: "PerturbationField") -> "PerturbationField":
        """Linear combination ``a*f1 + b*f2``."""
        return cls(
            lambda x: a * f1.eval_v(x) + b * f2.eval_v(x),
            lambda x: a * f1.eval_R(x) + b * f2.eval_R(x),
            f1.interior_support and f2.interior_support,
            min(f1.margin, f2.margin),
        )


def total_mass(m) -> float:
    """Total mass of a point cloud or grid density."""
    if isinstance(m, GridDensity):
        return m.mass()
    return float(np.sum(m.weights))


def _inside(points: np.ndarray, domain, tol: float = 1e-12) -> bool:
    if domain is None or points.size == 0:
        return True
    lo, hi = domain
    return bool(np.all(points >= lo - tol) and np.all(points <= hi + tol))


def perturb(nu0: DiscreteMeasure, fld: PerturbationField, h: float) -> DiscreteMeasure:
    """Push ``(1 + h R)^2 nu0`` forward along ``x -> x + h v(x)``.

    Raises
    ------
    MeasureError
        If some ``1 + h R(x_j) <= 0`` on the support or a moved point leaves
        the domain box.
    """
    if h == 0 or len(nu0) == 0:
        return nu0
    x = nu0.points
    fac = 1.0 + h * fld.eval_R(x)
    if np.any(fac <= 0):
        raise MeasureError("step h outside admissible range: 1 + h R <= 0 on the support")
    y = x + h * fld.eval_v(x)
    if not _inside(y, nu0.domain):
        raise MeasureError("step h outside admissible range: a point leaves the domain")
    w = fac**2 * nu0.weights
    if nu0.domain is not None:
        lo, hi = nu0.domain
        y = np.clip(y, lo, hi)
    return DiscreteMeasure(y, w, nu0.domain)


def central_jacobian(v: Callable, x: np.ndarray, spacing) -> np.ndarray:
    """Jacobian of ``v`` at points ``x`` by central differences.

    Returns an array of shape (n, d, d) with ``J[:, i, k] = d v_i / d x_k``.
    """
    x = np.atleast_2d(np.asarray(x, float))
    n, d = x.shape
    sp = np.broadcast_to(np.asarray(spacing, float), (d,))
    J = np.empty((n, d, d))
    for k in range(d):
        e = np.zeros(d)
        e[k] = sp[k]
        J[:, :, k] = (np.asarray(v(x + e)).reshape(n, d) - np.asarray(v(x - e)).reshape(n, d)) / (2 * sp[k])
    return J


def density_after_pushforward(u0: GridDensity, fld: PerturbationField, h: float, tol: float = 1e-14) -> GridDensity:
    """Density of ``(I + h v)_# (1 + h R)^2 u0`` sampled at cell centres.

    For each centre ``y`` the preimage ``x`` with ``x + h v(x) = y`` is found
    by fixed-point iteration, and

    .. math:: u_h(y) = (1 + h R(x))^2 u_0(x) / \\det(I + h Dv(x))

    with ``Dv`` from central differences at the grid spacing and ``u0``
    interpolated by cubic splines (linear on very coarse grids), held
    constant beyond the outermost centres.
    """
    if h == 0:
        return u0
    y = u0.centers()
    lo, hi = u0.box
    fwd = y + h * fld.eval_v(y)
    if np.any(fwd < lo - 1e-12) or np.any(fwd > hi + 1e-12):
        raise MeasureError("step h outside admissible range: cell centres leave the domain")

    x = y.copy()
    for _ in range(500):
        x_new = y - h * fld.eval_v(x)
        step = np.max(np.abs(x_new - x)) if x.size else 0.0
        x = x_new
        if step <= tol * (1.0 + np.max(np.abs(y))):
            break
    else:
        raise MeasureError("inverse of x + h v(x) did not converge; reduce h")

    J = np.eye(u0.dim)[None] + h * central_jacobian(fld.eval_v, x, u0.spacing)
    det = np.linalg.det(J)
    if np.any(det <= 0):
        raise MeasureError("singular or orientation-reversing Jacobian det(I + h Dv) <= 0")
    fac = 1.0 + h * fld.eval_R(x)
    if np.any(fac <= 0):
        raise MeasureError("step h outside admissible range: 1 + h R <= 0")

    order = 3 if min(u0.dims) >= 4 else 1
    idx = ((x - u0.origin) / u0.spacing - 0.5).T
    ux = np.maximum(map_coordinates(u0.values, idx, order=order, mode="nearest"), 0.0)
    uh = fac**2 * ux / det
    return u0.with_values(uh.reshape(u0.dims))


# ----------------------------------------------------------------------------
# CSV serialisation
# ----------------------------------------------------------------------------


def _read_rows(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise MeasureError(f"{path}: empty file") from None
        rows = [r for r in reader if r and any(c.strip() for c in r)]
    try:
        data = np.array([[float(c) for c in r] for r in rows], dtype=float)
    except ValueError as exc:
        raise MeasureError(f"{path}: non-numeric entry ({exc})") from None
    if data.size == 0:
        data = data.reshape(0, len(header))
    if data.shape[1] != len(header):
        raise MeasureError(f"{path}: rows do not match header")
    return header, data


def read_measure_csv(path, domain=None) -> DiscreteMeasure:
    """Read a point cloud from CSV with columns ``x...`` then ``w``."""
    header, data = _read_rows(path)
    if len(header) < 2 or header[-1] != "w":
        raise MeasureError(f"{path}: expected coordinate columns followed by 'w'")
    return DiscreteMeasure(data[:, :-1], data[:, -1], domain)


def write_measure_csv(fh, m: DiscreteMeasure) -> None:
    """Write a point cloud as CSV to an open text handle."""
    w = csv.writer(fh, lineterminator="\n")
    cols = ["x"] if m.dim == 1 else [f"x{k}" for k in range(m.dim)]
    w.writerow(cols + ["w"])
    for p, wt in zip(m.points, m.weights):
        w.writerow([repr(float(c)) for c in p] + [repr(float(wt))])


def read_grid_csv(path) -> GridDensity:
    """Read a grid density from CSV with columns ``cell_index, x..., u``.

    The grid geometry is recovered from the distinct centre coordinates,
    which must be uniformly spaced along each axis.
    """
    header, data = _read_rows(path)
    if len(header) < 3 or header[0] != "cell_index" or header[-1] != "u":
        raise MeasureError(f"{path}: expected columns cell_index, x..., u")
    order = np.argsort(data[:, 0], kind="stable")
    data = data[order]
    coords = data[:, 1:-1]
    axes = [np.unique(coords[:, k]) for k in range(coords.shape[1])]
    dims = tuple(len(a) for a in axes)
    if int(np.prod(dims)) != data.shape[0]:
        raise MeasureError(f"{path}: cell centres do not form a full grid")
    spacing, origin = [], []
    for a in axes:
        if len(a) == 1:
            raise MeasureError(f"{path}: need at least two cells per axis")
        d = np.diff(a)
        if np.max(np.abs(d - d.mean())) > 1e-9 * max(1.0, abs(d.mean())):
            raise MeasureError(f"{path}: non-uniform grid spacing")
        spacing.append(d.mean())
        origin.append(a[0] - 0.5 * d.mean())
    return GridDensity(np.array(origin), np.array(spacing), data[:, -1].reshape(dims))


def write_grid_csv(fh, g: GridDensity) -> None:
    """Write a grid density as CSV (``cell_index, x..., u``) to an open handle."""
    w = csv.writer(fh, lineterminator="\n")
    cols = ["x"] if g.dim == 1 else [f"x{k}" for k in range(g.dim)]
    w.writerow(["cell_index"] + cols + ["u"])
    for i, (c, u) in enumerate(zip(g.centers(), g.values.reshape(-1))):
        w.writerow([i] + [repr(float(t)) for t in c] + [repr(float(u))])
