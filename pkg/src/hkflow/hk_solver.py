"""Entropy-transport solver for the Hellinger-Kantorovich distance.

The squared distance between point clouds ``mu1`` and ``mu2`` is the minimum
over couplings ``gamma`` of

.. math::

    \\frac{4}{\\Sigma}\\sum_{i=1,2} \\int f(\\sigma_i)\\,d\\mu_i + \\int c\\,d\\gamma,
    \\qquad f(s) = s\\log s - s + 1,

with ``sigma_i`` the density of the i-th marginal of ``gamma`` and ``c`` the
log-cosine cost of :func:`hkflow.cone.transport_cost`. It is computed by
log-domain generalized scaling on an entropically regularized problem with
decreasing regularization ``eps``. The reported value is the unregularized
objective at the final plan.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .cone import ConePoint, pairwise_distance, transport_cost
from .measures import DiscreteMeasure, Params

__all__ = [
    "SolverConfig",
    "SolverError",
    "TransportPlan",
    "HKSolution",
    "ConePlan",
    "entropy_f",
    "let_objective",
    "cost_matrix",
    "scaling_solve",
    "kl_prox_potential",
    "kl_balance_shift",
    "solve_hk",
    "hk2",
    "lebesgue_decompose",
    "lift_to_cone",
    "homogeneous_marginal",
    "hk_tiny_oracle",
]


class SolverError(RuntimeError):
    """Raised when the scaling iterations fail to reach the requested tolerance.

    Attributes
    ----------
    residual : float
        Last dual fixed-point residual.
    iterations : int
        Total iterations performed.
    """

    def __init__(self, msg: str, residual: float = float("nan"), iterations: int = 0):
        super().__init__(msg)
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class SolverConfig:
    """Regularization schedule and stopping rule for the scaling iterations.

    Attributes
    ----------
    eps_start, eps_end : float
        First and last entropic regularization strength.
    eps_factor : float
        Geometric decrease of ``eps`` between levels, in (0, 1).
    max_iters : int
        Iteration cap per ``eps`` level.
    dual_tol : float
        Required accuracy of the dual potentials at ``eps_end``: both the
        sup-norm change over one full iteration and the distance to the
        fixed point extrapolated from the observed contraction rate must
        fall below it.
    value_mode : str
        Only ``"plan_objective"``: report the unregularized objective at
        the computed plan.
    relaxation : float
        Over-relaxation factor in [1, 2) for the dual updates.
    """

    eps_start: float = 1.0
    eps_end: float = 1e-4
    eps_factor: float = 0.5
    max_iters: int = 50000
    dual_tol: float = 1e-9
    value_mode: str = "plan_objective"
    relaxation: float = 1.8

    def __post_init__(self):
        if not (self.eps_end > 0 and self.eps_start > 0):
            raise ValueError("eps_start and eps_end must be positive")
        if self.eps_end > self.eps_start:
            raise ValueError("eps_end must not exceed eps_start")
        if not (0 < self.eps_factor < 1):
            raise ValueError("eps_factor must lie in (0, 1)")
        if self.dual_tol <= 0 or self.max_iters < 1:
            raise ValueError("dual_tol must be positive and max_iters >= 1")
        if not (1.0 <= self.relaxation < 2.0):
            raise ValueError("relaxation must lie in [1, 2)")
        if self.value_mode != "plan_objective":
            raise ValueError(f"unsupported value_mode {self.value_mode!r}")

    def schedule(self) -> list[float]:
        """Decreasing list of ``eps`` values ending exactly at ``eps_end``."""
        eps = [self.eps_start]
        while eps[-1] * self.eps_factor > self.eps_end * (1 + 1e-12):
            eps.append(eps[-1] * self.eps_factor)
        if eps[-1] != self.eps_end:
            eps.append(self.eps_end)
        return eps


@dataclass
class TransportPlan:
    """Coupling between two point clouds together with the dual potentials.

    ``gamma[i, j]`` is the mass sent from source point ``i`` to target point
    ``j``. Entries beyond the transport cutoff are exactly zero.
    """

    gamma: np.ndarray
    f: np.ndarray
    g: np.ndarray
    eps: float

    def pairs(self):
        """Index arrays ``(i, j)`` and masses of the nonzero entries."""
        i, j = np.nonzero(self.gamma > 0)
        return i, j, self.gamma[i, j]

    @property
    def first_marginal(self) -> np.ndarray:
        return self.gamma.sum(axis=1)

    @property
    def second_marginal(self) -> np.ndarray:
        return self.gamma.sum(axis=0)

    @classmethod
    def empty(cls, n: int, m: int) -> "TransportPlan":
        return cls(np.zeros((n, m)), np.zeros(n), np.zeros(m), 0.0)


@dataclass
class HKSolution:
    """Result of :func:`solve_hk`.

    Attributes
    ----------
    hk2 : float
        Squared distance, evaluated as the unregularized objective at ``plan``.
    plan : TransportPlan
    sigma1, sigma2 : ndarray
        Marginal densities ``d gamma_i / d mu_i`` (zero where ``mu_i`` is zero).
    rho0, rho_star : ndarray
        Densities ``d mu_i / d gamma_i`` on the support of ``gamma_i``
        (NaN elsewhere).
    singular0, singular_star : DiscreteMeasure
        Parts of ``mu1`` and ``mu2`` singular to the plan marginals.
    """

    hk2: float
    plan: TransportPlan
    mu1: DiscreteMeasure
    mu2: DiscreteMeasure
    params: Params
    sigma1: np.ndarray
    sigma2: np.ndarray
    rho0: np.ndarray
    rho_star: np.ndarray
    singular0: DiscreteMeasure
    singular_star: DiscreteMeasure
    iterations: int = 0
    dual_residual: float = 0.0


@dataclass
class ConePlan:
    """Coupling on the cone: pairs ``([x1, r1], [x2, r2])`` with masses.

    ``src_index`` and ``tgt_index`` optionally record the originating point
    indices of the lifted measures.
    """

    x1: np.ndarray
    r1: np.ndarray
    x2: np.ndarray
    r2: np.ndarray
    mass: np.ndarray
    src_index: Optional[np.ndarray] = None
    tgt_index: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.mass.shape[0]

    def pair(self, k: int) -> tuple[ConePoint, ConePoint, float]:
        return ConePoint(self.x1[k], self.r1[k]), ConePoint(self.x2[k], self.r2[k]), float(self.mass[k])


# ----------------------------------------------------------------------------
# objective
# ----------------------------------------------------------------------------


def entropy_f(s):
    """``s log s - s + 1`` with ``f(0) = 1``."""
    s = np.asarray(s, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(s > 0, s * np.log(np.where(s > 0, s, 1.0)) - s + 1.0, 1.0)
    return out if out.ndim else float(out)


def _kl_mass(s: np.ndarray, w: np.ndarray) -> float:
    """Sum of ``w f(s/w)``; ``+inf`` if mass sits where ``w = 0``."""
    s = np.asarray(s, float)
    w = np.asarray(w, float)
    if np.any((w <= 0) & (s > 0)):
        return math.inf
    pos = w > 0
    return float(np.sum(w[pos] * entropy_f(s[pos] / w[pos])))


def cost_matrix(X: np.ndarray, Y: np.ndarray, params: Params) -> np.ndarray:
    """Log-cosine cost between all pairs, ``+inf`` beyond the cutoff."""
    return transport_cost(pairwise_distance(X, Y), params)


def let_objective(plan, mu1: DiscreteMeasure, mu2: DiscreteMeasure, params: Params) -> float:
    """Unregularized entropy-transport objective of a coupling.

    Parameters
    ----------
    plan : TransportPlan or ndarray
        Coupling matrix of shape ``(len(mu1), len(mu2))``.

    Returns
    -------
    float
        ``(4/sigma) [sum_i w1_i f(g1_i/w1_i) + sum_j w2_j f(g2_j/w2_j)] + <c, gamma>``,
        or ``inf`` if the marginals charge zero-weight points or ``gamma``
        charges pairs beyond the cutoff.
    """
    gamma = plan.gamma if isinstance(plan, TransportPlan) else np.asarray(plan, float)
    n, m = len(mu1), len(mu2)
    if gamma.size == 0:
        gamma = np.zeros((n, m))
    if gamma.shape != (n, m):
        raise ValueError("plan shape does not match the measures")
    if np.any(gamma < 0):
        raise ValueError("plan has negative entries")
    ent = _kl_mass(gamma.sum(axis=1), mu1.weights) + _kl_mass(gamma.sum(axis=0), mu2.weights)
    if not np.isfinite(ent):
        return math.inf
    if n == 0 or m == 0:
        return params.entropy_weight * ent
    C = cost_matrix(mu1.points, mu2.points, params)
    pos = gamma > 0
    if np.any(~np.isfinite(C[pos])):
        return math.inf
    return params.entropy_weight * ent + float(np.sum(C[pos] * gamma[pos]))


# ----------------------------------------------------------------------------
# log-domain scaling
# ----------------------------------------------------------------------------


def _lse_rows(A: np.ndarray) -> np.ndarray:
    """Row-wise log-sum-exp, ``-inf`` for rows of ``-inf``."""
    M = np.max(A, axis=1)
    Mf = np.where(np.isfinite(M), M, 0.0)
    with np.errstate(divide="ignore"):
        return Mf + np.log(np.sum(np.exp(A - Mf[:, None]), axis=1))


def kl_prox_potential(L: np.ndarray, log_w: np.ndarray, lam: float, eps: float) -> np.ndarray:
    """Potential update for a marginal penalized by ``lam * KL(. | w)``.

    ``L`` is ``eps`` times the log of the marginal obtained with a zero
    potential. Points with ``L = -inf`` are unreachable and get potential 0.
    """
    with np.errstate(invalid="ignore"):
        f = (lam / (lam + eps)) * (eps * log_w - L)
    return np.where(np.isfinite(L), f, 0.0)


def kl_balance_shift(log_w1: np.ndarray, log_w2: np.ndarray, lam: float):
    """Optimal opposite dual offset for two ``lam * KL`` marginal penalties.

    The plan is invariant under ``(f + t, g - t)``; maximizing the dual over
    ``t`` gives ``t = (lam/2) log(A1/A2)`` with ``A_k`` the sum of
    ``w exp(-potential/lam)`` on side ``k``. This direction is the slowly
    converging mode of the alternating updates when ``eps << lam``.
    """

    def shift(f, g):
        a1 = _lse_rows((log_w1 - f / lam)[None, :])[0]
        a2 = _lse_rows((log_w2 - g / lam)[None, :])[0]
        return 0.5 * lam * (a1 - a2)

    return shift


_SLOW_LEVEL = 1500
_OMEGA_SLOW = 1.95


def scaling_solve(
    C: np.ndarray,
    log_a: np.ndarray,
    log_b: np.ndarray,
    row_update: Callable[[np.ndarray, float], np.ndarray],
    col_update: Callable[[np.ndarray, float], np.ndarray],
    cfg: SolverConfig,
    f0: Optional[np.ndarray] = None,
    g0: Optional[np.ndarray] = None,
    eps_levels: Optional[list] = None,
    shift: Optional[Callable] = None,
    omega: Optional[float] = None,
):
    """Alternating log-domain dual updates with ``eps`` continuation.

    The regularized plan is ``exp((f_i + g_j - C_ij)/eps + log_a_i + log_b_j)``.
    ``row_update(L, eps)`` returns the new ``f`` given
    ``L_i = eps log sum_j exp((g_j - C_ij)/eps + log_a_i + log_b_j)``, and
    ``col_update`` likewise for ``g``. ``shift(f, g)``, if given, returns an
    offset ``t`` applied as ``(f + t, g - t)`` after each iteration; the
    plan is unchanged by it, but the dual objective is not.

    Returns
    -------
    f, g : ndarray
        Dual potentials at the last level.
    iterations : int
        Total number of full iterations.
    residual : float
        Estimated sup-norm distance of the potentials to the fixed point,
        from the last change and the observed contraction rate.

    Raises
    ------
    SolverError
        If the last level does not reach ``cfg.dual_tol`` within
        ``cfg.max_iters`` iterations.
    """
    n, m = C.shape
    f = np.zeros(n) if f0 is None else np.array(f0, float)
    g = np.zeros(m) if g0 is None else np.array(g0, float)
    levels = cfg.schedule() if eps_levels is None else list(eps_levels)
    negC = -C
    total = 0
    res = math.inf
    omega = cfg.relaxation if omega is None else omega
    window = 20
    for lvl, eps in enumerate(levels):
        last = lvl == len(levels) - 1
        tol = cfg.dual_tol if last else max(cfg.dual_tol, 1e-6)
        om = 1.0 if (lvl == 0 and f0 is None) else omega
        Kt = negC / eps  # -inf beyond the cutoff
        hist: list[float] = []
        best = math.inf
        for it in range(cfg.max_iters):
            Lr = eps * (_lse_rows(Kt + (g / eps + log_b)[None, :]) + log_a)
            f_new = _relax(f, row_update(Lr, eps), om)
            Lc = eps * (_lse_rows(Kt.T + (f_new / eps + log_a)[None, :]) + log_b)
            g_new = _relax(g, col_update(Lc, eps), om)
            if shift is not None:
                t = shift(f_new, g_new)
                f_new = f_new + t
                g_new = g_new - t
            step = max(_sup_change(f_new, f), _sup_change(g_new, g))
            f, g = f_new, g_new
            total += 1
            hist.append(step)
            best = min(best, step)
            if om != 1.0 and it > 50 and step > 1e3 * best:
                om = 1.0  # relaxation is unstable here; fall back
            elif it == _SLOW_LEVEL and 1.0 < om < _OMEGA_SLOW:
                om = _OMEGA_SLOW  # slow level, push the relaxation towards 2
                best = step
            # distance to the fixed point from the observed contraction rate
            if len(hist) > window and hist[-window - 1] > 0:
                rate = (step / hist[-window - 1]) ** (1.0 / window) if step > 0 else 0.0
                res = step * rate / (1.0 - rate) + step if rate < 1.0 else math.inf
            else:
                res = math.inf if step > 0 else 0.0
            if step <= tol and res <= tol:
                break
        else:
            if last:
                raise SolverError(
                    f"scaling iterations did not converge at eps={eps:g}: residual {res:.3e}",
                    residual=res,
                    iterations=total,
                )
    return f, g, total, res


def _relax(old: np.ndarray, new: np.ndarray, omega: float) -> np.ndarray:
    if omega == 1.0:
        return new
    ok = np.isfinite(new) & np.isfinite(old)
    return np.where(ok, np.where(ok, old, 0.0) + omega * (np.where(ok, new, 0.0) - np.where(ok, old, 0.0)), new)


def _sup_change(a: np.ndarray, b: np.ndarray) -> float:
    """Sup-norm change over entries finite in both arrays (0 if none)."""
    ok = np.isfinite(a) & np.isfinite(b)
    if not ok.any():
        return 0.0 if np.array_equal(np.isfinite(a), np.isfinite(b)) else math.inf
    d = float(np.max(np.abs(a[ok] - b[ok])))
    return d if np.array_equal(np.isfinite(a), np.isfinite(b)) else math.inf


def _plan_from_potentials(C, f, g, log_a, log_b, eps) -> np.ndarray:
    with np.errstate(invalid="ignore", over="ignore"):
        logp = (f[:, None] + g[None, :] - C) / eps + log_a[:, None] + log_b[None, :]
    logp = np.where(np.isfinite(C), logp, -np.inf)
    return np.exp(logp)


# ----------------------------------------------------------------------------
# solution post-processing
# ----------------------------------------------------------------------------


def lebesgue_decompose(base: DiscreteMeasure, marginal) -> tuple[np.ndarray, DiscreteMeasure]:
    """Split ``base = rho * marginal + singular`` point by point.

    Parameters
    ----------
    base : DiscreteMeasure
    marginal : DiscreteMeasure or array_like
        Weights on the same points as ``base``.

    Returns
    -------
    rho : ndarray
        ``base_w / marginal_w`` where ``marginal_w > 0``, NaN elsewhere.
    singular : DiscreteMeasure
        ``base`` restricted to the points where ``marginal_w = 0``.
    """
    mw = marginal.weights if isinstance(marginal, DiscreteMeasure) else np.asarray(marginal, float)
    if mw.shape != base.weights.shape:
        raise ValueError("base and marginal must share the support indexing")
    pos = mw > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        rho = np.where(pos, base.weights / np.where(pos, mw, 1.0), np.nan)
    singular = base.with_weights(np.where(pos, 0.0, base.weights))
    return rho, singular


def _assemble(gamma, f, g, eps, mu1, mu2, params, iters, res) -> HKSolution:
    g1 = gamma.sum(axis=1)
    g2 = gamma.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        s1 = np.where(mu1.weights > 0, g1 / np.where(mu1.weights > 0, mu1.weights, 1.0), 0.0)
        s2 = np.where(mu2.weights > 0, g2 / np.where(mu2.weights > 0, mu2.weights, 1.0), 0.0)
    rho0, sing0 = lebesgue_decompose(mu1, g1)
    rhos, sings = lebesgue_decompose(mu2, g2)
    plan = TransportPlan(gamma, f, g, eps)
    return HKSolution(
        hk2=let_objective(gamma, mu1, mu2, params),
        plan=plan,
        mu1=mu1,
        mu2=mu2,
        params=params,
        sigma1=s1,
        sigma2=s2,
        rho0=rho0,
        rho_star=rhos,
        singular0=sing0,
        singular_star=sings,
        iterations=iters,
        dual_residual=res,
    )


def solve_hk(
    mu1: DiscreteMeasure,
    mu2: DiscreteMeasure,
    params: Params,
    cfg: Optional[SolverConfig] = None,
    warm: Optional[TransportPlan] = None,
) -> HKSolution:
    """Solve the entropy-transport problem between two point clouds.

    Parameters
    ----------
    mu1, mu2 : DiscreteMeasure
    params : Params
    cfg : SolverConfig, optional
    warm : TransportPlan, optional
        Potentials from a previous solve on the same supports; the
        ``eps`` schedule then starts at ``warm.eps`` (clipped to
        ``cfg.eps_start``).

    Returns
    -------
    HKSolution

    Raises
    ------
    SolverError
        If the final ``eps`` level does not converge.
    """
    cfg = cfg or SolverConfig()
    n, m = len(mu1), len(mu2)
    lam = params.entropy_weight
    act1 = np.nonzero(mu1.weights > 0)[0]
    act2 = np.nonzero(mu2.weights > 0)[0]
    gamma = np.zeros((n, m))
    f_full = np.zeros(n)
    g_full = np.zeros(m)
    iters, res = 0, 0.0
    if act1.size and act2.size:
        C = cost_matrix(mu1.points[act1], mu2.points[act2], params)
        if np.any(np.isfinite(C)):
            la = np.log(mu1.weights[act1])
            lb = np.log(mu2.weights[act2])
            levels = None
            f0 = g0 = None
            if warm is not None and warm.f.shape == (n,) and warm.g.shape == (m,) and warm.eps > 0:
                f0, g0 = warm.f[act1], warm.g[act2]
                levels = [e for e in cfg.schedule() if e <= warm.eps * (1 + 1e-12)] or [cfg.eps_end]
            f, g, iters, res = scaling_solve(
                C,
                la,
                lb,
                lambda L, eps: kl_prox_potential(L, la, lam, eps),
                lambda L, eps: kl_prox_potential(L, lb, lam, eps),
                cfg,
                f0,
                g0,
                levels,
                shift=kl_balance_shift(la, lb, lam),
            )
            gamma[np.ix_(act1, act2)] = _plan_from_potentials(C, f, g, la, lb, cfg.eps_end)
            f_full[act1] = f
            g_full[act2] = g
    return _assemble(gamma, f_full, g_full, cfg.eps_end, mu1, mu2, params, iters, res)


def hk2(mu1: DiscreteMeasure, mu2: DiscreteMeasure, params: Params, cfg: Optional[SolverConfig] = None) -> float:
    """Squared distance only; see :func:`solve_hk`."""
    return solve_hk(mu1, mu2, params, cfg).hk2


# ----------------------------------------------------------------------------
# cone lift
# ----------------------------------------------------------------------------


def lift_to_cone(sol: HKSolution) -> ConePlan:
    """Lift the optimal plan to the cone.

    Each plan entry ``gamma_ij > 0`` becomes the pair
    ``([x_i, sqrt(rho0_i)], [y_j, sqrt(rho_star_j)])`` with mass ``gamma_ij``.
    """
    i, j, w = sol.plan.pairs()
    d = sol.mu1.dim if len(sol.mu1) else sol.mu2.dim
    if w.size == 0:
        z = np.zeros(0)
        return ConePlan(np.zeros((0, d)), z, np.zeros((0, d)), z.copy(), z.copy(), i, j)
    return ConePlan(
        sol.mu1.points[i],
        np.sqrt(sol.rho0[i]),
        sol.mu2.points[j],
        np.sqrt(sol.rho_star[j]),
        w,
        i,
        j,
    )


def homogeneous_marginal(beta: ConePlan, side: str = "first", support: Optional[DiscreteMeasure] = None) -> DiscreteMeasure:
    """Project ``r^2 beta`` onto the base along one side.

    Parameters
    ----------
    beta : ConePlan
    side : {"first", "second"}
    support : DiscreteMeasure, optional
        If given, the result lives on ``support.points`` (using the stored
        point indices of ``beta`` when present); otherwise on the distinct
        points of ``beta``.
    """
    if side not in ("first", "second"):
        raise ValueError("side must be 'first' or 'second'")
    x, r, idx = (beta.x1, beta.r1, beta.src_index) if side == "first" else (beta.x2, beta.r2, beta.tgt_index)
    contrib = r**2 * beta.mass
    if support is not None:
        if idx is None:
            keys = {tuple(p): k for k, p in enumerate(support.points)}
            idx = np.array([keys[tuple(p)] for p in x], dtype=int)
        w = np.bincount(idx, weights=contrib, minlength=len(support)) if len(beta) else np.zeros(len(support))
        return DiscreteMeasure(support.points, w, support.domain)
    if len(beta) == 0:
        return DiscreteMeasure.empty(x.shape[1] if x.ndim == 2 else 1)
    pts, inv = np.unique(x, axis=0, return_inverse=True)
    return DiscreteMeasure(pts, np.bincount(inv.reshape(-1), weights=contrib, minlength=len(pts)))


# ----------------------------------------------------------------------------
# independent small-instance oracle
# ----------------------------------------------------------------------------


def _tiny_objective(gamma, w1, w2, C, lam):
    ent = 0.0
    for s, w in ((gamma.sum(1), w1), (gamma.sum(0), w2)):
        ent += float(np.sum(entropy_f(s / w) * w))
    fin = np.isfinite(C)
    return lam * ent + float(np.sum(C[fin] * gamma[fin]))


def hk_tiny_oracle(
    mu1: DiscreteMeasure,
    mu2: DiscreteMeasure,
    params: Params,
    n_starts: int = 4,
    max_sweeps: int = 200000,
    seed: int = 0,
) -> float:
    """Unregularized objective minimized directly over at most 16 plan entries.

    Projected coordinate descent: for a single entry with the rest of the
    plan fixed, the optimality condition
    ``(r + x)(s + x) = w1_i w2_j exp(-c_ij / lam)`` is a quadratic in ``x``,
    solved in closed form and clipped at zero. Several starting plans are
    tried and the best value is returned.
    """
    if len(mu1) > 4 or len(mu2) > 4:
        raise ValueError("the tiny oracle accepts at most 4 points per measure")
    lam = params.entropy_weight
    a1 = mu1.weights > 0
    a2 = mu2.weights > 0
    base = lam * (mu1.mass + mu2.mass)
    if not a1.any() or not a2.any():
        return base
    w1 = mu1.weights[a1]
    w2 = mu2.weights[a2]
    C = cost_matrix(mu1.points[a1], mu2.points[a2], params)
    fin = np.isfinite(C)
    if not fin.any():
        return base
    P = np.where(fin, np.outer(w1, w2) * np.exp(-np.where(fin, C, 0.0) / lam), 0.0)
    entries = list(zip(*np.nonzero(fin)))
    rng = np.random.default_rng(seed)
    scale = max(w1.max(), w2.max())

    starts = [np.zeros_like(P), np.where(fin, np.outer(w1, w2) / max(w1.sum(), w2.sum()), 0.0)]
    while len(starts) < n_starts:
        starts.append(np.where(fin, rng.uniform(0, 1, P.shape) * np.minimum.outer(w1, w2), 0.0))

    best = math.inf
    for gamma in starts:
        gamma = gamma.copy()
        row = gamma.sum(1)
        col = gamma.sum(0)
        for _ in range(max_sweeps):
            change = 0.0
            for i, j in entries:
                old = gamma[i, j]
                r = row[i] - old
                s = col[j] - old
                disc = math.sqrt((r - s) ** 2 + 4.0 * P[i, j])
                if r + s > 0:
                    x = 2.0 * (P[i, j] - r * s) / ((r + s) + disc)
                else:
                    x = 0.5 * (-(r + s) + disc)
                x = max(x, 0.0)
                if x != old:
                    gamma[i, j] = x
                    row[i] = r + x
                    col[j] = s + x
                    change = max(change, abs(x - old))
            if change <= 1e-15 * scale:
                break
        best = min(best, _tiny_objective(gamma, w1, w2, C, lam) + lam * (mu1.weights[~a1].sum() + mu2.weights[~a2].sum()))
    return best
