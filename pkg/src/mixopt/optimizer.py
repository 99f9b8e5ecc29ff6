"""Minimise the mixture objective over the probability simplex.

The objective is a sum of convex univariate terms, one per domain, so its
Hessian is diagonal and each quadratic subproblem

    min_d  g.d + 0.5 * sum(h_i * d_i**2)   s.t.  sum(d) = 0,  lo <= w + d <= hi

is a separable QP solved exactly by locating the multiplier of the equality
constraint among the piecewise-linear breakpoints.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .scaling_model import (
    DomainParams,
    ModelDomainError,
    _grad_terms,
    _hess_terms,
    _others,
    _terms,
    as_gamma,
    stack_params,
)

logger = logging.getLogger(__name__)

__all__ = [
    "OptimizerOptions",
    "OptimizationReport",
    "optimize_weights",
    "kkt_residual",
    "budget_sweep",
    "grid_search",
    "project_simplex",
    "PAPER_GRID_LEVELS",
]

# 0.125 steps from 0.125 to 0.75; with K=3 this yields 21 mixtures
PAPER_GRID_LEVELS = (0.125, 0.25, 0.375, 0.5, 0.625, 0.75)

# lower bound for domains with k_i == 0, whose loss is undefined at w_i == 0
ZERO_TRANSFER_FLOOR = 1e-9
# upper-bound gap for domains with transfer, whose derivative is unbounded at w_i == 1
CORNER_GAP = 1e-13
# a stalled line search counts as converged only this close to stationarity
STALL_TOL = 1e-6


@dataclass(frozen=True)
class OptimizerOptions:
    max_iter: int = 1000
    step_tol: float = 1e-12
    kkt_tol: float = 1e-10
    armijo: float = 1e-4


@dataclass
class OptimizationReport:
    weights: np.ndarray
    objective: float
    kkt_residual: float
    iterations: int
    active_bounds: list[int]
    converged: bool
    clamped: list[int] = field(default_factory=list)
    fallback_steps: int = 0

    def to_dict(self, params: Sequence[DomainParams] | None = None, n0=None, gamma=None) -> dict:
        names = [p.name for p in params] if params is not None else [str(i) for i in range(len(self.weights))]
        out = {}
        if n0 is not None:
            out["budget_tokens"] = int(n0)
        if gamma is not None:
            out["gamma"] = [float(g) for g in gamma]
        out["weights"] = [{"domain": n, "weight": float(w)} for n, w in zip(names, self.weights)]
        out["objective"] = float(self.objective)
        out["kkt_residual"] = float(self.kkt_residual)
        out["iterations"] = int(self.iterations)
        out["active_bounds"] = list(self.active_bounds)
        out["converged"] = bool(self.converged)
        return out


def project_simplex(v, mass: float = 1.0) -> np.ndarray:
    """Euclidean projection of ``v`` onto ``{y >= 0, sum(y) = mass}``."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - mass
    ind = np.arange(1, v.size + 1)
    rho = np.count_nonzero(u - css / ind > 0)
    theta = css[rho - 1] / rho
    return np.maximum(v - theta, 0.0)


def _objective(cols, g, w, n0) -> float:
    return float(np.sum(g * _terms(cols, w, n0, _others(w))))


def _gradient(cols, g, w, n0) -> np.ndarray:
    return np.where(g == 0, 0.0, g * _grad_terms(cols, w, n0, _others(w)))


def _bounds(cols, n0: float):
    """Per-domain weight bounds.

    Zero-transfer domains keep a tiny floor so their loss stays defined.
    Domains with transfer stop just short of ``w = 1``: their derivative is
    unbounded there and the exact optimum can sit closer to the corner than a
    double can resolve.
    """
    k = cols[1]
    lo = np.where(k == 0, ZERO_TRANSFER_FLOOR, 0.0)
    if k.size == 1:
        return lo, np.ones(1)
    hi = np.where(k > 0, 1.0 - CORNER_GAP, 1.0)
    return lo, np.maximum(hi, lo)


def _residual(grad, w, lo, hi) -> float:
    at_lo = w <= lo * (1 + 1e-9)
    at_hi = ~at_lo & (w >= hi - 4 * np.finfo(float).eps)
    free = ~at_lo & ~at_hi
    # stationarity with a common level c: g_free == c, g_lower >= c, g_upper <= c
    top = grad[free | at_hi]
    bottom = grad[free | at_lo]
    if top.size == 0 or bottom.size == 0:
        return 0.0
    if np.any(np.isnan(top)) or np.any(np.isnan(bottom)):
        return float("inf")
    gap = top.max() - bottom.min()
    return float(gap) if gap > 0 else 0.0


def kkt_residual(params: Sequence[DomainParams], w, n0, gamma=None) -> float:
    """First-order optimality violation at a feasible weight vector.

    Zero exactly when the partial derivatives of all domains strictly inside
    their bounds agree on a common level, no zero-weight domain has a
    derivative below it (it would deserve weight), and no saturated domain
    has one above it. Positive otherwise; ``inf`` when a weighted domain has
    an unbounded derivative (``w_i = 1`` with transfer).
    """
    cols = stack_params(params)
    w = np.asarray(w, dtype=float)
    g = as_gamma(gamma, len(params))
    lo, hi = _bounds(cols, float(n0))
    with np.errstate(all="ignore"):
        grad = _gradient(cols, g, w, float(n0))
    return _residual(grad, w, lo, hi)


def _qp_step(grad, hess, w, lo, hi) -> np.ndarray:
    """Exact minimiser of the separable QP model; ``None`` if ill-posed."""
    dlo, dhi = lo - w, hi - w
    if not (np.all(np.isfinite(grad)) and np.all(np.isfinite(hess)) and np.all(hess >= 0)):
        return None
    hmax = hess.max()
    if hmax <= 0:
        return None
    h = np.maximum(hess, 1e-12 * hmax)
    # d_i(lam) = clip(-(g_i + lam)/h_i, dlo_i, dhi_i) is non-increasing in lam
    bps = np.sort(np.concatenate([-grad - h * dhi, -grad - h * dlo]))
    d = np.clip(-(grad[None, :] + bps[:, None]) / h[None, :], dlo, dhi)
    s = d.sum(axis=1)
    j = np.searchsorted(-s, 0.0)  # first breakpoint where s <= 0
    if j == 0:
        lam = bps[0]
    elif j >= bps.size:
        lam = bps[-1]
    else:
        l0, l1, s0, s1 = bps[j - 1], bps[j], s[j - 1], s[j]
        lam = l0 if s0 == s1 else l0 + (l1 - l0) * s0 / (s0 - s1)
    step = np.clip(-(grad + lam) / h, dlo, dhi)
    # re-solve for lam on the free set with gradients centred at the flattest
    # coordinate: its step is lam / h, so lam's rounding would be amplified
    free = (step > dlo) & (step < dhi)
    if free.any():
        j = np.flatnonzero(free)[np.argmin(h[free])]
        gc = grad - grad[j]
        lam = (np.sum(step[~free]) - np.sum(gc[free] / h[free])) / np.sum(1.0 / h[free])
        step = np.where(free, np.clip(-(gc + lam) / h, dlo, dhi), step)
    # absorb rounding in the equality on the largest weight, never on a bound
    err = step.sum()
    if err != 0.0:
        step[int(np.argmax(w + step))] -= err
    return step


def _projected_gradient_step(grad, w, lo):
    scale = np.max(np.abs(grad))
    if not np.isfinite(scale) or scale == 0:
        return np.zeros_like(w)
    target = w - grad / scale * 0.1
    mass = 1.0 - lo.sum()
    return lo + project_simplex(target - lo, mass) - w


def optimize_weights(params: Sequence[DomainParams], n0, gamma=None,
                     options: OptimizerOptions | None = None) -> OptimizationReport:
    """Optimal domain weights for a token budget ``n0``.

    Starts from uniform weights and takes sequential quadratic steps with a
    backtracking line search on the true objective.
    """
    options = options or OptimizerOptions()
    K = len(params)
    if K == 0:
        raise ModelDomainError("need at least one domain")
    n0 = float(n0)
    if not n0 > 0:
        raise ModelDomainError(f"budget must be > 0, got {n0}")
    g = as_gamma(gamma, K)
    # the objective is positively homogeneous in gamma; normalise for conditioning
    g = g / g.max()
    cols = stack_params(params)
    if K == 1:
        w = np.ones(1)
        return OptimizationReport(w, _objective(cols, g, w, n0), 0.0, 0, [0], True)

    lo, hi = _bounds(cols, n0)
    w = np.full(K, 1.0 / K)
    f = _objective(cols, g, w, n0)
    grad = _gradient(cols, g, w, n0)
    res = _residual(grad, w, lo, hi)
    it, fallback, converged = 0, 0, False

    while it < options.max_iter:
        scale = max(np.mean(np.abs(grad)), np.finfo(float).tiny)
        if res <= options.kkt_tol * scale:
            converged = True
            break
        it += 1
        rest = _others(w)
        # fraction to the boundary: a transfer domain may take at most half of what
        # the others still hold, since its curvature blows up as that pool empties
        hi_step = np.where(cols[1] > 0, np.minimum(hi, w + 0.5 * rest), hi)
        step = _qp_step(grad, _hess_terms(cols, w, n0, rest) * g, w, lo, hi_step)
        if step is None:
            fallback += 1
            step = _projected_gradient_step(grad, w, lo)
        # steps sum to zero, so centring the gradient only removes cancellation
        slope = float((grad - np.median(grad)) @ step)
        if slope >= 0:
            step = _projected_gradient_step(grad, w, lo)
            slope = float((grad - np.median(grad)) @ step)
            fallback += 1
            if slope >= 0:
                converged = res <= STALL_TOL * scale
                break
        t = 1.0
        while True:
            w_new = np.clip(w + t * step, lo, hi)
            w_new[np.abs(w_new - lo) <= 4 * np.finfo(float).eps] = lo[np.abs(w_new - lo) <= 4 * np.finfo(float).eps]
            with np.errstate(all="ignore"):
                f_new = _objective(cols, g, w_new, n0)
                grad_new = _gradient(cols, g, w_new, n0)
            ok = np.isfinite(f_new) and np.all(np.isfinite(grad_new))
            if ok and f_new <= f + options.armijo * t * slope:
                break
            # near the optimum the decrease drops below the objective's rounding;
            # fall back to progress in the optimality residual
            if ok and f_new <= f + 8 * np.finfo(float).eps * abs(f) and \
                    _residual(grad_new, w_new, lo, hi) < res:
                break
            t *= 0.5
            if t < 1e-20:
                break
        if t < 1e-20:
            # no progress possible at floating-point resolution
            converged = res <= STALL_TOL * scale
            break
        moved = np.max(np.abs(w_new - w))
        w, f, grad = w_new, f_new, grad_new
        res = _residual(grad, w, lo, hi)
        # steps shrink with the distance to a corner, so a tiny step alone is not enough
        if moved < options.step_tol and res <= STALL_TOL * scale:
            converged = True
            break

    total = w.sum()
    w_out = w / total
    correction = float(np.max(np.abs(w_out - w)))
    if correction > 0:
        logger.debug("renormalised weights, max correction %.3e", correction)
    w_out = np.clip(w_out, 0.0, 1.0)
    f = _objective(cols, g, w_out, n0)
    grad = _gradient(cols, g, w_out, n0)
    res = _residual(grad, w_out, lo, hi)
    f_report = f * float(as_gamma(gamma, K).max())
    res_report = res * float(as_gamma(gamma, K).max())
    active = [i for i in range(K) if w_out[i] <= lo[i] * (1 + 1e-9) or w_out[i] >= hi[i] - 4 * np.finfo(float).eps]
    clamped = [i for i in range(K) if lo[i] > 0 and w_out[i] <= lo[i] * (1 + 1e-9)]
    if clamped:
        logger.info("zero-transfer floor binds for domains %s", clamped)
    if not converged:
        logger.warning("weight optimisation stopped after %d iterations (kkt residual %.3e)", it, res_report)
    return OptimizationReport(w_out, f_report, res_report, it, active, converged, clamped, fallback)


def budget_sweep(params: Sequence[DomainParams], budgets, gamma=None,
                 options: OptimizerOptions | None = None) -> list[tuple[int, OptimizationReport]]:
    """Optimal weights at each budget (strictly increasing)."""
    budgets = [int(b) for b in budgets]
    if any(b2 <= b1 for b1, b2 in zip(budgets, budgets[1:])):
        raise ValueError(f"budgets must be strictly increasing, got {budgets}")
    return [(b, optimize_weights(params, b, gamma, options)) for b in budgets]


def sweep_differences(sweep) -> list[float]:
    """L-infinity change in weights between successive budgets."""
    return [float(np.max(np.abs(b.weights - a.weights))) for (_, a), (_, b) in zip(sweep, sweep[1:])]


def grid_search(params: Sequence[DomainParams], n0, gamma=None,
                levels: Sequence[float] = PAPER_GRID_LEVELS) -> list[tuple[np.ndarray, float]]:
    """Evaluate every mixture whose coordinates come from ``levels`` and sum to one.

    Results are sorted by objective, ties broken by the weight tuple.
    """
    levels = sorted(float(x) for x in levels)
    if not levels or any(not 0.0 < x < 1.0 for x in levels):
        raise ValueError(f"levels must be non-empty and inside (0, 1), got {levels}")
    K = len(params)
    g = as_gamma(gamma, K)
    cols = stack_params(params)
    rows = []
    for combo in itertools.product(levels, repeat=K):
        if abs(sum(combo) - 1.0) <= 1e-9:
            w = np.array(combo)
            rows.append((combo, w, _objective(cols, g, w, float(n0))))
    if not rows:
        raise ValueError(f"no {K}-tuple of levels {levels} sums to 1")
    rows.sort(key=lambda r: (r[2], r[0]))
    return [(w, f) for _, w, f in rows]
