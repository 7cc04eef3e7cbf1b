"""
Threshold-routing theory on an analytic ScoreModel.

Frontiers Q(tau), C(tau), J(tau) are computed by composite Gauss-Legendre
quadrature split at tau (the integrands have a kink there). The optimal
threshold solves rho(tau) = lambda * kappa by bisection and is cross-checked
by a brute-force grid sweep.
"""
import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from lab.exceptions import DomainError, NoInteriorOptimum, UsageError
from lab.services.econ import DEFAULT_DELTA_C, ScoreModel

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FrontierPoint:
    tau: float
    q: float
    c: float
    j: float


@dataclass(frozen=True)
class QuadratureSpec:
    node_count: int = 512

    def __post_init__(self):
        if self.node_count < 64:
            raise UsageError("Quadrature needs at least 64 nodes")


@lru_cache(maxsize=8)
def _legendre(n: int) -> tuple[np.ndarray, np.ndarray]:
    nodes, weights = np.polynomial.legendre.leggauss(n)
    return nodes, weights


def _integrate(fn: Callable[[np.ndarray], np.ndarray], lo: np.ndarray, hi: np.ndarray, n: int) -> np.ndarray:
    """Gauss-Legendre integral of fn over [lo, hi], vectorized over interval arrays"""
    nodes, weights = _legendre(n)
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    half = (hi - lo) / 2.0
    mid = (hi + lo) / 2.0
    x = mid[:, None] + half[:, None] * nodes[None, :]
    return half * (fn(x) * weights[None, :]).sum(axis=1)


def _frontier_arrays(model: ScoreModel, taus: np.ndarray, kappa: float, quad: QuadratureSpec):
    lo, hi = model.support
    lows = np.full_like(taus, lo)
    highs = np.full_like(taus, hi)
    n = quad.node_count

    def edge_q(s):
        return model.q_edge(s) * model.density(s)

    def cloud_q(s):
        return model.q_cloud(s) * model.density(s)

    def edge_c(s):
        return model.c_edge(s) * model.density(s)

    def cloud_c(s):
        return (model.c_edge(s) + kappa * model.delta_c(s)) * model.density(s)

    q = _integrate(edge_q, taus, highs, n) + _integrate(cloud_q, lows, taus, n)
    c = _integrate(edge_c, taus, highs, n) + _integrate(cloud_c, lows, taus, n)
    return q, c


def _check_support(model: ScoreModel, taus: np.ndarray):
    lo, hi = model.support
    if np.any(taus < lo) or np.any(taus > hi) or not np.all(np.isfinite(taus)):
        raise DomainError(f"Threshold outside score support [{lo}, {hi}]")


def frontier_point(
    model: ScoreModel,
    tau: float,
    kappa: float,
    lam: float,
    quad: Optional[QuadratureSpec] = None,
) -> FrontierPoint:
    quad = quad or QuadratureSpec()
    taus = np.array([tau], dtype=float)
    _check_support(model, taus)
    q, c = _frontier_arrays(model, taus, kappa, quad)
    q, c = float(q[0]), float(c[0])
    return FrontierPoint(tau=float(tau), q=q, c=c, j=q - lam * c)


def frontier_sweep(
    model: ScoreModel,
    tau_grid: Sequence[float],
    kappa: float,
    lam: float,
    quad: Optional[QuadratureSpec] = None,
) -> list[FrontierPoint]:
    quad = quad or QuadratureSpec()
    taus = np.asarray(tau_grid, dtype=float)
    if taus.size == 0:
        raise UsageError("Threshold grid must not be empty")
    if np.any(np.diff(taus) < 0):
        raise UsageError("Threshold grid must be sorted ascending")
    _check_support(model, taus)
    q, c = _frontier_arrays(model, taus, kappa, quad)
    return [
        FrontierPoint(tau=float(t), q=float(qi), c=float(ci), j=float(qi) - lam * float(ci))
        for t, qi, ci in zip(taus, q, c)
    ]


def bisection(fn: Callable[[float], float], left: float, right: float, tol: float) -> float:
    """Root of fn on [left, right]; caller guarantees a sign change"""
    f_left = fn(left)
    if f_left == 0:
        return left
    if fn(right) == 0:
        return right
    while right - left > tol:
        middle = (left + right) / 2
        f_middle = fn(middle)
        if f_middle == 0:
            return middle
        if (f_middle > 0) == (f_left > 0):
            left, f_left = middle, f_middle
        else:
            right = middle
    return (left + right) / 2


def solve_optimal_tau(
    model: ScoreModel,
    lam: float,
    kappa: float,
    bracket: Optional[tuple[float, float]] = None,
    tol: float = 1e-10,
    quad: Optional[QuadratureSpec] = None,
) -> float:
    """tau* solving rho(tau) = lam * kappa"""
    lo, hi = bracket if bracket is not None else model.support
    target = lam * kappa

    def gap(tau):
        return float(model.rho(tau)) - target

    g_lo, g_hi = gap(lo), gap(hi)
    if g_lo * g_hi > 0:
        quad = quad or QuadratureSpec()
        j_lo = frontier_point(model, lo, kappa, lam, quad).j
        j_hi = frontier_point(model, hi, kappa, lam, quad).j
        fallback = lo if j_lo >= j_hi else hi
        raise NoInteriorOptimum(
            f"No interior optimum: rho - lambda*kappa has the same sign at {lo} and {hi} "
            f"(lambda={lam}, kappa={kappa})",
            fallback_tau=fallback,
        )
    return bisection(gap, lo, hi, tol)


def _argmax_smallest(values: np.ndarray, rel_tol: float = 1e-12) -> int:
    """First index attaining the maximum up to a relative tie tolerance"""
    best = np.max(values)
    tol = rel_tol * max(1.0, abs(best))
    return int(np.flatnonzero(values >= best - tol)[0])


def brute_force_tau(
    model: ScoreModel,
    lam: float,
    kappa: float,
    grid: Sequence[float],
    quad: Optional[QuadratureSpec] = None,
) -> float:
    """Grid node maximizing J(tau); ties go to the smallest node"""
    points = frontier_sweep(model, grid, kappa, lam, quad)
    j = np.array([p.j for p in points])
    return points[_argmax_smallest(j)].tau


def rho_derivative(model: ScoreModel, tau: float, h: float = 1e-5) -> float:
    return float((model.rho(tau + h) - model.rho(tau - h)) / (2 * h))


def dtau_dkappa(
    model: ScoreModel,
    lam: float,
    kappa: float,
    tol: float = 1e-12,
    h: float = 1e-5,
) -> float:
    """Local sensitivity lam / rho'(tau*)"""
    tau_star = solve_optimal_tau(model, lam, kappa, tol=tol)
    return lam / rho_derivative(model, tau_star, h)


def closed_form_tau(lam: float, kappa: float, delta_c: float = DEFAULT_DELTA_C) -> float:
    """tau* for the default model, where rho(s) = exp(-s) / delta_c"""
    return -math.log(lam * kappa * delta_c)


def frontier_slope(
    model: ScoreModel,
    tau: float,
    kappa: float,
    h: float = 1e-4,
    quad: Optional[QuadratureSpec] = None,
) -> float:
    """Numeric dQ/dC along the frontier at tau"""
    points = frontier_sweep(model, [tau - h, tau + h], kappa, 1.0, quad)
    return (points[1].q - points[0].q) / (points[1].c - points[0].c)


@dataclass(frozen=True)
class LemmaCheck:
    tau: float
    dq_numeric: float
    dq_analytic: float
    dc_numeric: float
    dc_analytic: float

    def relative_errors(self) -> tuple[float, float]:
        return (
            abs(self.dq_numeric - self.dq_analytic) / abs(self.dq_analytic),
            abs(self.dc_numeric - self.dc_analytic) / abs(self.dc_analytic),
        )


def lemma_check(
    model: ScoreModel,
    tau: float,
    kappa: float,
    h: float = 1e-4,
    quad: Optional[QuadratureSpec] = None,
) -> LemmaCheck:
    """Central differences of Q and C against f*dQ and f*kappa*dC"""
    points = frontier_sweep(model, [tau - h, tau + h], kappa, 1.0, quad)
    density = float(model.density(tau))
    return LemmaCheck(
        tau=tau,
        dq_numeric=(points[1].q - points[0].q) / (2 * h),
        dq_analytic=density * float(model.delta_q(tau)),
        dc_numeric=(points[1].c - points[0].c) / (2 * h),
        dc_analytic=density * kappa * float(model.delta_c(tau)),
    )


def threshold_utility(records: np.ndarray, tau: float) -> float:
    """Summed utility of the hard threshold rule at tau over (score, j_edge, j_cloud) rows"""
    records = np.asarray(records, dtype=float)
    accept = records[:, 0] >= tau
    return float(np.where(accept, records[:, 1], records[:, 2]).sum())


def tau0_candidates(scores: np.ndarray) -> np.ndarray:
    """Midpoints between consecutive distinct scores plus both sentinels"""
    distinct = np.unique(scores)
    midpoints = (distinct[:-1] + distinct[1:]) / 2.0
    return np.concatenate([[distinct[0] - 1.0], midpoints, [distinct[-1] + 1.0]])


def empirical_tau0(records: Iterable[tuple[float, float, float]]) -> float:
    """Fixed threshold maximizing summed utility over (score, j_edge, j_cloud) records"""
    rows = np.asarray(list(records), dtype=float)
    if rows.size == 0:
        raise UsageError("empirical_tau0 needs at least one record")
    rows = rows.reshape(-1, 3)
    candidates = tau0_candidates(rows[:, 0])
    accept = rows[None, :, 0] >= candidates[:, None]
    utilities = np.where(accept, rows[None, :, 1], rows[None, :, 2]).sum(axis=1)
    return float(candidates[_argmax_smallest(utilities)])
