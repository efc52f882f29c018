"""Risk-constrained profit maximization for a single miner.

A miner with risk tolerance rho picks the allocation w that maximizes the
expected profit w.mu subject to w.e = 1 and w'Sigma w = rho. The Lagrangian
critical points have a closed form in the scalars

    a = e' Sigma^-1 e,   b = e' Sigma^-1 mu,   c = mu' Sigma^-1 mu

with two roots for the multiplier of the budget constraint

    lambda2 = b/a +/- sqrt((b^2 - ac)(1 - a rho)) / (a (1 - a rho))
    lambda1 = (b - a lambda2) / 2
    w = Sigma^-1 (mu - lambda2 e) / (2 lambda1)

Each root is evaluated as w = w_mv + t z, where w_mv = Sigma^-1 e / a is the
minimum-variance allocation and z = Sigma^-1 (mu - (b/a) e). The "+" root
maps to t = +sqrt((a rho - 1) / (ac - b^2)) and the "-" root to -t. This form
is algebraically identical and stays accurate as rho approaches 1/a.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import FrozenSet, Optional

import numpy as np

from utils.errors import (
    DimensionMismatch,
    InfeasibleRisk,
    NonFiniteInput,
    SingularVolatility,
    ValidationError,
)
from utils.logger import logger

CONDITION_LIMIT = 1e12
JITTER_SCALE = 1e-10
BOUNDARY_TOL = 1e-12
DEGENERATE_TOL = 1e-12
SUM_TOL = 1e-12
SYMMETRY_TOL = 1e-12
PSD_TOL = 1e-10


class Flag(str, Enum):
    DEGENERATE = "Degenerate"
    RISK_CLAMPED = "RiskClamped"
    WEIGHTS_CLAMPED = "WeightsClamped"


class RiskPolicy(Enum):
    STRICT = "strict"
    CLAMP_RISK = "clamp_risk"


class WeightPolicy(Enum):
    ALLOW_SHORT = "allow_short"
    CLAMP_WEIGHTS = "clamp_weights"


@dataclass(frozen=True)
class SolvePolicy:
    risk: RiskPolicy = RiskPolicy.STRICT
    weights: WeightPolicy = WeightPolicy.ALLOW_SHORT


# Used by every hourly pipeline (fitting, aggregation, simulation).
PIPELINE_POLICY = SolvePolicy(RiskPolicy.CLAMP_RISK, WeightPolicy.CLAMP_WEIGHTS)


def _frozen(values):
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ProfitVector:
    values: np.ndarray

    def __post_init__(self):
        arr = _frozen(self.values)
        if arr.ndim != 1 or arr.size < 1:
            raise DimensionMismatch(f"profit vector must be 1-D and non-empty, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteInput("profit vector contains non-finite values")
        object.__setattr__(self, "values", arr)

    def __len__(self):
        return self.values.size


@dataclass(frozen=True)
class VolatilityMatrix:
    entries: np.ndarray

    def __post_init__(self):
        arr = _frozen(self.entries)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1] or arr.shape[0] < 1:
            raise DimensionMismatch(f"volatility matrix must be square, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteInput("volatility matrix contains non-finite values")
        if np.max(np.abs(arr - arr.T)) > SYMMETRY_TOL * max(1.0, float(np.max(np.abs(arr)))):
            raise ValidationError("volatility matrix is not symmetric")
        trace = float(np.trace(arr))
        if arr.shape[0] > 1 and np.min(np.linalg.eigvalsh(arr)) < -PSD_TOL * max(trace, 0.0) - 1e-300:
            raise ValidationError("volatility matrix is not positive semi-definite")
        object.__setattr__(self, "entries", arr)

    @property
    def size(self):
        return self.entries.shape[0]


@dataclass(frozen=True)
class Allocation:
    weights: np.ndarray

    def __post_init__(self):
        arr = _frozen(self.weights)
        if arr.ndim != 1 or arr.size < 1:
            raise DimensionMismatch(f"allocation must be 1-D and non-empty, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteInput("allocation contains non-finite values")
        if abs(float(arr.sum()) - 1.0) > SUM_TOL * max(1, arr.size):
            raise ValidationError(f"allocation sums to {arr.sum():.15g}, expected 1")
        object.__setattr__(self, "weights", arr)

    @classmethod
    def normalized(cls, values):
        """Builds an allocation from non-negative scores by dividing by their sum."""
        arr = np.asarray(values, dtype=float)
        total = arr.sum()
        if not np.isfinite(total) or total <= 0:
            raise ValidationError("cannot normalize scores with a non-positive total")
        return cls(arr / total)

    def __len__(self):
        return self.weights.size


@dataclass(frozen=True)
class RiskTolerance:
    rho: float

    def __post_init__(self):
        value = float(self.rho)
        if not math.isfinite(value):
            raise NonFiniteInput("risk tolerance must be finite")
        if value < 0:
            raise ValidationError(f"risk tolerance must be >= 0, got {value}")
        object.__setattr__(self, "rho", value)

    @property
    def root_risk(self):
        return math.sqrt(self.rho)


@dataclass(frozen=True)
class SolveOutcome:
    allocation: Allocation
    expected_profit: float
    achieved_risk: float
    lambda1: float
    lambda2: float
    flags: FrozenSet[Flag] = field(default_factory=frozenset)
    discarded_profit: Optional[float] = None
    rho_used: Optional[float] = None


def root_risk(rho):
    """Square root of risk, in BTC+ units."""
    return math.sqrt(_as_rho(rho))


def _as_rho(rho):
    value = float(getattr(rho, "rho", rho))
    if not math.isfinite(value):
        raise NonFiniteInput("risk tolerance must be finite")
    return value


def _as_vector(obj, attr):
    arr = np.asarray(getattr(obj, attr, obj), dtype=float)
    if arr.ndim != 1:
        raise DimensionMismatch(f"expected a vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteInput("vector contains non-finite values")
    return arr


def _as_matrix(obj):
    arr = np.asarray(getattr(obj, "entries", obj), dtype=float)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteInput("volatility matrix contains non-finite values")
    return arr


def _condition_number(sigma):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.linalg.cond(sigma)


def _conditioned(sigma):
    """Returns sigma, or sigma plus a one-off diagonal jitter when it is near singular."""
    cond = _condition_number(sigma)
    if np.isfinite(cond) and cond <= CONDITION_LIMIT:
        return sigma
    jitter = JITTER_SCALE * float(np.mean(np.diag(sigma)))
    if jitter > 0:
        adjusted = sigma + jitter * np.eye(sigma.shape[0])
        cond = _condition_number(adjusted)
        if np.isfinite(cond) and cond <= CONDITION_LIMIT:
            logger.debug(f"Volatility matrix jittered by {jitter:.3g} (condition {cond:.3g})")
            return adjusted
    raise SingularVolatility(f"volatility matrix is singular (condition estimate {cond:.3g})")


def _frontier_terms(mu, sigma):
    n = mu.size
    solved = np.linalg.solve(sigma, np.column_stack([np.ones(n), mu]))
    inv_e, inv_mu = solved[:, 0], solved[:, 1]
    a = float(inv_e.sum())
    b = float(inv_mu.sum())
    c = float(mu @ inv_mu)
    return inv_e, inv_mu, a, b, c


def min_variance_allocation(sigma):
    """Global minimum-variance allocation Sigma^-1 e / a and its risk 1/a."""
    sigma = _conditioned(_as_matrix(sigma))
    inv_e = np.linalg.solve(sigma, np.ones(sigma.shape[0]))
    a = float(inv_e.sum())
    if not a > 0:
        raise SingularVolatility("e' Sigma^-1 e is not positive")
    return Allocation(inv_e / inv_e.sum()), 1.0 / a


def inferred_risk(w, sigma):
    """Risk w' Sigma w of an allocation."""
    weights = _as_vector(w, "weights")
    matrix = _as_matrix(sigma)
    if matrix.shape[0] != weights.size:
        raise DimensionMismatch(f"allocation has {weights.size} chains, volatility matrix {matrix.shape[0]}")
    return max(float(weights @ matrix @ weights), 0.0)


def inferred_risk_batch(w, sigma):
    """Row-wise w(t)' Sigma(t) w(t) for w of shape (T, n) and sigma (T, n, n)."""
    risk = np.einsum("ti,tij,tj->t", np.asarray(w, dtype=float), np.asarray(sigma, dtype=float), np.asarray(w, dtype=float))
    return np.where(np.isnan(risk), np.nan, np.maximum(risk, 0.0))


def expected_profit(w, mu):
    weights = _as_vector(w, "weights")
    profits = _as_vector(mu, "values")
    if weights.size != profits.size:
        raise DimensionMismatch(f"allocation has {weights.size} chains, profit vector {profits.size}")
    return float(weights @ profits)


def _solve_on_frontier(mu, sigma, rho, risk_policy):
    """Closed-form frontier point with both roots evaluated. Returns (w, lambda1, lambda2, flags, discarded, rho)."""
    inv_e, inv_mu, a, b, c = _frontier_terms(mu, sigma)
    if not a > 0:
        raise SingularVolatility("e' Sigma^-1 e is not positive")
    flags = set()
    w_mv = inv_e / a

    k = 1.0 - a * rho
    if k > BOUNDARY_TOL:
        if risk_policy is RiskPolicy.STRICT:
            raise InfeasibleRisk(rho, 1.0 / a)
        rho = 1.0 / a
        k = 0.0
        flags.add(Flag.RISK_CLAMPED)

    gap = a * c - b * b  # >= 0 by Cauchy-Schwarz
    if c <= 0 or abs(gap) < DEGENERATE_TOL * a * c:
        flags.add(Flag.DEGENERATE)
        profit = float(w_mv @ mu)
        return w_mv, 0.0, b / a, flags, profit, rho

    if abs(k) <= BOUNDARY_TOL:
        profit = float(w_mv @ mu)
        return w_mv, math.inf, -math.inf, flags, profit, rho

    root = math.sqrt(gap * -k)
    t = math.sqrt((a * rho - 1.0) / gap)
    z = inv_mu - (b / a) * inv_e

    candidates = []
    for sign in (1.0, -1.0):
        lam2 = b / a + sign * root / (a * k)
        lam1 = 0.5 * (b - a * lam2)
        w = w_mv + sign * t * z
        w = w / w.sum()
        candidates.append((float(w @ mu), w, lam1, lam2))

    plus, minus = candidates
    best, discarded = (minus, plus) if minus[0] > plus[0] else (plus, minus)
    return best[1], best[2], best[3], flags, discarded[0], rho


def _clamp_negative_weights(mu, sigma, rho, w):
    """Active-set zeroing of short positions; for two chains, the nearer vertex."""
    n = w.size
    if n == 2:
        clamped = np.zeros(2)
        clamped[int(np.argmax(w))] = 1.0
        return clamped, set()

    extra_flags = set()
    active = np.arange(n)
    current = w
    while np.any(current < 0):
        active = active[current >= 0]
        if active.size == 1:
            current = np.ones(1)
            break
        sub_sigma = _conditioned(sigma[np.ix_(active, active)])
        current, _, _, sub_flags, _, _ = _solve_on_frontier(mu[active], sub_sigma, rho, RiskPolicy.CLAMP_RISK)
        extra_flags |= sub_flags
    full = np.zeros(n)
    full[active] = current
    return full / full.sum(), extra_flags


def solve_max_profit(mu, sigma, rho, policy=SolvePolicy()):
    """Solves MaxProfit for one miner.

    With the strict risk policy an infeasible rho (below 1/a) raises
    InfeasibleRisk; clamp_risk substitutes 1/a. With clamp_weights, short
    positions are removed by an active-set re-solve and achieved_risk reports
    the true risk of the returned vector.
    """
    profits = _as_vector(mu, "values")
    matrix = _as_matrix(sigma)
    rho_value = _as_rho(rho)
    n = profits.size
    if matrix.shape[0] != n:
        raise DimensionMismatch(f"profit vector has {n} chains, volatility matrix {matrix.shape[0]}")

    if n == 1:
        w = np.ones(1)
        return SolveOutcome(
            allocation=Allocation(w),
            expected_profit=float(profits[0]),
            achieved_risk=max(float(matrix[0, 0]), 0.0),
            lambda1=0.0,
            lambda2=float(profits[0]),
            flags=frozenset({Flag.DEGENERATE}),
            discarded_profit=float(profits[0]),
            rho_used=rho_value,
        )

    conditioned = _conditioned(matrix)
    w, lam1, lam2, flags, discarded, rho_used = _solve_on_frontier(profits, conditioned, rho_value, policy.risk)

    if policy.weights is WeightPolicy.CLAMP_WEIGHTS and np.any(w < 0):
        w, extra = _clamp_negative_weights(profits, conditioned, rho_used, w)
        flags |= extra
        flags.add(Flag.WEIGHTS_CLAMPED)

    return SolveOutcome(
        allocation=Allocation(w),
        expected_profit=float(w @ profits),
        achieved_risk=max(float(w @ matrix @ w), 0.0),
        lambda1=lam1,
        lambda2=lam2,
        flags=frozenset(flags),
        discarded_profit=discarded,
        rho_used=rho_used,
    )


@dataclass
class BatchOutcome:
    """Row-wise results of solve_max_profit_batch; NaN weights where unavailable."""
    weights: np.ndarray
    degenerate: np.ndarray
    risk_clamped: np.ndarray
    weights_clamped: np.ndarray
    singular: np.ndarray
    available: np.ndarray


def solve_max_profit_batch(mu, sigma, rho, policy=PIPELINE_POLICY):
    """Vectorized solve_max_profit over T stacked problems.

    mu is (T, n), sigma is (T, n, n) and rho a scalar or (T,). Rows whose
    inputs contain NaN (not enough history yet) are skipped; rows whose
    volatility matrix stays singular after jitter are marked singular. Both
    leave NaN weights.
    """
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if mu.ndim != 2 or sigma.ndim != 3 or sigma.shape != (mu.shape[0], mu.shape[1], mu.shape[1]):
        raise DimensionMismatch(f"incompatible batch shapes {mu.shape} and {sigma.shape}")
    T, n = mu.shape
    rho = np.broadcast_to(np.asarray(rho, dtype=float), (T,))

    weights = np.full((T, n), np.nan)
    degenerate = np.zeros(T, dtype=bool)
    risk_clamped = np.zeros(T, dtype=bool)
    weights_clamped = np.zeros(T, dtype=bool)
    singular = np.zeros(T, dtype=bool)
    available = np.isfinite(mu).all(axis=1) & np.isfinite(sigma).all(axis=(1, 2)) & np.isfinite(rho)

    if n == 1:
        weights[available] = 1.0
        degenerate[available] = True
        return BatchOutcome(weights, degenerate, risk_clamped, weights_clamped, singular, available)

    rows = np.flatnonzero(available)
    if rows.size == 0:
        return BatchOutcome(weights, degenerate, risk_clamped, weights_clamped, singular, available)

    S = sigma[rows].copy()
    cond = _condition_number(S)
    bad = ~(np.isfinite(cond) & (cond <= CONDITION_LIMIT))
    if bad.any():
        jitter = JITTER_SCALE * np.mean(np.diagonal(S[bad], axis1=1, axis2=2), axis=1)
        S[bad] += jitter[:, None, None] * np.eye(n)
        recond = _condition_number(S[bad])
        still_bad = ~(np.isfinite(recond) & (recond <= CONDITION_LIMIT)) | ~(jitter > 0)
        bad_rows = np.flatnonzero(bad)[still_bad]
        singular[rows[bad_rows]] = True
        keep = np.ones(rows.size, dtype=bool)
        keep[bad_rows] = False
        rows, S = rows[keep], S[keep]
        if rows.size == 0:
            return BatchOutcome(weights, degenerate, risk_clamped, weights_clamped, singular, available)

    m = mu[rows]
    rhs = np.stack([np.ones_like(m), m], axis=2)
    solved = np.linalg.solve(S, rhs)
    inv_e, inv_mu = solved[:, :, 0], solved[:, :, 1]
    a = inv_e.sum(axis=1)
    b = inv_mu.sum(axis=1)
    c = np.einsum("ij,ij->i", m, inv_mu)
    r = rho[rows].copy()

    k = 1.0 - a * r
    infeasible = k > BOUNDARY_TOL
    if infeasible.any():
        if policy.risk is RiskPolicy.STRICT:
            first = int(np.flatnonzero(infeasible)[0])
            raise InfeasibleRisk(float(r[first]), float(1.0 / a[first]))
        r = np.where(infeasible, 1.0 / a, r)
        risk_clamped[rows[infeasible]] = True

    gap = a * c - b * b
    is_degenerate = (c <= 0) | (np.abs(gap) < DEGENERATE_TOL * a * c)
    degenerate[rows[is_degenerate]] = True
    on_boundary = infeasible | (np.abs(1.0 - a * r) <= BOUNDARY_TOL)
    moving = ~(is_degenerate | on_boundary)

    w_mv = inv_e / a[:, None]
    t = np.zeros(rows.size)
    with np.errstate(divide="ignore", invalid="ignore"):
        t[moving] = np.sqrt((a[moving] * r[moving] - 1.0) / gap[moving])
    z = inv_mu - (b / a)[:, None] * inv_e
    w_plus = w_mv + t[:, None] * z
    w_minus = w_mv - t[:, None] * z
    w_plus /= w_plus.sum(axis=1, keepdims=True)
    w_minus /= w_minus.sum(axis=1, keepdims=True)
    take_minus = np.einsum("ij,ij->i", w_minus, m) > np.einsum("ij,ij->i", w_plus, m)
    w = np.where(take_minus[:, None], w_minus, w_plus)

    if policy.weights is WeightPolicy.CLAMP_WEIGHTS:
        negative = np.any(w < 0, axis=1)
        if negative.any():
            weights_clamped[rows[negative]] = True
            if n == 2:
                vertex = np.zeros((int(negative.sum()), 2))
                vertex[np.arange(vertex.shape[0]), np.argmax(w[negative], axis=1)] = 1.0
                w[negative] = vertex
            else:
                for i in np.flatnonzero(negative):
                    outcome = solve_max_profit(m[i], sigma[rows[i]], rho[rows[i]], policy)
                    w[i] = outcome.allocation.weights
                    degenerate[rows[i]] |= Flag.DEGENERATE in outcome.flags
                    risk_clamped[rows[i]] |= Flag.RISK_CLAMPED in outcome.flags

    weights[rows] = w
    return BatchOutcome(weights, degenerate, risk_clamped, weights_clamped, singular, available)
