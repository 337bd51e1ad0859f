"""
Weighted L_p norms, the max-norm and the span seminorms.
span_{p,mu}(u) = 2 min_a ||u - a e||_{p,mu}; the minimisation over the
constant shift runs on values centred at their minimum, with closed forms
for p in {1, 2, inf} and a root find on the derivative otherwise.
"""

import logging
import math
from typing import Optional, Union

import numpy as np
from scipy.optimize import brentq

from mdp_core import LpiError, RowStochasticMatrix

logger = logging.getLogger(__name__)

DISTRIBUTION_TOL = 1e-12
SHIFT_SEARCH_TOL = 1e-14

MatrixLike = Union[RowStochasticMatrix, np.ndarray]


class InvalidDistributionError(LpiError, ValueError):
    """Weights are negative or do not sum to one"""


class SeminormKind:
    """Which (semi)norm a SeminormSpec selects"""
    LP_WEIGHTED = "lp_weighted"
    MAX = "max"
    SPAN_INF = "span_inf"
    SPAN_P_WEIGHTED = "span_p_weighted"
    ALL = (LP_WEIGHTED, MAX, SPAN_INF, SPAN_P_WEIGHTED)


def check_distribution(mu, n_states: Optional[int] = None) -> np.ndarray:
    """Validate a probability vector and return it as a float array"""
    weights = np.asarray(mu, dtype=float)
    if weights.ndim != 1 or weights.size == 0:
        raise InvalidDistributionError("a distribution is a non-empty vector")
    if n_states is not None and weights.size != n_states:
        raise InvalidDistributionError(f"distribution has {weights.size} entries, expected {n_states}")
    if not np.isfinite(weights).all() or (weights < 0.0).any():
        raise InvalidDistributionError("distribution entries must be finite and nonnegative")
    total = weights.sum()
    if abs(total - 1.0) > DISTRIBUTION_TOL:
        raise InvalidDistributionError(f"distribution sums to {total!r}, not 1")
    return weights


def uniform_distribution(n_states: int) -> np.ndarray:
    return np.full(n_states, 1.0 / n_states)


def _check_order(p: float) -> float:
    p = float(p)
    if math.isnan(p) or p < 1.0:
        raise ValueError(f"norm order must be >= 1, got {p!r}")
    return p


def weighted_lp_norm(u, p: float, mu) -> float:
    """(sum_x mu(x) |u(x)|^p)^(1/p); p = inf gives the max over the support of mu"""
    p = _check_order(p)
    values = np.abs(np.asarray(u, dtype=float))
    weights = check_distribution(mu, values.size)
    support = weights > 0.0
    peak = values[support].max() if support.any() else 0.0
    if peak == 0.0:
        return 0.0
    if math.isinf(p):
        return float(peak)
    # scale by the peak so that large p does not overflow
    return float(peak * np.dot(weights, (values / peak) ** p) ** (1.0 / p))


def max_norm(u) -> float:
    return float(np.abs(np.asarray(u, dtype=float)).max())


def span_inf(u) -> float:
    values = np.asarray(u, dtype=float)
    return float(values.max() - values.min())


def _weighted_median(values: np.ndarray, weights: np.ndarray) -> float:
    order = np.argsort(values, kind="stable")
    cumulative = np.cumsum(weights[order])
    index = int(np.searchsorted(cumulative, 0.5 * cumulative[-1]))
    return float(values[order][min(index, values.size - 1)])


def _centred_shift(offsets: np.ndarray, weights: np.ndarray, p: float) -> float:
    """Minimiser of ||offsets - a e||_{p,w} for offsets in [0, 1] with both ends attained"""
    if math.isinf(p):
        return 0.5
    if p == 1.0:
        return _weighted_median(offsets, weights)
    if p == 2.0:
        return float(np.dot(weights, offsets) / weights.sum())

    # the derivative in a is strictly decreasing, positive at 0 and negative at 1
    def slope(a):
        gaps = offsets - a
        return float(np.dot(weights, np.sign(gaps) * np.abs(gaps) ** (p - 1.0)))

    return float(brentq(slope, 0.0, 1.0, xtol=SHIFT_SEARCH_TOL))


def _shift_setup(u, p: float, mu):
    p = _check_order(p)
    values = np.asarray(u, dtype=float)
    weights = check_distribution(mu, values.size)
    support = weights > 0.0
    low, high = float(values[support].min()), float(values[support].max())
    if low == high:
        return p, values - low, weights, low, 0.0, 0.0
    width = high - low
    offsets = (values[support] - low) / width
    return p, values - low, weights, low, width, width * _centred_shift(offsets, weights[support], p)


def span_minimizer(u, p: float, mu) -> float:
    """A constant a minimising ||u - a e||_{p,mu}"""
    _, _, _, low, _, shift = _shift_setup(u, p, mu)
    return low + shift


def span_p(u, p: float, mu) -> float:
    """2 min_a ||u - a e||_{p,mu}, evaluated on values centred at their minimum"""
    p, centred, weights, _, width, shift = _shift_setup(u, p, mu)
    if width == 0.0:
        return 0.0
    return 2.0 * weighted_lp_norm(centred - shift, p, weights)


def mixed_distribution(mu, X: MatrixLike, Xp: MatrixLike) -> np.ndarray:
    """The distribution (1/2) mu (X + X')"""
    weights = check_distribution(mu)
    left = np.asarray(X, dtype=float)
    right = np.asarray(Xp, dtype=float)
    if left.shape != (weights.size, weights.size) or right.shape != left.shape:
        raise ValueError(f"dimension mismatch: mu has {weights.size} entries, "
                         f"matrices are {left.shape} and {right.shape}")
    mixed = 0.5 * (weights @ left + weights @ right)
    mixed[mixed < 0.0] = 0.0
    return mixed / mixed.sum()


class SeminormSpec:
    """Selector for one of ||.||_{p,mu}, ||.||_inf, span_inf, span_{p,mu}"""

    def __init__(self, kind: str, p: float = 2.0, mu=None):
        if kind not in SeminormKind.ALL:
            raise ValueError(f"unknown seminorm kind {kind!r}; expected one of {SeminormKind.ALL}")
        self.kind = kind
        self.p = _check_order(p)
        self.mu = None if mu is None else check_distribution(mu)
        if kind in (SeminormKind.LP_WEIGHTED, SeminormKind.SPAN_P_WEIGHTED) and self.mu is None:
            raise InvalidDistributionError(f"{kind} needs a weight distribution mu")

    def weights(self, n_states: int) -> np.ndarray:
        """mu, or the uniform distribution when none was given"""
        if self.mu is None:
            return uniform_distribution(n_states)
        return check_distribution(self.mu, n_states)

    def evaluate(self, u) -> float:
        if self.kind == SeminormKind.MAX:
            return max_norm(u)
        if self.kind == SeminormKind.SPAN_INF:
            return span_inf(u)
        if self.kind == SeminormKind.LP_WEIGHTED:
            return weighted_lp_norm(u, self.p, self.mu)
        return span_p(u, self.p, self.mu)

    def __str__(self):
        if self.kind in (SeminormKind.MAX, SeminormKind.SPAN_INF):
            return self.kind
        return f"{self.kind}(p={self.p:g})"
