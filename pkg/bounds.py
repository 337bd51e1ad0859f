"""
Bound matrices and numerical certification of the componentwise and
span-seminorm performance bounds of lambda policy iteration.

Every check consumes an enriched IterationTrace (see solvers.enrich_trace)
and returns BoundReports. Componentwise statements about limits are
checked in their finite-horizon form: the recurrences are unrolled from a
base iteration k0 and the terms that vanish as k - k0 grows are kept as an
explicit remainder, so each report is a rigorous inequality on the trace.
"""

import logging
import math
from collections import OrderedDict
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from mdp_core import (
    Mdp,
    NumericalError,
    Policy,
    PolicyLike,
    RowStochasticMatrix,
    TraceIndexError,
    apply_bellman_optimal,
    apply_bellman_policy,
    apply_tlambda,
    as_policy,
    as_value,
    evaluate_policy,
    greedy,
    optimal_value,
    policy_transition_matrix,
    shifted_solve,
)
from seminorms import (
    SeminormKind,
    SeminormSpec,
    check_distribution,
    max_norm,
    mixed_distribution,
    span_inf,
    span_p,
    uniform_distribution,
    weighted_lp_norm,
)

logger = logging.getLogger(__name__)

SLACK_TOL = 1e-8
BOUND_MATRIX_TOL = 1e-8
VALUE_CONVERGENCE_TOL = 1e-8
VALUE_CONVERGENCE_RUN = 5
DEFAULT_WINDOW = 20
DEFAULT_EXACT_HORIZON = 30
PRODUCT_CHECKS = 3
PRODUCT_CHECK_TOL = 1e-10
ERRATUM_NOTE = "literal form; exact runs can violate it, see the .shifted line"


class BoundId:
    """Identifiers of every certified statement"""
    THEXACT = ("thexact.1", "thexact.2", "thexact.3", "thexact.3.shifted")
    TH = ("th.1", "th.2", "th.3")
    VALUE_CONVERGENCE = ("vconverges", "vconverges.span_inf", "vconverges.span_p", "vconverges.nu")
    POLICY_CONVERGENCE = ("piconverges", "piconverges.span_inf", "piconverges.span_p")
    CONVERGENCE = VALUE_CONVERGENCE + POLICY_CONVERGENCE
    CROCLPI = ("croclpi.1", "croclpi.2", "croclpi.3", "croclpi.4", "croclpi.5", "croclpi.6",
               "croclpi.5.shifted", "croclpi.6.shifted")
    CROCNU = ("crocnu.1", "crocnu.2", "crocnu.3", "crocnu.3.shifted")
    STOPEXACT = ("stopexact",)
    SPAPI = ("spapi.1", "spapi.2", "spapi.3", "spapi.4", "spapi.5", "spapi.6")
    CALPI = ("calpi.1", "calpi.2", "calpi.3")
    APPENDIX_A = ("appendixA.policy", "appendixA.greedy")
    IDENTITIES = ("lbg", "lrecg", "lrecd", "dg", "decomposition")
    EXACT_RATES = THEXACT + CROCLPI + CROCNU
    ALL = (THEXACT + TH + CONVERGENCE + CROCLPI + CROCNU + STOPEXACT + SPAPI + CALPI
           + APPENDIX_A + IDENTITIES)
    # literal lines carrying the ||v_* - v^{pi_{k0+1}}|| term; exact runs can
    # violate them and each has a ".shifted" replacement
    ERRATA = ("thexact.3", "croclpi.5", "croclpi.6", "crocnu.3")
    SOUND = tuple(sorted(set(ALL) - set(ERRATA), key=ALL.index))


class ReportStatus:
    CHECKED = "checked"
    VACUOUS = "vacuous"
    NOT_APPLICABLE = "not_applicable"


def _as_quantity(value):
    if np.ndim(value) == 0:
        return float(value)
    array = np.array(value, dtype=float)
    array.setflags(write=False)
    return array


class BoundReport:
    """Outcome of checking one inequality lhs <= rhs (componentwise for vectors)"""

    def __init__(self, bound_id: str, lhs, rhs, status: str = ReportStatus.CHECKED,
                 note: str = "", k: Optional[int] = None, equality: bool = False):
        self.bound_id = bound_id
        self.lhs = _as_quantity(lhs)
        self.rhs = _as_quantity(rhs)
        self.status = status
        self.note = note
        self.k = k
        rhs_norm = float(np.max(np.abs(self.rhs)))
        self.tolerance = SLACK_TOL * (1.0 + rhs_norm)
        if status == ReportStatus.CHECKED:
            gap = np.asarray(self.rhs) - np.asarray(self.lhs)
            # an equality only has slack through its largest deviation
            self.slack = -float(np.max(np.abs(gap))) if equality else float(np.min(gap))
            self.satisfied = bool(self.slack >= -self.tolerance)
        else:
            self.slack = math.inf if status == ReportStatus.VACUOUS else 0.0
            self.satisfied = True

    @property
    def margin(self) -> float:
        """slack beyond the tolerance; negative exactly when unsatisfied"""
        return self.slack + self.tolerance

    @classmethod
    def not_applicable(cls, bound_id: str, note: str) -> "BoundReport":
        return cls(bound_id, 0.0, 0.0, status=ReportStatus.NOT_APPLICABLE, note=note)

    @classmethod
    def vacuous(cls, bound_id: str, lhs, note: str) -> "BoundReport":
        return cls(bound_id, lhs, math.inf, status=ReportStatus.VACUOUS, note=note)

    def __str__(self):
        verdict = "ok" if self.satisfied else "VIOLATED"
        where = f" at k={self.k}" if self.k is not None else ""
        return f"{self.bound_id}{where}: {self.status}, slack {self.slack:.3g} ({verdict})"


def summarize_reports(reports: Iterable[BoundReport]) -> List[BoundReport]:
    """Keep the tightest report per bound id, in first-seen order"""
    best: "OrderedDict[str, BoundReport]" = OrderedDict()
    rank = {ReportStatus.CHECKED: 0, ReportStatus.VACUOUS: 1, ReportStatus.NOT_APPLICABLE: 2}
    for report in reports:
        current = best.get(report.bound_id)
        if current is None:
            best[report.bound_id] = report
            continue
        key = (rank[report.status], report.margin)
        if key < (rank[current.status], current.margin):
            best[report.bound_id] = report
    return list(best.values())


def _tightest(bound_id: str, pairs: Sequence[Tuple[int, object, object]], equality: bool = False,
              note: str = "") -> BoundReport:
    if not pairs:
        return BoundReport.not_applicable(bound_id, note or "no iterations to check")
    reports = [BoundReport(bound_id, lhs, rhs, k=k, equality=equality, note=note) for k, lhs, rhs in pairs]
    return min(reports, key=lambda report: report.margin)


class ConcentrationCoefficient:
    """C(nu) = max over (i, j, a) of p_ij(a) / nu(j)"""

    def __init__(self, nu, value: float):
        self.nu = np.array(nu, dtype=float)
        self.nu.setflags(write=False)
        self.value = float(value)

    @property
    def finite(self) -> bool:
        return math.isfinite(self.value)

    def factor(self, p: float) -> float:
        """C(nu)^(1/p)"""
        if math.isinf(p):
            return 1.0
        return self.value ** (1.0 / p)

    def __str__(self):
        return f"C(nu)={self.value:g}"


def beta(lam: float, gamma: float) -> float:
    """(1 - lambda) gamma / (1 - lambda gamma)"""
    lam, gamma = float(lam), float(gamma)
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda out of [0,1]: {lam!r}")
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0,1): {gamma!r}")
    return (1.0 - lam) * gamma / (1.0 - lam * gamma)


def _a_entries(transition: np.ndarray, lam: float, gamma: float) -> np.ndarray:
    if lam == 0.0:
        return transition.copy()
    return (1.0 - lam * gamma) * shifted_solve(transition, lam * gamma, transition)


def matrix_A(mdp: Mdp, pi: PolicyLike, lam: float) -> RowStochasticMatrix:
    """A = (1 - lambda gamma)(I - lambda gamma P^pi)^-1 P^pi"""
    beta(lam, mdp.gamma)
    transition = policy_transition_matrix(mdp, pi).entries
    return RowStochasticMatrix(_a_entries(transition, float(lam), mdp.gamma))


def bellman_residual(mdp: Mdp, v) -> np.ndarray:
    """T v - v"""
    values = as_value(mdp, v)
    return apply_bellman_optimal(mdp, values) - values


def policy_bellman_residual(mdp: Mdp, pi: PolicyLike, v) -> np.ndarray:
    """T^pi v - v"""
    values = as_value(mdp, v)
    return apply_bellman_policy(mdp, pi, values) - values


def concentration(mdp: Mdp, nu) -> ConcentrationCoefficient:
    weights = check_distribution(nu, mdp.n_states)
    positive = mdp.transitions > 0.0
    reachable = positive.any(axis=(0, 1))
    if (reachable & (weights == 0.0)).any():
        return ConcentrationCoefficient(weights, math.inf)
    safe = np.where(weights > 0.0, weights, 1.0)
    ratios = np.where(positive, mdp.transitions / safe, 0.0)
    return ConcentrationCoefficient(weights, float(ratios.max()))


def stopping_test(mdp: Mdp, v, epsilon: float) -> bool:
    """span_inf(T v - v) <= (1 - gamma)/gamma * epsilon"""
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon!r}")
    threshold = (1.0 - mdp.gamma) / mdp.gamma * epsilon
    return span_inf(bellman_residual(mdp, v)) <= threshold


class TraceMatrices:
    """
    Per-iteration matrices of one enriched trace, built on demand.

    Index k refers to the trace's iteration k; policy(last + 1) is the
    greedy policy of the final iterate. product(hi, lo) is the running
    product A_hi A_{hi-1} ... A_{lo+1} (identity when hi == lo), extended
    one factor at a time and cached.
    """

    def __init__(self, trace, mdp: Mdp, lam: Optional[float] = None):
        self.trace = trace
        self.mdp = mdp
        self.lam = trace.lam if lam is None else float(lam)
        self.gamma = mdp.gamma
        self.last = len(trace) - 1
        if trace.optimal_value is not None:
            self.v_star, self.pi_star = trace.optimal_value, trace.optimal_policy
        else:
            self.v_star, self.pi_star = optimal_value(mdp)
        self.p_star = policy_transition_matrix(mdp, self.pi_star).entries
        self.identity = np.eye(mdp.n_states)
        self._policies: Dict[int, Policy] = {}
        self._transitions: Dict[int, np.ndarray] = {}
        self._a: Dict[int, np.ndarray] = {}
        self._resolvents: Dict[int, np.ndarray] = {}
        self._losses: Dict[int, np.ndarray] = {}
        self._products: Dict[Tuple[int, int], np.ndarray] = {}
        self._star_powers: List[np.ndarray] = [self.identity]
        self._star_resolvent: Optional[np.ndarray] = None

    @property
    def beta(self) -> float:
        if self.lam is None:
            raise ValueError("this trace carries no lambda")
        return beta(self.lam, self.gamma)

    def record(self, k: int):
        if not 0 <= k <= self.last:
            raise TraceIndexError(f"iteration {k} outside trace range 0..{self.last}")
        return self.trace[k]

    def policy(self, k: int) -> Policy:
        if k not in self._policies:
            if k == self.last + 1:
                self._policies[k] = greedy(self.mdp, self.trace[self.last].value)
            else:
                policy = self.record(k).policy
                if policy is None:
                    raise TraceIndexError(f"iteration {k} has no policy")
                self._policies[k] = policy
        return self._policies[k]

    def has_policy(self, k: int) -> bool:
        return 0 <= k <= self.last + 1 and (k == self.last + 1 or self.trace[k].policy is not None)

    def transition(self, k: int) -> np.ndarray:
        if k not in self._transitions:
            self._transitions[k] = policy_transition_matrix(self.mdp, self.policy(k)).entries
        return self._transitions[k]

    def A(self, k: int) -> np.ndarray:
        if k not in self._a:
            self._a[k] = _a_entries(self.transition(k), self.lam, self.gamma)
        return self._a[k]

    def resolvent(self, k: int) -> np.ndarray:
        """(I - gamma P_k)^-1"""
        if k not in self._resolvents:
            self._resolvents[k] = shifted_solve(self.transition(k), self.gamma, self.identity)
        return self._resolvents[k]

    def star_resolvent(self) -> np.ndarray:
        """(I - gamma P_*)^-1"""
        if self._star_resolvent is None:
            self._star_resolvent = shifted_solve(self.p_star, self.gamma, self.identity)
        return self._star_resolvent

    def star_power(self, m: int) -> np.ndarray:
        while len(self._star_powers) <= m:
            self._star_powers.append(self.p_star @ self._star_powers[-1])
        return self._star_powers[m]

    def product(self, hi: int, lo: int) -> np.ndarray:
        if hi < lo:
            raise TraceIndexError(f"empty product range ({lo}, {hi}]")
        result = self.identity
        for i in range(lo + 1, hi + 1):
            cached = self._products.get((i, lo))
            if cached is None:
                cached = self.A(i) @ result
                self._products[(i, lo)] = cached
            result = cached
        return result

    def verify_products(self, count: int = PRODUCT_CHECKS, seed: int = 0):
        """Recompute a few cached running products from scratch"""
        keys = sorted(key for key in self._products if key[0] - key[1] > 1)
        if not keys:
            return
        rng = np.random.default_rng(seed)
        for index in rng.choice(len(keys), size=min(count, len(keys)), replace=False):
            hi, lo = keys[int(index)]
            direct = self.identity
            for i in range(hi, lo, -1):
                direct = direct @ self.A(i)
            error = np.abs(direct - self._products[(hi, lo)]).max()
            if error > PRODUCT_CHECK_TOL:
                raise NumericalError(f"running product A_{hi}..A_{lo + 1} drifted by {error:.3g}")

    def loss(self, k: int) -> np.ndarray:
        """v_* - v^{pi_k}"""
        if k not in self._losses:
            stored = self.trace[k].loss if k <= self.last else None
            if stored is None:
                stored = self.v_star - evaluate_policy(self.mdp, self.policy(k))
            self._losses[k] = stored
        return self._losses[k]

    def error_propagation(self, j: int, k: int) -> np.ndarray:
        """
        B_jk, the stochastic matrix carrying the error made at iteration j
        to the loss at iteration k > j (it is also E'_{kj}).
        """
        gamma, lam = self.gamma, self.lam
        ratio = self.beta / gamma
        total = (1.0 - gamma) * ratio ** (k - j) * (self.resolvent(k) @ self.product(k, j))
        weight = (1.0 - gamma) * lam / (1.0 - lam * gamma)
        if weight > 0.0:
            for i in range(j, k):
                total = total + weight * ratio ** (i - j) * (self.star_power(k - 1 - i) @ self.product(i + 1, j))
        return total

    def remainder(self, k0: int, k: int) -> np.ndarray:
        """Terms of the unrolled loss bound that depend only on iteration k0"""
        gamma = self.gamma
        base = self.record(k0)
        gap = self.v_star - base.value
        carried = self.error_propagation(k0, k) @ (-base.bellman_residual) / (1.0 - gamma)
        return gamma ** (k - k0) * (self.star_power(k - k0) @ gap + carried)


def _check_pair(tm: TraceMatrices, lo: int, hi: int):
    if not 0 <= lo < hi <= tm.last:
        raise TraceIndexError(f"need 0 <= {lo} < {hi} <= {tm.last}")


def _exact_entries(tm: TraceMatrices, k0: int, k: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    gamma, m = tm.gamma, k - k0
    propagated = tm.error_propagation(k0, k)
    e_matrix = (1.0 - gamma) * tm.star_power(m) @ tm.star_resolvent()
    f_matrix = (1.0 - gamma) * tm.star_power(m) + gamma * propagated @ tm.p_star
    return e_matrix, propagated, f_matrix


def exact_rate_matrices(trace, mdp: Mdp, k0: int, k: int,
                        lam: Optional[float] = None) -> Tuple[RowStochasticMatrix, ...]:
    """(E_kk0, E'_kk0, F_kk0) for an exact trace and k > k0"""
    tm = TraceMatrices(trace, mdp, lam)
    _check_pair(tm, k0, k)
    return tuple(RowStochasticMatrix(m, tol=BOUND_MATRIX_TOL) for m in _exact_entries(tm, k0, k))


def _approx_entries(tm: TraceMatrices, j: int, k: int) -> Tuple[np.ndarray, ...]:
    gamma = tm.gamma
    squared = (1.0 - gamma) ** 2
    b_matrix = tm.error_propagation(j, k)
    b_prime = gamma * b_matrix @ tm.transition(j) + (1.0 - gamma) * tm.star_power(k - j)
    c_matrix = squared * tm.star_resolvent() @ tm.p_star @ tm.resolvent(k)
    c_prime = squared * tm.star_resolvent() @ tm.transition(k + 1) @ tm.resolvent(k + 1)
    d_matrix = (1.0 - gamma) * tm.p_star @ tm.star_resolvent()
    d_prime = (1.0 - gamma) * tm.transition(k) @ tm.resolvent(k)
    return b_matrix, b_prime, c_matrix, c_prime, d_matrix, d_prime


def approx_bound_matrices(trace, mdp: Mdp, j: int, k: int,
                          lam: Optional[float] = None) -> Tuple[RowStochasticMatrix, ...]:
    """(B_jk, B'_jk, C_k, C'_k, D, D'_k) for k > j"""
    tm = TraceMatrices(trace, mdp, lam)
    _check_pair(tm, j, k)
    return tuple(RowStochasticMatrix(m, tol=BOUND_MATRIX_TOL) for m in _approx_entries(tm, j, k))


def _value_convergence_entries(transition: np.ndarray, p_star: np.ndarray, lam: float,
                               gamma: float) -> Tuple[np.ndarray, np.ndarray]:
    own = shifted_solve(transition, gamma, transition)
    star = shifted_solve(p_star, gamma, transition)
    b_v = (1.0 - gamma) * ((1.0 - lam) * own + lam * star)
    d_matrix = (1.0 - gamma) * p_star @ shifted_solve(p_star, gamma, np.eye(p_star.shape[0]))
    return b_v, d_matrix


class _PolicyConvergenceAlgebra:
    """Matrices of the converged-policy bound; they depend on k - j only"""

    def __init__(self, transition: np.ndarray, p_star: np.ndarray, lam: float, gamma: float):
        self.transition = transition
        self.p_star = p_star
        self.lam = lam
        self.gamma = gamma
        n = transition.shape[0]
        self.identity = np.eye(n)
        self.a_matrix = _a_entries(transition, lam, gamma)
        self.resolvent = shifted_solve(transition, gamma, self.identity)
        self.lambda_resolvent = shifted_solve(transition, lam * gamma, self.identity)
        self._a_powers = [self.identity]
        self._star_powers = [self.identity]
        self._cache: Dict[int, Tuple[np.ndarray, np.ndarray, np.ndarray]] = {}

    def _power(self, powers: List[np.ndarray], base: np.ndarray, m: int) -> np.ndarray:
        while len(powers) <= m:
            powers.append(base @ powers[-1])
        return powers[m]

    def matrices(self, distance: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(A^pi_jk, B^pi_jk, B'^pi_jk) for k - j = distance >= 1"""
        if distance not in self._cache:
            gamma, lam = self.gamma, self.lam
            ratio = beta(lam, gamma) / gamma
            weight = (1.0 - gamma) * lam / (1.0 - lam * gamma)
            a_jk = (1.0 - gamma) * ratio ** distance * (
                self.resolvent @ self._power(self._a_powers, self.a_matrix, distance - 1))
            if weight > 0.0:
                for t in range(distance):
                    a_jk = a_jk + weight * ratio ** t * (
                        self._power(self._star_powers, self.p_star, distance - 1 - t)
                        @ self._power(self._a_powers, self.a_matrix, t))
            b_jk = a_jk @ self.transition
            coupling = (1.0 - lam * gamma) * gamma * (1.0 - lam) / (1.0 - gamma)
            b_prime = (1.0 - gamma) / (1.0 - lam * gamma) * (
                self._power(self._star_powers, self.p_star, distance)
                + coupling * a_jk @ self.lambda_resolvent @ self.transition @ self.transition)
            self._cache[distance] = (a_jk, b_jk, b_prime)
        return self._cache[distance]


def convergence_case_matrices(mdp: Mdp, pi: PolicyLike, lam: float, j: int, k: int,
                              optimal_policy: Optional[PolicyLike] = None) -> Tuple[RowStochasticMatrix, ...]:
    """(B_v, D, A^pi, A^pi_jk, B^pi_jk, B'^pi_jk) for a limit policy pi and k > j"""
    if not k > j:
        raise TraceIndexError(f"need k > j, got j={j}, k={k}")
    beta(lam, mdp.gamma)
    if optimal_policy is None:
        _, optimal_policy = optimal_value(mdp)
    transition = policy_transition_matrix(mdp, pi).entries
    p_star = policy_transition_matrix(mdp, as_policy(mdp, optimal_policy)).entries
    b_v, d_matrix = _value_convergence_entries(transition, p_star, float(lam), mdp.gamma)
    algebra = _PolicyConvergenceAlgebra(transition, p_star, float(lam), mdp.gamma)
    a_jk, b_jk, b_prime = algebra.matrices(k - j)
    return tuple(RowStochasticMatrix(m, tol=BOUND_MATRIX_TOL)
                 for m in (b_v, d_matrix, algebra.a_matrix, a_jk, b_jk, b_prime))


def _not_applicable(ids: Iterable[str], note: str) -> List[BoundReport]:
    return [BoundReport.not_applicable(bound_id, note) for bound_id in ids]


def _exact_trace_problem(trace) -> Optional[str]:
    if trace.lam is None:
        return "trace is not a lambda policy iteration run"
    if not trace.is_exact:
        return "trace carries approximation errors"
    return None


def _shift_to_increasing(tm: TraceMatrices, k0: int) -> float:
    """
    K = max(-b_{k0}) / (1 - gamma). Restarting from v_{k0} - K e gives the
    same policies and a nonnegative Bellman residual, so that
    v_* - v^{pi_k} <= gamma^m P_*^m (v_* - v_{k0} + K e) for k > k0.
    """
    return float(np.max(-tm.record(k0).bellman_residual)) / (1.0 - tm.gamma)


def _exact_rate_reports(tm: TraceMatrices, k0: int, k: int,
                        entries: Optional[Tuple[np.ndarray, ...]] = None) -> List[BoundReport]:
    e_matrix, e_prime, f_matrix = entries or _exact_entries(tm, k0, k)
    gamma, m = tm.gamma, k - k0
    factor = gamma ** m / (1.0 - gamma)
    base = tm.record(k0)
    gap = tm.v_star - base.value
    loss = tm.loss(k)
    next_loss = max_norm(tm.loss(k0 + 1))
    pushed_gap = tm.star_power(m) @ gap
    first = factor * (f_matrix - e_prime) @ gap
    second = factor * (e_matrix - e_prime) @ base.bellman_residual
    third = gamma ** m * (pushed_gap - gap.min()) + next_loss
    shifted = gamma ** m * (pushed_gap + _shift_to_increasing(tm, k0))
    return [BoundReport("thexact.1", loss, first, k=k),
            BoundReport("thexact.2", loss, second, k=k),
            BoundReport("thexact.3", loss, third, k=k, note=ERRATUM_NOTE),
            BoundReport("thexact.3.shifted", loss, shifted, k=k)]


def check_exact_rate_bounds(trace, mdp: Mdp, k0: int, k: int) -> List[BoundReport]:
    """The three componentwise exact-rate inequalities between iterations k0 < k"""
    problem = _exact_trace_problem(trace)
    if problem:
        return _not_applicable(BoundId.THEXACT, problem)
    tm = TraceMatrices(trace, mdp)
    _check_pair(tm, k0, k)
    return _exact_rate_reports(tm, k0, k)


def _exact_seminorm_reports(tm: TraceMatrices, k0: int, k: int, p: float, mu: np.ndarray,
                            coefficient: ConcentrationCoefficient,
                            entries: Tuple[np.ndarray, ...]) -> List[BoundReport]:
    e_matrix, e_prime, f_matrix = entries
    gamma, m = tm.gamma, k - k0
    factor = gamma ** m / (1.0 - gamma)
    base = tm.record(k0)
    gap = tm.v_star - base.value
    residual = base.bellman_residual
    raised = gap + _shift_to_increasing(tm, k0)
    loss = tm.loss(k)
    loss_p, loss_inf = weighted_lp_norm(loss, p, mu), max_norm(loss)
    next_loss = max_norm(tm.loss(k0 + 1))
    pushed = mu @ tm.star_power(m)
    pushed = np.clip(pushed, 0.0, None) / pushed.sum()

    reports = [
        BoundReport("croclpi.1", loss_p, factor * span_p(gap, p, mixed_distribution(mu, f_matrix, e_prime)), k=k),
        BoundReport("croclpi.2", loss_inf, factor * span_inf(gap), k=k),
        BoundReport("croclpi.3", loss_p,
                    factor * span_p(residual, p, mixed_distribution(mu, e_matrix, e_prime)), k=k),
        BoundReport("croclpi.4", loss_inf, factor * span_inf(residual), k=k),
        BoundReport("croclpi.5", loss_p, gamma ** m * (weighted_lp_norm(gap - gap.min(), p, pushed) + next_loss),
                    k=k, note=ERRATUM_NOTE),
        BoundReport("croclpi.6", loss_inf, gamma ** m * (span_inf(gap) + next_loss), k=k, note=ERRATUM_NOTE),
        BoundReport("croclpi.5.shifted", loss_p, gamma ** m * weighted_lp_norm(raised, p, pushed), k=k),
        BoundReport("croclpi.6.shifted", loss_inf, gamma ** m * float(raised.max()), k=k),
    ]
    if not coefficient.finite:
        reports += [BoundReport.vacuous(bound_id, loss_inf, "C(nu) is infinite") for bound_id in BoundId.CROCNU]
    else:
        nu, root = coefficient.nu, coefficient.factor(p)
        scale = factor * root
        reports += [
            BoundReport("crocnu.1", loss_inf, scale * span_p(gap, p, nu), k=k),
            BoundReport("crocnu.2", loss_inf, scale * span_p(residual, p, nu), k=k),
            BoundReport("crocnu.3", loss_inf, gamma ** m * root * (span_p(gap, p, nu) + next_loss),
                        k=k, note=ERRATUM_NOTE),
            BoundReport("crocnu.3.shifted", loss_inf, gamma ** m * root * weighted_lp_norm(raised, p, nu), k=k),
        ]
    return reports


def check_exact_rate_suite(trace, mdp: Mdp, max_k: int = DEFAULT_EXACT_HORIZON,
                           spec: Optional[SeminormSpec] = None, nu=None) -> List[BoundReport]:
    """
    Exact-rate inequalities (componentwise, weighted span and C(nu) forms)
    over every pair k0 < k <= max_k, keeping the tightest report per id.
    """
    problem = _exact_trace_problem(trace)
    if problem:
        return _not_applicable(BoundId.EXACT_RATES, problem)
    tm = TraceMatrices(trace, mdp)
    horizon = min(max_k, tm.last)
    if horizon < 1:
        return _not_applicable(BoundId.EXACT_RATES, "trace has a single iterate")
    p, mu, coefficient = _norm_setup(mdp, spec, nu)
    reports = []
    for k in range(1, horizon + 1):
        for k0 in range(k):
            entries = _exact_entries(tm, k0, k)
            reports += _exact_rate_reports(tm, k0, k, entries)
            reports += _exact_seminorm_reports(tm, k0, k, p, mu, coefficient, entries)
    tm.verify_products(seed=trace.seed)
    return summarize_reports(reports)


def _norm_setup(mdp: Mdp, spec: Optional[SeminormSpec], nu) -> Tuple[float, np.ndarray, ConcentrationCoefficient]:
    spec = spec or SeminormSpec(SeminormKind.SPAN_P_WEIGHTED, 2.0, uniform_distribution(mdp.n_states))
    nu = uniform_distribution(mdp.n_states) if nu is None else check_distribution(nu, mdp.n_states)
    return spec.p, spec.weights(mdp.n_states), concentration(mdp, nu)


def _policy_residual_step(tm: TraceMatrices, j: int) -> np.ndarray:
    """gamma (P_* R_j - P_{j+1} R_{j+1}) (T_j v_j - v_j)"""
    residual = tm.record(j).policy_bellman_residual
    return tm.gamma * (tm.p_star @ (tm.resolvent(j) @ residual)
                       - tm.transition(j + 1) @ (tm.resolvent(j + 1) @ residual))


def _greedy_loss_bound(tm: TraceMatrices, k: int) -> np.ndarray:
    """gamma/(1-gamma) (D - D'_k)(T v_{k-1} - v_{k-1})"""
    gamma = tm.gamma
    residual = tm.record(k - 1).bellman_residual
    return gamma * (tm.p_star @ (tm.star_resolvent() @ residual)
                    - tm.transition(k) @ (tm.resolvent(k) @ residual))


def _window(tm: TraceMatrices, k0: int, window: int) -> List[int]:
    return [k for k in range(tm.last - window + 1, tm.last + 1) if k > k0 and k >= 1]


def check_approx_bounds(trace, mdp: Mdp, k0: int, window: int) -> List[BoundReport]:
    """
    The error-sum, Policy Bellman residual and Bellman residual bounds,
    evaluated over the final `window` iterations with k0 as unrolling base.
    """
    if window < 1 or k0 < 0 or len(trace) < k0 + window:
        raise TraceIndexError(f"trace of length {len(trace)} cannot hold k0={k0} and window={window}")
    if trace.lam is None:
        return _not_applicable(BoundId.TH, "trace is not a lambda policy iteration run")
    tm = TraceMatrices(trace, mdp)
    ks = _window(tm, k0, window)
    gamma = tm.gamma

    # error-sum bound
    losses, bounds = [], []
    for k in ks:
        total = tm.remainder(k0, k)
        for j in range(k0 + 1, k):
            b_matrix, b_prime, *_ = _approx_entries(tm, j, k)
            total = total + gamma ** (k - j) / (1.0 - gamma) * (b_matrix - b_prime) @ tm.record(j).error
        losses.append(tm.loss(k))
        bounds.append(total)
    reports = []
    if ks:
        reports.append(BoundReport("th.1", np.max(losses, axis=0), np.max(bounds, axis=0), k=tm.last))
    else:
        reports.append(BoundReport.not_applicable("th.1", "window holds no iteration after k0"))

    # policy Bellman residual bound: the per-step terms are replaced by
    # their componentwise maximum over the window and summed exactly
    base = k0 if tm.has_policy(k0) else k0 + 1
    ks_policy = [k for k in ks if k > base]
    if ks_policy:
        steps = [_policy_residual_step(tm, j) for j in range(base, tm.last)]
        worst = np.max(steps, axis=0)
        resolved = tm.star_resolvent() @ worst
        bounds = [resolved + gamma ** (k - base) * tm.star_power(k - base) @ (tm.loss(base) - resolved)
                  for k in ks_policy]
        reports.append(BoundReport("th.2", np.max([tm.loss(k) for k in ks_policy], axis=0),
                                   np.max(bounds, axis=0), k=tm.last))
    else:
        reports.append(BoundReport.not_applicable("th.2", "window holds no iteration after the base policy"))

    reports.append(_tightest("th.3", [(k, tm.loss(k), _greedy_loss_bound(tm, k)) for k in ks]))
    tm.verify_products(seed=trace.seed)
    return reports


def check_residual_lemmas(trace, mdp: Mdp) -> List[BoundReport]:
    """One-step loss recurrences in terms of the two Bellman residuals"""
    tm = TraceMatrices(trace, mdp)
    with_policy = [k for k in range(tm.last + 1) if tm.has_policy(k)]
    policy_pairs = []
    for j in with_policy:
        if j + 1 <= tm.last:
            rhs = tm.gamma * tm.p_star @ tm.loss(j) + _policy_residual_step(tm, j)
            policy_pairs.append((j + 1, tm.loss(j + 1), rhs))
    greedy_pairs = [(k, tm.loss(k), _greedy_loss_bound(tm, k)) for k in range(1, tm.last + 1)]
    return [_tightest("appendixA.policy", policy_pairs), _tightest("appendixA.greedy", greedy_pairs)]


def check_trace_identities(trace, mdp: Mdp) -> List[BoundReport]:
    """
    Relations between shift, distance and Bellman residual that hold at
    every iteration of a lambda policy iteration run, noisy or not.
    """
    if trace.lam is None:
        return _not_applicable(BoundId.IDENTITIES, "trace is not a lambda policy iteration run")
    tm = TraceMatrices(trace, mdp)
    gamma, lam, factor = tm.gamma, tm.lam, tm.beta
    shift_pairs, residual_pairs, distance_pairs, bias_pairs, split_pairs = [], [], [], [], []
    for k in range(tm.last + 1):
        current = tm.record(k)
        bias_pairs.append((k, (tm.identity - gamma * tm.p_star) @ (tm.v_star - current.value),
                           current.bellman_residual))
        if current.loss is not None:
            split_pairs.append((k, current.loss, current.distance + current.shift))
        if k == 0:
            continue
        previous = tm.record(k - 1)
        a_matrix = tm.A(k)
        shift_pairs.append((k, current.shift,
                            factor * tm.resolvent(k) @ (a_matrix @ (-previous.bellman_residual))))
        drift = (gamma * tm.transition(k) - tm.identity) @ current.error
        residual_pairs.append((k, factor * a_matrix @ previous.bellman_residual + drift,
                               current.bellman_residual))
        carried = (gamma * tm.p_star @ previous.distance
                   + lam * gamma / (1.0 - lam * gamma) * a_matrix @ (-previous.bellman_residual)
                   - gamma * tm.p_star @ previous.error)
        distance_pairs.append((k, current.distance, carried))
    return [_tightest("lbg", shift_pairs, equality=True),
            _tightest("lrecg", residual_pairs),
            _tightest("lrecd", distance_pairs),
            _tightest("dg", bias_pairs),
            _tightest("decomposition", split_pairs, equality=True)]


def check_stopping(trace, mdp: Mdp, epsilon: float) -> List[BoundReport]:
    """Every iterate passing the span test must have an epsilon-optimal greedy policy"""
    tm = TraceMatrices(trace, mdp)
    pairs = []
    for k in range(tm.last + 1):
        if stopping_test(mdp, tm.record(k).value, epsilon):
            pairs.append((k, max_norm(tm.loss(k + 1)), epsilon))
    if not pairs:
        return [BoundReport.not_applicable("stopexact", f"no iterate passed the span test at {epsilon:g}")]
    return [_tightest("stopexact", pairs)]


def _value_converged(trace) -> bool:
    last = len(trace) - 1
    if last < VALUE_CONVERGENCE_RUN:
        return False
    return all(span_inf(trace[k].value - trace[k - 1].value) < VALUE_CONVERGENCE_TOL
               for k in range(last - VALUE_CONVERGENCE_RUN + 1, last + 1))


def check_convergence_case_bounds(trace, mdp: Mdp, window: int = DEFAULT_WINDOW,
                                  spec: Optional[SeminormSpec] = None, nu=None) -> List[BoundReport]:
    """
    Sharper bounds when the values or the policies settle. Undetected
    cases come back as not-applicable reports.
    """
    if trace.lam is None:
        return _not_applicable(BoundId.CONVERGENCE, "trace is not a lambda policy iteration run")
    tm = TraceMatrices(trace, mdp)
    gamma, lam = tm.gamma, tm.lam
    p, mu, coefficient = _norm_setup(mdp, spec, nu)
    reports = []

    if _value_converged(trace):
        value = trace[tm.last].value
        policy = tm.policy(tm.last + 1)
        # the limit satisfies v = T_lambda v + eps exactly for this eps
        error = value - apply_tlambda(mdp, policy, lam, value)
        loss = tm.loss(tm.last + 1)
        b_v, d_matrix = _value_convergence_entries(tm.transition(tm.last + 1), tm.p_star, lam, gamma)
        factor = gamma / (1.0 - gamma)
        reports += [
            BoundReport("vconverges", loss, factor * (b_v - d_matrix) @ error, k=tm.last),
            BoundReport("vconverges.span_inf", max_norm(loss), factor * span_inf(error), k=tm.last),
            BoundReport("vconverges.span_p", weighted_lp_norm(loss, p, mu),
                        factor * span_p(error, p, mixed_distribution(mu, b_v, d_matrix)), k=tm.last),
        ]
        if coefficient.finite:
            reports.append(BoundReport("vconverges.nu", max_norm(loss),
                                       factor * coefficient.factor(p) * span_p(error, p, coefficient.nu),
                                       k=tm.last))
        else:
            reports.append(BoundReport.vacuous("vconverges.nu", max_norm(loss), "C(nu) is infinite"))
    else:
        reports += _not_applicable(BoundId.VALUE_CONVERGENCE, "values did not converge")

    span = min(window, tm.last)
    tail = [trace[k].policy for k in range(tm.last - span + 1, tm.last + 1)]
    if span >= 2 and all(policy is not None and policy == tail[0] for policy in tail):
        reports += _policy_convergence_reports(tm, tm.last - span, p, mu)
    else:
        reports += _not_applicable(BoundId.POLICY_CONVERGENCE, "policy did not settle over the window")
    return reports


def _policy_convergence_reports(tm: TraceMatrices, k0: int, p: float, mu: np.ndarray) -> List[BoundReport]:
    """Unrolled loss bound for a settled policy, componentwise and in two seminorms"""
    gamma, lam = tm.gamma, tm.lam
    algebra = _PolicyConvergenceAlgebra(tm.transition(tm.last), tm.p_star, lam, gamma)
    scale = (1.0 - lam * gamma) / (1.0 - gamma)
    # sum_{j} gamma^{k-j} over k0 < j < k is below gamma / (1 - gamma)
    tail_factor = gamma * scale / (1.0 - gamma)
    pairs, max_pairs, weighted_pairs = [], [], []
    for k in range(k0 + 1, tm.last + 1):
        remainder = tm.remainder(k0, k)
        total = remainder
        spans_inf, spans_p = [0.0], [0.0]
        for j in range(k0 + 1, k):
            _, b_jk, b_prime = algebra.matrices(k - j)
            error = tm.record(j).error
            total = total + scale * gamma ** (k - j) * (b_jk - b_prime) @ error
            spans_inf.append(span_inf(error))
            spans_p.append(span_p(error, p, mixed_distribution(mu, b_jk, b_prime)))
        loss = tm.loss(k)
        pairs.append((k, loss, total))
        max_pairs.append((k, max_norm(loss), float(remainder.max()) + tail_factor * max(spans_inf)))
        weighted_pairs.append((k, weighted_lp_norm(loss, p, mu),
                               weighted_lp_norm(np.clip(remainder, 0.0, None), p, mu)
                               + tail_factor * max(spans_p)))
    return [_tightest("piconverges", pairs),
            _tightest("piconverges.span_inf", max_pairs),
            _tightest("piconverges.span_p", weighted_pairs)]


def _approx_seminorm_reports(tm: TraceMatrices, window: int, p: float, mu: np.ndarray,
                             coefficient: ConcentrationCoefficient) -> List[BoundReport]:
    trace = tm.trace
    span = min(window, tm.last)
    ks = [k for k in range(tm.last - span + 1, tm.last + 1) if k >= 1]
    if not ks:
        return _not_applicable(BoundId.SPAPI + BoundId.CALPI, "trace has a single iterate")
    gamma = tm.gamma
    near, far = gamma / (1.0 - gamma), gamma / (1.0 - gamma) ** 2
    losses = {k: tm.loss(k) for k in ks}
    lhs_p = max(weighted_lp_norm(losses[k], p, mu) for k in ks)
    lhs_inf = max(max_norm(losses[k]) for k in ks)
    reports = []

    asymptotic = trace.ran_full_budget and tm.last >= window
    asymptotic_ids = ("spapi.1", "spapi.2", "spapi.3", "spapi.4", "calpi.1", "calpi.2")
    if asymptotic:
        errors = [trace[j].error for j in ks]
        policy_residuals = [trace[k].policy_bellman_residual for k in ks]
        mixed_errors = [span_p(trace[j].error, p, mixed_distribution(mu, *_approx_entries(tm, j, k)[:2]))
                        for k in ks for j in ks if j < k]
        mixed_residuals = []
        for k in ks:
            c_matrix, c_prime = _c_pair(tm, k)
            mixed_residuals.append(span_p(trace[k].policy_bellman_residual, p,
                                          mixed_distribution(mu, c_matrix, c_prime)))
        reports += [
            BoundReport("spapi.1", lhs_p, far * max(mixed_errors, default=0.0)),
            BoundReport("spapi.2", lhs_inf, far * max(span_inf(e) for e in errors)),
            BoundReport("spapi.3", lhs_p, far * max(mixed_residuals)),
            BoundReport("spapi.4", lhs_inf, far * max(span_inf(b) for b in policy_residuals)),
        ]
    else:
        reports += _not_applicable(asymptotic_ids[:4], "trace stopped before filling the tail window")

    d_matrix = (1.0 - gamma) * tm.p_star @ tm.star_resolvent()
    weighted_pairs, max_pairs = [], []
    for k in ks:
        residual = trace[k - 1].bellman_residual
        d_prime = (1.0 - gamma) * tm.transition(k) @ tm.resolvent(k)
        weighted_pairs.append((k, weighted_lp_norm(losses[k], p, mu),
                               near * span_p(residual, p, mixed_distribution(mu, d_matrix, d_prime))))
        max_pairs.append((k, max_norm(losses[k]), near * span_inf(residual)))
    reports += [_tightest("spapi.5", weighted_pairs), _tightest("spapi.6", max_pairs)]

    if not coefficient.finite:
        reports += [BoundReport.vacuous(bound_id, lhs_inf, "C(nu) is infinite") for bound_id in BoundId.CALPI]
        return reports
    nu = coefficient.nu
    scale = coefficient.factor(p)
    if asymptotic:
        reports += [
            BoundReport("calpi.1", lhs_inf, far * scale * max(span_p(trace[j].error, p, nu) for j in ks)),
            BoundReport("calpi.2", lhs_inf,
                        far * scale * max(span_p(trace[k].policy_bellman_residual, p, nu) for k in ks)),
        ]
    else:
        reports += _not_applicable(asymptotic_ids[4:], "trace stopped before filling the tail window")
    reports.append(_tightest("calpi.3", [(k, max_norm(losses[k]),
                                          near * scale * span_p(trace[k - 1].bellman_residual, p, nu))
                                         for k in ks]))
    return reports


def _c_pair(tm: TraceMatrices, k: int) -> Tuple[np.ndarray, np.ndarray]:
    squared = (1.0 - tm.gamma) ** 2
    c_matrix = squared * tm.star_resolvent() @ tm.p_star @ tm.resolvent(k)
    c_prime = squared * tm.star_resolvent() @ tm.transition(k + 1) @ tm.resolvent(k + 1)
    return c_matrix, c_prime


def seminorm_bound_suite(trace, mdp: Mdp, spec: SeminormSpec, nu, k0: int,
                         window: int) -> List[BoundReport]:
    """
    Seminorm forms of the exact rates (pairs k0 < k <= k0 + window) and of
    the approximate bounds (final `window` iterations).
    """
    if window < 1:
        raise TraceIndexError(f"window must be positive, got {window}")
    p, mu, coefficient = _norm_setup(mdp, spec, nu)
    if not coefficient.finite:
        logger.warning(f"concentration coefficient is infinite for nu={coefficient.nu.tolist()}")
    tm = TraceMatrices(trace, mdp)
    reports = []
    problem = _exact_trace_problem(trace)
    if problem:
        reports += _not_applicable(BoundId.CROCLPI + BoundId.CROCNU, problem)
    else:
        if not 0 <= k0 < tm.last:
            raise TraceIndexError(f"k0={k0} must leave at least one later iteration in 0..{tm.last}")
        pairs = []
        for k in range(k0 + 1, min(tm.last, k0 + window) + 1):
            pairs += _exact_seminorm_reports(tm, k0, k, p, mu, coefficient, _exact_entries(tm, k0, k))
        reports += summarize_reports(pairs)
    if trace.lam is None:
        reports += _not_applicable(BoundId.SPAPI + BoundId.CALPI, "trace is not a lambda policy iteration run")
    else:
        reports += _approx_seminorm_reports(tm, window, p, mu, coefficient)
    return reports


def run_bound_checks(trace, mdp: Mdp, bound_ids: Sequence[str], window: int = DEFAULT_WINDOW,
                     spec: Optional[SeminormSpec] = None, nu=None, stop_epsilon: float = 0.01,
                     max_exact_k: int = DEFAULT_EXACT_HORIZON) -> List[BoundReport]:
    """Run the check families covering `bound_ids`; one report per requested id"""
    unknown = [bound_id for bound_id in bound_ids if bound_id not in BoundId.ALL]
    if unknown:
        raise ValueError(f"unknown bound ids {unknown}; valid ids: {', '.join(BoundId.ALL)}")
    wanted = set(bound_ids)
    reports: List[BoundReport] = []
    tm_last = len(trace) - 1

    if wanted & set(BoundId.EXACT_RATES):
        reports += check_exact_rate_suite(trace, mdp, max_exact_k, spec, nu)
    if wanted & set(BoundId.TH):
        if trace.lam is None or tm_last < 1:
            reports += _not_applicable(BoundId.TH, "no lambda policy iteration steps to check")
        else:
            span = min(window, tm_last)
            k0 = max(0, tm_last - 2 * span)
            reports += check_approx_bounds(trace, mdp, k0, span)
    if wanted & set(BoundId.SPAPI + BoundId.CALPI):
        if trace.lam is None:
            reports += _not_applicable(BoundId.SPAPI + BoundId.CALPI, "trace is not a lambda policy iteration run")
        else:
            p, mu, coefficient = _norm_setup(mdp, spec, nu)
            reports += _approx_seminorm_reports(TraceMatrices(trace, mdp), window, p, mu, coefficient)
    if wanted & set(BoundId.CONVERGENCE):
        reports += check_convergence_case_bounds(trace, mdp, window, spec, nu)
    if wanted & set(BoundId.STOPEXACT):
        reports += check_stopping(trace, mdp, stop_epsilon)
    if wanted & set(BoundId.APPENDIX_A):
        reports += check_residual_lemmas(trace, mdp)
    if wanted & set(BoundId.IDENTITIES):
        reports += check_trace_identities(trace, mdp)

    by_id = {report.bound_id: report for report in summarize_reports(reports)}
    ordered = []
    for bound_id in OrderedDict.fromkeys(bound_ids):
        report = by_id.get(bound_id)
        ordered.append(report or BoundReport.not_applicable(bound_id, "no check produced this id"))
    failures = [report for report in ordered if not report.satisfied]
    for report in failures:
        logger.warning(f"bound not satisfied: {report}")
    return ordered
