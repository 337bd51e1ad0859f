"""
Finite MDP model for lambda policy iteration.
Holds the transition and reward tensors, the linear and nonlinear Bellman
backups, greedy selection, exact policy evaluation and the lambda operators.
"""

import logging
from typing import Iterator, List, Sequence, Tuple, Union

import numpy as np
from scipy import linalg

logger = logging.getLogger(__name__)

# Tolerances
PROBABILITY_TOL = 1e-12
NEGATIVE_ENTRY_TOL = 1e-12
ROW_SUM_TOL = 1e-9
RESIDUAL_TOL = 1e-10
MK_DEFAULT_TOL = 1e-12
MK_MAX_ITERATIONS = 10 ** 6
PI_MAX_ITERATIONS = 10 ** 4

# Below this step size the ratio of successive M_k steps is rounding noise
MODULUS_MIN_STEP = 1e-5


class LpiError(Exception):
    """Base class for every error raised by the toolkit"""


class InvalidMdpError(LpiError, ValueError):
    """MDP tensors or discount violate the model invariants"""


class InvalidPolicyError(LpiError, ValueError):
    """Policy does not fit the MDP it is used with"""


class InvalidValueError(LpiError, ValueError):
    """Value vector has the wrong length or non-finite entries"""


class NumericalError(LpiError, ArithmeticError):
    """A numerical cross-check failed"""


class LinearSolveError(NumericalError):
    """Dense solve failed its residual check"""


class StochasticityError(NumericalError):
    """Matrix is not row-stochastic within tolerance"""


class NonConvergenceError(LpiError, RuntimeError):
    """An inner iteration hit its cap"""


class TraceIndexError(LpiError, IndexError):
    """Iteration indices outside what a trace holds"""


class TLambdaForm:
    """The four equivalent ways of writing T_lambda^pi"""
    INCREMENTAL = 1      # v + (I - lg P)^-1 (T v - v)
    SHIFTED = 2          # (I - lg P)^-1 (T v - lg P v)
    DENSE = 3            # (I - lg P)^-1 (r + (1 - l) g P v)
    AVERAGED = 4         # (I - lg P)^-1 (l r + (1 - l) T v)
    ALL = (1, 2, 3, 4)


class Mdp:
    """Finite discounted MDP with transitions p[a][i][j] and rewards r[i][a][j]"""

    def __init__(self, transitions, rewards, gamma: float):
        p = np.array(transitions, dtype=float)
        r = np.array(rewards, dtype=float)
        if p.ndim != 3 or p.shape[1] != p.shape[2] or p.shape[0] < 1 or p.shape[1] < 1:
            raise InvalidMdpError(f"transitions must have shape (actions, states, states), got {p.shape}")
        n_actions, n_states = p.shape[0], p.shape[1]
        if r.shape != (n_states, n_actions, n_states):
            raise InvalidMdpError(
                f"rewards must have shape ({n_states}, {n_actions}, {n_states}), got {r.shape}")
        if not np.isfinite(p).all() or not np.isfinite(r).all():
            raise InvalidMdpError("transitions and rewards must be finite")
        if (p < 0.0).any():
            raise InvalidMdpError(f"negative transition probability {p.min()!r}")
        row_error = np.abs(p.sum(axis=2) - 1.0).max()
        if row_error > PROBABILITY_TOL:
            raise InvalidMdpError(f"transition rows must sum to 1 (off by {row_error:.3g})")
        gamma = float(gamma)
        if not 0.0 < gamma < 1.0:
            raise InvalidMdpError(f"gamma must lie strictly inside (0,1), got {gamma!r}")

        p.setflags(write=False)
        r.setflags(write=False)
        self.transitions = p
        self.rewards = r
        self.gamma = gamma
        # expected one-step reward, indexed [a][i]
        expected = np.einsum("aij,iaj->ai", p, r)
        expected.setflags(write=False)
        self.expected_rewards = expected

    @property
    def n_states(self) -> int:
        return self.transitions.shape[1]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[0]

    def with_gamma(self, gamma: float) -> "Mdp":
        """Same dynamics and rewards under another discount"""
        return Mdp(self.transitions, self.rewards, gamma)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Mdp):
            return NotImplemented
        return (self.gamma == other.gamma
                and np.array_equal(self.transitions, other.transitions)
                and np.array_equal(self.rewards, other.rewards))

    def __str__(self):
        return f"Mdp({self.n_states} states, {self.n_actions} actions, gamma={self.gamma})"


class Policy:
    """Deterministic stationary policy, one action index per state"""

    def __init__(self, actions: Sequence[int]):
        raw = np.array(actions)
        if raw.ndim != 1 or raw.size == 0:
            raise InvalidPolicyError("a policy is a non-empty vector of action indices")
        if not np.issubdtype(raw.dtype, np.integer):
            if not np.issubdtype(raw.dtype, np.floating) or not np.array_equal(raw, np.round(raw)):
                raise InvalidPolicyError(f"action indices must be integers, got {raw.tolist()}")
        if (raw < 0).any():
            raise InvalidPolicyError(f"negative action index in {raw.tolist()}")
        values = raw.astype(np.int64)
        values.setflags(write=False)
        self.actions = values

    def __len__(self) -> int:
        return self.actions.size

    def __getitem__(self, state: int) -> int:
        return int(self.actions[state])

    def __iter__(self) -> Iterator[int]:
        return iter(self.actions.tolist())

    def __eq__(self, other) -> bool:
        if isinstance(other, Policy):
            return np.array_equal(self.actions, other.actions)
        return NotImplemented

    def __hash__(self):
        return hash(tuple(self.actions.tolist()))

    def tolist(self) -> List[int]:
        return self.actions.tolist()

    def __str__(self):
        return f"Policy({', '.join(str(a) for a in self.actions.tolist())})"

    __repr__ = __str__


class RowStochasticMatrix:
    """Square nonnegative matrix whose rows sum to one"""

    def __init__(self, entries, tol: float = ROW_SUM_TOL):
        m = np.array(entries, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise StochasticityError(f"expected a square matrix, got shape {m.shape}")
        if not np.isfinite(m).all():
            raise StochasticityError("matrix has non-finite entries")
        if m.size and m.min() < -NEGATIVE_ENTRY_TOL:
            raise StochasticityError(f"entry {m.min():.3g} is below -{NEGATIVE_ENTRY_TOL}")
        m[m < 0.0] = 0.0
        row_error = np.abs(m.sum(axis=1) - 1.0).max() if m.size else 0.0
        if row_error > tol:
            raise StochasticityError(f"row sums deviate from 1 by {row_error:.3g} (tolerance {tol})")
        m.setflags(write=False)
        self.entries = m

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    def row_sums(self) -> np.ndarray:
        return self.entries.sum(axis=1)

    def __matmul__(self, other):
        if isinstance(other, RowStochasticMatrix):
            other = other.entries
        return self.entries @ other

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.entries
        return self.entries.astype(dtype)

    def __str__(self):
        return f"RowStochasticMatrix({self.size}x{self.size})"


PolicyLike = Union[Policy, Sequence[int]]


def as_policy(mdp: Mdp, pi: PolicyLike) -> Policy:
    """Coerce to a Policy and check it against the MDP"""
    policy = pi if isinstance(pi, Policy) else Policy(pi)
    if len(policy) != mdp.n_states:
        raise InvalidPolicyError(f"policy has {len(policy)} entries for {mdp.n_states} states")
    worst = int(policy.actions.max())
    if worst >= mdp.n_actions:
        raise InvalidPolicyError(f"action index {worst} out of range for {mdp.n_actions} actions")
    return policy


def as_value(mdp: Mdp, v) -> np.ndarray:
    """Coerce to a float vector over the MDP's states"""
    values = np.asarray(v, dtype=float)
    if values.shape != (mdp.n_states,):
        raise InvalidValueError(f"value vector must have shape ({mdp.n_states},), got {values.shape}")
    if not np.isfinite(values).all():
        raise InvalidValueError("value vector has non-finite entries")
    return values


def shifted_solve(matrix: np.ndarray, factor: float, rhs: np.ndarray) -> np.ndarray:
    """
    Solve (I - factor * matrix) x = rhs by dense LU with partial pivoting.
    rhs may be a vector or a matrix of right-hand sides.
    """
    system = np.eye(matrix.shape[0]) - factor * matrix
    lu_and_piv = linalg.lu_factor(system, check_finite=False)
    solution = linalg.lu_solve(lu_and_piv, rhs, check_finite=False)
    residual = np.abs(system @ solution - rhs).max()
    scale = 1.0 + np.abs(rhs).max()
    if not residual <= RESIDUAL_TOL * scale:
        raise LinearSolveError(f"linear solve residual {residual:.3g} exceeds {RESIDUAL_TOL * scale:.3g}")
    return solution


def policy_transition_matrix(mdp: Mdp, pi: PolicyLike) -> RowStochasticMatrix:
    """P^pi: row i is the transition row of action pi(i)"""
    policy = as_policy(mdp, pi)
    rows = mdp.transitions[policy.actions, np.arange(mdp.n_states), :]
    return RowStochasticMatrix(rows)


def policy_reward(mdp: Mdp, pi: PolicyLike) -> np.ndarray:
    """r^pi: expected one-step reward under pi from each state"""
    policy = as_policy(mdp, pi)
    return mdp.expected_rewards[policy.actions, np.arange(mdp.n_states)].copy()


def apply_bellman_policy(mdp: Mdp, pi: PolicyLike, v) -> np.ndarray:
    """T^pi v = r^pi + gamma P^pi v"""
    values = as_value(mdp, v)
    transition = policy_transition_matrix(mdp, pi)
    return policy_reward(mdp, pi) + mdp.gamma * (transition @ values)


def action_values(mdp: Mdp, v) -> np.ndarray:
    """One-step backups of every action, indexed [state][action]"""
    values = as_value(mdp, v)
    return mdp.expected_rewards.T + mdp.gamma * np.einsum("aij,j->ia", mdp.transitions, values)


def greedy(mdp: Mdp, v) -> Policy:
    """Greedy policy for v; the lowest action index wins ties"""
    # np.argmax returns the first maximal entry, which is the tie rule
    return Policy(np.argmax(action_values(mdp, v), axis=1))


def apply_bellman_optimal(mdp: Mdp, v) -> np.ndarray:
    """T v, evaluated through the greedy policy so that T v == T^greedy(v) v"""
    return apply_bellman_policy(mdp, greedy(mdp, v), v)


def evaluate_policy(mdp: Mdp, pi: PolicyLike) -> np.ndarray:
    """v^pi = (I - gamma P^pi)^-1 r^pi"""
    transition = policy_transition_matrix(mdp, pi).entries
    return shifted_solve(transition, mdp.gamma, policy_reward(mdp, pi))


def optimal_value(mdp: Mdp) -> Tuple[np.ndarray, Policy]:
    """
    Exact policy iteration from the greedy policy of the zero vector.

    Returns:
        (v_*, pi_*) with pi_* greedy with respect to v_*
    """
    policy = greedy(mdp, np.zeros(mdp.n_states))
    values = evaluate_policy(mdp, policy)
    for iteration in range(1, PI_MAX_ITERATIONS + 1):
        candidate = greedy(mdp, values)
        if candidate == policy:
            break
        candidate_values = evaluate_policy(mdp, candidate)
        # switching only between tied actions leaves the value unchanged
        if (candidate_values - values).max() <= 1e-13 * (1.0 + np.abs(values).max()):
            policy, values = candidate, candidate_values
            break
        policy, values = candidate, candidate_values
    else:
        raise NonConvergenceError(f"policy iteration did not stabilise in {PI_MAX_ITERATIONS} steps")
    logger.debug(f"optimal policy {policy} found after {iteration} improvement steps")
    return values, policy


def _check_lambda(lam: float) -> float:
    lam = float(lam)
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda out of [0,1]: {lam!r}")
    return lam


def td_increment(mdp: Mdp, pi: PolicyLike, lam: float, v) -> np.ndarray:
    """(I - lambda gamma P^pi)^-1 (T^pi v - v)"""
    lam = _check_lambda(lam)
    values = as_value(mdp, v)
    transition = policy_transition_matrix(mdp, pi).entries
    residual = apply_bellman_policy(mdp, pi, values) - values
    return shifted_solve(transition, lam * mdp.gamma, residual)


def apply_tlambda(mdp: Mdp, pi: PolicyLike, lam: float, v, form: int = TLambdaForm.DENSE) -> np.ndarray:
    """
    T_lambda^pi v in one of its four equivalent forms.

    Args:
        form: one of TLambdaForm.ALL; the dense form returns T^pi v at
            lambda=0 and v^pi at lambda=1 through the plain operators

    Returns:
        The next lambda policy iteration value
    """
    lam = _check_lambda(lam)
    if form not in TLambdaForm.ALL:
        raise ValueError(f"unknown T_lambda form {form!r}")
    values = as_value(mdp, v)
    if form == TLambdaForm.INCREMENTAL:
        return values + td_increment(mdp, pi, lam, values)
    if form == TLambdaForm.DENSE and lam == 0.0:
        return apply_bellman_policy(mdp, pi, values)
    if form == TLambdaForm.DENSE and lam == 1.0:
        return evaluate_policy(mdp, pi)

    gamma = mdp.gamma
    transition = policy_transition_matrix(mdp, pi).entries
    reward = policy_reward(mdp, pi)
    propagated = transition @ values
    if form == TLambdaForm.SHIFTED:
        rhs = reward + gamma * propagated - lam * gamma * propagated
    elif form == TLambdaForm.DENSE:
        rhs = reward + (1.0 - lam) * gamma * propagated
    else:
        rhs = lam * reward + (1.0 - lam) * (reward + gamma * propagated)
    return shifted_solve(transition, lam * gamma, rhs)


def mk_apply(mdp: Mdp, pi: PolicyLike, lam: float, v_anchor, v) -> np.ndarray:
    """M v = (1 - lambda) T^pi v_anchor + lambda T^pi v"""
    lam = _check_lambda(lam)
    return (1.0 - lam) * apply_bellman_policy(mdp, pi, v_anchor) + lam * apply_bellman_policy(mdp, pi, v)


def mk_fixed_point(mdp: Mdp, pi: PolicyLike, lam: float, v_anchor, tol: float = MK_DEFAULT_TOL,
                   max_iterations: int = MK_MAX_ITERATIONS) -> Tuple[np.ndarray, int, float]:
    """
    Iterate M_k from the anchor until the contraction estimate
    lambda*gamma/(1 - lambda*gamma) * step falls below tol (relative to
    the iterate's magnitude when that exceeds one).

    Returns:
        (fixed point, number of M_k applications, largest observed ratio
        of successive steps)
    """
    lam = _check_lambda(lam)
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol!r}")
    policy = as_policy(mdp, pi)
    anchor = as_value(mdp, v_anchor)
    anchor_term = (1.0 - lam) * apply_bellman_policy(mdp, policy, anchor)
    modulus = lam * mdp.gamma
    estimate_factor = modulus / (1.0 - modulus)

    current = anchor
    previous_step = 0.0
    measured = 0.0
    for iteration in range(1, max_iterations + 1):
        following = anchor_term + lam * apply_bellman_policy(mdp, policy, current)
        step = np.abs(following - current).max()
        scale = max(1.0, np.abs(following).max())
        if previous_step > MODULUS_MIN_STEP * scale:
            measured = max(measured, step / previous_step)
        current = following
        if estimate_factor * step <= tol * scale:
            logger.debug(f"M_k fixed point after {iteration} steps, measured modulus {measured:.4g} "
                         f"(provable {modulus:.4g})")
            return current, iteration, measured
        previous_step = step
    raise NonConvergenceError(f"M_k iteration did not converge within {max_iterations} steps")
