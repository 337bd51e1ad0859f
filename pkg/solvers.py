"""
Iteration drivers: Value Iteration, Policy Iteration, Modified Policy
Iteration and lambda Policy Iteration, exact or with injected errors.
Every driver returns an IterationTrace; enrich_trace fills in the
loss / distance / shift / residual quantities against the exact optimum.
"""

import logging
import os
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from bounds import beta, bellman_residual, policy_bellman_residual, stopping_test
from mdp_core import (
    Mdp,
    Policy,
    PolicyLike,
    TraceIndexError,
    apply_bellman_policy,
    apply_tlambda,
    as_policy,
    as_value,
    evaluate_policy,
    greedy,
    mk_fixed_point,
    optimal_value,
)

logger = logging.getLogger(__name__)

LOSS_TOL = 1e-9
DEFAULT_MAX_ITERATIONS = 200
DEFAULT_STOP_EPSILON = 0.01
DEFAULT_INNER_TOL = 1e-12
DEFAULT_RANK = 2

NOISE_LANE = 0
BASIS_LANE = 1


def default_seed() -> int:
    """Seed used when none is given; LPI_SEED overrides it"""
    return int(os.environ.get("LPI_SEED", "0"))


class InnerMode:
    DENSE_SOLVE = "dense_solve"
    MK_ITERATION = "mk_iteration"
    ALL = (DENSE_SOLVE, MK_ITERATION)


class NoiseKind:
    NONE = "none"
    UNIFORM_BOUNDED = "uniform_bounded"
    GAUSSIAN_CLIPPED = "gaussian_clipped"
    RANK_PROJECTION = "rank_projection"
    ALL = (NONE, UNIFORM_BOUNDED, GAUSSIAN_CLIPPED, RANK_PROJECTION)
    ALIASES = {"uniform": UNIFORM_BOUNDED, "gaussian": GAUSSIAN_CLIPPED, "projection": RANK_PROJECTION}


class StopRule:
    SPAN = "span"      # stop once the span test certifies stop_epsilon
    NONE = "none"      # always run max_iterations
    ALL = (SPAN, NONE)


class Terminal:
    CONVERGED = "converged"
    BUDGET = "budget"


class SolverConfig:
    """Parameters shared by every driver"""

    def __init__(self, lam: float = 0.0, max_iterations: int = DEFAULT_MAX_ITERATIONS,
                 stop_epsilon: float = DEFAULT_STOP_EPSILON, inner_mode: str = InnerMode.DENSE_SOLVE,
                 inner_tol: float = DEFAULT_INNER_TOL, mpi_steps: int = 1, seed: Optional[int] = None,
                 stop_rule: str = StopRule.SPAN):
        lam = float(lam)
        if not 0.0 <= lam <= 1.0:
            raise ValueError(f"lambda out of [0,1]: {lam!r}")
        if int(max_iterations) < 1:
            raise ValueError(f"max_iterations must be >= 1, got {max_iterations!r}")
        if not float(stop_epsilon) > 0.0:
            raise ValueError(f"stop_epsilon must be positive, got {stop_epsilon!r}")
        if inner_mode not in InnerMode.ALL:
            raise ValueError(f"unknown inner mode {inner_mode!r}; expected one of {InnerMode.ALL}")
        if not float(inner_tol) > 0.0:
            raise ValueError(f"inner_tol must be positive, got {inner_tol!r}")
        if int(mpi_steps) < 1:
            raise ValueError(f"mpi_steps must be >= 1, got {mpi_steps!r}")
        if stop_rule not in StopRule.ALL:
            raise ValueError(f"unknown stop rule {stop_rule!r}; expected one of {StopRule.ALL}")
        self.lam = lam
        self.max_iterations = int(max_iterations)
        self.stop_epsilon = float(stop_epsilon)
        self.inner_mode = inner_mode
        self.inner_tol = float(inner_tol)
        self.mpi_steps = int(mpi_steps)
        self.seed = default_seed() if seed is None else int(seed)
        self.stop_rule = stop_rule

    def with_lambda(self, lam: float) -> "SolverConfig":
        values = self.to_dict()
        values["lambda"] = lam
        return SolverConfig.from_dict(values)

    def to_dict(self) -> Dict:
        return {
            "lambda": self.lam,
            "max_iterations": self.max_iterations,
            "stop_epsilon": self.stop_epsilon,
            "inner_mode": self.inner_mode,
            "inner_tol": self.inner_tol,
            "mpi_steps": self.mpi_steps,
            "seed": self.seed,
            "stop_rule": self.stop_rule,
        }

    @classmethod
    def from_dict(cls, values: Dict) -> "SolverConfig":
        values = dict(values or {})
        unknown = set(values) - set(cls().to_dict())
        if unknown:
            raise ValueError(f"unknown solver settings {sorted(unknown)}")
        if "lambda" in values:
            values["lam"] = values.pop("lambda")
        return cls(**values)

    def __str__(self):
        return (f"SolverConfig(lambda={self.lam}, max_iterations={self.max_iterations}, "
                f"epsilon={self.stop_epsilon}, inner={self.inner_mode}, stop={self.stop_rule})")


class NoiseModel:
    """
    Source of the approximation errors eps_k. Draws come from a
    counter-based generator keyed by the seed, with the iteration index
    in the counter, so eps_k does not depend on what happened before k.
    """

    def __init__(self, kind: str = NoiseKind.NONE, amplitude: float = 0.0, rank: int = DEFAULT_RANK,
                 seed: Optional[int] = None):
        kind = NoiseKind.ALIASES.get(kind, kind)
        if kind not in NoiseKind.ALL:
            raise ValueError(f"unknown noise kind {kind!r}; expected one of {NoiseKind.ALL}")
        amplitude = float(amplitude)
        if not amplitude >= 0.0:
            raise ValueError(f"noise amplitude must be >= 0, got {amplitude!r}")
        if int(rank) < 0:
            raise ValueError(f"projection rank must be >= 0, got {rank!r}")
        self.kind = kind
        self.amplitude = amplitude
        self.rank = int(rank)
        self.seed = default_seed() if seed is None else int(seed)
        self._basis: Dict[int, np.ndarray] = {}

    @classmethod
    def from_string(cls, text: str, seed: Optional[int] = None) -> "NoiseModel":
        """Parse 'none', 'kind:amplitude' or 'projection:rank'"""
        kind, _, amount = text.strip().partition(":")
        kind = NoiseKind.ALIASES.get(kind, kind)
        if kind == NoiseKind.NONE:
            return cls(seed=seed)
        if not amount:
            raise ValueError(f"noise {text!r} needs an amount, as in uniform:0.01")
        try:
            if kind == NoiseKind.RANK_PROJECTION:
                return cls(kind, rank=int(amount), seed=seed)
            return cls(kind, float(amount), seed=seed)
        except ValueError as e:
            raise ValueError(f"malformed noise {text!r}: {e}") from e

    @property
    def active(self) -> bool:
        if self.kind == NoiseKind.NONE:
            return False
        return self.kind == NoiseKind.RANK_PROJECTION or self.amplitude > 0.0

    def _generator(self, lane: int, k: int) -> np.random.Generator:
        counter = (lane << 128) + (k << 64)
        return np.random.Generator(np.random.Philox(key=self.seed % 2 ** 64, counter=counter))

    def _projection_basis(self, n_states: int) -> np.ndarray:
        if n_states not in self._basis:
            draws = self._generator(BASIS_LANE, 0).standard_normal((n_states, self.rank))
            self._basis[n_states] = np.column_stack([draws, np.ones(n_states)])
        return self._basis[n_states]

    def perturb(self, k: int, w: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(w + eps_k, eps_k) for the k-th iterate"""
        if not self.active:
            return w, np.zeros_like(w)
        if self.kind == NoiseKind.RANK_PROJECTION:
            basis = self._projection_basis(w.size)
            coefficients = np.linalg.lstsq(basis, w, rcond=None)[0]
            projected = basis @ coefficients
            return projected, projected - w
        rng = self._generator(NOISE_LANE, k)
        bound = self.amplitude
        if self.kind == NoiseKind.UNIFORM_BOUNDED:
            error = rng.uniform(-bound, bound, size=w.size)
        else:
            error = np.clip(rng.normal(0.0, bound / 3.0, size=w.size), -bound, bound)
        return w + error, error

    def to_dict(self) -> Dict:
        return {"kind": self.kind, "amplitude": self.amplitude, "rank": self.rank, "seed": self.seed}

    @classmethod
    def from_dict(cls, values: Optional[Dict]) -> "NoiseModel":
        values = dict(values or {})
        unknown = set(values) - {"kind", "amplitude", "rank", "seed"}
        if unknown:
            raise ValueError(f"unknown noise settings {sorted(unknown)}")
        return cls(**values)

    def __str__(self):
        if self.kind == NoiseKind.RANK_PROJECTION:
            return f"{self.kind}(rank={self.rank})"
        if self.kind == NoiseKind.NONE:
            return self.kind
        return f"{self.kind}({self.amplitude:g})"


class IterationRecord:
    """One iterate of a run and, after enrichment, its derived quantities"""

    def __init__(self, k: int, value: np.ndarray, policy: Optional[Policy], error: np.ndarray,
                 pre_noise: np.ndarray, inner_iterations: int = 0):
        self.k = k
        self.value = value
        self.policy = policy
        self.error = error
        self.pre_noise = pre_noise
        self.inner_iterations = inner_iterations
        # filled by enrich_trace
        self.policy_value: Optional[np.ndarray] = None
        self.loss: Optional[np.ndarray] = None
        self.distance: Optional[np.ndarray] = None
        self.shift: Optional[np.ndarray] = None
        self.bellman_residual: Optional[np.ndarray] = None
        self.policy_bellman_residual: Optional[np.ndarray] = None
        self.stop_flag: Optional[bool] = None

    def __str__(self):
        return f"k={self.k} policy={self.policy} value={np.array2string(self.value, precision=4)}"


class IterationTrace:
    """The records of one run plus how it ended"""

    def __init__(self, algorithm: str, lam: Optional[float], gamma: float, config: SolverConfig,
                 noise: NoiseModel, records: List[IterationRecord], terminal: str):
        self.algorithm = algorithm
        self.lam = lam
        self.gamma = gamma
        self.config = config
        self.noise = noise
        self.records = records
        self.terminal = terminal
        self.optimal_value: Optional[np.ndarray] = None
        self.optimal_policy: Optional[Policy] = None
        self.greedy_policy: Optional[Policy] = None
        self.output_loss: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, k: int) -> IterationRecord:
        return self.records[k]

    def __iter__(self):
        return iter(self.records)

    @property
    def seed(self) -> int:
        return self.noise.seed

    @property
    def stop_epsilon(self) -> float:
        return self.config.stop_epsilon

    @property
    def is_exact(self) -> bool:
        return not self.noise.active

    @property
    def iterations(self) -> int:
        return len(self.records) - 1

    @property
    def ran_full_budget(self) -> bool:
        return self.terminal == Terminal.BUDGET and self.iterations >= self.config.max_iterations

    @property
    def inner_iterations(self) -> int:
        return sum(record.inner_iterations for record in self.records)

    @property
    def enriched(self) -> bool:
        return self.optimal_value is not None

    @property
    def final_value(self) -> np.ndarray:
        return self.records[-1].value

    def __str__(self):
        lam = "" if self.lam is None else f" lambda={self.lam}"
        return f"{self.algorithm}{lam}: {self.iterations} iterations, {self.terminal}, noise {self.noise}"


StepFunction = Callable[[Policy, np.ndarray], Tuple[np.ndarray, int]]


def _run_greedy_scheme(mdp: Mdp, v0, config: SolverConfig, noise: NoiseModel, step: StepFunction,
                       algorithm: str, lam: Optional[float]) -> IterationTrace:
    values = as_value(mdp, v0).copy()
    records = [IterationRecord(0, values, None, np.zeros(mdp.n_states), values)]
    use_span = config.stop_rule == StopRule.SPAN
    terminal = Terminal.BUDGET
    logger.info(f"{algorithm} started on {mdp} with {config}, noise {noise}")
    for k in range(1, config.max_iterations + 1):
        if use_span and stopping_test(mdp, values, config.stop_epsilon):
            terminal = Terminal.CONVERGED
            break
        policy = greedy(mdp, values)
        pre_noise, inner = step(policy, values)
        values, error = noise.perturb(k, pre_noise)
        records.append(IterationRecord(k, values, policy, error, pre_noise, inner))
        logger.debug(f"{algorithm} k={k} policy={policy} inner={inner}")
    else:
        if use_span and stopping_test(mdp, values, config.stop_epsilon):
            terminal = Terminal.CONVERGED
    trace = IterationTrace(algorithm, lam, mdp.gamma, config, noise, records, terminal)
    logger.info(f"{trace}")
    return trace


def run_value_iteration(mdp: Mdp, v0, config: SolverConfig, noise: Optional[NoiseModel] = None) -> IterationTrace:
    """v_{k+1} = T v_k + eps_{k+1}; config.lam is ignored"""

    def step(policy, values):
        return apply_bellman_policy(mdp, policy, values), 1

    return _run_greedy_scheme(mdp, v0, config, noise or NoiseModel(seed=config.seed), step,
                              "value_iteration", 0.0)


def run_modified_policy_iteration(mdp: Mdp, v0, config: SolverConfig,
                                  noise: Optional[NoiseModel] = None) -> IterationTrace:
    """v_{k+1} = (T^{pi_{k+1}})^n v_k with n = config.mpi_steps"""
    n = config.mpi_steps

    def step(policy, values):
        for _ in range(n):
            values = apply_bellman_policy(mdp, policy, values)
        return values, n

    return _run_greedy_scheme(mdp, v0, config, noise or NoiseModel(seed=config.seed), step,
                              "modified_policy_iteration", None)


def run_lambda_pi(mdp: Mdp, v0, config: SolverConfig, noise: Optional[NoiseModel] = None) -> IterationTrace:
    """
    lambda Policy Iteration: pi_{k+1} = greedy(v_k) and
    v_{k+1} = T_lambda^{pi_{k+1}} v_k + eps_{k+1}.

    The dense mode solves the form-3 linear system (plain backup at
    lambda=0, exact evaluation at lambda=1, so the endpoints reproduce
    Value and Policy Iteration bit for bit). The mk mode iterates M_k to
    its fixed point and reports the number of applications.
    """
    lam = config.lam
    modulus = lam * mdp.gamma
    outer = beta(lam, mdp.gamma)

    def dense_step(policy, values):
        return apply_tlambda(mdp, policy, lam, values), 1 if lam == 0.0 else 0

    def mk_step(policy, values):
        fixed_point, iterations, measured = mk_fixed_point(mdp, policy, lam, values, tol=config.inner_tol)
        logger.debug(f"M_k claimed modulus lambda*gamma={modulus:.6g} (outer beta={outer:.6g}), "
                     f"measured {measured:.6g} over {iterations} applications")
        if measured > modulus * (1.0 + 1e-6) + 1e-9:
            logger.warning(f"M_k contracted at {measured:.6g}, above lambda*gamma={modulus:.6g}")
        return fixed_point, iterations

    step = dense_step if config.inner_mode == InnerMode.DENSE_SOLVE else mk_step
    return _run_greedy_scheme(mdp, v0, config, noise or NoiseModel(seed=config.seed), step,
                              "lambda_policy_iteration", lam)


def run_policy_iteration(mdp: Mdp, pi0: PolicyLike, config: SolverConfig,
                         noise: Optional[NoiseModel] = None) -> IterationTrace:
    """
    v_k = v^{pi_k} + eps_k, pi_{k+1} = greedy(v_k). Under the span rule
    the run ends as soon as the greedy policy repeats.
    """
    noise = noise or NoiseModel(seed=config.seed)
    policy = as_policy(mdp, pi0)
    pre_noise = evaluate_policy(mdp, policy)
    values, error = noise.perturb(0, pre_noise)
    records = [IterationRecord(0, values, policy, error, pre_noise, 0)]
    terminal = Terminal.BUDGET
    logger.info(f"policy_iteration started on {mdp} from {policy}")
    for k in range(1, config.max_iterations + 1):
        candidate = greedy(mdp, values)
        if config.stop_rule == StopRule.SPAN and candidate == policy:
            terminal = Terminal.CONVERGED
            break
        policy = candidate
        pre_noise = evaluate_policy(mdp, policy)
        values, error = noise.perturb(k, pre_noise)
        records.append(IterationRecord(k, values, policy, error, pre_noise, 0))
        logger.debug(f"policy_iteration k={k} policy={policy}")
    else:
        if config.stop_rule == StopRule.SPAN and greedy(mdp, values) == policy:
            terminal = Terminal.CONVERGED
    trace = IterationTrace("policy_iteration", None, mdp.gamma, config, noise, records, terminal)
    logger.info(f"{trace}")
    return trace


def enrich_trace(trace: IterationTrace, mdp: Mdp) -> IterationTrace:
    """Attach loss, distance, shift and both residuals to every record"""
    v_star, pi_star = optimal_value(mdp)
    trace.optimal_value, trace.optimal_policy = v_star, pi_star
    cache: Dict[Policy, np.ndarray] = {}

    def value_of(policy: Policy) -> np.ndarray:
        if policy not in cache:
            cache[policy] = evaluate_policy(mdp, policy)
        return cache[policy]

    for record in trace.records:
        record.bellman_residual = bellman_residual(mdp, record.value)
        record.distance = v_star - record.pre_noise
        record.stop_flag = stopping_test(mdp, record.value, trace.stop_epsilon)
        if record.policy is None:
            continue
        record.policy_value = value_of(record.policy)
        record.loss = v_star - record.policy_value
        record.shift = record.pre_noise - record.policy_value
        record.policy_bellman_residual = policy_bellman_residual(mdp, record.policy, record.value)
        if record.loss.min() < -LOSS_TOL:
            logger.warning(f"negative loss {record.loss.min():.3g} at k={record.k}; v_* may be inaccurate")

    trace.greedy_policy = greedy(mdp, trace.final_value)
    trace.output_loss = v_star - value_of(trace.greedy_policy)
    return trace


def tail_limsup(trace: IterationTrace, window: int,
                functional: Callable[[IterationRecord], Optional[float]]) -> float:
    """Largest value of `functional` over the final `window` records"""
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    if len(trace) < window:
        raise TraceIndexError(f"trace of length {len(trace)} is shorter than window {window}")
    values = [functional(record) for record in trace.records[-window:]]
    values = [value for value in values if value is not None]
    if not values:
        raise TraceIndexError("functional is undefined on every record of the window")
    return float(max(values))
