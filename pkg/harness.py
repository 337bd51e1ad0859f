"""
Problem generators and experiment campaigns.

A campaign (ExperimentSpec) runs lambda policy iteration for every
(replication, lambda, gamma) triple, enriches each trace and executes the
requested bound checks, producing one flat record per (run, bound id).
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from bounds import BoundId, run_bound_checks
from mdp_core import LpiError, Mdp, apply_tlambda, greedy
from seminorms import SeminormKind, SeminormSpec, max_norm, uniform_distribution
from solvers import (
    DEFAULT_STOP_EPSILON,
    InnerMode,
    NoiseKind,
    NoiseModel,
    SolverConfig,
    StopRule,
    enrich_trace,
    run_lambda_pi,
)

logger = logging.getLogger(__name__)

COUNTEREXAMPLE = "counterexample"
DEFAULT_GAMMA = 0.9
CAMPAIGN_WINDOW = 20


class SpecError(LpiError, ValueError):
    """An experiment or generator description is invalid"""


class CounterexampleAction:
    CHANGE = 0
    STAY = 1


def _generator(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed) % 2 ** 64))


class GeneratorSpec:
    """Shape, sparsity and seed of a random MDP"""

    def __init__(self, n_states: int, n_actions: int, branching: int, reward_scale: float = 1.0,
                 seed: int = 0, gamma: float = DEFAULT_GAMMA):
        if int(n_states) < 1 or int(n_actions) < 1:
            raise SpecError(f"need at least one state and one action, got {n_states}x{n_actions}")
        if not 1 <= int(branching) <= int(n_states):
            raise SpecError(f"branching must lie in [1, {n_states}], got {branching}")
        if not float(reward_scale) >= 0.0:
            raise SpecError(f"reward_scale must be >= 0, got {reward_scale!r}")
        if not 0.0 < float(gamma) < 1.0:
            raise SpecError(f"gamma must lie in (0,1), got {gamma!r}")
        self.n_states = int(n_states)
        self.n_actions = int(n_actions)
        self.branching = int(branching)
        self.reward_scale = float(reward_scale)
        self.seed = int(seed)
        self.gamma = float(gamma)

    def with_seed(self, seed: int) -> "GeneratorSpec":
        return GeneratorSpec(self.n_states, self.n_actions, self.branching, self.reward_scale, seed, self.gamma)

    def to_dict(self) -> Dict:
        return {"n_states": self.n_states, "n_actions": self.n_actions, "branching": self.branching,
                "reward_scale": self.reward_scale, "seed": self.seed, "gamma": self.gamma}

    @classmethod
    def from_dict(cls, values: Dict) -> "GeneratorSpec":
        try:
            return cls(**values)
        except TypeError as e:
            raise SpecError(f"invalid generator settings: {e}") from e

    def __str__(self):
        return (f"GeneratorSpec({self.n_states} states, {self.n_actions} actions, "
                f"branching {self.branching}, seed {self.seed})")


def random_mdp(spec: GeneratorSpec, gamma: Optional[float] = None) -> Mdp:
    """
    Sparse random MDP: every (state, action) row has `branching`
    successors drawn without replacement, weighted by normalized uniform
    draws; rewards are uniform in [0, reward_scale].
    """
    rng = _generator(spec.seed)
    n, a, b = spec.n_states, spec.n_actions, spec.branching
    transitions = np.zeros((a, n, n))
    for action in range(a):
        for state in range(n):
            successors = rng.choice(n, size=b, replace=False)
            weights = 1.0 - rng.random(b)
            transitions[action, state, successors] = weights / weights.sum()
    rewards = rng.uniform(0.0, spec.reward_scale, size=(n, a, n))
    return Mdp(transitions, rewards, spec.gamma if gamma is None else gamma)


def counterexample_mdp(gamma: float = DEFAULT_GAMMA) -> Mdp:
    """Two states with rewards 0 and 1; `change` swaps the state, `stay` keeps it"""
    transitions = np.zeros((2, 2, 2))
    transitions[CounterexampleAction.CHANGE] = [[0.0, 1.0], [1.0, 0.0]]
    transitions[CounterexampleAction.STAY] = np.eye(2)
    rewards = np.zeros((2, 2, 2))
    rewards[1, :, :] = 1.0
    return Mdp(transitions, rewards, gamma)


class ContractionWitness:
    """T_lambda applied to v = (eps, 0) and v' = (0, eps) on the counterexample"""

    def __init__(self, lam: float, gamma: float, eps: float):
        if not eps > 0.0:
            raise ValueError(f"eps must be positive, got {eps!r}")
        mdp = counterexample_mdp(gamma)
        self.lam = float(lam)
        self.gamma = float(gamma)
        self.v = np.array([eps, 0.0])
        self.v_prime = np.array([0.0, eps])
        self.policy = greedy(mdp, self.v)
        self.policy_prime = greedy(mdp, self.v_prime)
        self.image = apply_tlambda(mdp, self.policy, lam, self.v)
        self.image_prime = apply_tlambda(mdp, self.policy_prime, lam, self.v_prime)
        self.difference = self.image_prime - self.image
        self.ratio = max_norm(self.difference) / max_norm(self.v_prime - self.v)

    @property
    def expands(self) -> bool:
        return self.ratio > 1.0


class ExperimentSpec:
    """One campaign: a problem source crossed with lambda and gamma grids"""

    def __init__(self, generator: Union[GeneratorSpec, str], lambdas: Sequence[float], gammas: Sequence[float],
                 noise: Optional[NoiseModel] = None, solver: Optional[SolverConfig] = None,
                 checks: Sequence[str] = (), replications: int = 1, window: int = CAMPAIGN_WINDOW,
                 norm_order: float = 2.0, name: str = ""):
        if isinstance(generator, str) and generator != COUNTEREXAMPLE:
            raise SpecError(f"unknown fixture {generator!r}; the only named fixture is {COUNTEREXAMPLE!r}")
        if not lambdas or not gammas:
            raise SpecError("lambdas and gammas must be non-empty")
        if any(not 0.0 <= float(lam) <= 1.0 for lam in lambdas):
            raise SpecError(f"lambda out of [0,1] in {list(lambdas)}")
        if any(not 0.0 < float(gamma) < 1.0 for gamma in gammas):
            raise SpecError(f"gamma out of (0,1) in {list(gammas)}")
        unknown = [check for check in checks if check not in BoundId.ALL]
        if unknown:
            raise SpecError(f"unknown bound ids {unknown}; valid ids: {', '.join(BoundId.ALL)}")
        if int(replications) < 1:
            raise SpecError(f"replications must be >= 1, got {replications}")
        if int(window) < 1:
            raise SpecError(f"window must be >= 1, got {window}")
        self.generator = generator
        self.lambdas = [float(lam) for lam in lambdas]
        self.gammas = [float(gamma) for gamma in gammas]
        self.noise = noise or NoiseModel()
        self.solver = solver or SolverConfig()
        self.checks = list(checks)
        self.replications = int(replications)
        self.window = int(window)
        self.norm_order = float(norm_order)
        self.name = name

    def problem(self, replication: int, gamma: float) -> Mdp:
        if self.generator == COUNTEREXAMPLE:
            return counterexample_mdp(gamma)
        return random_mdp(self.generator.with_seed(self.generator.seed + replication), gamma)

    def noise_for(self, replication: int) -> NoiseModel:
        return NoiseModel(self.noise.kind, self.noise.amplitude, self.noise.rank, self.noise.seed + replication)

    def to_dict(self) -> Dict:
        generator = self.generator if isinstance(self.generator, str) else self.generator.to_dict()
        return {
            "name": self.name,
            "generator": generator,
            "lambdas": self.lambdas,
            "gammas": self.gammas,
            "noise": self.noise.to_dict(),
            "solver": self.solver.to_dict(),
            "checks": self.checks,
            "replications": self.replications,
            "window": self.window,
            "norm_order": self.norm_order,
        }

    @classmethod
    def from_dict(cls, values: Dict) -> "ExperimentSpec":
        if not isinstance(values, dict):
            raise SpecError(f"an experiment is a mapping, got {type(values).__name__}")
        values = dict(values)
        unknown = set(values) - set(cls(COUNTEREXAMPLE, [0.0], [0.5]).to_dict())
        if unknown:
            raise SpecError(f"unknown experiment keys {sorted(unknown)}")
        generator = values.pop("generator", None)
        if generator is None:
            raise SpecError("experiment needs a generator")
        if not isinstance(generator, str):
            generator = GeneratorSpec.from_dict(generator)
        checks = values.pop("checks", [])
        if checks == "all":
            checks = list(BoundId.ALL)
        try:
            noise = NoiseModel.from_dict(values.pop("noise", None))
            solver = SolverConfig.from_dict(values.pop("solver", None))
            return cls(generator, noise=noise, solver=solver, checks=checks or [], **values)
        except SpecError:
            raise
        except (TypeError, ValueError) as e:
            raise SpecError(f"invalid experiment: {e}") from e

    def __str__(self):
        label = self.name or "experiment"
        return (f"{label}: {self.generator}, {len(self.lambdas)} lambdas x {len(self.gammas)} gammas "
                f"x {self.replications} replications, noise {self.noise}")


def _run_one(spec: ExperimentSpec, replication: int, lam: float, gamma: float) -> List[Dict]:
    base = {"replication": replication, "lambda": lam, "gamma": gamma}
    try:
        mdp = spec.problem(replication, gamma)
        config = spec.solver.with_lambda(lam)
        trace = enrich_trace(run_lambda_pi(mdp, np.zeros(mdp.n_states), config, spec.noise_for(replication)), mdp)
        run = dict(base, iterations=trace.iterations, terminal=trace.terminal,
                   final_loss=max_norm(trace.output_loss))
        if not spec.checks:
            return [dict(run, bound_id="", status="", satisfied=True, slack=None, note="")]
        seminorm = SeminormSpec(SeminormKind.SPAN_P_WEIGHTED, spec.norm_order, uniform_distribution(mdp.n_states))
        reports = run_bound_checks(trace, mdp, spec.checks, window=spec.window, spec=seminorm,
                                   stop_epsilon=config.stop_epsilon)
        return [dict(run, bound_id=report.bound_id, status=report.status, satisfied=report.satisfied,
                     slack=report.slack, note=report.note) for report in reports]
    except Exception as e:
        logger.error(f"run replication={replication} lambda={lam} gamma={gamma} failed: {e}")
        return [dict(base, iterations=None, terminal="error", final_loss=None, bound_id="",
                     status="error", satisfied=False, slack=None, note=str(e))]


def default_workers() -> int:
    return max(1, int(os.environ.get("LPI_WORKERS", "1")))


def record_key(record: Dict):
    return record["replication"], record["lambda"], record["gamma"], record["bound_id"]


def run_experiment(spec: ExperimentSpec, workers: Optional[int] = None) -> List[Dict]:
    """
    Every (replication, lambda, gamma) run of the campaign; failures
    become error records. Output order does not depend on `workers`.
    """
    workers = default_workers() if workers is None else max(1, int(workers))
    jobs = [(replication, lam, gamma) for replication in range(spec.replications)
            for lam in spec.lambdas for gamma in spec.gammas]
    logger.info(f"running {spec} as {len(jobs)} runs on {workers} worker(s)")
    if workers == 1:
        batches = [_run_one(spec, *job) for job in jobs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            batches = list(pool.map(lambda job: _run_one(spec, *job), jobs))
    records = sorted((record for batch in batches for record in batch), key=record_key)
    failed = sum(1 for record in records if not record["satisfied"])
    logger.info(f"{spec.name or 'experiment'} finished: {len(records)} records, {failed} unsatisfied")
    return records


class SweepRow:
    """Outer and inner work needed by one lambda"""

    def __init__(self, lam: float, outer: int, inner: int, final_loss: float):
        self.lam = lam
        self.outer = outer
        self.inner = inner
        self.final_loss = final_loss

    def __str__(self):
        return f"lambda={self.lam}: {self.outer} outer, {self.inner} inner, loss {self.final_loss:.3g}"


def lambda_sweep(mdp: Mdp, lambdas: Sequence[float], config: SolverConfig,
                 noise: Optional[NoiseModel] = None) -> List[SweepRow]:
    """Run lambda policy iteration from zero once per lambda"""
    if not lambdas:
        raise ValueError("lambda list is empty")
    rows = []
    for lam in lambdas:
        trace = enrich_trace(run_lambda_pi(mdp, np.zeros(mdp.n_states), config.with_lambda(lam), noise), mdp)
        rows.append(SweepRow(float(lam), trace.iterations, trace.inner_iterations, max_norm(trace.output_loss)))
        logger.info(f"{rows[-1]}")
    return rows


def default_campaign() -> List[ExperimentSpec]:
    """The exact and the uniformly perturbed desk-scale campaigns"""
    generator = GeneratorSpec(8, 3, 3)
    lambdas = [0.0, 0.25, 0.5, 0.75, 1.0]
    gammas = [0.5, 0.9]
    exact = ExperimentSpec(
        generator, lambdas, gammas,
        noise=NoiseModel(NoiseKind.NONE, seed=0),
        solver=SolverConfig(max_iterations=200, stop_epsilon=DEFAULT_STOP_EPSILON,
                            inner_mode=InnerMode.DENSE_SOLVE, seed=0, stop_rule=StopRule.SPAN),
        checks=[bound_id for bound_id in BoundId.EXACT_RATES + BoundId.IDENTITIES + BoundId.APPENDIX_A
                + BoundId.STOPEXACT + BoundId.CONVERGENCE if bound_id not in BoundId.ERRATA],
        replications=20, name="exact")
    noisy = ExperimentSpec(
        generator, lambdas, gammas,
        noise=NoiseModel(NoiseKind.UNIFORM_BOUNDED, 0.01, seed=0),
        solver=SolverConfig(max_iterations=200, stop_epsilon=DEFAULT_STOP_EPSILON,
                            inner_mode=InnerMode.DENSE_SOLVE, seed=0, stop_rule=StopRule.NONE),
        checks=list(BoundId.TH + BoundId.SPAPI + BoundId.CALPI + BoundId.IDENTITIES
                    + BoundId.APPENDIX_A + BoundId.CONVERGENCE),
        replications=20, name="uniform_noise")
    return [exact, noisy]
