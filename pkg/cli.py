"""
Command-line surface: solve, verify, counterexample and sweep.

Exit codes: 0 success, 1 input error, 2 iteration budget exhausted,
3 an expected condition was not met.
"""

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, TextIO

import numpy as np
import yaml

from bounds import BoundId
from harness import (
    COUNTEREXAMPLE,
    ContractionWitness,
    ExperimentSpec,
    GeneratorSpec,
    SweepRow,
    counterexample_mdp,
    default_campaign,
    lambda_sweep,
    random_mdp,
    run_experiment,
)
from mdp_core import InvalidMdpError, LpiError, Mdp
from seminorms import max_norm, span_inf
from solvers import (
    DEFAULT_MAX_ITERATIONS,
    DEFAULT_STOP_EPSILON,
    InnerMode,
    IterationTrace,
    NoiseModel,
    SolverConfig,
    Terminal,
    default_seed,
    enrich_trace,
    run_lambda_pi,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_BUDGET = 2
EXIT_CONDITION = 3

FIXTURE_DIR = Path(__file__).resolve().parent / "fixtures"
FLOAT_FORMAT = "%.17g"

TRACE_COLUMNS = ["k", "lambda", "gamma", "seed", "max_norm_loss", "span_inf_loss",
                 "span_inf_bellman_residual", "span_inf_policy_bellman_residual", "stop_flag"]
REPORT_COLUMNS = ["experiment", "replication", "lambda", "gamma", "bound_id", "status", "satisfied",
                  "slack", "iterations", "terminal", "final_loss", "note"]
SWEEP_COLUMNS = ["lambda", "outer_iterations", "inner_iterations", "final_loss"]

INNER_CHOICES = {"dense": InnerMode.DENSE_SOLVE, "mk": InnerMode.MK_ITERATION}


class UsageError(Exception):
    """Command-line arguments that do not parse"""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (float, np.floating)):
        return FLOAT_FORMAT % value
    return str(value)


def _write_rows(out: TextIO, header: Sequence[str], rows: Iterable[Sequence]):
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(value) for value in row])


def _open_output(path: Optional[str]):
    if path is None or path == "-":
        return _Stdout()
    return open(path, "w", encoding="utf-8", newline="")


class _Stdout:
    def __enter__(self):
        return sys.stdout

    def __exit__(self, *exc):
        sys.stdout.flush()
        return False


# ---- MdpFile ---------------------------------------------------------------

def mdp_to_dict(mdp: Mdp) -> Dict:
    return {
        "n_states": mdp.n_states,
        "n_actions": mdp.n_actions,
        "gamma": mdp.gamma,
        "transitions": mdp.transitions.tolist(),
        "rewards": mdp.rewards.tolist(),
    }


def mdp_from_dict(document: Dict) -> Mdp:
    """Build an Mdp from a parsed MdpFile; `state_rewards` is replicated over (a, j)"""
    if not isinstance(document, dict):
        raise InvalidMdpError("an MDP file is a mapping with transitions and rewards")
    for key in ("gamma", "transitions"):
        if key not in document:
            raise InvalidMdpError(f"MDP file is missing {key!r}")
    transitions = np.array(document["transitions"], dtype=float)
    if transitions.ndim != 3:
        raise InvalidMdpError(f"transitions must be indexed [a][i][j], got {transitions.ndim} levels")
    n_actions, n_states = transitions.shape[0], transitions.shape[1]
    for key, actual in (("n_states", n_states), ("n_actions", n_actions)):
        if key in document and int(document[key]) != actual:
            raise InvalidMdpError(f"{key}={document[key]} disagrees with transitions ({actual})")
    if "rewards" in document and "state_rewards" in document:
        raise InvalidMdpError("give either rewards or state_rewards, not both")
    if "state_rewards" in document:
        per_state = np.array(document["state_rewards"], dtype=float)
        if per_state.shape != (n_states,):
            raise InvalidMdpError(f"state_rewards must have {n_states} entries, got shape {per_state.shape}")
        rewards = np.broadcast_to(per_state[:, None, None], (n_states, n_actions, n_states))
    elif "rewards" in document:
        rewards = np.array(document["rewards"], dtype=float)
    else:
        raise InvalidMdpError("MDP file needs rewards or state_rewards")
    return Mdp(transitions, rewards, document["gamma"])


def load_mdp(path: str) -> Mdp:
    with open(path, encoding="utf-8") as f:
        return mdp_from_dict(yaml.safe_load(f))


def save_mdp(mdp: Mdp, path: str):
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(mdp_to_dict(mdp), f, sort_keys=False)


def load_experiments(path: str) -> List[ExperimentSpec]:
    """One ExperimentSpec document, or a mapping with an `experiments` list"""
    with open(path, encoding="utf-8") as f:
        document = yaml.safe_load(f)
    if isinstance(document, dict) and "experiments" in document:
        return [ExperimentSpec.from_dict(entry) for entry in document["experiments"]]
    return [ExperimentSpec.from_dict(document)]


def load_experiment(path: str) -> ExperimentSpec:
    specs = load_experiments(path)
    if len(specs) != 1:
        raise ValueError(f"{path} holds {len(specs)} experiments, expected one")
    return specs[0]


# ---- CSV outputs -----------------------------------------------------------

def trace_rows(trace: IterationTrace) -> List[List]:
    rows = []
    for record in trace.records:
        loss = record.loss
        policy_residual = record.policy_bellman_residual
        rows.append([
            record.k,
            trace.lam,
            trace.gamma,
            trace.seed,
            None if loss is None else max_norm(loss),
            None if loss is None else span_inf(loss),
            span_inf(record.bellman_residual),
            None if policy_residual is None else span_inf(policy_residual),
            record.stop_flag,
        ])
    return rows


def write_trace_csv(trace: IterationTrace, out: TextIO):
    _write_rows(out, TRACE_COLUMNS, trace_rows(trace))


def write_reports_csv(records: Iterable[Dict], out: TextIO):
    _write_rows(out, REPORT_COLUMNS, ([record.get(column) for column in REPORT_COLUMNS] for record in records))


def write_sweep_csv(rows: Iterable[SweepRow], out: TextIO):
    _write_rows(out, SWEEP_COLUMNS, ([row.lam, row.outer, row.inner, row.final_loss] for row in rows))


# ---- argument helpers ------------------------------------------------------

def parse_float_list(text: str) -> List[float]:
    try:
        values = [float(item) for item in text.split(",")]
    except ValueError:
        raise UsageError(f"malformed list {text!r}; expected comma-separated numbers")
    if not values:
        raise UsageError("empty list")
    return values


def parse_generator(text: str) -> GeneratorSpec:
    """'N,A,B' or 'N,A,B,seed'"""
    parts = text.split(",")
    if len(parts) not in (3, 4):
        raise UsageError(f"malformed generator {text!r}; expected N,A,B[,seed]")
    try:
        numbers = [int(part) for part in parts]
    except ValueError:
        raise UsageError(f"malformed generator {text!r}; expected integers")
    return GeneratorSpec(*numbers[:3], seed=numbers[3] if len(numbers) == 4 else default_seed())


def parse_checks(text: Optional[str]) -> Optional[List[str]]:
    if text is None:
        return None
    if text.strip() == "all":
        return list(BoundId.ALL)
    checks = [item.strip() for item in text.split(",") if item.strip()]
    if not checks:
        raise UsageError("--checks is empty; give 'all' or a comma list of bound ids")
    unknown = [check for check in checks if check not in BoundId.ALL]
    if unknown:
        raise UsageError(f"unknown bound ids {unknown}; valid ids: {', '.join(BoundId.ALL)}")
    return checks


def _problem(args) -> Mdp:
    if getattr(args, "generator", None):
        return random_mdp(parse_generator(args.generator))
    if args.mdp and args.fixture:
        raise UsageError("give either --mdp or --fixture")
    if args.fixture == COUNTEREXAMPLE:
        return counterexample_mdp()
    if args.fixture:
        return load_mdp(str(FIXTURE_DIR / f"{args.fixture}.yaml"))
    if args.mdp:
        return load_mdp(args.mdp)
    raise UsageError("no problem given; use --mdp, --fixture or --generator")


# ---- commands --------------------------------------------------------------

def cmd_solve(args) -> int:
    mdp = _problem(args)
    if args.gamma_override is not None:
        mdp = mdp.with_gamma(args.gamma_override)
    seed = default_seed() if args.seed is None else args.seed
    config = SolverConfig(lam=args.lam, max_iterations=args.max_iterations, stop_epsilon=args.epsilon,
                          inner_mode=INNER_CHOICES[args.inner], seed=seed)
    noise = NoiseModel.from_string(args.noise, seed=seed)
    trace = enrich_trace(run_lambda_pi(mdp, np.zeros(mdp.n_states), config, noise), mdp)
    with _open_output(args.out) as out:
        write_trace_csv(trace, out)
    if trace.terminal != Terminal.CONVERGED:
        logger.warning(f"budget of {config.max_iterations} iterations exhausted")
        return EXIT_BUDGET
    return EXIT_OK


def _inline_experiment(args, checks: Optional[List[str]]) -> Optional[ExperimentSpec]:
    if args.states is None and args.fixture is None:
        return None
    seed = default_seed() if args.seed is None else args.seed
    if args.fixture is not None:
        if args.fixture != COUNTEREXAMPLE:
            raise UsageError(f"unknown fixture {args.fixture!r}")
        generator = COUNTEREXAMPLE
    else:
        generator = GeneratorSpec(args.states, args.actions, args.branching, seed=seed)
    return ExperimentSpec(
        generator,
        parse_float_list(args.lambdas),
        parse_float_list(args.gammas),
        noise=NoiseModel.from_string(args.noise, seed=seed),
        solver=SolverConfig(max_iterations=args.max_iterations, stop_epsilon=args.epsilon, seed=seed),
        checks=checks if checks is not None else list(BoundId.SOUND),
        replications=args.replications,
        name="inline")


def cmd_verify(args) -> int:
    checks = parse_checks(args.checks)
    inline = _inline_experiment(args, checks)
    if inline is not None:
        specs = [inline]
    elif args.experiment:
        specs = load_experiments(args.experiment)
    else:
        specs = default_campaign()
    if checks is not None:
        for spec in specs:
            spec.checks = checks
    records = []
    for index, spec in enumerate(specs):
        label = spec.name or f"experiment{index}"
        records += [dict(record, experiment=label) for record in run_experiment(spec, args.workers)]
    with _open_output(args.out) as out:
        write_reports_csv(records, out)
    failed = [record for record in records if not record["satisfied"]]
    for record in failed:
        logger.error(f"{record['experiment']} replication={record['replication']} lambda={record['lambda']} "
                     f"gamma={record['gamma']}: {record['bound_id'] or record['status']} not satisfied "
                     f"{record['note']}")
    return EXIT_OK if not failed else EXIT_CONDITION


def cmd_counterexample(args) -> int:
    witness = ContractionWitness(args.lam, args.gamma, args.eps)
    lines = [
        f"v          = {witness.v.tolist()}  greedy {witness.policy}",
        f"v'         = {witness.v_prime.tolist()}  greedy {witness.policy_prime}",
        f"T_lambda v = {witness.image.tolist()}",
        f"T_lambda v'= {witness.image_prime.tolist()}",
        f"v' - v     = {(witness.v_prime - witness.v).tolist()}",
        f"difference = {witness.difference.tolist()}",
        f"ratio      = {FLOAT_FORMAT % witness.ratio}",
    ]
    print("\n".join(lines))
    if witness.expands:
        return EXIT_OK
    print(f"ratio <= 1: lambda={witness.lam} is in the contraction regime (ratio <= gamma={witness.gamma})")
    return EXIT_CONDITION


def cmd_sweep(args) -> int:
    lambdas = parse_float_list(args.lambdas)
    mdp = _problem(args)
    seed = default_seed() if args.seed is None else args.seed
    config = SolverConfig(max_iterations=args.max_iterations, stop_epsilon=args.epsilon,
                          inner_mode=INNER_CHOICES[args.inner], seed=seed)
    rows = lambda_sweep(mdp, lambdas, config, NoiseModel(seed=seed))
    with _open_output(args.out) as out:
        write_sweep_csv(rows, out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lambda-pi-bounds",
                     description="lambda policy iteration and numerical certification of its bounds")
    commands = parser.add_subparsers(dest="command", parser_class=_Parser)
    commands.required = True

    solve = commands.add_parser("solve", help="run lambda policy iteration and write its trace")
    solve.add_argument("--mdp", help="MDP file (YAML)")
    solve.add_argument("--fixture", help="named problem, e.g. counterexample")
    solve.add_argument("--lambda", dest="lam", type=float, default=0.5)
    solve.add_argument("--gamma-override", type=float)
    solve.add_argument("--epsilon", type=float, default=DEFAULT_STOP_EPSILON)
    solve.add_argument("--noise", default="none", help="none | kind:amplitude | projection:rank")
    solve.add_argument("--seed", type=int)
    solve.add_argument("--inner", choices=sorted(INNER_CHOICES), default="dense")
    solve.add_argument("--max-iterations", type=int, default=DEFAULT_MAX_ITERATIONS)
    solve.add_argument("--out", help="trace CSV path (default stdout)")
    solve.set_defaults(handler=cmd_solve)

    verify = commands.add_parser("verify", help="run a campaign and check the bounds")
    verify.add_argument("--experiment", help="experiment file (YAML)")
    verify.add_argument("--fixture", help="run inline on a named problem")
    verify.add_argument("--states", type=int)
    verify.add_argument("--actions", type=int, default=3)
    verify.add_argument("--branching", type=int, default=3)
    verify.add_argument("--seed", type=int)
    verify.add_argument("--replications", type=int, default=1)
    verify.add_argument("--lambdas", default="0,0.25,0.5,0.75,1")
    verify.add_argument("--gammas", default="0.9")
    verify.add_argument("--noise", default="none")
    verify.add_argument("--epsilon", type=float, default=DEFAULT_STOP_EPSILON)
    verify.add_argument("--max-iterations", type=int, default=DEFAULT_MAX_ITERATIONS)
    verify.add_argument("--checks", help="'all' or a comma list of bound ids")
    verify.add_argument("--workers", type=int)
    verify.add_argument("--out", help="report CSV path (default stdout)")
    verify.set_defaults(handler=cmd_verify)

    witness = commands.add_parser("counterexample", help="show that T_lambda expands the max-norm")
    witness.add_argument("--lambda", dest="lam", type=float, default=0.5)
    witness.add_argument("--gamma", type=float, default=0.9)
    witness.add_argument("--eps", type=float, default=1e-3)
    witness.set_defaults(handler=cmd_counterexample)

    sweep = commands.add_parser("sweep", help="outer and inner iterations as lambda varies")
    sweep.add_argument("--mdp")
    sweep.add_argument("--fixture")
    sweep.add_argument("--generator", help="N,A,B[,seed]")
    sweep.add_argument("--lambdas", required=True)
    sweep.add_argument("--inner", choices=sorted(INNER_CHOICES), default="mk")
    sweep.add_argument("--epsilon", type=float, default=DEFAULT_STOP_EPSILON)
    sweep.add_argument("--max-iterations", type=int, default=DEFAULT_MAX_ITERATIONS)
    sweep.add_argument("--seed", type=int)
    sweep.add_argument("--out")
    sweep.set_defaults(handler=cmd_sweep)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.handler(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (LpiError, OSError, yaml.YAMLError, ValueError) as e:
        logger.error(f"{e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
