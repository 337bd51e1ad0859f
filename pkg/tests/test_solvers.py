"""
Tests for the iteration drivers and trace enrichment.
"""
import unittest

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from harness import GeneratorSpec, counterexample_mdp, random_mdp
from mdp_core import Policy, TraceIndexError, evaluate_policy, greedy, optimal_value
from seminorms import max_norm
from solvers import (
    InnerMode,
    NoiseKind,
    NoiseModel,
    SolverConfig,
    StopRule,
    Terminal,
    enrich_trace,
    run_lambda_pi,
    run_modified_policy_iteration,
    run_policy_iteration,
    run_value_iteration,
    tail_limsup,
)

seeds = st.integers(min_value=0, max_value=2 ** 32)
LAMBDAS = [0.0, 0.25, 0.5, 0.75, 1.0]


def small_mdp(seed, gamma=0.9):
    return random_mdp(GeneratorSpec(6, 3, 3, seed=seed, gamma=gamma))


def values_of(trace):
    return [record.value for record in trace.records]


class TestSolverConfig(unittest.TestCase):
    """Validation of run settings"""

    def test_rejects_invalid_settings(self):
        """Test rejection of invalid solver settings"""
        with self.assertRaisesRegex(ValueError, "lambda out of"):
            SolverConfig(lam=1.5)
        with self.assertRaises(ValueError):
            SolverConfig(max_iterations=0)
        with self.assertRaises(ValueError):
            SolverConfig(stop_epsilon=0.0)
        with self.assertRaises(ValueError):
            SolverConfig(inner_mode="sparse")
        with self.assertRaises(ValueError):
            SolverConfig(mpi_steps=0)

    def test_dict_round_trip_keeps_lambda(self):
        """Test solver settings through their dictionary form"""
        config = SolverConfig(lam=0.25, max_iterations=7, seed=3, stop_rule=StopRule.NONE)
        again = SolverConfig.from_dict(config.to_dict())
        self.assertEqual(again.to_dict(), config.to_dict())
        self.assertEqual(config.with_lambda(0.75).lam, 0.75)


class TestNoiseModel(unittest.TestCase):
    """Error injection"""

    def test_parse(self):
        """Test parsing noise descriptions"""
        self.assertEqual(NoiseModel.from_string("none").kind, NoiseKind.NONE)
        noise = NoiseModel.from_string("uniform:0.01")
        self.assertEqual((noise.kind, noise.amplitude), (NoiseKind.UNIFORM_BOUNDED, 0.01))
        self.assertEqual(NoiseModel.from_string("projection:3").rank, 3)
        with self.assertRaises(ValueError):
            NoiseModel.from_string("uniform")
        with self.assertRaises(ValueError):
            NoiseModel.from_string("laplace:0.1")
        with self.assertRaises(ValueError):
            NoiseModel(NoiseKind.UNIFORM_BOUNDED, -1.0)

    def test_zero_amplitude_is_inactive(self):
        """Test that zero amplitude leaves values untouched"""
        self.assertFalse(NoiseModel(NoiseKind.UNIFORM_BOUNDED, 0.0).active)
        w = np.arange(4.0)
        value, error = NoiseModel(NoiseKind.UNIFORM_BOUNDED, 0.0).perturb(3, w)
        self.assertIs(value, w)
        assert_array_equal(error, 0.0)

    def test_draws_are_bounded_and_reproducible(self):
        """Test bounded, seed-keyed noise draws"""
        w = np.zeros(50)
        for kind in (NoiseKind.UNIFORM_BOUNDED, NoiseKind.GAUSSIAN_CLIPPED):
            first = NoiseModel(kind, 0.01, seed=5).perturb(4, w)[1]
            second = NoiseModel(kind, 0.01, seed=5).perturb(4, w)[1]
            assert_array_equal(first, second)
            self.assertLessEqual(np.abs(first).max(), 0.01)
            self.assertFalse(np.array_equal(first, NoiseModel(kind, 0.01, seed=5).perturb(5, w)[1]))

    def test_projection_is_idempotent(self):
        """Test that projecting twice adds no error"""
        noise = NoiseModel(NoiseKind.RANK_PROJECTION, rank=2, seed=1)
        w = np.linspace(0.0, 3.0, 6) ** 2
        projected, error = noise.perturb(1, w)
        assert_allclose(projected, w + error)
        again, residual = noise.perturb(2, projected)
        assert_allclose(residual, 0.0, atol=1e-10)

    def test_projection_keeps_constants(self):
        """Test that projection keeps constant vectors"""
        noise = NoiseModel(NoiseKind.RANK_PROJECTION, rank=1, seed=1)
        _, error = noise.perturb(1, np.full(5, 2.0))
        assert_allclose(error, 0.0, atol=1e-12)


class TestValueIteration(unittest.TestCase):
    """Value Iteration and its Modified Policy Iteration generalization"""

    def setUp(self):
        self.mdp = counterexample_mdp(0.9)
        self.config = SolverConfig(max_iterations=500)

    def test_first_backup(self):
        """Test the first Value Iteration backup"""
        trace = run_value_iteration(self.mdp, np.zeros(2), self.config)
        assert_allclose(trace[1].value, [0.0, 1.0])
        self.assertEqual(trace.terminal, Terminal.CONVERGED)

    def test_starting_at_optimum_stops_immediately(self):
        """Test a run started at the optimum"""
        v_star, _ = optimal_value(self.mdp)
        trace = run_value_iteration(self.mdp, v_star, self.config)
        self.assertEqual(trace.iterations, 0)
        self.assertEqual(trace.terminal, Terminal.CONVERGED)

    def test_budget_is_not_an_error(self):
        """Test a run that exhausts its budget"""
        trace = run_value_iteration(self.mdp, np.zeros(2), SolverConfig(max_iterations=3))
        self.assertEqual(trace.terminal, Terminal.BUDGET)
        self.assertEqual(trace.iterations, 3)

    @settings(max_examples=20, deadline=None)
    @given(seeds)
    def test_linear_rate(self, seed):
        """Test the geometric rate of Value Iteration"""
        mdp = small_mdp(seed)
        v_star, _ = optimal_value(mdp)
        trace = run_value_iteration(mdp, np.zeros(mdp.n_states), SolverConfig(max_iterations=60))
        start = max_norm(v_star)
        for record in trace.records:
            self.assertLessEqual(max_norm(v_star - record.value), mdp.gamma ** record.k * start + 1e-9)

    @settings(max_examples=20, deadline=None)
    @given(seeds)
    def test_one_step_mpi_is_value_iteration(self, seed):
        """Test one-step Modified Policy Iteration against Value Iteration"""
        mdp = small_mdp(seed)
        v0 = np.zeros(mdp.n_states)
        vi = run_value_iteration(mdp, v0, self.config)
        mpi = run_modified_policy_iteration(mdp, v0, self.config)
        self.assertEqual(len(vi), len(mpi))
        for left, right in zip(values_of(vi), values_of(mpi)):
            assert_array_equal(left, right)

    @settings(max_examples=10, deadline=None)
    @given(seeds)
    def test_many_step_mpi_converges(self, seed):
        """Test convergence of many-step Modified Policy Iteration"""
        mdp = small_mdp(seed)
        config = SolverConfig(mpi_steps=50)
        trace = enrich_trace(run_modified_policy_iteration(mdp, np.zeros(mdp.n_states), config), mdp)
        self.assertEqual(trace.terminal, Terminal.CONVERGED)
        self.assertLessEqual(max_norm(trace.output_loss), config.stop_epsilon)


class TestPolicyIteration(unittest.TestCase):
    """Exact and perturbed Policy Iteration"""

    def test_counterexample_from_stay(self):
        """Test Policy Iteration on the counterexample"""
        mdp = counterexample_mdp(0.9)
        trace = run_policy_iteration(mdp, [1, 1], SolverConfig())
        self.assertEqual(trace.terminal, Terminal.CONVERGED)
        self.assertEqual(trace[-1].policy, Policy([0, 1]))
        assert_allclose(trace[-1].value, [9.0, 10.0], atol=1e-12)

    def test_optimal_start_is_stable(self):
        """Test Policy Iteration started at the optimal policy"""
        mdp = counterexample_mdp(0.9)
        trace = run_policy_iteration(mdp, [0, 1], SolverConfig())
        self.assertEqual(trace.iterations, 0)

    @settings(max_examples=25, deadline=None)
    @given(seeds)
    def test_values_improve_monotonically(self, seed):
        """Test monotone values under Policy Iteration"""
        mdp = small_mdp(seed)
        trace = run_policy_iteration(mdp, np.zeros(mdp.n_states, dtype=int), SolverConfig())
        self.assertEqual(trace.terminal, Terminal.CONVERGED)
        for before, after in zip(trace.records, trace.records[1:]):
            self.assertTrue((after.value >= before.value - 1e-9).all())
        v_star, _ = optimal_value(mdp)
        assert_allclose(trace[-1].value, v_star, atol=1e-9, rtol=0)


class TestLambdaPolicyIteration(unittest.TestCase):
    """lambda Policy Iteration, exact and approximate"""

    def setUp(self):
        self.mdp = counterexample_mdp(0.9)

    def test_counterexample_first_step(self):
        """Test the first lambda Policy Iteration step on the counterexample"""
        trace = run_lambda_pi(self.mdp, [0.1, 0.0], SolverConfig(lam=0.5))
        self.assertEqual(trace[1].policy, Policy([1, 0]))
        assert_allclose(trace[1].value, [0.0818181818181818, 1.0818181818181818], rtol=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(seeds)
    def test_lambda_zero_is_value_iteration(self, seed):
        """Test that lambda 0 reproduces Value Iteration"""
        mdp = small_mdp(seed)
        v0 = np.zeros(mdp.n_states)
        vi = run_value_iteration(mdp, v0, SolverConfig())
        lpi = run_lambda_pi(mdp, v0, SolverConfig(lam=0.0))
        self.assertEqual(len(vi), len(lpi))
        for left, right in zip(values_of(vi), values_of(lpi)):
            assert_array_equal(left, right)

    @settings(max_examples=20, deadline=None)
    @given(seeds)
    def test_lambda_one_is_policy_iteration(self, seed):
        """Test that lambda 1 reproduces Policy Iteration"""
        mdp = small_mdp(seed)
        v0 = np.zeros(mdp.n_states)
        lpi = run_lambda_pi(mdp, v0, SolverConfig(lam=1.0))
        pi = run_policy_iteration(mdp, greedy(mdp, v0), SolverConfig())
        for k in range(1, min(len(lpi), len(pi) + 1)):
            assert_array_equal(lpi[k].value, pi[k - 1].value)
            assert_allclose(lpi[k].value, evaluate_policy(mdp, lpi[k].policy), atol=1e-9, rtol=0)

    @settings(max_examples=10, deadline=None)
    @given(seeds, st.sampled_from([0.5, 0.9]))
    def test_exact_runs_reach_epsilon_optimality(self, seed, gamma):
        """Test epsilon-optimal output of exact runs"""
        mdp = small_mdp(seed, gamma)
        for lam in LAMBDAS:
            trace = enrich_trace(run_lambda_pi(mdp, np.zeros(mdp.n_states), SolverConfig(lam=lam)), mdp)
            self.assertEqual(trace.terminal, Terminal.CONVERGED)
            self.assertLessEqual(max_norm(trace.output_loss), trace.stop_epsilon)

    def test_mk_mode_matches_dense_mode(self):
        """Test the M_k inner mode against the dense mode"""
        mdp = random_mdp(GeneratorSpec(6, 3, 3, seed=11))
        dense = run_lambda_pi(mdp, np.zeros(6), SolverConfig(lam=0.6))
        iterated = run_lambda_pi(mdp, np.zeros(6), SolverConfig(lam=0.6, inner_mode=InnerMode.MK_ITERATION))
        self.assertEqual(len(dense), len(iterated))
        for left, right in zip(values_of(dense), values_of(iterated)):
            assert_allclose(left, right, atol=1e-9, rtol=0)
        self.assertGreater(iterated.inner_iterations, iterated.iterations)

    def test_mk_mode_logs_claimed_and_measured_modulus(self):
        """Test debug logging of the claimed and measured M_k modulus"""
        mdp = random_mdp(GeneratorSpec(6, 3, 3, seed=11))
        with self.assertLogs("solvers", level="DEBUG") as captured:
            run_lambda_pi(mdp, np.zeros(6), SolverConfig(lam=0.6, inner_mode=InnerMode.MK_ITERATION))
        claims = [line for line in captured.output if "claimed modulus" in line]
        self.assertTrue(claims)
        self.assertIn("lambda*gamma=0.54", claims[0])
        self.assertIn("outer beta=0.782609", claims[0])
        self.assertIn("measured", claims[0])

    def test_zero_amplitude_equals_exact_run(self):
        """Test that zero-amplitude noise reproduces the exact run"""
        exact = run_lambda_pi(self.mdp, np.zeros(2), SolverConfig(lam=0.5), NoiseModel(seed=4))
        zero = run_lambda_pi(self.mdp, np.zeros(2), SolverConfig(lam=0.5),
                             NoiseModel(NoiseKind.UNIFORM_BOUNDED, 0.0, seed=4))
        for left, right in zip(values_of(exact), values_of(zero)):
            assert_array_equal(left, right)

    def test_noisy_run_records_errors(self):
        """Test recorded errors of a perturbed run"""
        noise = NoiseModel(NoiseKind.UNIFORM_BOUNDED, 0.01, seed=2)
        config = SolverConfig(lam=0.5, max_iterations=30, stop_rule=StopRule.NONE)
        trace = run_lambda_pi(self.mdp, np.zeros(2), config, noise)
        self.assertEqual(trace.iterations, 30)
        self.assertTrue(trace.ran_full_budget)
        self.assertFalse(trace.is_exact)
        for record in trace.records[1:]:
            assert_allclose(record.value, record.pre_noise + record.error)
            self.assertLessEqual(np.abs(record.error).max(), 0.01)


class TestEnrichment(unittest.TestCase):
    """Derived per-iteration quantities"""

    @settings(max_examples=15, deadline=None)
    @given(seeds, st.sampled_from(LAMBDAS))
    def test_loss_splits_into_distance_and_shift(self, seed, lam):
        """Test the loss split into distance and shift"""
        mdp = small_mdp(seed)
        noise = NoiseModel(NoiseKind.UNIFORM_BOUNDED, 0.01, seed=seed)
        config = SolverConfig(lam=lam, max_iterations=25, stop_rule=StopRule.NONE)
        trace = enrich_trace(run_lambda_pi(mdp, np.zeros(mdp.n_states), config, noise), mdp)
        for record in trace.records[1:]:
            assert_allclose(record.loss, record.distance + record.shift, atol=1e-9, rtol=0)
            self.assertGreaterEqual(record.loss.min(), -1e-9)

    def test_first_record_has_no_policy_quantities(self):
        """Test the enriched first record"""
        mdp = counterexample_mdp(0.9)
        trace = enrich_trace(run_lambda_pi(mdp, np.zeros(2), SolverConfig(lam=0.5)), mdp)
        self.assertIsNone(trace[0].loss)
        self.assertIsNotNone(trace[0].bellman_residual)
        assert_allclose(trace.optimal_value, [9.0, 10.0], atol=1e-12)


class TestTailLimsup(unittest.TestCase):
    """Trailing-window maxima"""

    def setUp(self):
        mdp = counterexample_mdp(0.9)
        self.trace = enrich_trace(run_value_iteration(mdp, np.zeros(2), SolverConfig(max_iterations=500)), mdp)

    def test_window_one_is_final_value(self):
        """Test a window of one"""
        value = tail_limsup(self.trace, 1, lambda record: max_norm(record.bellman_residual))
        self.assertEqual(value, max_norm(self.trace[-1].bellman_residual))

    def test_nested_windows(self):
        """Test that larger windows give larger maxima"""
        functional = lambda record: None if record.loss is None else max_norm(record.loss)
        self.assertGreaterEqual(tail_limsup(self.trace, 20, functional), tail_limsup(self.trace, 5, functional))

    def test_rejects_bad_window(self):
        """Test rejection of invalid windows"""
        with self.assertRaises(ValueError):
            tail_limsup(self.trace, 0, lambda record: 0.0)
        with self.assertRaises(TraceIndexError):
            tail_limsup(self.trace, len(self.trace) + 1, lambda record: 0.0)


if __name__ == "__main__":
    unittest.main()
