"""
Tests for the bound matrices and the certification of the loss bounds
on exact and perturbed lambda policy iteration runs.
"""
import math
import unittest

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from bounds import (
    ERRATUM_NOTE,
    BoundId,
    BoundReport,
    ReportStatus,
    TraceMatrices,
    approx_bound_matrices,
    bellman_residual,
    beta,
    check_approx_bounds,
    check_convergence_case_bounds,
    check_exact_rate_bounds,
    check_exact_rate_suite,
    check_residual_lemmas,
    check_stopping,
    check_trace_identities,
    concentration,
    convergence_case_matrices,
    exact_rate_matrices,
    matrix_A,
    run_bound_checks,
    seminorm_bound_suite,
    stopping_test,
    summarize_reports,
)
from harness import GeneratorSpec, counterexample_mdp, random_mdp
from mdp_core import Policy, TraceIndexError, optimal_value, policy_transition_matrix
from seminorms import SeminormKind, SeminormSpec, max_norm, span_inf, uniform_distribution
from solvers import NoiseKind, NoiseModel, SolverConfig, StopRule, enrich_trace, run_lambda_pi

seeds = st.integers(min_value=0, max_value=2 ** 32)
LAMBDAS = [0.0, 0.25, 0.5, 0.75, 1.0]


def small_mdp(seed, gamma=0.9, n_states=6):
    return random_mdp(GeneratorSpec(n_states, 3, 3, seed=seed, gamma=gamma))


def exact_trace(mdp, lam, max_iterations=200, stop_rule=StopRule.SPAN):
    config = SolverConfig(lam=lam, max_iterations=max_iterations, stop_rule=stop_rule)
    return enrich_trace(run_lambda_pi(mdp, np.zeros(mdp.n_states), config), mdp)


def noisy_trace(mdp, lam, amplitude=0.01, iterations=60, seed=0):
    config = SolverConfig(lam=lam, max_iterations=iterations, stop_rule=StopRule.NONE)
    noise = NoiseModel(NoiseKind.UNIFORM_BOUNDED, amplitude, seed=seed)
    return enrich_trace(run_lambda_pi(mdp, np.zeros(mdp.n_states), config, noise), mdp)


def assert_all_satisfied(test, reports):
    failures = [str(report) for report in reports if not report.satisfied]
    test.assertEqual(failures, [])


def assert_sound_lines_hold(test, reports):
    assert_all_satisfied(test, [report for report in reports if report.bound_id not in BoundId.ERRATA])


def transition(mdp, policy):
    return policy_transition_matrix(mdp, policy).entries


def resolvent(mdp, matrix):
    return np.linalg.inv(np.eye(mdp.n_states) - mdp.gamma * matrix)


class TestBoundReport(unittest.TestCase):
    """Slack, tolerance and status semantics"""

    def test_componentwise_slack(self):
        """Test slack as the smallest componentwise gap"""
        report = BoundReport("th.3", [1.0, 2.0], [1.5, 2.1])
        self.assertAlmostEqual(report.slack, 0.1)
        self.assertTrue(report.satisfied)

    def test_violation_is_flagged(self):
        """Test that an inequality failing beyond tolerance is unsatisfied"""
        report = BoundReport("th.3", 1.0, 0.5)
        self.assertFalse(report.satisfied)
        self.assertLess(report.margin, 0.0)

    def test_tolerance_scales_with_rhs(self):
        """Test that the tolerance grows with the size of the right-hand side"""
        self.assertTrue(BoundReport("th.3", 1e6 + 1e-3, 1e6).satisfied)
        self.assertFalse(BoundReport("th.3", 1.0 + 1e-6, 1.0).satisfied)

    def test_equality_slack(self):
        """Test that an equality report uses its largest deviation"""
        report = BoundReport("lbg", [1.0, 2.0], [1.0, 2.5], equality=True)
        self.assertAlmostEqual(report.slack, -0.5)
        self.assertFalse(report.satisfied)

    def test_special_statuses_are_satisfied(self):
        """Test vacuous and not-applicable reports"""
        vacuous = BoundReport.vacuous("crocnu.1", 3.0, "C(nu) is infinite")
        skipped = BoundReport.not_applicable("piconverges", "policy did not settle")
        self.assertEqual(vacuous.status, ReportStatus.VACUOUS)
        self.assertEqual(vacuous.slack, math.inf)
        self.assertTrue(vacuous.satisfied and skipped.satisfied)
        self.assertEqual(skipped.slack, 0.0)

    def test_summary_keeps_tightest(self):
        """Test that summaries keep the lowest-margin report per id"""
        reports = [BoundReport("th.3", 0.0, 1.0), BoundReport("th.3", 0.0, 0.2), BoundReport("dg", 0.0, 3.0)]
        summary = summarize_reports(reports)
        self.assertEqual([report.bound_id for report in summary], ["th.3", "dg"])
        self.assertAlmostEqual(summary[0].slack, 0.2)


class TestScalarsAndTests(unittest.TestCase):
    """beta, C(nu) and the span stopping test"""

    def test_beta_endpoints(self):
        """Test beta at lambda 0, 1 and in between"""
        self.assertEqual(beta(0.0, 0.9), 0.9)
        self.assertEqual(beta(1.0, 0.9), 0.0)
        self.assertAlmostEqual(beta(0.5, 0.9), 0.45 / 0.55)
        with self.assertRaises(ValueError):
            beta(1.2, 0.9)

    def test_concentration_coefficient(self):
        """Test C(nu) on the counterexample"""
        mdp = counterexample_mdp(0.9)
        coefficient = concentration(mdp, [0.5, 0.5])
        self.assertEqual(coefficient.value, 2.0)
        self.assertAlmostEqual(coefficient.factor(2.0), math.sqrt(2.0))
        self.assertEqual(coefficient.factor(math.inf), 1.0)
        self.assertFalse(concentration(mdp, [1.0, 0.0]).finite)

    def test_stopping_test(self):
        """Test the span stopping test"""
        mdp = counterexample_mdp(0.9)
        self.assertTrue(stopping_test(mdp, [9.0, 10.0], 0.01))
        self.assertFalse(stopping_test(mdp, [0.0, 0.0], 0.01))
        with self.assertRaises(ValueError):
            stopping_test(mdp, [0.0, 0.0], 0.0)


class TestStochasticMatrices(unittest.TestCase):
    """Every bound matrix family is row-stochastic"""

    @settings(max_examples=40, deadline=None)
    @given(seeds, st.sampled_from(LAMBDAS), st.sampled_from([0.5, 0.9]))
    def test_matrix_families(self, seed, lam, gamma):
        """Test that every bound matrix family is row-stochastic"""
        mdp = small_mdp(seed, gamma)
        trace = noisy_trace(mdp, lam, iterations=8, seed=seed)
        rng = np.random.default_rng(seed)
        j, k = sorted(rng.choice(np.arange(1, 9), size=2, replace=False).tolist())
        matrices = (list(exact_rate_matrices(trace, mdp, j, k))
                    + list(approx_bound_matrices(trace, mdp, j, k))
                    + list(convergence_case_matrices(mdp, trace[k].policy, lam, j, k, trace.optimal_policy))
                    + [matrix_A(mdp, trace[k].policy, lam)])
        for matrix in matrices:
            self.assertGreaterEqual(matrix.entries.min(), 0.0)
            assert_allclose(matrix.row_sums(), 1.0, atol=1e-8)

    def test_products_survive_recomputation(self):
        """Test cached running products against recomputation"""
        mdp = small_mdp(3)
        trace = noisy_trace(mdp, 0.5, iterations=12)
        matrices = TraceMatrices(trace, mdp)
        matrices.product(12, 1)
        matrices.product(9, 4)
        matrices.verify_products(seed=trace.seed)

    def test_pair_order_is_checked(self):
        """Test rejection of empty or out-of-range iteration pairs"""
        mdp = small_mdp(3)
        trace = exact_trace(mdp, 0.5)
        with self.assertRaises(TraceIndexError):
            exact_rate_matrices(trace, mdp, 2, 2)
        with self.assertRaises(TraceIndexError):
            check_exact_rate_bounds(trace, mdp, 1, len(trace) + 3)

    def test_error_propagation_closed_forms(self):
        """Test B_jk and B'_jk against transition products at lambda 0 and 1"""
        mdp = small_mdp(6)
        gamma = mdp.gamma
        j, k = 2, 6
        for lam in (0.0, 1.0):
            trace = noisy_trace(mdp, lam, iterations=10, seed=6)
            p = {i: transition(mdp, trace[i].policy) for i in range(j, k + 1)}
            p_star = transition(mdp, trace.optimal_policy)
            b_jk, b_prime, *_ = approx_bound_matrices(trace, mdp, j, k)
            if lam == 0.0:
                chain = np.eye(mdp.n_states)
                for i in range(j + 1, k + 1):
                    chain = p[i] @ chain
                expected = (1.0 - gamma) * resolvent(mdp, p[k]) @ chain
            else:
                expected = ((1.0 - gamma) * np.linalg.matrix_power(p_star, k - j - 1)
                            @ resolvent(mdp, p[j + 1]) @ p[j + 1])
            assert_allclose(b_jk.entries, expected, atol=1e-10)
            assert_allclose(b_prime.entries,
                            gamma * expected @ p[j] + (1.0 - gamma) * np.linalg.matrix_power(p_star, k - j),
                            atol=1e-10)

    def test_residual_matrices_do_not_depend_on_lambda(self):
        """Test C_k, C'_k, D and D'_k against their closed forms"""
        mdp = small_mdp(6)
        gamma = mdp.gamma
        for lam in (0.0, 1.0):
            trace = noisy_trace(mdp, lam, iterations=10, seed=6)
            p_k, p_next = transition(mdp, trace[5].policy), transition(mdp, trace[6].policy)
            p_star = transition(mdp, trace.optimal_policy)
            _, _, c_k, c_prime, d_matrix, d_prime = approx_bound_matrices(trace, mdp, 2, 5)
            star = resolvent(mdp, p_star)
            assert_allclose(c_k.entries, (1.0 - gamma) ** 2 * star @ p_star @ resolvent(mdp, p_k), atol=1e-10)
            assert_allclose(c_prime.entries, (1.0 - gamma) ** 2 * star @ p_next @ resolvent(mdp, p_next),
                            atol=1e-10)
            assert_allclose(d_matrix.entries, (1.0 - gamma) * p_star @ star, atol=1e-10)
            assert_allclose(d_prime.entries, (1.0 - gamma) * p_k @ resolvent(mdp, p_k), atol=1e-10)

    def test_convergence_case_closed_forms(self):
        """Test B_v at lambda 1 and A^pi at lambda 0 against closed forms"""
        mdp = small_mdp(10)
        gamma = mdp.gamma
        policy = Policy([1, 0, 2, 1, 0, 2])
        p = transition(mdp, policy)
        _, pi_star = optimal_value(mdp)
        p_star = transition(mdp, pi_star)
        b_v, d_matrix, a_matrix, a_jk, *_ = convergence_case_matrices(mdp, policy, 1.0, 0, 3, pi_star)
        assert_allclose(b_v.entries, (1.0 - gamma) * resolvent(mdp, p_star) @ p, atol=1e-10)
        assert_allclose(d_matrix.entries, (1.0 - gamma) * p_star @ resolvent(mdp, p_star), atol=1e-10)
        b_v, _, a_matrix, a_jk, *_ = convergence_case_matrices(mdp, policy, 0.0, 0, 3, pi_star)
        assert_allclose(a_matrix.entries, p, atol=1e-10)
        assert_allclose(b_v.entries, (1.0 - gamma) * resolvent(mdp, p) @ p, atol=1e-10)
        assert_allclose(a_jk.entries, (1.0 - gamma) * resolvent(mdp, p) @ np.linalg.matrix_power(p, 2),
                        atol=1e-10)


class TestExactRates(unittest.TestCase):
    """Componentwise and seminorm exact rates"""

    @settings(max_examples=8, deadline=None)
    @given(seeds, st.sampled_from([0.5, 0.9]))
    def test_exact_rate_suite_holds(self, seed, gamma):
        """Test the exact-rate suite on random problems"""
        mdp = small_mdp(seed, gamma)
        for lam in LAMBDAS:
            trace = exact_trace(mdp, lam)
            reports = check_exact_rate_suite(trace, mdp, max_k=12)
            assert_sound_lines_hold(self, reports)
            self.assertEqual({report.bound_id for report in reports}, set(BoundId.EXACT_RATES))

    def test_literal_third_line_fails_where_the_shifted_line_holds(self):
        """Test a known exact run that violates the literal thexact.3 line"""
        mdp = random_mdp(GeneratorSpec(8, 3, 3, seed=1, gamma=0.9))
        trace = exact_trace(mdp, 0.25, max_iterations=40, stop_rule=StopRule.NONE)
        reports = {report.bound_id: report for report in check_exact_rate_suite(trace, mdp, max_k=30)}
        literal = reports["thexact.3"]
        self.assertEqual(literal.status, ReportStatus.CHECKED)
        self.assertFalse(literal.satisfied)
        self.assertEqual(literal.note, ERRATUM_NOTE)
        for bound_id in ("thexact.3.shifted", "croclpi.5.shifted", "croclpi.6.shifted", "crocnu.3.shifted"):
            self.assertEqual(reports[bound_id].status, ReportStatus.CHECKED)
            self.assertTrue(reports[bound_id].satisfied, str(reports[bound_id]))

    def test_shift_makes_the_residual_nonnegative(self):
        """Test the lowered restart value and the shifted componentwise line"""
        mdp = random_mdp(GeneratorSpec(8, 3, 3, seed=1, gamma=0.9))
        trace = exact_trace(mdp, 0.25, max_iterations=12, stop_rule=StopRule.NONE)
        for k0 in range(4):
            residual = trace[k0].bellman_residual
            lowered = trace[k0].value - np.max(-residual) / (1.0 - mdp.gamma)
            self.assertGreaterEqual(bellman_residual(mdp, lowered).min(), -1e-10)
            for k in range(k0 + 1, 8):
                reports = check_exact_rate_bounds(trace, mdp, k0, k)
                self.assertTrue(reports[-1].satisfied, str(reports[-1]))
                self.assertEqual(reports[-1].bound_id, "thexact.3.shifted")

    def test_twenty_seeds_on_eight_states(self):
        """Test the sound exact-rate lines over 20 seeded 8x3 problems up to k=30"""
        for seed in range(20):
            mdp = random_mdp(GeneratorSpec(8, 3, 3, seed=seed, gamma=0.9))
            for lam in LAMBDAS:
                trace = exact_trace(mdp, lam, max_iterations=30, stop_rule=StopRule.NONE)
                reports = check_exact_rate_suite(trace, mdp, max_k=30)
                self.assertEqual(len(reports), len(BoundId.EXACT_RATES))
                assert_sound_lines_hold(self, reports)

    def test_linear_rate_in_max_norm(self):
        """Test the geometric max-norm rate of exact runs"""
        mdp = small_mdp(21)
        trace = exact_trace(mdp, 0.5)
        gap = span_inf(trace.optimal_value - trace[0].value)
        for record in trace.records[1:]:
            bound = mdp.gamma ** record.k / (1.0 - mdp.gamma) * gap
            self.assertLessEqual(max_norm(record.loss), bound + 1e-9)

    def test_noisy_trace_is_not_applicable(self):
        """Test that perturbed traces skip the exact rates"""
        mdp = small_mdp(5)
        reports = check_exact_rate_bounds(noisy_trace(mdp, 0.5), mdp, 0, 3)
        self.assertTrue(all(report.status == ReportStatus.NOT_APPLICABLE for report in reports))

    def test_seminorm_suite_with_other_orders(self):
        """Test the seminorm suite at p = 1 and p = 4"""
        mdp = small_mdp(8)
        trace = exact_trace(mdp, 0.75)
        for p in (1.0, 4.0):
            spec = SeminormSpec(SeminormKind.SPAN_P_WEIGHTED, p, uniform_distribution(mdp.n_states))
            reports = seminorm_bound_suite(trace, mdp, spec, None, 0, 5)
            assert_sound_lines_hold(self, reports)

    def test_vacuous_concentration(self):
        """Test vacuous C(nu) lines when nu misses a reachable state"""
        mdp = counterexample_mdp(0.9)
        trace = exact_trace(mdp, 0.5)
        reports = check_exact_rate_suite(trace, mdp, nu=[1.0, 0.0])
        statuses = {report.bound_id: report.status for report in reports}
        self.assertEqual(statuses["crocnu.1"], ReportStatus.VACUOUS)
        self.assertEqual(statuses["crocnu.3.shifted"], ReportStatus.VACUOUS)


class TestApproximateBounds(unittest.TestCase):
    """Bounds driven by errors and residuals"""

    @settings(max_examples=6, deadline=None)
    @given(seeds, st.sampled_from([0.001, 0.01]))
    def test_componentwise_bounds_hold(self, seed, amplitude):
        """Test the error, policy residual and residual bounds on perturbed runs"""
        mdp = small_mdp(seed)
        for lam in LAMBDAS:
            trace = noisy_trace(mdp, lam, amplitude, iterations=50, seed=seed)
            assert_all_satisfied(self, check_approx_bounds(trace, mdp, 10, 20))
            assert_all_satisfied(self, check_residual_lemmas(trace, mdp))

    @settings(max_examples=6, deadline=None)
    @given(seeds, st.sampled_from([0.5, 0.9]))
    def test_identities_hold(self, seed, gamma):
        """Test the trace identities on perturbed runs"""
        mdp = small_mdp(seed, gamma)
        for lam in LAMBDAS:
            reports = check_trace_identities(noisy_trace(mdp, lam, iterations=30, seed=seed), mdp)
            assert_all_satisfied(self, reports)
            self.assertEqual([report.bound_id for report in reports], list(BoundId.IDENTITIES))

    def test_tail_loss_below_classical_bound(self):
        """Test the tail loss against 2 gamma eps / (1 - gamma)^2"""
        mdp = small_mdp(13)
        amplitude = 0.01
        trace = noisy_trace(mdp, 0.5, amplitude, iterations=200, seed=13)
        tail = max(max_norm(record.loss) for record in trace.records[-20:])
        self.assertLessEqual(tail, 2.0 * mdp.gamma * amplitude / (1.0 - mdp.gamma) ** 2 + 1e-8)

    def test_window_must_fit(self):
        """Test rejection of a window longer than the trace"""
        mdp = small_mdp(2)
        trace = noisy_trace(mdp, 0.5, iterations=10)
        with self.assertRaises(TraceIndexError):
            check_approx_bounds(trace, mdp, 5, 10)


class TestStoppingAndConvergence(unittest.TestCase):
    """Stopping certificate and converged-run bounds"""

    @settings(max_examples=10, deadline=None)
    @given(seeds, st.sampled_from(LAMBDAS))
    def test_stopping_certificate(self, seed, lam):
        """Test that passing the span test certifies epsilon-optimality"""
        mdp = small_mdp(seed)
        trace = exact_trace(mdp, lam)
        reports = check_stopping(trace, mdp, 0.01)
        self.assertEqual(reports[0].status, ReportStatus.CHECKED)
        assert_all_satisfied(self, reports)

    def test_converged_run(self):
        """Test every convergence-case line on a settled exact run"""
        mdp = small_mdp(4, gamma=0.5)
        trace = exact_trace(mdp, 0.5, max_iterations=120, stop_rule=StopRule.NONE)
        reports = check_convergence_case_bounds(trace, mdp)
        self.assertEqual([report.bound_id for report in reports], list(BoundId.CONVERGENCE))
        self.assertEqual([report.status for report in reports], [ReportStatus.CHECKED] * 7)
        assert_all_satisfied(self, reports)

    def test_short_run_is_not_applicable(self):
        """Test that short runs skip the convergence-case lines"""
        mdp = counterexample_mdp(0.9)
        config = SolverConfig(lam=0.5, max_iterations=2, stop_rule=StopRule.NONE)
        trace = enrich_trace(run_lambda_pi(mdp, np.zeros(2), config), mdp)
        statuses = {report.bound_id: report.status for report in check_convergence_case_bounds(trace, mdp)}
        self.assertEqual(statuses["vconverges"], ReportStatus.NOT_APPLICABLE)

    def test_infinite_concentration_makes_the_value_line_vacuous(self):
        """Test vconverges.nu when nu misses a reachable state"""
        mdp = small_mdp(4, gamma=0.5)
        trace = exact_trace(mdp, 0.5, max_iterations=120, stop_rule=StopRule.NONE)
        nu = np.zeros(mdp.n_states)
        nu[0] = 1.0
        statuses = {report.bound_id: report.status for report in check_convergence_case_bounds(trace, mdp, nu=nu)}
        self.assertEqual(statuses["vconverges.nu"], ReportStatus.VACUOUS)
        self.assertEqual(statuses["vconverges"], ReportStatus.CHECKED)

    def test_settled_policy_seminorm_lines(self):
        """Test piconverges and its seminorm lines on perturbed runs"""
        settled = 0
        for seed in range(6):
            mdp = small_mdp(seed, gamma=0.5)
            trace = noisy_trace(mdp, 0.5, amplitude=1e-4, iterations=40, seed=seed)
            reports = check_convergence_case_bounds(trace, mdp, window=10)
            assert_all_satisfied(self, reports)
            statuses = {report.bound_id: report.status for report in reports}
            self.assertEqual(len({statuses[bound_id] for bound_id in BoundId.POLICY_CONVERGENCE}), 1)
            settled += statuses["piconverges"] == ReportStatus.CHECKED
        self.assertGreater(settled, 0)


class TestRunBoundChecks(unittest.TestCase):
    """Dispatch by bound id"""

    def setUp(self):
        self.mdp = small_mdp(17)

    def test_unknown_id(self):
        """Test rejection of unknown bound ids"""
        trace = exact_trace(self.mdp, 0.5)
        with self.assertRaisesRegex(ValueError, "valid ids"):
            run_bound_checks(trace, self.mdp, ["th.9"])

    def test_one_report_per_requested_id(self):
        """Test one report per requested id, in request order"""
        trace = noisy_trace(self.mdp, 0.5, iterations=40)
        ids = list(BoundId.TH + BoundId.SPAPI + BoundId.CALPI + BoundId.IDENTITIES)
        reports = run_bound_checks(trace, self.mdp, ids)
        self.assertEqual([report.bound_id for report in reports], ids)
        assert_all_satisfied(self, reports)

    def test_full_budget_enables_asymptotic_lines(self):
        """Test that full-budget runs check the asymptotic lines"""
        trace = noisy_trace(self.mdp, 0.25, iterations=40)
        statuses = {report.bound_id: report.status
                    for report in run_bound_checks(trace, self.mdp, ["spapi.1", "calpi.1"])}
        self.assertEqual(set(statuses.values()), {ReportStatus.CHECKED})

    def test_everything_on_an_exact_run(self):
        """Test every bound id on an exact run"""
        trace = exact_trace(self.mdp, 0.75)
        reports = run_bound_checks(trace, self.mdp, list(BoundId.ALL))
        self.assertEqual(len(reports), len(BoundId.ALL))
        assert_sound_lines_hold(self, reports)

    def test_counterexample_policy_switches(self):
        """Test every bound id on the counterexample"""
        mdp = counterexample_mdp(0.9)
        trace = exact_trace(mdp, 0.5)
        self.assertEqual(trace[-1].policy, Policy([0, 1]))
        assert_sound_lines_hold(self, run_bound_checks(trace, mdp, list(BoundId.ALL)))


if __name__ == "__main__":
    unittest.main()
