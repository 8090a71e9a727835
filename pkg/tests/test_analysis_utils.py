import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from flprotect.adversary_utils import stability_threshold
from flprotect.analysis_utils import (
    compute_G,
    compute_Vt,
    ell_t,
    expected_q,
    h_expanded,
    innovation_transition,
    innovation_variance,
    iterate_operator_L,
    mean_error_series,
    operator_L,
    optimal_p_quadratic,
    perfect_eavesdrop_protection,
    theorem1_bound,
)
from flprotect.experiment_utils import (
    brute_force_mean_error,
    brute_force_protection,
    enumerate_operator_L,
    enumerate_Vt,
)
from flprotect.fl_utils import local_update, make_client_objectives
from flprotect.models import (
    BoundComputationError,
    ConfigurationError,
    ContractViolation,
    QuadraticObjective,
)

SEEDS = st.integers(0, 2**32 - 1)
FIXTURE_OK = settings(deadline=None, max_examples=25, suppress_health_check=[HealthCheck.function_scoped_fixture])


def _psd(rng, n):
    B = rng.normal(size=(n, n))
    return B @ B.T


class TestInnovationLinearization:

    def test_single_step_G(self):
        obj = QuadraticObjective(hessian=np.diag([1.0, 3.0]), linear=np.zeros(2))
        assert np.allclose(compute_G(obj, 0.1, 1), -0.1 * np.eye(2), atol=0)

    def test_two_step_G(self):
        obj = QuadraticObjective(hessian=[[1.0]], linear=[0.0])
        assert compute_G(obj, 0.1, 2)[0, 0] == pytest.approx(-0.19, abs=1e-15)

    def test_zero_hessian(self):
        obj = QuadraticObjective(hessian=np.zeros((2, 2)), linear=np.ones(2))
        assert np.allclose(compute_G(obj, 0.2, 3), -0.6 * np.eye(2), atol=1e-15)
        trans = innovation_transition(obj, 0.2, 3)
        assert np.allclose(trans.A, np.eye(2), atol=1e-12)
        assert np.allclose(trans.B, 0.0)

    def test_scalar_transition(self):
        obj = QuadraticObjective(hessian=[[1.0]], linear=[0.0])
        trans = innovation_transition(obj, 0.1, 1)
        assert trans.A[0, 0] == pytest.approx(0.9, abs=1e-12)
        assert trans.B[0, 0] == pytest.approx(-0.1, abs=1e-15)

    def test_learning_rate_bound(self):
        obj = QuadraticObjective(hessian=[[5.0]], linear=[0.0])
        with pytest.raises(ConfigurationError) as exc:
            innovation_transition(obj, 0.3, 2)
        assert exc.value.field_name == "eta"

    @settings(deadline=None, max_examples=50)
    @given(SEEDS)
    def test_transition_is_exact_on_quadratics(self, seed):
        rng = np.random.default_rng(seed)
        obj = make_client_objectives(1, 3, rng)[0]
        eta, steps = 0.1, 3
        trans = innovation_transition(obj, eta, steps)
        x_prev = rng.normal(size=3)
        xi_prev = local_update(x_prev, obj, eta, steps)
        zeta = rng.normal(size=3)
        xi_now = local_update(x_prev + xi_prev + zeta, obj, eta, steps)
        residual = np.linalg.norm(xi_now - (trans.A @ xi_prev + trans.B @ zeta))
        assert residual <= 1e-10 * (1.0 + np.linalg.norm(xi_now))

    def test_G_maps_gradient_to_innovation(self):
        rng = np.random.default_rng(11)
        obj = make_client_objectives(1, 3, rng)[0]
        x = rng.normal(size=3)
        assert np.allclose(local_update(x, obj, 0.1, 4), compute_G(obj, 0.1, 4) @ obj.gradient(x), atol=1e-12)


class TestOperatorL:

    def test_no_participation_is_identity(self):
        Sigma = _psd(np.random.default_rng(0), 4)
        assert np.allclose(operator_L(Sigma, 0.0, 0.3, 0.5), Sigma, atol=1e-12)

    def test_zero_input(self):
        assert np.array_equal(operator_L(np.zeros((2, 2)), 0.4, 0.3, 0.5), np.zeros((2, 2)))

    def test_rejects_asymmetric(self):
        with pytest.raises(ContractViolation):
            operator_L(np.array([[1.0, 2.0], [0.0, 1.0]]), 0.5, 0.5, 0.5)

    @settings(deadline=None, max_examples=100)
    @given(SEEDS)
    def test_matches_outcome_enumeration(self, seed):
        rng = np.random.default_rng(seed)
        d = int(rng.integers(1, 4))
        Sigma = _psd(rng, 2 * d)
        p, gamma = rng.uniform(size=2)
        M = rng.normal(size=(d, d))
        fast = operator_L(Sigma, p, gamma, M)
        slow = enumerate_operator_L(Sigma, p, gamma, M)
        assert np.max(np.abs(fast - slow)) <= 1e-12 * max(1.0, np.max(np.abs(slow)))

    @settings(deadline=None, max_examples=50)
    @given(SEEDS)
    def test_linear_and_psd_preserving(self, seed):
        rng = np.random.default_rng(seed)
        d = int(rng.integers(1, 4))
        S1, S2 = _psd(rng, 2 * d), _psd(rng, 2 * d)
        a, b = rng.uniform(0.0, 2.0, size=2)
        p, gamma = rng.uniform(size=2)
        M = rng.normal(size=(d, d))
        combined = operator_L(a * S1 + b * S2, p, gamma, M)
        separate = a * operator_L(S1, p, gamma, M) + b * operator_L(S2, p, gamma, M)
        assert np.max(np.abs(combined - separate)) <= 1e-12 * max(1.0, np.max(np.abs(combined)))
        assert np.array_equal(combined, combined.T)
        assert np.linalg.eigvalsh(combined).min() >= -1e-9 * max(1.0, np.max(np.abs(combined)))

    def test_divergence_beyond_threshold(self):
        threshold = stability_threshold(0.5, 0.5)
        Sigma0 = np.array([[1.0, 0.5], [0.5, 1.0]])
        steps, _, diverged = iterate_operator_L(Sigma0, 0.5, 0.5, 1.01 * threshold)
        assert diverged and steps < 10_000

    def test_bounded_at_half(self):
        Sigma0 = np.array([[1.0, 0.5], [0.5, 1.0]])
        _, trace, diverged = iterate_operator_L(Sigma0, 0.5, 0.5, 0.5)
        assert not diverged
        assert np.isfinite(trace)


class TestInnovationStatistics:

    def test_ell_at_zero(self):
        assert np.array_equal(ell_t(np.ones((5, 2)), 0.3, 0), np.zeros(2))

    @pytest.mark.parametrize("t", [1, 4, 9])
    def test_ell_constant_history(self, t):
        p, c = 0.3, 2.5
        assert ell_t(np.full((10, 1), c), p, t)[0] == pytest.approx(c * (1 - (1 - p) ** t), rel=1e-12)

    def test_ell_full_participation(self):
        xi = np.arange(12.0).reshape(6, 2)
        assert np.array_equal(ell_t(xi, 1.0, 4), xi[3])

    def test_variance_full_participation(self):
        xi = np.random.default_rng(0).normal(size=(8, 2))
        assert all(innovation_variance(xi, 1.0, t) == 0.0 for t in range(1, 8))

    def test_variance_constant_history(self):
        p, c, t = 0.4, 1.5, 5
        ell = c * (1 - (1 - p) ** t)
        expected = (1 - p) ** t * ell**2 + (1 - (1 - p) ** t) * (c - ell) ** 2
        assert innovation_variance(np.full((6, 1), c), p, t) == pytest.approx(expected, rel=1e-12)

    def test_variance_matches_sampled_tau(self):
        rng = np.random.default_rng(7)
        p, t, draws = 0.35, 6, 100_000
        xi = rng.normal(size=(t, 2))
        bits = rng.random((draws, t)) < p
        last = np.where(bits.any(axis=1), t - 1 - np.argmax(bits[:, ::-1], axis=1), -1)
        sample = np.where((last >= 0)[:, None], xi[np.maximum(last, 0)], 0.0)
        dev = np.sum((sample - ell_t(xi, p, t)) ** 2, axis=1)
        stderr = dev.std(ddof=1) / np.sqrt(draws)
        assert abs(dev.mean() - innovation_variance(xi, p, t)) <= 5 * stderr

    def test_expected_q_vanishes_without_drive(self):
        xi = np.random.default_rng(1).normal(size=(6, 2))
        ell = np.array([ell_t(xi, 0.4, t) for t in range(6)])
        assert np.array_equal(expected_q(xi, ell, 0.4, 1.0, 0.5, 6), np.zeros((7, 2)))
        ell0 = np.zeros((6, 2))
        assert np.array_equal(expected_q(xi, ell0, 0.0, 0.3, 0.5, 6), np.zeros((7, 2)))

    def test_expected_q_first_step(self):
        xi = np.array([[2.0], [1.0], [3.0]])
        ell = np.array([ell_t(xi, 0.5, t) for t in range(3)])
        q = expected_q(xi, ell, 0.5, 0.2, 0.5, 3)
        assert q.shape == (4, 1)
        assert q[1, 0] == pytest.approx(0.5 * 0.8 * 2.0, rel=1e-15)

    @settings(deadline=None, max_examples=100)
    @given(SEEDS)
    def test_h_identity(self, seed):
        rng = np.random.default_rng(seed)
        d = int(rng.integers(1, 4))
        t = int(rng.integers(0, 20))
        xi = rng.normal(size=(t + 1, d))
        p = float(rng.uniform(0.05, 1.0))
        M = 0.5 * rng.normal(size=(d, d))
        direct = xi[t] - M @ ell_t(xi, p, t)
        assert np.max(np.abs(direct - h_expanded(xi, p, M, t))) <= 1e-12


class TestVt:

    def test_deterministic_innovation_vanishes(self):
        xi = np.full((5, 1), 0.7)
        V, trace = compute_Vt(np.zeros(1), np.zeros(1), xi, 1.0, 0.5, 3)
        assert trace == 0.0
        assert np.array_equal(V, np.zeros((1, 1)))

    def test_full_participation_value(self):
        xi = np.full((5, 1), 0.7)
        _, trace = compute_Vt(np.ones(1), np.zeros(1), xi, 1.0, 0.5, 3)
        assert trace == pytest.approx(0.25, abs=1e-15)

    @FIXTURE_OK
    @given(SEEDS)
    def test_weighted_form_matches_enumeration(self, random_scripted, seed):
        sc = random_scripted(seed, horizon=8)
        ell = np.array([ell_t(sc.xi, sc.p, t) for t in range(8)]).reshape(8, sc.d)
        q = expected_q(sc.xi, ell, sc.p, sc.gamma, sc.M, 8)
        for t in range(8):
            s_t = sc.xi[t] - sc.M @ ell[t] + sc.M @ q[t]
            V, _ = compute_Vt(s_t, sc.r[t], sc.xi, sc.p, sc.gamma, t, M=sc.M, weight_by_M=True)
            assert np.max(np.abs(V - enumerate_Vt(sc, t))) <= 1e-9

    def test_forms_agree_for_orthogonal_M(self, scripted):
        sc = scripted(horizon=6, M=-1.0, p=0.6, gamma=0.3)
        xi = sc.xi
        s_t, r_t = np.array([0.2]), np.array([0.1])
        a, _ = compute_Vt(s_t, r_t, xi, sc.p, sc.gamma, 4)
        b, _ = compute_Vt(s_t, r_t, xi, sc.p, sc.gamma, 4, M=sc.M, weight_by_M=True)
        assert np.allclose(a, b, atol=1e-15)


class TestTheorem1Bound:

    def test_zero_problem(self):
        z = np.zeros((10, 2))
        series = theorem1_bound(z, z, z, 0.5, 0.5, 0.5, np.zeros(2), np.zeros(2), 10)
        assert np.array_equal(series.bound, np.zeros(10))
        assert series.liminf_proxy == 0.0

    def test_h_matches_expansion(self, scripted):
        sc = scripted(horizon=15, p=0.3, gamma=0.4)
        series = theorem1_bound(sc.xi, sc.zeta, sc.zeta_hat, sc.p, sc.gamma, sc.M, sc.x_c0, sc.x_a0, 15)
        for t in range(15):
            assert np.max(np.abs(series.h[t] - h_expanded(sc.xi, sc.p, sc.M, t))) <= 1e-12
        assert np.all(series.bound >= 0.0)
        assert series.tail_window == 4

    @FIXTURE_OK
    @given(SEEDS)
    def test_transient_mean_is_exact(self, random_scripted, seed):
        sc = random_scripted(seed, horizon=9)
        series = theorem1_bound(sc.xi, sc.zeta, sc.zeta_hat, sc.p, sc.gamma, sc.M, sc.x_c0, sc.x_a0, 9, g_form="transient")
        exact_mean = brute_force_mean_error(sc, 9)
        exact = brute_force_protection(sc, 9)
        assert np.max(np.abs(series.g - exact_mean[:9])) <= 1e-9
        assert np.all(np.einsum("ij,ij->i", series.g, series.g) <= exact[:9] + 1e-9)
        recursive = mean_error_series(sc.xi, sc.r, sc.p, sc.gamma, sc.M, sc.x_c0, sc.x_a0, 9)
        assert np.max(np.abs(recursive - exact_mean)) <= 1e-9

    def test_reference_scenario_liminf(self, scripted):
        sc = scripted(horizon=12)
        series = theorem1_bound(sc.xi, sc.zeta, sc.zeta_hat, 0.5, 0.5, 0.5, sc.x_c0, sc.x_a0, 12)
        assert series.lemma1_satisfied
        assert series.liminf_proxy == pytest.approx(series.bound[-3:].min())

    def test_certain_interception_delegates(self, scripted):
        sc = scripted(horizon=10)
        series = theorem1_bound(sc.xi, sc.zeta, sc.zeta_hat, 0.5, 1.0, 0.5, sc.x_c0, sc.x_a0, 10)
        values, _ = perfect_eavesdrop_protection(sc.r, 0.5, sc.x_c0, sc.x_a0, 10)
        assert np.array_equal(series.bound, values[:10])

    def test_rejects_zero_participation(self, scripted):
        sc = scripted()
        with pytest.raises(ConfigurationError):
            theorem1_bound(sc.xi, sc.zeta, sc.zeta_hat, 0.0, 0.5, 0.5, sc.x_c0, sc.x_a0, 12)

    def test_singular_inverse(self, scripted):
        sc = scripted()
        with pytest.raises(BoundComputationError):
            theorem1_bound(sc.xi, sc.zeta, sc.zeta_hat, 0.5, 0.5, 2.0, sc.x_c0, sc.x_a0, 12)

    def test_statement_and_transient_agree_late(self, scripted):
        H = 200
        sc = scripted(horizon=H, zeta=np.zeros((H, 1)))
        args = (sc.xi, sc.zeta, sc.zeta_hat, 0.5, 0.5, 0.5, sc.x_c0, sc.x_a0, H)
        statement = theorem1_bound(*args).g
        transient = theorem1_bound(*args, g_form="transient").g
        assert abs(statement[-1, 0] - transient[-1, 0]) < 1e-6


class TestPerfectEavesdropping:

    def test_no_mismatch(self):
        values, liminf = perfect_eavesdrop_protection(np.zeros((6, 2)), 0.4, [1.0, 2.0], [0.0, 0.0], 6)
        assert np.array_equal(values, np.full(7, 5.0))
        assert liminf == 5.0

    def test_full_participation(self):
        r = np.array([[1.0], [2.0], [-0.5]])
        values, _ = perfect_eavesdrop_protection(r, 1.0, [0.5], [0.0], 3)
        assert values[3] == pytest.approx((0.5 + 2.5) ** 2)

    def test_hand_value(self):
        r = np.array([[1.0]] * 4 + [[0.0]] * 4)
        values, liminf = perfect_eavesdrop_protection(r, 0.5, [0.0], [0.0], 8)
        assert values[8] == 5.0
        assert liminf == 5.0

    @FIXTURE_OK
    @given(SEEDS)
    def test_equals_enumeration(self, scripted, seed):
        rng = np.random.default_rng(seed)
        r = rng.normal(size=(10, 1))
        sc = scripted(horizon=10, p=float(rng.uniform(0.1, 0.9)), zeta=r, x_c0=(0.3,), force_mu_one=True)
        values, _ = perfect_eavesdrop_protection(sc.r, sc.p, sc.x_c0, sc.x_a0, 10)
        assert np.max(np.abs(values - brute_force_protection(sc))) <= 1e-9


class TestOptimalP:

    def test_flat_objective(self):
        best = optimal_p_quadratic(np.zeros((5, 1)), [1.0], [0.0], 5)
        assert best.flat
        assert best.value == 1.0

    def test_single_mismatch(self):
        best = optimal_p_quadratic(np.array([[1.0]]), [0.0], [0.0], 1)
        assert best.p_star == 1.0
        assert best.value == pytest.approx(1.0)

    def test_interior_vertex(self):
        r = np.array([[1.0], [-1.0], [1.0], [-1.0]])
        best = optimal_p_quadratic(r, [0.0], [0.0], 4)
        assert best.p_star == pytest.approx(0.5)
        assert best.value == pytest.approx(1.0)

    @settings(deadline=None, max_examples=50)
    @given(SEEDS)
    def test_beats_grid(self, seed):
        rng = np.random.default_rng(seed)
        d = int(rng.integers(1, 3))
        r = rng.normal(size=(12, d))
        e0 = rng.normal(size=d) * rng.uniform(0, 2)
        best = optimal_p_quadratic(r, e0, np.zeros(d), 12)
        for p in np.linspace(0.0, 1.0, 101):
            values, _ = perfect_eavesdrop_protection(r, p, e0, np.zeros(d), 12)
            assert best.value >= values[12] - 1e-9
        at_star, _ = perfect_eavesdrop_protection(r, best.p_star, e0, np.zeros(d), 12)
        assert at_star[12] == pytest.approx(best.value, rel=1e-9, abs=1e-12)
