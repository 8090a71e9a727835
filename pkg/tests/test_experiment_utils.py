import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from flprotect import config
from flprotect.analysis_utils import optimal_p_quadratic, perfect_eavesdrop_protection
from flprotect.data_processing import build_run_config, build_scenario
from flprotect.experiment_utils import (
    brute_force_protection,
    cross_term_probe,
    enumerate_branches,
    initial_adversary,
    monte_carlo_protection,
    protection_sweep,
    run_trial,
    simulate_errors,
    trace_errors,
    trial_seed,
)
from flprotect.models import ConfigurationError

SEEDS = st.integers(0, 2**32 - 1)
FIXTURE_OK = settings(deadline=None, max_examples=15, suppress_health_check=[HealthCheck.function_scoped_fixture])


def _within(mean, stderr, target, sigmas=5.0):
    gap = np.abs(mean - target)
    return np.all((gap <= sigmas * stderr) | (gap <= 1e-9))


class TestRunTrial:

    def test_no_participation_keeps_error(self, scripted):
        sc = scripted(horizon=20, p=0.0, x_c0=(1.0,), x_a0=(-1.0,))
        errors = trace_errors(run_trial(sc, 3))
        assert np.array_equal(errors, np.full(21, 4.0))

    def test_perfect_information(self, scripted):
        sc = scripted(horizon=30, force_mu_one=True, zeta_hat=np.full((30, 1), 0.1))
        assert np.max(trace_errors(run_trial(sc, 5))) < 1e-24

    def test_same_seed_same_trace(self, scripted):
        sc = scripted(horizon=25)
        a, b = run_trial(sc, 42), run_trial(sc, 42)
        assert [(x.delta, x.mu, x.next_error_sq, x.tau) for x in a] == [(x.delta, x.mu, x.next_error_sq, x.tau) for x in b]

    def test_client_moves_only_when_sampled(self, scripted):
        sc = scripted(horizon=40, p=0.4)
        previous = sc.x_c0
        for tr in run_trial(sc, 8):
            if tr.delta:
                assert np.allclose(tr.client_model, previous + sc.xi[tr.t] + sc.zeta[tr.t])
                assert tr.uplink is not None
            else:
                assert np.array_equal(tr.client_model, previous)
                assert tr.uplink is None
            previous = tr.client_model

    @FIXTURE_OK
    @given(SEEDS)
    def test_batch_engine_matches_single_trials(self, random_scripted, seed):
        protocol = "flop" if seed % 2 else "flip"
        sc = random_scripted(seed, horizon=15, protocol=protocol)
        batch = simulate_errors(sc, 6, seed)
        for i in range(6):
            single = trace_errors(run_trial(sc, trial_seed(seed, i)))
            assert np.allclose(batch[i], single, rtol=1e-12, atol=1e-12)

    def test_scripted_zeta_hat_sets_estimate_policy(self, scripted):
        assert initial_adversary(scripted()).zeta_estimate_policy == "zero"
        hat = scripted(zeta_hat=np.full((12, 1), 0.1))
        assert initial_adversary(hat).zeta_estimate_policy == "scripted"

    def test_full_fl_trial(self):
        cfg = build_run_config(overrides={"mode": "full_fl", "d": 2, "horizon": 15, "N": 6, "n": 3, "seed": 4})
        sc = build_scenario(cfg)
        traces = run_trial(sc, 1)
        assert len(traces) == 15
        for tr in traces:
            assert (tr.xi is None) == (tr.delta == 0)
            assert (tr.uplink is None) == (tr.delta == 0)
        assert np.array_equal(trace_errors(traces), trace_errors(run_trial(sc, 1)))

    def test_full_fl_flop_intercept_resets(self):
        cfg = build_run_config(overrides={"mode": "full_fl", "protocol": "flop", "horizon": 40, "gamma": 0.5, "x_a0_spec": "random", "x_c0_spec": "random"})
        sc = build_scenario(cfg)
        for tr in run_trial(sc, 2):
            if tr.delta and tr.mu:
                assert tr.next_error_sq == 0.0


class TestMonteCarlo:

    def test_zero_inputs(self, scripted):
        sc = scripted(horizon=30, zeta=np.zeros((30, 1)), force_mu_one=True)
        est = monte_carlo_protection(sc, 200, 1)
        assert np.all(est.mean == 0.0)
        assert np.all(est.stderr == 0.0)

    def test_single_trial_stderr(self, scripted):
        est = monte_carlo_protection(scripted(horizon=10), 1, 1)
        assert est.trials == 1
        assert np.all(est.stderr == 0.0)

    def test_rejects_zero_trials(self, scripted):
        with pytest.raises(ConfigurationError):
            monte_carlo_protection(scripted(), 0, 1)

    def test_thread_count_does_not_matter(self, scripted):
        sc = scripted(horizon=50)
        a = simulate_errors(sc, 500, 9, threads=1)
        b = simulate_errors(sc, 500, 9, threads=4)
        assert np.array_equal(a, b)

    def test_matches_enumeration(self, scripted):
        sc = scripted(horizon=10, x_c0=(0.5,))
        est = monte_carlo_protection(sc, 50_000, 21)
        assert _within(est.mean, est.stderr, brute_force_protection(sc))

    def test_perfect_eavesdropping_closed_form(self, scripted):
        rng = np.random.default_rng(0)
        for p in (0.3, 0.7):
            r = rng.normal(size=(100, 1))
            sc = scripted(horizon=100, p=p, zeta=r, force_mu_one=True)
            est = monte_carlo_protection(sc, 20_000, 33)
            closed, _ = perfect_eavesdrop_protection(sc.r, p, sc.x_c0, sc.x_a0, 100)
            assert _within(est.mean, est.stderr, closed)

    def test_invariant_to_innovation_scale_under_full_interception(self, scripted):
        a = scripted(horizon=40, force_mu_one=True)
        b = scripted(horizon=40, force_mu_one=True, xi=1000.0 * a.xi)
        assert np.allclose(simulate_errors(a, 50, 3), simulate_errors(b, 50, 3), atol=1e-9)

    def test_flop_reaches_zero(self, scripted):
        p, gamma, T = 0.5, 0.1, 200
        sc = scripted(horizon=T, protocol="flop", p=p, gamma=gamma, x_c0=(1.0,), x_a0=(0.0,))
        est = monte_carlo_protection(sc, 1000, 77)
        assert est.hit_zero_fraction >= 0.999
        assert est.zero_fraction[0] == 0.0

    def test_flop_zero_after_interception(self, scripted):
        sc = scripted(horizon=200, protocol="flop", p=0.5, gamma=0.1, x_c0=(1.0,), x_a0=(0.0,))
        for seed in range(10):
            traces = run_trial(sc, seed)
            for tr in traces:
                if tr.delta and tr.mu:
                    assert tr.next_error_sq == 0.0
                if not tr.delta:
                    assert tr.next_error_sq == tr.error_sq

    def test_tail_statistics(self, scripted):
        sc = scripted(horizon=20, tail_window=5)
        errors = simulate_errors(sc, 300, 2)
        est = monte_carlo_protection(sc, 300, 2)
        assert est.tail_mean == pytest.approx(errors[:, -5:].mean())


class TestEnumeration:

    def test_hand_enumerated_round(self, scripted):
        sc = scripted(horizon=1, xi=np.array([[1.0]]), zeta=np.array([[0.0]]))
        exact = brute_force_protection(sc)
        assert exact[0] == 0.0
        assert exact[1] == pytest.approx(0.25, abs=1e-15)

    def test_certain_everything(self, scripted):
        sc = scripted(horizon=8, p=1.0, gamma=1.0, zeta_hat=np.full((8, 1), 0.1))
        assert np.max(brute_force_protection(sc)) < 1e-24

    def test_weights_sum_to_one(self, random_scripted):
        sc = random_scripted(3, horizon=10)
        for _, _, w in enumerate_branches(sc, 10):
            assert abs(w.sum() - 1.0) <= config.WEIGHT_SUM_TOL

    def test_budget_refusal(self, scripted):
        sc = scripted(horizon=config.ENUMERATION_MAX_HORIZON + 1)
        with pytest.raises(ConfigurationError) as exc:
            brute_force_protection(sc)
        assert exc.value.field_name == "horizon"

    def test_full_fl_refused(self):
        sc = build_scenario(build_run_config(overrides={"mode": "full_fl", "horizon": 5}))
        with pytest.raises(ConfigurationError):
            brute_force_protection(sc)


class TestCrossTerm:

    def test_no_participation(self, scripted):
        probe = cross_term_probe(scripted(horizon=10, p=0.0), 100)
        assert np.all(probe.norm == 0.0)

    def test_full_interception(self, scripted):
        probe = cross_term_probe(scripted(horizon=15, force_mu_one=True), 20_000, 5)
        assert np.all(probe.norm <= 5.0 * probe.stderr + 1e-12)

    def test_reported_shape(self, scripted):
        probe = cross_term_probe(scripted(horizon=12), 500, 1)
        assert probe.norm.shape == (12,) and probe.trials == 500
        assert np.all(np.isfinite(probe.norm))

    def test_flop_refused(self, scripted):
        with pytest.raises(ConfigurationError):
            cross_term_probe(scripted(protocol="flop"), 10)


class TestSweep:

    @pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
    def test_p_sweep_tracks_optimum(self, scripted, seed):
        rng = np.random.default_rng(seed)
        r = rng.normal(size=(20, 1))
        e0 = rng.normal(size=1)
        sc = scripted(horizon=20, x_c0=tuple(e0), xi=np.zeros((20, 1)), zeta=r, force_mu_one=True, tail_window=1)
        grid = np.round(np.arange(0.0, 1.0 + 1e-12, 0.05), 10)
        df = protection_sweep(sc, "p", grid, 20_000, 4)
        best = optimal_p_quadratic(r, e0, [0.0], 20)

        means = df["mc_tail_mean"].to_numpy()
        stderr = df["mc_tail_stderr"].to_numpy()
        leader = int(np.argmax(means))
        tied = means >= means[leader] - 5 * np.hypot(stderr, stderr[leader])
        closest = np.min(np.abs(df["value"].to_numpy()[tied] - best.p_star))
        assert closest <= 0.05 + 1e-12
        assert np.allclose(df["eq13_liminf"], [perfect_eavesdrop_protection(r, p, e0, [0.0], 20)[0][20] for p in grid])

    def test_gamma_sweep_flip_keeps_protection(self, scripted):
        sc = scripted(horizon=60)
        df = protection_sweep(sc, "gamma", [0.5, 0.9, 1.0], 2000, 6)
        eq13 = df["eq13_liminf"].to_numpy()
        assert np.all(df["mc_tail_mean"].to_numpy() >= eq13 - 5 * df["mc_tail_stderr"].to_numpy())
        assert np.all(eq13 > 0.0)

    def test_gamma_sweep_flop_hits_zero(self, scripted):
        sc = scripted(horizon=150, protocol="flop", x_c0=(1.0,), x_a0=(0.0,))
        df = protection_sweep(sc, "gamma", [0.3, 0.6, 1.0], 500, 6)
        assert np.all(df["hit_zero_fraction"] >= 0.999)

    def test_M_scale_flags_stability(self, scripted):
        df = protection_sweep(scripted(horizon=10), "M_scale", [1.0, 8.0], 50, 1)
        assert df["lemma1_satisfied"].tolist() == [True, False]

    def test_full_fl_p_grid_must_divide(self):
        sc = build_scenario(build_run_config(overrides={"mode": "full_fl", "horizon": 5}))
        with pytest.raises(ConfigurationError):
            protection_sweep(sc, "p", [0.25], 10, 1)

    def test_unknown_parameter(self, scripted):
        with pytest.raises(ConfigurationError):
            protection_sweep(scripted(), "eta", [0.1], 10, 1)
