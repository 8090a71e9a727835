"""
Monte Carlo engine, exact (delta, mu) enumeration, the cross-term probe and
parameter sweeps
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from flprotect import config
from flprotect.adversary_utils import (
    adversary_step_flip,
    adversary_step_flop,
    apply_M,
    check_M,
)
from flprotect.analysis_utils import (
    ell_t,
    expected_q,
    mean_error_series,
    perfect_eavesdrop_protection,
    theorem1_bound,
)
from flprotect.fl_utils import (
    FederatedSystem,
    make_client_objectives,
    sample_round_randomness,
)
from flprotect.models import (
    AdversaryState,
    BoundComputationError,
    ConfigurationError,
    ContractViolation,
    CrossTermProbe,
    ProtectionEstimate,
    ProtocolKind,
    RoundTrace,
    Scenario,
    ScenarioMode,
    SimulationFault,
    as_matrix,
)

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Seeding
# ---------------------------------------------------------------------------

def trial_seed(seed0: int, index: int) -> np.random.SeedSequence:
    """Seed of trial `index`: independent of thread count and of the other trials."""
    return np.random.SeedSequence(int(seed0), spawn_key=(config.TRIAL_STREAM, int(index)))


def stream_rng(seed0: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed0), spawn_key=(stream,)))


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.default_rng(seed)
    return np.random.default_rng(np.random.SeedSequence(int(seed)))


def _require_scripted(scenario: Scenario, what: str):
    if scenario.mode is not ScenarioMode.SCRIPTED:
        raise ConfigurationError("mode", f"{what} needs a scripted scenario")


# ---------------------------------------------------------------------------
# Batched scripted dynamics (shared by Monte Carlo and enumeration)
# ---------------------------------------------------------------------------

def _initial_state(scenario: Scenario, batch: int):
    d = scenario.d
    xc = np.tile(scenario.x_c0, (batch, 1))
    xa = np.tile(scenario.x_a0, (batch, 1))
    xi_hat = np.zeros((batch, d))
    tau = np.full(batch, -1, dtype=int)
    return xc, xa, xi_hat, tau


def _advance(scenario: Scenario, state, delta: np.ndarray, mu: np.ndarray, t: int):
    """
    One scripted round for a batch of trajectories.

    state is (x^c, x^a, xi_hat, tau) with leading batch axis; delta and mu
    are 0/1 arrays of the batch size.
    """
    xc, xa, xi_hat, tau = state
    part = delta.astype(bool)[:, None]
    seen = mu.astype(bool)[:, None]
    xi_t = scenario.xi[t]
    zeta_t = scenario.zeta[t]
    zeta_hat_t = scenario.zeta_hat[t]

    new_xc = np.where(part, xc + (xi_t + zeta_t), xc)
    predicted = np.where((tau == -1)[:, None], 0.0, apply_M(scenario.M, xi_hat))
    if scenario.protocol is ProtocolKind.FLIP:
        estimate_xi = np.where(seen, xi_t, predicted)
        moved = xa + estimate_xi + zeta_hat_t
    else:
        estimate_xi = np.where(seen, new_xc - xa, predicted)
        moved = np.where(seen, new_xc + zeta_hat_t, xa + predicted + zeta_hat_t)
    new_xa = np.where(part, moved, xa)
    new_xi_hat = np.where(part, estimate_xi, xi_hat)
    new_tau = np.where(delta.astype(bool), t, tau)
    return new_xc, new_xa, new_xi_hat, new_tau


def _error_sq(state) -> np.ndarray:
    e = state[0] - state[1]
    return np.einsum("ij,ij->i", e, e)


def _gap(scenario: Scenario, state) -> np.ndarray:
    """q = xi_tau - xi_hat_tau with xi_{-1} = xi_hat_{-1} = 0."""
    _, _, xi_hat, tau = state
    xi_tau = np.where((tau == -1)[:, None], 0.0, scenario.xi[np.maximum(tau, 0)])
    return xi_tau - xi_hat


def _draw_bits(scenario: Scenario, rngs: Sequence[np.random.Generator]):
    u = np.stack([rng.random((scenario.horizon, 2)) for rng in rngs])
    delta = (u[:, :, 0] < scenario.p).astype(int)
    mu = (u[:, :, 1] < scenario.gamma).astype(int)
    if scenario.force_mu_one:
        mu = np.ones_like(mu)
    return delta, mu


def _scripted_errors(scenario: Scenario, seeds) -> np.ndarray:
    rngs = [_as_rng(s) for s in seeds]
    delta, mu = _draw_bits(scenario, rngs)
    state = _initial_state(scenario, len(rngs))
    errors = np.empty((len(rngs), scenario.horizon + 1))
    errors[:, 0] = _error_sq(state)
    for t in range(scenario.horizon):
        state = _advance(scenario, state, delta[:, t], mu[:, t], t)
        sq = _error_sq(state)
        if not np.all(np.isfinite(sq)):
            raise SimulationFault(t, "error state is not finite")
        errors[:, t + 1] = sq
    return errors


# ---------------------------------------------------------------------------
# Single trials
# ---------------------------------------------------------------------------

def build_federated_system(scenario: Scenario) -> FederatedSystem:
    cfg = scenario.config
    objectives = make_client_objectives(
        cfg.N,
        scenario.d,
        stream_rng(cfg.seed, config.OBJECTIVE_STREAM),
        heterogeneity=cfg.heterogeneity,
        shared_curvature=cfg.shared_curvature,
        curvature_range=(cfg.curvature_min, cfg.curvature_max),
    )
    return FederatedSystem(objectives, cfg.n, cfg.eta, cfg.local_steps, scenario.protocol, scenario.x_c0)


def initial_adversary(scenario: Scenario) -> AdversaryState:
    scripted = scenario.mode is ScenarioMode.SCRIPTED and bool(np.any(scenario.zeta_hat != 0))
    return AdversaryState.initial(scenario.x_a0, scenario.M, "scripted" if scripted else "zero")


def run_trial(scenario: Scenario, seed) -> List[RoundTrace]:
    """
    One seeded trajectory of client and adversary

    Args:
        scenario (Scenario): scripted or full_fl scenario
        seed: int, SeedSequence or Generator; the same seed gives the same trace

    Returns:
        list: one RoundTrace per round t = 0..horizon-1
    """
    rng = _as_rng(seed)
    step = adversary_step_flip if scenario.protocol is ProtocolKind.FLIP else adversary_step_flop
    adversary = initial_adversary(scenario)
    client = scenario.x_c0.copy()
    system = build_federated_system(scenario) if scenario.mode is ScenarioMode.FULL_FL else None
    d = scenario.d

    traces = []
    for t in range(scenario.horizon):
        delta, mu, rng = sample_round_randomness(rng, scenario.p, scenario.gamma)
        if scenario.force_mu_one:
            mu = 1
        error_sq = float(np.sum((client - adversary.estimate) ** 2))

        if system is None:
            xi, zeta, zeta_hat = scenario.xi[t], scenario.zeta[t], scenario.zeta_hat[t]
            next_client = client + (xi + zeta) if delta else client.copy()
            if not delta:
                uplink = None
            elif scenario.protocol is ProtocolKind.FLIP:
                uplink = xi.copy()
            else:
                uplink = next_client.copy()
        else:
            xi, zeta, uplink = system.step(delta, rng, t)
            next_client = system.client_models[0].copy()
            zeta_hat = np.zeros(d)

        observed = uplink if (delta and mu) else None
        adversary = step(adversary, delta, mu, observed, zeta_hat)
        next_error_sq = float(np.sum((next_client - adversary.estimate) ** 2))
        if not np.isfinite(next_error_sq):
            raise SimulationFault(t, "error state is not finite")

        traces.append(RoundTrace(
            t=t,
            delta=delta,
            mu=mu,
            xi=None if xi is None else np.array(xi, dtype=float),
            zeta=np.array(zeta, dtype=float),
            client_model=next_client,
            uplink=uplink,
            error_sq=error_sq,
            next_error_sq=next_error_sq,
            tau=adversary.tau,
        ))
        client = next_client
    return traces


def trace_errors(traces: Sequence[RoundTrace]) -> np.ndarray:
    """||e^c_t||^2 for t = 0..horizon from a trace."""
    return np.array([traces[0].error_sq] + [tr.next_error_sq for tr in traces])


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------

def _chunks(n: int, parts: int) -> List[range]:
    parts = max(1, min(parts, n))
    bounds = np.linspace(0, n, parts + 1).astype(int)
    return [range(bounds[i], bounds[i + 1]) for i in range(parts)]


def simulate_errors(scenario: Scenario, trials: int, seed0: int, threads: Optional[int] = None) -> np.ndarray:
    """
    Squared errors of `trials` independent trials, shape (trials, horizon + 1).

    Trial i always uses trial_seed(seed0, i); chunks are reassembled in
    trial order so the output does not depend on `threads`.
    """
    if trials < 1:
        raise ConfigurationError("trials", f"must be >= 1, got {trials}")
    threads = threads or config.THREADS

    def work(indices: range) -> np.ndarray:
        seeds = [trial_seed(seed0, i) for i in indices]
        if scenario.mode is ScenarioMode.SCRIPTED:
            return _scripted_errors(scenario, seeds)
        return np.stack([trace_errors(run_trial(scenario, s)) for s in seeds])

    chunks = _chunks(trials, threads * 4 if threads > 1 else 1)
    if threads == 1:
        parts = [work(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, chunks))
    return np.vstack(parts)


def _stderr(samples: np.ndarray) -> np.ndarray:
    n = samples.shape[0]
    if n < 2:
        return np.zeros(samples.shape[1:])
    return samples.std(axis=0, ddof=1) / np.sqrt(n)


def summarize_errors(errors: np.ndarray, tail_window: int) -> ProtectionEstimate:
    tail = errors[:, -tail_window:].mean(axis=1)
    return ProtectionEstimate(
        mean=errors.mean(axis=0),
        stderr=_stderr(errors),
        trials=errors.shape[0],
        zero_fraction=(errors == 0.0).mean(axis=0),
        hit_zero_fraction=float(np.any(errors[:, 1:] == 0.0, axis=1).mean()),
        tail_mean=float(tail.mean()),
        tail_stderr=float(_stderr(tail[:, None])[0]),
    )


def monte_carlo_protection(scenario: Scenario, trials: int, seed0: int, threads: Optional[int] = None) -> ProtectionEstimate:
    """Per-round sample mean and standard error of ||x^c_t - x^a_t||^2, t = 0..horizon."""
    errors = simulate_errors(scenario, trials, seed0, threads)
    estimate = summarize_errors(errors, scenario.effective_tail_window())
    logger.info(
        f"Monte Carlo over {trials} trials: final protection {estimate.mean[-1]:.6g} "
        f"(stderr {estimate.stderr[-1]:.3g}), tail mean {estimate.tail_mean:.6g}"
    )
    return estimate


# ---------------------------------------------------------------------------
# Exact enumeration
# ---------------------------------------------------------------------------

def _check_budget(horizon: int):
    if horizon > config.ENUMERATION_MAX_HORIZON:
        logger.warning(f"Refusing exact enumeration at horizon {horizon}")
        raise ConfigurationError(
            "horizon",
            f"exact enumeration needs 3^{horizon} branches; the budget allows horizon <= {config.ENUMERATION_MAX_HORIZON}",
        )


def _branch_probabilities(scenario: Scenario):
    gamma = 1.0 if scenario.force_mu_one else scenario.gamma
    p = scenario.p
    outcomes = [(0, 0, 1.0 - p), (1, 1, p * gamma), (1, 0, p * (1.0 - gamma))]
    return [(dl, m, w) for dl, m, w in outcomes if w > 0.0]


def _expand(scenario: Scenario, state, weights: np.ndarray, t: int):
    """Children of every branch at round t; returns (child state, child weights, parent index, delta, mu)."""
    outcomes = _branch_probabilities(scenario)
    k = len(outcomes)
    n = weights.shape[0]
    parent = np.repeat(np.arange(n), k)
    delta = np.tile([o[0] for o in outcomes], n)
    mu = np.tile([o[1] for o in outcomes], n)
    child_w = weights[parent] * np.tile([o[2] for o in outcomes], n)
    repeated = tuple(a[parent] for a in state)
    return _advance(scenario, repeated, delta, mu, t), child_w, parent, delta, mu


def enumerate_branches(scenario: Scenario, horizon: int) -> Iterator[Tuple[int, tuple, np.ndarray]]:
    """
    Yield (t, state, weights) for t = 0..horizon over every (delta, mu) history
    with positive probability. Weights sum to 1 at every level.
    """
    _require_scripted(scenario, "exact enumeration")
    _check_budget(horizon)
    if horizon > scenario.horizon:
        raise ConfigurationError("horizon", f"scenario only scripts {scenario.horizon} rounds")
    state = _initial_state(scenario, 1)
    weights = np.ones(1)
    for t in range(horizon + 1):
        total = float(weights.sum())
        if abs(total - 1.0) > config.WEIGHT_SUM_TOL:
            raise ContractViolation(f"branch weights sum to {total!r} at round {t}")
        yield t, state, weights
        if t < horizon:
            state, weights, _, _, _ = _expand(scenario, state, weights, t)


def brute_force_protection(scenario: Scenario, horizon: Optional[int] = None) -> np.ndarray:
    """Exact E||e^c_t||^2 for t = 0..horizon by enumerating all (delta, mu) histories."""
    horizon = scenario.horizon if horizon is None else horizon
    return np.array([float(w @ _error_sq(s)) for _, s, w in enumerate_branches(scenario, horizon)])


def brute_force_mean_error(scenario: Scenario, horizon: Optional[int] = None) -> np.ndarray:
    """Exact E[e^c_t], shape (horizon + 1, d)."""
    horizon = scenario.horizon if horizon is None else horizon
    return np.array([w @ (s[0] - s[1]) for _, s, w in enumerate_branches(scenario, horizon)])


def enumerate_operator_L(Sigma: np.ndarray, p: float, gamma: float, M) -> np.ndarray:
    """E[A_t Sigma A_t^T] summed over the four (delta, mu) outcomes."""
    Sigma = np.asarray(Sigma, dtype=float)
    d = Sigma.shape[0] // 2
    M = as_matrix(M, d)
    eye = np.eye(d)
    zero = np.zeros((d, d))
    idle = np.eye(2 * d)
    caught = np.block([[eye, zero], [zero, zero]])
    missed = np.block([[eye, M], [zero, M]])
    outcomes = [
        ((1.0 - p) * (1.0 - gamma), idle),
        ((1.0 - p) * gamma, idle),
        (p * gamma, caught),
        (p * (1.0 - gamma), missed),
    ]
    return sum(w * (A @ Sigma @ A.T) for w, A in outcomes)


def enumerate_Vt(scenario: Scenario, t: int) -> np.ndarray:
    """
    Exact top-left block of E[v_t v_t^T] for a scripted FLIP scenario

    v_t is the part of the centred (e, q) update at round t not explained by
    A_t acting on the centred state.
    """
    _require_scripted(scenario, "V_t enumeration")
    if scenario.protocol is not ProtocolKind.FLIP:
        raise ConfigurationError("protocol", "V_t enumeration is defined for FLIP")
    if t >= scenario.horizon:
        raise ConfigurationError("horizon", f"round {t} is not scripted")
    for level, state, weights in enumerate_branches(scenario, t):
        if level == t:
            break
    e_par = state[0] - state[1]
    q_par = _gap(scenario, state)
    e_bar = weights @ e_par
    q_bar = weights @ q_par

    child, child_w, parent, delta, mu = _expand(scenario, state, weights, t)
    e_child = child[0] - child[1]
    e_bar_next = child_w @ e_child
    missed = (delta * (1 - mu)).astype(bool)[:, None]
    carried = np.where(missed, apply_M(scenario.M, q_par[parent] - q_bar), 0.0)
    v = (e_child - e_bar_next) - ((e_par[parent] - e_bar) + carried)
    return (v.T * child_w) @ v


# ---------------------------------------------------------------------------
# Cross term
# ---------------------------------------------------------------------------

def cross_term_probe(scenario: Scenario, trials: int, seed0: int = config.DEFAULT_SEED) -> CrossTermProbe:
    """
    Monte Carlo estimate of E[A_t sigma_t v_t^T], per round

    sigma_t is the (e, q) state centred on its exact mean; the Frobenius norm
    of the sample mean and of its elementwise standard error are reported.
    """
    _require_scripted(scenario, "the cross-term probe")
    if scenario.protocol is not ProtocolKind.FLIP:
        raise ConfigurationError("protocol", "the cross-term probe is defined for FLIP")
    H, d = scenario.horizon, scenario.d
    norms = np.zeros(H)
    errs = np.zeros(H)
    if scenario.p == 0.0:
        return CrossTermProbe(norm=norms, stderr=errs, trials=trials)

    gamma = 1.0 if scenario.force_mu_one else scenario.gamma
    ell = np.array([ell_t(scenario.xi, scenario.p, t) for t in range(H)]).reshape(H, d)
    q_mean = expected_q(scenario.xi, ell, scenario.p, gamma, scenario.M, H)
    e_mean = mean_error_series(scenario.xi, scenario.r, scenario.p, gamma, scenario.M, scenario.x_c0, scenario.x_a0, H)

    rngs = [_as_rng(trial_seed(seed0, i)) for i in range(trials)]
    delta, mu = _draw_bits(scenario, rngs)
    state = _initial_state(scenario, trials)
    sigma = np.hstack([(state[0] - state[1]) - e_mean[0], _gap(scenario, state) - q_mean[0]])
    for t in range(H):
        state = _advance(scenario, state, delta[:, t], mu[:, t], t)
        sigma_next = np.hstack([(state[0] - state[1]) - e_mean[t + 1], _gap(scenario, state) - q_mean[t + 1]])

        e_part, q_part = sigma[:, :d], sigma[:, d:]
        part = delta[:, t].astype(bool)[:, None]
        missed = (delta[:, t] * (1 - mu[:, t])).astype(bool)[:, None]
        Mq = apply_M(scenario.M, q_part)
        a_top = e_part + np.where(missed, Mq, 0.0)
        a_bottom = np.where(part, np.where(missed, Mq, 0.0), q_part)
        a_sigma = np.hstack([a_top, a_bottom])
        v = sigma_next - a_sigma

        outer = np.einsum("bi,bj->bij", a_sigma, v)
        norms[t] = float(np.linalg.norm(outer.mean(axis=0)))
        errs[t] = float(np.linalg.norm(_stderr(outer)))
        sigma = sigma_next
    logger.info(f"Cross-term probe: max norm {norms.max():.3g}, max stderr {errs.max():.3g}")
    return CrossTermProbe(norm=norms, stderr=errs, trials=trials)


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

SWEEP_PARAMETERS = ("p", "gamma", "M_scale")


def _sweep_point(base: Scenario, parameter: str, value: float) -> Scenario:
    if parameter == "p":
        if base.mode is ScenarioMode.FULL_FL:
            n = value * base.config.N
            if abs(n - round(n)) > 1e-9 or round(n) < 1:
                raise ConfigurationError("grid", f"p={value} is not k/N for N={base.config.N}")
            cfg = replace(base.config, n=int(round(n)))
            return base.with_changes(p=cfg.p, config=cfg)
        return base.with_changes(p=float(value))
    if parameter == "gamma":
        return base.with_changes(gamma=float(value))
    if parameter == "M_scale":
        return base.with_changes(M=float(value) * base.M)
    raise ConfigurationError("parameter", f"expected one of {SWEEP_PARAMETERS}, got {parameter!r}")


def protection_sweep(
    base_scenario: Scenario,
    parameter: str,
    grid: Sequence[float],
    trials: int,
    seed0: int,
    threads: Optional[int] = None,
) -> pd.DataFrame:
    """
    Tail protection, bound and Lemma flag per grid point

    Returns:
        pd.DataFrame: one row per grid value; bound columns are None where
        the bound is undefined (full_fl mode, p = 0, singular inverse)
    """
    rows = []
    for value in grid:
        scenario = _sweep_point(base_scenario, parameter, value)
        tail_window = scenario.effective_tail_window()
        estimate = monte_carlo_protection(scenario, trials, seed0, threads)
        report = check_M(scenario.M, scenario.p, scenario.gamma)
        bound_tail = None
        eq13_tail = None
        if scenario.mode is ScenarioMode.SCRIPTED:
            _, eq13_tail = perfect_eavesdrop_protection(
                scenario.r, scenario.p, scenario.x_c0, scenario.x_a0, scenario.horizon, tail_window
            )
            if scenario.p > 0.0:
                try:
                    series = theorem1_bound(
                        scenario.xi, scenario.zeta, scenario.zeta_hat, scenario.p, scenario.gamma,
                        scenario.M, scenario.x_c0, scenario.x_a0, scenario.horizon,
                        tail_window=min(tail_window, scenario.horizon),
                    )
                    bound_tail = series.liminf_proxy
                except BoundComputationError as e:
                    logger.warning(f"Bound undefined at {parameter}={value}: {e}")
        rows.append({
            "parameter": parameter,
            "value": float(value),
            "p": scenario.p,
            "gamma": scenario.gamma,
            "mc_tail_mean": estimate.tail_mean,
            "mc_tail_stderr": estimate.tail_stderr,
            "mc_final_mean": float(estimate.mean[-1]),
            "hit_zero_fraction": estimate.hit_zero_fraction,
            "bound_liminf": bound_tail,
            "eq13_liminf": eq13_tail,
            "lemma1_satisfied": report.satisfied,
        })
    return pd.DataFrame(rows)
