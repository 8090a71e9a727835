"""
Eavesdropping adversary: estimator dynamics for FLIP and FLOP, the
most-recent-selection clock tau_t and the stability check on M
"""
import logging
import math
from typing import Optional, Tuple

import numpy as np

from flprotect.config import POWER_ITERATION_MAX_ITER, POWER_ITERATION_TOL
from flprotect.models import (
    AdversaryState,
    ContractViolation,
    StabilityReport,
    as_matrix,
)

logger = logging.getLogger(__name__)


def is_diagonal(M: np.ndarray) -> bool:
    return not np.any(M - np.diag(np.diagonal(M)))


def apply_M(M: np.ndarray, v: np.ndarray) -> np.ndarray:
    """
    M v for a single vector (shape (d,)) or a batch (shape (B, d)).

    Diagonal M (including m * I) is applied elementwise in O(d).
    """
    if is_diagonal(M):
        return v * np.diagonal(M)
    if v.ndim == 1:
        return M @ v
    return v @ M.T


def tau_update(tau: int, delta_prev: int, t: int) -> int:
    """tau_t = delta_{t-1} (t-1) + (1 - delta_{t-1}) tau_{t-1}"""
    if not (tau == -1 or tau <= t - 2):
        raise ContractViolation(f"tau={tau} is not strictly before round {t - 1}")
    return t - 1 if delta_prev else tau


def xi_estimate_step(state: AdversaryState, mu: int, observed_xi: Optional[np.ndarray]) -> np.ndarray:
    """
    Innovation estimate for a round in which the client participates

    Args:
        state (AdversaryState): adversary state at the start of the round
        mu (int): 1 if the uplink was intercepted
        observed_xi (np.ndarray): intercepted innovation, None when mu = 0

    Returns:
        np.ndarray: xi_hat_t = mu xi_t + (1 - mu) M xi_hat_{tau_t}, with
        xi_hat_{-1} = 0 so a missed first selection yields 0
    """
    if mu:
        if observed_xi is None:
            raise ContractViolation("mu=1 but no intercepted innovation was supplied")
        return np.array(observed_xi, dtype=float)
    if observed_xi is not None:
        raise ContractViolation("mu=0 but an intercepted innovation was supplied")
    if state.tau == -1:
        return np.zeros_like(state.estimate)
    return apply_M(state.M, state.xi_estimate)


def _check_observation(delta, mu, observed, what):
    if (observed is not None) != bool(delta and mu):
        raise ContractViolation(
            f"{what} must be present exactly when delta=1 and mu=1 (delta={delta}, mu={mu})"
        )


def adversary_step_flip(
    state: AdversaryState,
    delta: int,
    mu: int,
    observed_xi: Optional[np.ndarray],
    zeta_hat: np.ndarray,
) -> AdversaryState:
    """x^a_{t+1} = x^a_t + delta_t ((mu xi + (1 - mu) xi_hat) + zeta_hat)"""
    _check_observation(delta, mu, observed_xi, "observed_xi")
    tau_next = tau_update(state.tau, delta, state.t + 1)
    if not delta:
        return state.advanced(tau=tau_next, t=state.t + 1)
    xi_hat = xi_estimate_step(state, mu, observed_xi)
    estimate = state.estimate + xi_hat + zeta_hat
    return state.advanced(estimate=estimate, xi_estimate=xi_hat, tau=tau_next, t=state.t + 1)


def adversary_step_flop(
    state: AdversaryState,
    delta: int,
    mu: int,
    observed_model: Optional[np.ndarray],
    zeta_hat: np.ndarray,
) -> AdversaryState:
    """
    x^a_{t+1} = mu delta x^c_{t+1} + (1 - delta mu) x^a_t + delta (1 - mu) xi_hat_t + delta zeta_hat_t

    On an intercepted round the jump x^c_{t+1} - x^a_t stands in for xi_t and
    becomes the innovation estimate carried forward.
    """
    _check_observation(delta, mu, observed_model, "observed_model")
    tau_next = tau_update(state.tau, delta, state.t + 1)
    if not delta:
        return state.advanced(tau=tau_next, t=state.t + 1)
    if mu:
        observed_model = np.asarray(observed_model, dtype=float)
        xi_hat = xi_estimate_step(state, 1, observed_model - state.estimate)
        estimate = observed_model + zeta_hat
    else:
        xi_hat = xi_estimate_step(state, 0, None)
        estimate = state.estimate + xi_hat + zeta_hat
    return state.advanced(estimate=estimate, xi_estimate=xi_hat, tau=tau_next, t=state.t + 1)


def stability_threshold(p: float, gamma: float) -> float:
    """(p (1 - gamma) max{gamma, 1 - gamma})^(-1/2); +inf when the base vanishes."""
    base = p * (1.0 - gamma) * max(gamma, 1.0 - gamma)
    if base <= 0.0:
        return math.inf
    return base ** -0.5


def spectral_radius(M: np.ndarray, tol: float = POWER_ITERATION_TOL, max_iter: int = POWER_ITERATION_MAX_ITER) -> Tuple[float, bool, int]:
    """
    Spectral radius by power iteration; exact for diagonal M

    Returns:
        tuple: (radius, converged, iterations). On non-convergence the
        radius falls back to max |eig(M)| and converged is False.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if is_diagonal(M):
        return float(np.max(np.abs(np.diagonal(M)))), True, 0
    v = np.random.default_rng(0).normal(size=M.shape[0])
    v /= np.linalg.norm(v)
    estimate = 0.0
    for k in range(1, max_iter + 1):
        w = M @ v
        nrm = float(np.linalg.norm(w))
        if nrm == 0.0:
            return 0.0, True, k
        u = w / nrm
        # a complex dominant pair keeps |Mv| near rho while v rotates; wait for the direction too
        settled = min(np.linalg.norm(u - v), np.linalg.norm(u + v)) <= math.sqrt(tol)
        if abs(nrm - estimate) <= tol * nrm and settled:
            return nrm, True, k
        estimate = nrm
        v = u
    fallback = float(np.max(np.abs(np.linalg.eigvals(M))))
    logger.warning(f"Power iteration did not converge in {max_iter} iterations; using eigvals ({fallback:.6g})")
    return fallback, False, max_iter


def check_M(M, p: float, gamma: float) -> StabilityReport:
    """Necessary stability condition: every |eig(M)| below stability_threshold(p, gamma)."""
    M = np.asarray(M, dtype=float)
    if M.ndim == 0:
        M = as_matrix(M, 1)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ContractViolation(f"M must be square, got shape {M.shape}")
    threshold = stability_threshold(p, gamma)
    rho, converged, iterations = spectral_radius(M)
    satisfied = rho < threshold
    if not satisfied:
        logger.warning(f"M violates the necessary stability condition: rho(M)={rho:.6g} >= {threshold:.6g}")
    return StabilityReport(
        threshold=threshold,
        spectral_radius_M=rho,
        satisfied=satisfied,
        converged=converged,
        iterations=iterations,
    )
