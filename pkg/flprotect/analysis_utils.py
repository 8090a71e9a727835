"""
Closed-form protection analysis: innovation linearization, the covariance
operator L, V_t, the asymptotic lower bound and the perfect-eavesdropping
formula
"""
import logging
from typing import Optional, Tuple

import numpy as np

from flprotect.adversary_utils import apply_M, check_M
from flprotect.config import CONDITION_WARNING, DIVERGENCE_TRACE, SYMMETRY_TOL
from flprotect.fl_utils import validate_learning_rate
from flprotect.models import (
    BoundComputationError,
    BoundSeries,
    ConfigurationError,
    ContractViolation,
    InnovationTransition,
    OptimalP,
    QuadraticObjective,
    as_matrix,
    as_model_vector,
    default_tail_window,
)

logger = logging.getLogger(__name__)


def _history(values, d=None, name="xi_history"):
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1) if d in (None, 1) else arr.reshape(1, -1)
    if d is not None and arr.shape[1] != d:
        raise ConfigurationError(name, f"expected {d} columns, got {arr.shape[1]}")
    return arr


# ---------------------------------------------------------------------------
# Innovation linearization
# ---------------------------------------------------------------------------

def compute_G(obj: QuadraticObjective, eta: float, steps: int) -> np.ndarray:
    """G = -eta sum_{k<L} F^k with F = I - eta Q, so that xi = G grad f(x^s)."""
    validate_learning_rate(obj, eta)
    if steps < 1:
        raise ConfigurationError("local_steps", f"must be >= 1, got {steps}")
    d = obj.dimension
    F = np.eye(d) - eta * obj.hessian
    power = np.eye(d)
    total = np.zeros((d, d))
    for _ in range(steps):
        total += power
        power = power @ F
    return -eta * total


def innovation_transition(obj: QuadraticObjective, eta: float, steps: int, at_prev_server_state=None) -> InnovationTransition:
    """
    A = G (G^{-1} + Q), B = G Q for the map xi_t = A xi_{t'} + B zeta_t

    With a constant Hessian G_t = G_{t'}; the previous server state only
    fixes the dimension.
    """
    if at_prev_server_state is not None:
        as_model_vector(at_prev_server_state, obj.dimension, name="at_prev_server_state")
    G = compute_G(obj, eta, steps)
    cond = np.linalg.cond(G)
    if not np.isfinite(cond) or cond > 1.0 / np.finfo(float).eps:
        raise ConfigurationError("eta", f"G is singular (cond={cond:.3g}); pick eta < 1/lambda_max(Q)")
    G_inv = np.linalg.inv(G)
    Q = obj.hessian
    return InnovationTransition(A=G @ (G_inv + Q), B=G @ Q, G_now=G, G_prev=G)


# ---------------------------------------------------------------------------
# Covariance operator
# ---------------------------------------------------------------------------

def _k_matrices(gamma, M):
    d = M.shape[0]
    zero = np.zeros((d, d))
    K1 = np.block([[np.eye(d), (1.0 - gamma) * M], [zero, (1.0 - gamma) * M]])
    K2 = np.block([[zero, M], [zero, M]])
    return K1, K2


def operator_L(Sigma: np.ndarray, p: float, gamma: float, M) -> np.ndarray:
    """L(S) = (1-p) S + p K1 S K1^T + p gamma (1-gamma) K2 S K2^T"""
    Sigma = np.asarray(Sigma, dtype=float)
    d = Sigma.shape[0] // 2
    M = as_matrix(M, d)
    if Sigma.shape != (2 * d, 2 * d):
        raise ContractViolation(f"Sigma must be {2 * d}x{2 * d}, got {Sigma.shape}")
    scale = max(1.0, float(np.max(np.abs(Sigma))))
    if np.max(np.abs(Sigma - Sigma.T)) > SYMMETRY_TOL * scale:
        raise ContractViolation("Sigma must be symmetric")
    K1, K2 = _k_matrices(gamma, M)
    out = (1.0 - p) * Sigma + p * (K1 @ Sigma @ K1.T) + p * gamma * (1.0 - gamma) * (K2 @ Sigma @ K2.T)
    return 0.5 * (out + out.T)


def iterate_operator_L(Sigma0, p, gamma, M, max_iter=10_000, divergence_trace=DIVERGENCE_TRACE):
    """
    Propagate S_{k+1} = L(S_k) until the trace passes divergence_trace

    Returns:
        tuple: (iterations run, final trace, diverged flag)
    """
    Sigma = np.asarray(Sigma0, dtype=float)
    trace = float(np.trace(Sigma))
    for k in range(1, max_iter + 1):
        Sigma = operator_L(Sigma, p, gamma, M)
        trace = float(np.trace(Sigma))
        if not np.isfinite(trace) or trace > divergence_trace:
            logger.info(f"Covariance recursion diverged after {k} iterations (trace={trace:.3g})")
            return k, trace, True
    return max_iter, trace, False


# ---------------------------------------------------------------------------
# Statistics of xi_{tau_t}
# ---------------------------------------------------------------------------

def _tau_weights(p, t):
    """P(tau_t = s) for s = 0..t-1; the remaining (1-p)^t sits on tau_t = -1."""
    exponents = (t - 1 - np.arange(t)).astype(float)
    return p * np.power(1.0 - p, exponents)


def ell_t(xi_history, p: float, t: int) -> np.ndarray:
    """l_t = E[xi_{tau_t}] = sum_{s<t} p (1-p)^{t-s-1} xi_s, with xi_{-1} = 0."""
    xi = _history(xi_history)
    if t == 0:
        return np.zeros(xi.shape[1])
    if xi.shape[0] < t:
        raise ConfigurationError("xi_history", f"needs rounds 0..{t - 1}, got {xi.shape[0]}")
    return _tau_weights(p, t) @ xi[:t]


def innovation_variance(xi_history, p: float, t: int) -> float:
    """E||xi_{tau_t} - l_t||^2 = (1-p)^t ||l_t||^2 + sum_k p (1-p)^{t-k-1} ||xi_k - l_t||^2"""
    xi = _history(xi_history)
    ell = ell_t(xi, p, t)
    value = (1.0 - p) ** t * float(ell @ ell)
    if t > 0:
        dev = xi[:t] - ell
        value += float(_tau_weights(p, t) @ np.einsum("ij,ij->i", dev, dev))
    return value


def innovation_covariance(xi_history, p: float, t: int) -> np.ndarray:
    xi = _history(xi_history)
    ell = ell_t(xi, p, t)
    cov = (1.0 - p) ** t * np.outer(ell, ell)
    if t > 0:
        dev = xi[:t] - ell
        cov += (dev.T * _tau_weights(p, t)) @ dev
    return cov


def expected_q(xi_history, ell_series, p: float, gamma: float, M, horizon: int) -> np.ndarray:
    """
    Mean of the innovation-estimation gap q_t = xi_{tau_t} - xi_hat_{tau_t}

    E[q_0] = 0 and E[q_{t+1}] = ((1-p) I + p(1-gamma) M) E[q_t] + p(1-gamma)(xi_t - M l_t).

    Returns:
        np.ndarray: shape (horizon + 1, d), rows t = 0..horizon
    """
    xi = _history(xi_history)
    ell = _history(ell_series, xi.shape[1], name="ell_series")
    d = xi.shape[1]
    M = as_matrix(M, d)
    if not check_M(M, p, gamma).satisfied:
        logger.warning("E[q_t] computed with an M outside the necessary stability region")
    drive = p * (1.0 - gamma)
    q = np.zeros((horizon + 1, d))
    for t in range(horizon):
        q[t + 1] = (1.0 - p) * q[t] + drive * apply_M(M, q[t]) + drive * (xi[t] - apply_M(M, ell[t]))
    return q


def h_expanded(xi_history, p: float, M, t: int) -> np.ndarray:
    """h_t = (1-p)^t xi_t + sum_{k<t} (1-p)^{t-k-1} p (xi_t - M xi_k)"""
    xi = _history(xi_history)
    M = as_matrix(M, xi.shape[1])
    h = (1.0 - p) ** t * xi[t]
    for k in range(t):
        h = h + (1.0 - p) ** (t - k - 1) * p * (xi[t] - apply_M(M, xi[k]))
    return h


def compute_Vt(s_t, r_t, xi_history, p: float, gamma: float, t: int, M=None, weight_by_M: bool = False) -> Tuple[np.ndarray, float]:
    """
    Top-left block of E[v_t v_t^T]

    Args:
        s_t, r_t (np.ndarray): the s and r vectors at round t
        xi_history: innovations for rounds 0..t-1 (at least)
        p, gamma (float): participation and interception probabilities
        t (int): round index
        M: adversary transition, only used when weight_by_M is set
        weight_by_M (bool): use M Cov(xi_tau) M^T in the last term, which is
            what expanding v_t gives; the default keeps Cov(xi_tau)

    Returns:
        tuple: (V_t matrix, trace of V_t)
    """
    if gamma in (0.0, 1.0) or p == 0.0:
        logger.warning(f"V_t evaluated at a degenerate point (p={p}, gamma={gamma})")
    s = np.asarray(s_t, dtype=float).reshape(-1)
    r = np.asarray(r_t, dtype=float).reshape(-1)
    cov = innovation_covariance(xi_history, p, t)
    if weight_by_M:
        Mm = as_matrix(M, s.shape[0])
        cov = Mm @ cov @ Mm.T
    sr = s + r
    V = (
        p * (1.0 - p) * (1.0 - gamma) * np.outer(sr, sr)
        + p * p * gamma * (1.0 - gamma) * np.outer(s, s)
        + p * (1.0 - p) * gamma * np.outer(r, r)
        + p * (1.0 - gamma) * cov
    )
    return V, float(np.trace(V))


# ---------------------------------------------------------------------------
# Protection bounds
# ---------------------------------------------------------------------------

def _stability_inverse(M, gamma):
    d = M.shape[0]
    K = np.eye(d) - (1.0 - gamma) * M
    cond = np.linalg.cond(K)
    if not np.isfinite(cond):
        raise BoundComputationError(
            "I - (1 - gamma) M is singular; M must satisfy the necessary stability condition on its eigenvalues"
        )
    if cond > CONDITION_WARNING:
        logger.warning(f"I - (1 - gamma) M is ill-conditioned (cond={cond:.3g})")
    return K


def theorem1_bound(
    xi_history,
    zeta_history,
    zeta_hat_history,
    p: float,
    gamma: float,
    M,
    x_c0,
    x_a0,
    horizon: int,
    tail_window: Optional[int] = None,
    g_form: str = "statement",
) -> BoundSeries:
    """
    Per-round terms of the asymptotic protection lower bound.

    g_form="statement" uses g_t = e_0 + p sum_{k<=t} r_k + p(1-gamma)(I-(1-gamma)M)^{-1} sum_{k<=t} h_k.
    g_form="transient" uses the finite-t form with M_2 = (1-p) I + p(1-gamma) M,
    which is the exact mean E[e^c_t] in scripted mode.
    """
    if not 0.0 < p <= 1.0:
        raise ConfigurationError("p", f"bound needs 0 < p <= 1, got {p}")
    if not 0.0 <= gamma <= 1.0:
        raise ConfigurationError("gamma", f"must lie in [0, 1], got {gamma}")
    if g_form not in ("statement", "transient"):
        raise ConfigurationError("g_form", f"expected statement or transient, got {g_form!r}")
    e0 = as_model_vector(x_c0, name="x_c0") - as_model_vector(x_a0, name="x_a0")
    d = e0.shape[0]
    xi = _history(xi_history, d)
    r = _history(zeta_history, d, name="zeta_history") - _history(zeta_hat_history, d, name="zeta_hat_history")
    if xi.shape[0] < horizon or r.shape[0] < horizon:
        raise ConfigurationError("horizon", f"histories cover fewer than {horizon} rounds")
    M = as_matrix(M, d)
    tail_window = tail_window or default_tail_window(horizon)

    report = check_M(M, p, gamma)
    K = _stability_inverse(M, gamma)

    ell = np.array([ell_t(xi, p, t) for t in range(horizon)])
    h = xi[:horizon] - apply_M(M, ell)
    q_mean = expected_q(xi, ell, p, gamma, M, horizon)[:horizon]
    s = h + apply_M(M, q_mean)
    var = np.array([innovation_variance(xi, p, t) for t in range(horizon)])

    if g_form == "statement":
        cum_r = np.cumsum(r[:horizon], axis=0)
        cum_h = np.cumsum(h, axis=0)
        g = e0 + p * cum_r + p * (1.0 - gamma) * np.linalg.solve(K, cum_h.T).T
    else:
        g = _transient_g(e0, r[:horizon], h, p, gamma, M, K)

    rr = r[:horizon]
    sr = s + rr
    if gamma < 1.0:
        bound = (
            (1.0 - p) * np.einsum("ij,ij->i", sr, sr)
            + p * gamma * np.einsum("ij,ij->i", s, s)
            + (1.0 - p) * gamma / (1.0 - gamma) * np.einsum("ij,ij->i", rr, rr)
            + var
            + np.einsum("ij,ij->i", g, g)
        )
    else:
        bound, _ = perfect_eavesdrop_protection(rr, p, x_c0, x_a0, horizon, tail_window)
        bound = bound[:horizon]

    return BoundSeries(
        ell=ell,
        h=h,
        q_mean=q_mean,
        s=s,
        r=rr,
        var=var,
        g=g,
        bound=bound,
        p=p,
        gamma=gamma,
        M=M,
        x_c0_minus_x_a0=e0,
        liminf_proxy=float(np.min(bound[-tail_window:])),
        tail_window=tail_window,
        g_form=g_form,
        lemma1_satisfied=report.satisfied,
    )


def _transient_g(e0, r, h, p, gamma, M, K):
    """
    e_0 + p sum_{k<t} r_k + p(1-gamma)(I - M_2)^{-1} sum_{k<t} (p I - M_1 M_2^{t-1-k}) h_k

    with I - M_2 = p K. z_t = sum_{k<t} M_2^{t-1-k} h_k is carried recursively.
    """
    horizon, d = h.shape
    M1 = p * (1.0 - gamma) * M
    M2 = (1.0 - p) * np.eye(d) + M1
    g = np.zeros((horizon, d))
    z = np.zeros(d)
    cum_r = np.zeros(d)
    cum_h = np.zeros(d)
    for t in range(horizon):
        inner = p * cum_h - M1 @ z
        g[t] = e0 + p * cum_r + (1.0 - gamma) * np.linalg.solve(K, inner)
        z = M2 @ z + h[t]
        cum_r = cum_r + r[t]
        cum_h = cum_h + h[t]
    return g


def mean_error_series(xi_history, r_history, p, gamma, M, x_c0, x_a0, horizon) -> np.ndarray:
    """
    Exact E[e^c_t] for t = 0..horizon in scripted mode:
    E[e_{t+1}] = E[e_t] + p r_t + p(1-gamma) s_t.
    """
    e0 = as_model_vector(x_c0, name="x_c0") - as_model_vector(x_a0, name="x_a0")
    d = e0.shape[0]
    xi = _history(xi_history, d)
    r = _history(r_history, d, name="r_history")
    M = as_matrix(M, d)
    ell = np.array([ell_t(xi, p, t) for t in range(horizon)]).reshape(horizon, d)
    q = expected_q(xi, ell, p, gamma, M, horizon)
    mean = np.zeros((horizon + 1, d))
    mean[0] = e0
    for t in range(horizon):
        s_t = xi[t] - apply_M(M, ell[t]) + apply_M(M, q[t])
        mean[t + 1] = mean[t] + p * r[t] + p * (1.0 - gamma) * s_t
    return mean


def perfect_eavesdrop_protection(r_history, p: float, x_c0, x_a0, horizon: int, tail_window: Optional[int] = None):
    """
    Protection when every uplink is intercepted

    value_t = p(1-p) sum_{k<t} ||r_k||^2 + ||(x^c_0 - x^a_0) + p sum_{k<t} r_k||^2,
    an equality at every round t = 0..horizon.

    Returns:
        tuple: (np.ndarray of horizon + 1 values, min over the tail window)
    """
    if not 0.0 <= p <= 1.0:
        raise ConfigurationError("p", f"must lie in [0, 1], got {p}")
    e0 = as_model_vector(x_c0, name="x_c0") - as_model_vector(x_a0, name="x_a0")
    d = e0.shape[0]
    r = _history(r_history, d, name="r_history")
    if r.shape[0] < horizon:
        raise ConfigurationError("horizon", f"r_history covers fewer than {horizon} rounds")
    r = r[:horizon]
    cum_r = np.vstack([np.zeros(d), np.cumsum(r, axis=0)])
    cum_sq = np.concatenate([[0.0], np.cumsum(np.einsum("ij,ij->i", r, r))])
    mean = e0 + p * cum_r
    values = p * (1.0 - p) * cum_sq + np.einsum("ij,ij->i", mean, mean)
    tail_window = tail_window or default_tail_window(horizon + 1)
    return values, float(np.min(values[-tail_window:]))


def optimal_p_quadratic(r_history, x_c0, x_a0, horizon: int) -> OptimalP:
    """
    Participation probability maximizing the perfect-eavesdropping protection at `horizon`.

    The value is c0 + c1 p + c2 p^2; the maximum over [0, 1] sits at an
    endpoint or at the vertex when the parabola opens downward. Ties go to
    the smaller p. A flat objective is flagged and returns p* = 0.
    """
    e0 = as_model_vector(x_c0, name="x_c0") - as_model_vector(x_a0, name="x_a0")
    r = _history(r_history, e0.shape[0], name="r_history")[:horizon]
    S1 = r.sum(axis=0)
    S2 = float(np.einsum("ij,ij->", r, r))
    c0 = float(e0 @ e0)
    c1 = S2 + 2.0 * float(e0 @ S1)
    c2 = float(S1 @ S1) - S2

    def value(p):
        return c0 + c1 * p + c2 * p * p

    scale = 1e-15 * (1.0 + abs(c0) + S2 + float(S1 @ S1))
    if abs(c1) <= scale and abs(c2) <= scale:
        return OptimalP(p_star=0.0, value=c0, flat=True)
    candidates = [0.0, 1.0]
    if c2 < 0.0:
        vertex = -c1 / (2.0 * c2)
        if 0.0 < vertex < 1.0:
            candidates.append(vertex)
    best = max(sorted(candidates), key=value)
    return OptimalP(p_star=float(best), value=value(best), flat=False)
