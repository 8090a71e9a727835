"""
Federated-learning round dynamics for FLIP and FLOP with quadratic client objectives
"""
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np

from flprotect.models import (
    ConfigurationError,
    ProtocolKind,
    QuadraticObjective,
    SimulationFault,
)

logger = logging.getLogger(__name__)


def validate_learning_rate(obj: QuadraticObjective, eta: float) -> None:
    """Raise ConfigurationError unless eta < 1 / lambda_max(Q)."""
    if not eta > 0.0:
        raise ConfigurationError("eta", f"must be positive, got {eta}")
    lam = obj.lambda_max
    if lam > 0.0 and eta * lam >= 1.0:
        raise ConfigurationError("eta", f"eta={eta} violates eta < 1/lambda_max = {1.0 / lam:.6g}")


def _descend(start: np.ndarray, obj: QuadraticObjective, eta: float, steps: int) -> np.ndarray:
    if steps < 1:
        raise ConfigurationError("local_steps", f"must be >= 1, got {steps}")
    validate_learning_rate(obj, eta)
    x = np.array(start, dtype=float)
    for k in range(steps):
        grad = obj.gradient(x)
        if not np.all(np.isfinite(grad)):
            raise SimulationFault(-1, f"non-finite gradient at local step {k}")
        x = x - eta * grad
    return x


def local_update(server_model: np.ndarray, obj: QuadraticObjective, eta: float, steps: int) -> np.ndarray:
    """
    Run `steps` gradient-descent steps from the server model

    Args:
        server_model (np.ndarray): starting point x_0 = x^s_t
        obj (QuadraticObjective): client objective
        eta (float): learning rate, must satisfy eta < 1/lambda_max(Q)
        steps (int): number of gradient steps L

    Returns:
        np.ndarray: innovation xi = x_L - x_0
    """
    x0 = np.asarray(server_model, dtype=float)
    return _descend(x0, obj, eta, steps) - x0


def _snap_to_server(server_model, landed, rounds=4):
    model = landed
    for _ in range(rounds):
        rebuilt = server_model + (model - server_model)
        if np.array_equal(rebuilt, model):
            break
        model = rebuilt
    return model


def client_round(
    client_model: np.ndarray,
    server_model: np.ndarray,
    delta: int,
    obj: QuadraticObjective,
    eta: float,
    steps: int,
    protocol: ProtocolKind,
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """
    One round for one client.

    A sampled client lands on x_L (the end of local descent) and uplinks
    either xi = x_L - x^s_t (FLIP) or x_L itself (FLOP). Under FLIP the
    landing point is snapped to a value the server rebuilds exactly as
    x^s_t + xi, and the uplink equals x^c_{t+1} - x^s_t bit for bit.
    """
    if not delta:
        return np.array(client_model, dtype=float), None
    server_model = np.asarray(server_model, dtype=float)
    new_client_model = _descend(server_model, obj, eta, steps)
    if ProtocolKind.parse(protocol) is ProtocolKind.FLIP:
        new_client_model = _snap_to_server(server_model, new_client_model)
        uplink = new_client_model - server_model
    else:
        uplink = new_client_model.copy()
    return new_client_model, uplink


def server_round(server_model: np.ndarray, received: Sequence[np.ndarray], protocol: ProtocolKind) -> np.ndarray:
    """Uniform average over participants; no participants leaves the server model alone."""
    server_model = np.asarray(server_model, dtype=float)
    if len(received) == 0:
        return server_model.copy()
    if any(np.shape(u) != server_model.shape for u in received):
        raise ConfigurationError("uplink", f"all uplinks must have dimension {server_model.shape[0]}")
    stacked = np.stack([np.asarray(u, dtype=float) for u in received])
    if ProtocolKind.parse(protocol) is ProtocolKind.FLIP:
        return server_model + stacked.mean(axis=0)
    return stacked.mean(axis=0)


def sample_round_randomness(rng: np.random.Generator, p: float, gamma: float) -> Tuple[int, int, np.random.Generator]:
    """
    Draw (delta, mu) for one round.

    Two uniforms are consumed per call, in the order (delta, mu), so a batch
    of rounds drawn as rng.random((T, 2)) reproduces T successive calls.
    """
    if not (0.0 <= p <= 1.0 and 0.0 <= gamma <= 1.0):
        raise ConfigurationError("p", f"probabilities must lie in [0, 1], got p={p}, gamma={gamma}")
    u = rng.random(2)
    return int(u[0] < p), int(u[1] < gamma), rng


def make_client_objectives(
    n_clients: int,
    d: int,
    rng: np.random.Generator,
    heterogeneity: float = 1.0,
    shared_curvature: bool = False,
    curvature_range: Tuple[float, float] = (0.5, 2.0),
) -> List[QuadraticObjective]:
    """
    Generate per-client quadratics with minimizers spread around a common centre

    Args:
        n_clients (int): number of clients N
        d (int): model dimension
        rng (np.random.Generator): source of randomness
        heterogeneity (float): standard deviation of the minimizer spread
        shared_curvature (bool): give every client the same Hessian
        curvature_range (tuple): eigenvalue range of each Hessian

    Returns:
        list: one QuadraticObjective per client
    """
    lo, hi = curvature_range
    centre = rng.normal(size=d)

    def _hessian():
        basis, _ = np.linalg.qr(rng.normal(size=(d, d)))
        eigs = rng.uniform(lo, hi, size=d)
        Q = basis @ np.diag(eigs) @ basis.T
        return 0.5 * (Q + Q.T)

    shared = _hessian() if shared_curvature else None
    objectives = []
    for _ in range(n_clients):
        Q = shared if shared is not None else _hessian()
        x_star = centre + heterogeneity * rng.normal(size=d)
        objectives.append(QuadraticObjective(hessian=Q, linear=-Q @ x_star))
    logger.debug(f"Generated {n_clients} client objectives (d={d}, heterogeneity={heterogeneity})")
    return objectives


class FederatedSystem:
    """
    N clients and one server; client 0 is the one whose uplink is tapped.

    Holds mutable model state for a single trial. The compromised client's
    participation and interception are drawn by the caller; the remaining
    n - delta participants are drawn here from the same generator.
    """

    def __init__(self, objectives, n_sampled, eta, local_steps, protocol, x_s0):
        if not 0 <= n_sampled <= len(objectives):
            raise ConfigurationError("n", f"must lie in [0, {len(objectives)}], got {n_sampled}")
        self.objectives = list(objectives)
        self.n_sampled = n_sampled
        self.eta = eta
        self.local_steps = local_steps
        self.protocol = ProtocolKind.parse(protocol)
        for obj in self.objectives:
            validate_learning_rate(obj, eta)
        self.server_model = np.array(x_s0, dtype=float)
        self.client_models = [self.server_model.copy() for _ in self.objectives]

    @property
    def N(self):
        return len(self.objectives)

    def step(self, delta: int, rng: np.random.Generator, t: int):
        """
        Run round t. Returns (xi, zeta, uplink) for client 0; xi is None when
        client 0 sits the round out.
        """
        others = np.arange(1, self.N)
        n_others = min(self.n_sampled - delta, self.N - 1)
        chosen = rng.choice(others, size=n_others, replace=False) if n_others > 0 else np.empty(0, dtype=int)
        participants = ([0] if delta else []) + sorted(int(i) for i in chosen)

        zeta = self.server_model - self.client_models[0]
        xi = None
        uplink0 = None
        received = []
        new_models = {}
        for i in participants:
            try:
                model, uplink = client_round(
                    self.client_models[i], self.server_model, 1,
                    self.objectives[i], self.eta, self.local_steps, self.protocol,
                )
            except SimulationFault as e:
                raise SimulationFault(t, f"client {i}: {e}")
            new_models[i] = model
            received.append(uplink)
            if i == 0:
                uplink0 = uplink
                xi = model - self.server_model
        new_server = server_round(self.server_model, received, self.protocol)
        for i, model in new_models.items():
            self.client_models[i] = model
        if not np.all(np.isfinite(new_server)):
            raise SimulationFault(t, "server model diverged")
        self.server_model = new_server
        return xi, zeta, uplink0
