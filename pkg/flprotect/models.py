"""
Domain types shared by the simulator, the adversary and the analysis code
"""
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import List, Optional

import numpy as np

from flprotect import config
from flprotect.config import TAIL_FRACTION, PSD_EIGEN_TOL


class FLProtectError(Exception):
    """Base class for everything this package raises on purpose."""


class ConfigurationError(FLProtectError):
    def __init__(self, field_name, message):
        self.field_name = field_name
        super().__init__(f"{field_name}: {message}")


class SimulationFault(FLProtectError):
    def __init__(self, round_index, message):
        self.round_index = round_index
        super().__init__(f"round {round_index}: {message}")


class ContractViolation(FLProtectError):
    pass


class BoundComputationError(FLProtectError):
    pass


class ProtocolKind(Enum):
    FLIP = "flip"   # uplink carries the increment xi_t
    FLOP = "flop"   # uplink carries the full local model

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ConfigurationError("protocol", f"expected flip or flop, got {value!r}")


class ScenarioMode(Enum):
    SCRIPTED = "scripted"
    FULL_FL = "full_fl"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ConfigurationError("mode", f"expected scripted or full_fl, got {value!r}")


def as_model_vector(values, d=None, name="vector"):
    """
    Convert to a finite float64 vector of dimension d

    Args:
        values: array-like coordinates
        d (int): expected dimension, unchecked when None
        name (str): field name used in error messages

    Returns:
        np.ndarray: 1-D float64 copy
    """
    vec = np.array(values, dtype=float).reshape(-1)
    if d is not None and vec.shape[0] != d:
        raise ConfigurationError(name, f"expected dimension {d}, got {vec.shape[0]}")
    if not np.all(np.isfinite(vec)):
        raise ConfigurationError(name, "entries must be finite")
    return vec


def as_matrix(M, d):
    """Promote a scalar, a diagonal (length-d) or a full d x d spec to a d x d matrix."""
    arr = np.asarray(M, dtype=float)
    if arr.ndim == 0:
        return float(arr) * np.eye(d)
    if arr.ndim == 1:
        if arr.shape[0] != d:
            raise ConfigurationError("M", f"diagonal needs {d} entries, got {arr.shape[0]}")
        return np.diag(arr)
    if arr.shape != (d, d):
        raise ConfigurationError("M", f"expected a {d}x{d} matrix, got {arr.shape}")
    return arr.copy()


@dataclass(frozen=True)
class QuadraticObjective:
    """f(x) = 0.5 x^T Q x + b^T x with constant Hessian Q."""
    hessian: np.ndarray
    linear: np.ndarray
    _lambda_max: float = field(init=False, repr=False, compare=False, default=0.0)

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.hessian, dtype=float))
        b = np.asarray(self.linear, dtype=float).reshape(-1)
        if Q.shape[0] != Q.shape[1] or Q.shape[0] != b.shape[0]:
            raise ConfigurationError("objective", f"hessian {Q.shape} does not match linear term {b.shape}")
        if not np.allclose(Q, Q.T, atol=1e-12):
            raise ConfigurationError("objective", "hessian must be symmetric")
        if np.linalg.eigvalsh(Q).min() < PSD_EIGEN_TOL:
            raise ConfigurationError("objective", "hessian must be positive semi-definite")
        object.__setattr__(self, "hessian", Q)
        object.__setattr__(self, "linear", b)
        object.__setattr__(self, "_lambda_max", float(np.linalg.eigvalsh(Q).max()))

    @property
    def dimension(self):
        return self.linear.shape[0]

    @property
    def lambda_max(self):
        return self._lambda_max

    def gradient(self, x):
        return self.hessian @ x + self.linear

    def minimizer(self):
        return -np.linalg.solve(self.hessian, self.linear)


@dataclass(frozen=True)
class RoundTrace:
    t: int
    delta: int
    mu: int
    xi: Optional[np.ndarray]
    zeta: np.ndarray
    client_model: np.ndarray
    uplink: Optional[np.ndarray]
    error_sq: float
    next_error_sq: float
    tau: int = -1


@dataclass(frozen=True)
class AdversaryState:
    estimate: np.ndarray
    xi_estimate: np.ndarray
    tau: int
    M: np.ndarray
    t: int = 0
    zeta_estimate_policy: str = "zero"

    @classmethod
    def initial(cls, x_a0, M, zeta_estimate_policy="zero"):
        x_a0 = as_model_vector(x_a0, name="x_a0")
        return cls(
            estimate=x_a0,
            xi_estimate=np.zeros_like(x_a0),
            tau=-1,
            M=as_matrix(M, x_a0.shape[0]),
            t=0,
            zeta_estimate_policy=zeta_estimate_policy,
        )

    def advanced(self, **changes):
        return replace(self, **changes)


@dataclass(frozen=True)
class StabilityReport:
    threshold: float
    spectral_radius_M: float
    satisfied: bool
    converged: bool = True
    iterations: int = 0


@dataclass(frozen=True)
class InnovationTransition:
    A: np.ndarray
    B: np.ndarray
    G_now: np.ndarray
    G_prev: np.ndarray


@dataclass
class BoundSeries:
    ell: np.ndarray
    h: np.ndarray
    q_mean: np.ndarray
    s: np.ndarray
    r: np.ndarray
    var: np.ndarray
    g: np.ndarray
    bound: np.ndarray
    p: float
    gamma: float
    M: np.ndarray
    x_c0_minus_x_a0: np.ndarray
    liminf_proxy: float
    tail_window: int
    g_form: str = "statement"
    lemma1_satisfied: bool = True

    @property
    def horizon(self):
        return self.bound.shape[0]


@dataclass(frozen=True)
class OptimalP:
    p_star: float
    value: float
    flat: bool = False


def default_tail_window(horizon):
    return max(1, int(round(TAIL_FRACTION * horizon)))


@dataclass
class RunConfig:
    protocol: ProtocolKind = ProtocolKind(config.DEFAULT_PROTOCOL)
    N: int = config.DEFAULT_N_CLIENTS
    n: int = config.DEFAULT_N_SAMPLED
    gamma: float = config.DEFAULT_GAMMA
    eta: float = config.DEFAULT_ETA
    local_steps: int = config.DEFAULT_LOCAL_STEPS
    horizon: int = config.DEFAULT_HORIZON
    d: int = config.DEFAULT_DIMENSION
    M_spec: object = config.DEFAULT_M_SCALAR
    zeta_hat_spec: object = "zero"
    heterogeneity: float = config.DEFAULT_HETEROGENEITY
    shared_curvature: bool = False
    curvature_min: float = config.DEFAULT_CURVATURE_RANGE[0]
    curvature_max: float = config.DEFAULT_CURVATURE_RANGE[1]
    x_c0_spec: str = "zeros"
    x_a0_spec: str = "zeros"
    seed: int = config.DEFAULT_SEED
    trials: int = config.DEFAULT_TRIALS
    mode: ScenarioMode = ScenarioMode(config.DEFAULT_MODE)
    force_mu_one: bool = False
    tail_window: Optional[int] = None
    script_xi: Optional[str] = None
    script_zeta: Optional[str] = None
    script_zeta_hat: Optional[str] = None

    @property
    def p(self):
        return self.n / self.N

    def effective_tail_window(self):
        return self.tail_window if self.tail_window else default_tail_window(self.horizon + 1)

    def validate(self):
        """Check ranges field by field; raises ConfigurationError naming the field."""
        for name in ("N", "local_steps", "horizon", "d", "trials"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigurationError(name, f"must be a positive integer, got {value!r}")
        if not isinstance(self.seed, (int, np.integer)) or not 0 <= self.seed < 2 ** 64:
            raise ConfigurationError("seed", f"must be an integer in [0, 2**64), got {self.seed!r}")
        if not isinstance(self.n, (int, np.integer)) or self.n < 0:
            raise ConfigurationError("n", f"must be a nonnegative integer, got {self.n!r}")
        if self.n > self.N:
            raise ConfigurationError("n", f"cannot exceed N={self.N}, got {self.n}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigurationError("gamma", f"must lie in [0, 1], got {self.gamma}")
        if not self.eta > 0.0:
            raise ConfigurationError("eta", f"must be positive, got {self.eta}")
        if self.heterogeneity < 0.0:
            raise ConfigurationError("heterogeneity", "must be nonnegative")
        if not 0.0 <= self.curvature_min <= self.curvature_max:
            raise ConfigurationError("curvature_min", "need 0 <= curvature_min <= curvature_max")
        if self.tail_window is not None and not 1 <= self.tail_window <= self.horizon + 1:
            raise ConfigurationError("tail_window", f"must lie in [1, {self.horizon + 1}]")
        if self.x_c0_spec not in ("zeros", "ones", "random"):
            raise ConfigurationError("x_c0", f"unknown init {self.x_c0_spec!r}")
        if self.x_a0_spec not in ("zeros", "ones", "random", "client"):
            raise ConfigurationError("x_a0", f"unknown init {self.x_a0_spec!r}")
        return self


@dataclass
class Scenario:
    """
    Everything one trial needs.

    Scripted mode carries deterministic xi/zeta/zeta_hat sequences (one row
    per round); full_fl mode carries the RunConfig the simulator is built
    from.
    """
    mode: ScenarioMode
    protocol: ProtocolKind
    p: float
    gamma: float
    M: np.ndarray
    horizon: int
    x_c0: np.ndarray
    x_a0: np.ndarray
    xi: Optional[np.ndarray] = None
    zeta: Optional[np.ndarray] = None
    zeta_hat: Optional[np.ndarray] = None
    force_mu_one: bool = False
    tail_window: Optional[int] = None
    config: Optional[RunConfig] = None

    def __post_init__(self):
        self.mode = ScenarioMode.parse(self.mode)
        self.protocol = ProtocolKind.parse(self.protocol)
        if not 0.0 <= self.p <= 1.0:
            raise ConfigurationError("p", f"must lie in [0, 1], got {self.p}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigurationError("gamma", f"must lie in [0, 1], got {self.gamma}")
        if self.horizon < 1:
            raise ConfigurationError("horizon", "must be a positive integer")
        self.x_c0 = as_model_vector(self.x_c0, name="x_c0")
        d = self.x_c0.shape[0]
        self.x_a0 = as_model_vector(self.x_a0, d, name="x_a0")
        self.M = as_matrix(self.M, d)
        if self.mode is ScenarioMode.SCRIPTED:
            if self.xi is None or self.zeta is None:
                raise ConfigurationError("script_xi", "scripted mode needs xi and zeta sequences")
            if self.zeta_hat is None:
                self.zeta_hat = np.zeros((self.horizon, d))
            for name in ("xi", "zeta", "zeta_hat"):
                seq = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
                if d == 1 and seq.shape[0] == 1 and seq.shape[1] == self.horizon:
                    seq = seq.T
                if seq.shape != (self.horizon, d):
                    raise ConfigurationError(f"script_{name}", f"expected shape ({self.horizon}, {d}), got {seq.shape}")
                if not np.all(np.isfinite(seq)):
                    raise ConfigurationError(f"script_{name}", "entries must be finite")
                setattr(self, name, seq)
        elif self.config is None:
            raise ConfigurationError("mode", "full_fl mode needs a RunConfig")

    @property
    def d(self):
        return self.x_c0.shape[0]

    @property
    def r(self):
        """r_t = zeta_t - zeta_hat_t, scripted mode only."""
        return self.zeta - self.zeta_hat

    def effective_tail_window(self):
        return self.tail_window if self.tail_window else default_tail_window(self.horizon + 1)

    def with_changes(self, **changes):
        return replace(self, **changes)


@dataclass
class ProtectionEstimate:
    mean: np.ndarray
    stderr: np.ndarray
    trials: int
    exact: Optional[np.ndarray] = None
    zero_fraction: Optional[np.ndarray] = None
    hit_zero_fraction: float = 0.0
    tail_mean: float = 0.0
    tail_stderr: float = 0.0


@dataclass(frozen=True)
class CrossTermProbe:
    norm: np.ndarray
    stderr: np.ndarray
    trials: int


@dataclass
class OutputRow:
    t: int
    mc_mean: float
    mc_stderr: float
    lemma1_satisfied: bool
    exact: Optional[float] = None
    bound_t: Optional[float] = None
    eq13_value: Optional[float] = None


@dataclass
class CheckResult:
    name: str
    status: str            # PASS, FAIL or REPORT
    measured: Optional[float]
    tolerance: Optional[float]
    detail: str = ""


@dataclass
class VerificationReport:
    checks: List[CheckResult] = field(default_factory=list)

    @property
    def failed(self):
        return any(c.status == "FAIL" for c in self.checks)
