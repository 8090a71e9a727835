import os

from dotenv import load_dotenv

# Pick up FLPROTECT_* overrides from a local .env if present
load_dotenv()

# Logging
LOG_LEVEL = os.environ.get("FLPROTECT_LOG_LEVEL", "INFO")

# Reproducibility: omitted seeds fall back to this constant, never the clock
DEFAULT_SEED = int(os.environ.get("FLPROTECT_SEED", "20240601"))

# Trial concurrency cap (FLPROTECT_THREADS); results never depend on it
THREADS = max(1, int(os.environ.get("FLPROTECT_THREADS", "1")))

# Run defaults
DEFAULT_PROTOCOL = "flip"
DEFAULT_MODE = "scripted"
DEFAULT_N_CLIENTS = 10
DEFAULT_N_SAMPLED = 5
DEFAULT_GAMMA = 0.5
DEFAULT_ETA = 0.1
DEFAULT_LOCAL_STEPS = 3
DEFAULT_HORIZON = 100
DEFAULT_DIMENSION = 1
DEFAULT_M_SCALAR = 0.5
DEFAULT_TRIALS = 2000
DEFAULT_HETEROGENEITY = 1.0
DEFAULT_CURVATURE_RANGE = (0.5, 2.0)

# Scripted scenario used when no script files are given
DEFAULT_SCRIPT_XI_DECAY = 0.9
DEFAULT_SCRIPT_ZETA = 0.1

# Tail statistics stand in for liminf: last quarter of the rounds
TAIL_FRACTION = 0.25

# Numerics
POWER_ITERATION_TOL = 1e-10
POWER_ITERATION_MAX_ITER = 10_000
DIVERGENCE_TRACE = 1e12
CONDITION_WARNING = 1e10
SYMMETRY_TOL = 1e-12
WEIGHT_SUM_TOL = 1e-12
PSD_EIGEN_TOL = -1e-10

# Exact enumeration budget (3-way branching after pruning delta = 0)
ENUMERATION_MAX_HORIZON = 14

# Per-round Monte Carlo band used by the verify command
VERIFY_SIGMA_BAND = 4.0
VERIFY_TRIALS = int(os.environ.get("FLPROTECT_VERIFY_TRIALS", "100000"))

# Random-number stream tags for SeedSequence spawn keys
OBJECTIVE_STREAM = 0
TRIAL_STREAM = 1
INIT_STREAM = 2

# Output
CSV_SCHEMA_VERSION = 1
CSV_SCHEMA_NAME = "flprotect-csv"
