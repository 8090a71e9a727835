"""
Run-config ingestion, script loading and CSV/JSON emission
"""
import dataclasses
import io
import json
import logging
import math
import os
import sys
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd
from dotenv import dotenv_values

from flprotect import config
from flprotect.models import (
    BoundSeries,
    ConfigurationError,
    OutputRow,
    ProtectionEstimate,
    ProtocolKind,
    RunConfig,
    Scenario,
    ScenarioMode,
    VerificationReport,
)

logger = logging.getLogger(__name__)

_INT_FIELDS = {"N", "n", "local_steps", "horizon", "d", "seed", "trials", "tail_window"}
_FLOAT_FIELDS = {"gamma", "eta", "heterogeneity", "curvature_min", "curvature_max"}
_BOOL_FIELDS = {"shared_curvature", "force_mu_one"}
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------

def load_config_file(path: str) -> Dict[str, str]:
    """Read a key=value run config (comments with #). Keys are RunConfig field names."""
    if not os.path.exists(path):
        raise ConfigurationError("config", f"file not found: {path}")
    values = {k: v for k, v in dotenv_values(path).items() if v is not None}
    logger.debug(f"Loaded {len(values)} keys from {path}")
    return values


def _coerce(name, value):
    if value is None or not isinstance(value, str):
        return value
    text = value.strip()
    try:
        if name in _INT_FIELDS:
            return int(text)
        if name in _FLOAT_FIELDS:
            return float(text)
    except ValueError:
        raise ConfigurationError(name, f"cannot parse {value!r}")
    if name in _BOOL_FIELDS:
        if text.lower() in _TRUE:
            return True
        if text.lower() in _FALSE:
            return False
        raise ConfigurationError(name, f"expected true or false, got {value!r}")
    if name == "protocol":
        return ProtocolKind.parse(text)
    if name == "mode":
        return ScenarioMode.parse(text)
    return text


def build_run_config(file_values: Optional[Dict[str, str]] = None, overrides: Optional[Dict[str, object]] = None) -> RunConfig:
    """
    Merge defaults, config-file keys and flag overrides (in that order of precedence, flags last)

    Args:
        file_values (dict): raw strings from load_config_file
        overrides (dict): values from the command line; None entries are ignored

    Returns:
        RunConfig: validated configuration
    """
    merged = {}
    p = None
    for source in (file_values or {}, overrides or {}):
        values = {k: v for k, v in source.items() if v is not None}
        # a later source naming n drops an earlier p
        if "p" in values:
            p = values.pop("p")
        elif "n" in values:
            p = None
        merged.update(values)
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(merged) - known)
    if unknown:
        raise ConfigurationError(unknown[0], "unknown configuration key")
    cfg = RunConfig(**{k: _coerce(k, v) for k, v in merged.items()})
    cfg.protocol = ProtocolKind.parse(cfg.protocol)
    cfg.mode = ScenarioMode.parse(cfg.mode)
    if p is not None:
        try:
            p = float(p)
        except (TypeError, ValueError):
            raise ConfigurationError("p", f"cannot parse {p!r}")
        n = p * cfg.N
        if not 0.0 <= p <= 1.0 or abs(n - round(n)) > 1e-9:
            raise ConfigurationError("p", f"p={p} must equal n/N for an integer n with N={cfg.N}")
        cfg.n = int(round(n))
    return cfg.validate()


# ---------------------------------------------------------------------------
# Scripts and init vectors
# ---------------------------------------------------------------------------

def default_script(horizon: int, d: int):
    """xi_t = 0.9^t (every coordinate), zeta_t = 0.1, zeta_hat_t = 0."""
    decay = config.DEFAULT_SCRIPT_XI_DECAY ** np.arange(horizon)
    xi = np.repeat(decay[:, None], d, axis=1)
    zeta = np.full((horizon, d), config.DEFAULT_SCRIPT_ZETA)
    return xi, zeta, np.zeros((horizon, d))


def load_script(path: str, horizon: int, d: int, name: str) -> np.ndarray:
    """One vector per row, d columns, no header; rows past the horizon are ignored."""
    if not os.path.exists(path):
        raise ConfigurationError(name, f"file not found: {path}")
    try:
        df = pd.read_csv(path, header=None, comment="#")
        values = df.apply(pd.to_numeric).to_numpy(dtype=float)
    except (ValueError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ConfigurationError(name, f"cannot read {path}: {e}")
    if values.shape[1] != d:
        raise ConfigurationError(name, f"expected {d} columns, got {values.shape[1]}")
    if values.shape[0] < horizon:
        raise ConfigurationError(name, f"needs {horizon} rows, got {values.shape[0]}")
    return values[:horizon]


def parse_M_spec(spec, d: int) -> np.ndarray:
    """Scalar m, comma-separated diagonal, or a CSV file holding the full matrix."""
    if isinstance(spec, (int, float, np.ndarray)):
        return np.asarray(spec, dtype=float)
    text = str(spec).strip()
    if os.path.exists(text):
        return load_script(text, d, d, "M_spec")
    try:
        parts = [float(x) for x in text.split(",")]
    except ValueError:
        raise ConfigurationError("M_spec", f"expected a number, a diagonal list or a matrix file, got {spec!r}")
    if len(parts) == 1:
        return np.asarray(parts[0])
    if len(parts) != d:
        raise ConfigurationError("M_spec", f"diagonal needs {d} entries, got {len(parts)}")
    return np.asarray(parts)


def init_vector(spec: str, d: int, rng: np.random.Generator, client: Optional[np.ndarray] = None) -> np.ndarray:
    if spec == "zeros":
        return np.zeros(d)
    if spec == "ones":
        return np.ones(d)
    if spec == "random":
        return rng.normal(size=d)
    if spec == "client" and client is not None:
        return client.copy()
    raise ConfigurationError("x_a0" if client is not None else "x_c0", f"unknown init {spec!r}")


def build_scenario(cfg: RunConfig) -> Scenario:
    """Turn a validated RunConfig into the Scenario the experiments run on."""
    d, H = cfg.d, cfg.horizon
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(config.INIT_STREAM,)))
    x_c0 = init_vector(cfg.x_c0_spec, d, rng)
    x_a0 = init_vector(cfg.x_a0_spec, d, rng, client=x_c0)
    M = parse_M_spec(cfg.M_spec, d)

    xi = zeta = zeta_hat = None
    if cfg.mode is ScenarioMode.SCRIPTED:
        xi, zeta, zeta_hat = default_script(H, d)
        if cfg.script_xi:
            xi = load_script(cfg.script_xi, H, d, "script_xi")
        if cfg.script_zeta:
            zeta = load_script(cfg.script_zeta, H, d, "script_zeta")
        hat_path = cfg.script_zeta_hat or (cfg.zeta_hat_spec if cfg.zeta_hat_spec != "zero" else None)
        if hat_path:
            zeta_hat = load_script(hat_path, H, d, "script_zeta_hat")
    elif cfg.zeta_hat_spec != "zero" or cfg.script_zeta_hat:
        logger.warning("full_fl mode uses zeta_hat = 0; ignoring the zeta_hat script")

    return Scenario(
        mode=cfg.mode,
        protocol=cfg.protocol,
        p=cfg.p,
        gamma=cfg.gamma,
        M=M,
        horizon=H,
        x_c0=x_c0,
        x_a0=x_a0,
        xi=xi,
        zeta=zeta,
        zeta_hat=zeta_hat,
        force_mu_one=cfg.force_mu_one,
        tail_window=cfg.tail_window,
        config=cfg,
    )


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------

def format_value(value) -> str:
    """Shortest round-trip text for floats; blanks for undefined cells."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        if math.isnan(value):
            return ""
        return repr(float(value))
    return str(value)


def rows_from_estimate(
    estimate: ProtectionEstimate,
    lemma1_satisfied: bool,
    bound: Optional[np.ndarray] = None,
    eq13: Optional[np.ndarray] = None,
) -> List[OutputRow]:
    rows = []
    for t in range(estimate.mean.shape[0]):
        rows.append(OutputRow(
            t=t,
            mc_mean=float(estimate.mean[t]),
            mc_stderr=float(estimate.stderr[t]),
            lemma1_satisfied=lemma1_satisfied,
            exact=None if estimate.exact is None else float(estimate.exact[t]),
            bound_t=None if bound is None or t >= bound.shape[0] else float(bound[t]),
            eq13_value=None if eq13 is None else float(eq13[t]),
        ))
    return rows


def output_frame(rows: Iterable[OutputRow]) -> pd.DataFrame:
    """Columns in OutputRow order; optional columns only when some row fills them."""
    df = pd.DataFrame([dataclasses.asdict(r) for r in rows])
    columns = ["t", "mc_mean", "mc_stderr"]
    for optional in ("exact", "bound_t", "eq13_value"):
        if df[optional].notna().any():
            columns.append(optional)
    columns.append("lemma1_satisfied")
    return df[columns]


def bound_frame(series: BoundSeries) -> pd.DataFrame:
    """
    Per-round bound terms. ell_t and h_t are written coordinate by coordinate
    with their signs (ell_0, ell_1, ..., h_0, ...); the remaining vector terms
    are summarized by their norms.
    """
    def rows(a):
        return np.atleast_2d(a).reshape(series.horizon, -1)

    def norms(a):
        return np.linalg.norm(rows(a), axis=1)

    columns = {"t": np.arange(series.horizon)}
    for name, values in (("ell", series.ell), ("h", series.h)):
        for j, column in enumerate(rows(values).T):
            columns[f"{name}_{j}"] = column
    columns.update({
        "ell_norm": norms(series.ell),
        "h_norm": norms(series.h),
        "q_mean_norm": norms(series.q_mean),
        "s_norm": norms(series.s),
        "r_norm": norms(series.r),
        "g_norm": norms(series.g),
        "var": series.var,
        "bound_t": series.bound,
        "liminf_proxy": series.liminf_proxy,
        "lemma1_satisfied": series.lemma1_satisfied,
    })
    return pd.DataFrame(columns)


def frame_to_csv(df: pd.DataFrame, command: str, notes: Sequence[str] = ()) -> str:
    """
    Versioned header comment, then the table with every cell pre-formatted.

    Each note becomes a `# warning: ...` comment line right after the header,
    so readers that skip comments still parse the table.
    """
    text = df.astype(object).apply(lambda col: col.map(format_value))
    buffer = io.StringIO()
    buffer.write(f"# {config.CSV_SCHEMA_NAME} v{config.CSV_SCHEMA_VERSION} command={command}\n")
    for note in notes:
        buffer.write(f"# warning: {note}\n")
    text.to_csv(buffer, index=False, lineterminator="\n")
    return buffer.getvalue()


def read_output_csv(path_or_buffer) -> pd.DataFrame:
    return pd.read_csv(path_or_buffer, comment="#")


def _finite_or_none(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def report_to_dict(report: VerificationReport) -> dict:
    checks = [{k: _finite_or_none(v) for k, v in dataclasses.asdict(c).items()} for c in report.checks]
    return {
        "schema": f"{config.CSV_SCHEMA_NAME}-verify v{config.CSV_SCHEMA_VERSION}",
        "failed": report.failed,
        "checks": checks,
    }


def report_to_json(report: VerificationReport) -> str:
    return json.dumps(report_to_dict(report), indent=2, allow_nan=False) + "\n"


def report_to_text(report: VerificationReport) -> str:
    lines = []
    for c in report.checks:
        measured = format_value(c.measured) or "-"
        tolerance = format_value(c.tolerance) or "-"
        lines.append(f"{c.status:<6} {c.name}: measured={measured} tolerance={tolerance} {c.detail}".rstrip())
    lines.append("FAILED" if report.failed else "OK")
    return "\n".join(lines) + "\n"


def write_output(text: str, out: Optional[str] = None) -> None:
    """Write to `out`, or to stdout when no path is given."""
    if out is None:
        sys.stdout.write(text)
        sys.stdout.flush()
        return
    with open(out, "w", encoding="utf-8", newline="") as f:
        f.write(text)
    logger.info(f"Wrote {out}")
