"""
Eavesdropping-protection simulator for FLIP and FLOP federated learning.

Subcommands: simulate, bound, verify, sweep. CSV goes to stdout (or --out),
logs go to stderr.
"""
import argparse
import logging
import sys
from typing import Dict, List, Optional

import flprotect.adversary_utils as adversary_utils
import flprotect.analysis_utils as analysis_utils
import flprotect.data_processing as data_processing
import flprotect.experiment_utils as experiment_utils
import flprotect.verification_utils as verification_utils
from flprotect import config
from flprotect.models import (
    BoundComputationError,
    ConfigurationError,
    FLProtectError,
    RunConfig,
    ScenarioMode,
    SimulationFault,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_SIMULATION = 3

# flag dest -> RunConfig field
_OVERRIDES = {
    "protocol": "protocol",
    "mode": "mode",
    "N": "N",
    "n": "n",
    "p": "p",
    "gamma": "gamma",
    "eta": "eta",
    "steps": "local_steps",
    "horizon": "horizon",
    "d": "d",
    "M_scalar": "M_spec",
    "zeta_hat": "zeta_hat_spec",
    "seed": "seed",
    "trials": "trials",
    "force_mu_one": "force_mu_one",
    "tail_window": "tail_window",
    "script_xi": "script_xi",
    "script_zeta": "script_zeta",
    "script_zeta_hat": "script_zeta_hat",
    "x_c0": "x_c0_spec",
    "x_a0": "x_a0_spec",
    "heterogeneity": "heterogeneity",
    "shared_curvature": "shared_curvature",
}


def _common_arguments() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value run config file; flags override its keys")
    common.add_argument("--protocol", choices=["flip", "flop"])
    common.add_argument("--mode", choices=["scripted", "full_fl"])
    common.add_argument("--N", type=int, help="number of clients")
    common.add_argument("--n", type=int, help="clients sampled per round")
    common.add_argument("--p", type=float, help="participation probability; sets n = p*N")
    common.add_argument("--gamma", type=float, help="eavesdropping probability")
    common.add_argument("--eta", type=float, help="local learning rate")
    common.add_argument("--steps", type=int, help="local gradient steps per round")
    common.add_argument("--horizon", type=int, help="number of rounds")
    common.add_argument("--d", type=int, help="model dimension")
    common.add_argument("--M-scalar", dest="M_scalar", help="adversary M: scalar, comma diagonal or matrix CSV")
    common.add_argument("--zeta-hat", dest="zeta_hat", help="'zero' or a CSV of zeta_hat rows")
    common.add_argument("--seed", type=int, help=f"root seed (default {config.DEFAULT_SEED})")
    common.add_argument("--trials", type=int, help="Monte Carlo trials")
    common.add_argument("--force-mu-one", dest="force_mu_one", action="store_true", default=None,
                        help="adversary intercepts every uplink")
    common.add_argument("--tail-window", dest="tail_window", type=int, help="rounds used for the liminf proxy")
    common.add_argument("--script-xi", dest="script_xi")
    common.add_argument("--script-zeta", dest="script_zeta")
    common.add_argument("--script-zeta-hat", dest="script_zeta_hat")
    common.add_argument("--x-c0", dest="x_c0", choices=["zeros", "ones", "random"])
    common.add_argument("--x-a0", dest="x_a0", choices=["zeros", "ones", "random", "client"])
    common.add_argument("--heterogeneity", type=float, help="spread of client minimizers (full_fl)")
    common.add_argument("--shared-curvature", dest="shared_curvature", action="store_true", default=None)
    common.add_argument("--threads", type=int, help="trial concurrency (default FLPROTECT_THREADS)")
    common.add_argument("--out", help="output path (default stdout)")
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common_arguments()

    simulate = sub.add_parser("simulate", parents=[common], help="Monte Carlo protection per round")
    simulate.add_argument("--exact", action="store_true", help=f"add exact enumeration (horizon <= {config.ENUMERATION_MAX_HORIZON})")

    bound = sub.add_parser("bound", parents=[common], help="asymptotic lower-bound terms per round")
    bound.add_argument("--g-form", dest="g_form", choices=["statement", "transient"], default="statement")

    verify = sub.add_parser("verify", parents=[common], help="run the oracle cross-checks")
    verify.add_argument("--json", action="store_true", help="emit the report as JSON")

    sweep = sub.add_parser("sweep", parents=[common], help="protection across a parameter grid")
    sweep.add_argument("--parameter", choices=list(experiment_utils.SWEEP_PARAMETERS), required=True)
    sweep.add_argument("--grid", required=True, help="comma-separated grid values")
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, object]:
    return {field: getattr(args, dest, None) for dest, field in _OVERRIDES.items()}


def load_run_config(args: argparse.Namespace) -> RunConfig:
    file_values = data_processing.load_config_file(args.config) if args.config else None
    return data_processing.build_run_config(file_values, _overrides(args))


def _clamp_threads(requested: Optional[int]) -> int:
    if requested is None:
        return config.THREADS
    if requested < 1:
        raise ConfigurationError("threads", f"must be a positive integer, got {requested}")
    if requested > config.THREADS:
        logger.warning(f"--threads {requested} exceeds FLPROTECT_THREADS={config.THREADS}; using {config.THREADS}")
        return config.THREADS
    return requested


def _parse_grid(text: str) -> List[float]:
    try:
        grid = [float(s.strip()) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigurationError("grid", f"expected comma-separated numbers, got {text!r}")
    if not grid:
        raise ConfigurationError("grid", "is empty")
    return grid


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_simulate(cfg: RunConfig, args: argparse.Namespace) -> int:
    scenario = data_processing.build_scenario(cfg)
    estimate = experiment_utils.monte_carlo_protection(scenario, cfg.trials, cfg.seed, args.threads)
    lemma_ok = adversary_utils.check_M(scenario.M, scenario.p, scenario.gamma).satisfied

    bound = eq13 = None
    if scenario.mode is ScenarioMode.SCRIPTED:
        if args.exact:
            estimate.exact = experiment_utils.brute_force_protection(scenario)
        eq13, _ = analysis_utils.perfect_eavesdrop_protection(
            scenario.r, scenario.p, scenario.x_c0, scenario.x_a0, scenario.horizon
        )
        if scenario.p > 0.0:
            try:
                bound = analysis_utils.theorem1_bound(
                    scenario.xi, scenario.zeta, scenario.zeta_hat, scenario.p, scenario.gamma,
                    scenario.M, scenario.x_c0, scenario.x_a0, scenario.horizon,
                ).bound
            except BoundComputationError as e:
                logger.warning(f"Skipping bound column: {e}")
    elif args.exact:
        logger.warning("--exact needs scripted mode; skipping the exact column")

    rows = data_processing.rows_from_estimate(estimate, lemma_ok, bound=bound, eq13=eq13)
    text = data_processing.frame_to_csv(data_processing.output_frame(rows), "simulate")
    data_processing.write_output(text, args.out)
    return EXIT_OK


def cmd_bound(cfg: RunConfig, args: argparse.Namespace) -> int:
    scenario = data_processing.build_scenario(cfg)
    if scenario.mode is not ScenarioMode.SCRIPTED:
        raise ConfigurationError("mode", "bound needs scripted inputs")
    series = analysis_utils.theorem1_bound(
        scenario.xi, scenario.zeta, scenario.zeta_hat, scenario.p, scenario.gamma,
        scenario.M, scenario.x_c0, scenario.x_a0, scenario.horizon,
        tail_window=cfg.tail_window, g_form=args.g_form,
    )
    notes = []
    if not series.lemma1_satisfied:
        notes.append(f"M violates the stability condition for p={scenario.p:g}, gamma={scenario.gamma:g}; lemma1_satisfied is false")
        logger.warning(f"Bound rows flagged: {notes[0]}")
    text = data_processing.frame_to_csv(data_processing.bound_frame(series), "bound", notes)
    data_processing.write_output(text, args.out)
    return EXIT_OK


def cmd_verify(cfg: RunConfig, args: argparse.Namespace) -> int:
    report = verification_utils.run_verification(cfg.seed, trials=args.trials, threads=args.threads)
    if args.json:
        text = data_processing.report_to_json(report)
    else:
        text = data_processing.report_to_text(report)
    data_processing.write_output(text, args.out)
    return EXIT_FAILED if report.failed else EXIT_OK


def cmd_sweep(cfg: RunConfig, args: argparse.Namespace) -> int:
    scenario = data_processing.build_scenario(cfg)
    grid = _parse_grid(args.grid)
    df = experiment_utils.protection_sweep(scenario, args.parameter, grid, cfg.trials, cfg.seed, args.threads)
    data_processing.write_output(data_processing.frame_to_csv(df, "sweep"), args.out)
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "bound": cmd_bound,
    "verify": cmd_verify,
    "sweep": cmd_sweep,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=config.LOG_LEVEL,
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_run_config(args)
        args.threads = _clamp_threads(args.threads)
        return COMMANDS[args.command](cfg, args)
    except ConfigurationError as e:
        logger.error(f"Invalid configuration: {e}")
        return EXIT_CONFIG
    except SimulationFault as e:
        logger.error(f"Simulation diverged at {e}")
        return EXIT_SIMULATION
    except FLProtectError as e:
        logger.error(f"Error running {args.command}: {e}")
        return EXIT_FAILED
    except Exception as e:
        logger.error(f"Unexpected error running {args.command}: {e}")
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
