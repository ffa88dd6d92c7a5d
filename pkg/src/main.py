"""Main entry point for the DP-Hype toolkit."""

import argparse
import csv
import logging
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

from accountant import PrivacyBudget, calibrate_sigma
from config import SEED_ENV_VAR, default_seed, load_config, with_overrides
from errors import ConfigError, DPHypeError, ReportError, RoundFailureError
from orchestrator import emit_report, run_experiment
from utility import SimulationConfig, sweep_success_rates, utility_lower_bound

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_ROUND_FAILURE = 3

DEFAULT_LOG_FILE = Path("dphype.log")


def setup_logging(verbose: bool = False, log_file: Optional[Path] = DEFAULT_LOG_FILE) -> None:
    """Configure logging for the application."""
    level = logging.DEBUG if verbose else logging.INFO
    handlers: list[logging.Handler] = [logging.StreamHandler()]
    if log_file is not None:
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(
        level=level,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=handlers,
        force=True,
    )


def _float_list(text: str) -> list[float]:
    try:
        return [math.inf if v.strip().lower() in ("inf", "infinity") else float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dphype",
        description="Differentially private federated hyperparameter selection by noisy top-k voting",
    )
    log_group = parser.add_argument_group("Logging Options")
    log_group.add_argument("-v", "--verbose", action="store_true", help="Enable verbose logging")
    log_group.add_argument(
        "--log-file",
        type=Path,
        default=DEFAULT_LOG_FILE,
        help=f"Log file path (default: {DEFAULT_LOG_FILE})",
    )
    log_group.add_argument("--no-log-file", action="store_true", help="Log to the console only")

    sub = parser.add_subparsers(dest="command", required=True)

    # calibrate
    cal = sub.add_parser("calibrate", help="Noise scale for each epsilon (epsilon, delta, k -> sigma)")
    cal.add_argument("--epsilons", type=_float_list, default=[0.1, 0.25, 0.5, 1.0, 3.0, math.inf],
                     help="Comma-separated epsilons, 'inf' allowed (default: 0.1,0.25,0.5,1,3,inf)")
    cal.add_argument("--delta", type=float, default=1e-5, help="Target delta (default: 1e-5)")
    cal.add_argument("-k", type=int, default=5, help="Votes per client (default: 5)")
    cal.add_argument("--format", choices=("text", "csv"), default="text", help="Table format")

    # simulate
    sim = sub.add_parser("simulate", help="Monte-Carlo success rate of the noisy vote")
    scenario = sim.add_argument_group("Scenario Options")
    scenario.add_argument("-p", type=int, default=100, help="Number of candidates (default: 100)")
    scenario.add_argument("-n", type=int, default=250, help="Number of clients (default: 250)")
    scenario.add_argument("-k", type=_int_list, default=[1, 5, 10, 100], help="Comma-separated k values")
    scenario.add_argument("--epsilons", type=_float_list, default=[0.25, 1.0], help="Comma-separated epsilons")
    scenario.add_argument("--delta", type=float, default=1e-5, help="Target delta (default: 1e-5)")
    scenario.add_argument("--good-count", type=_int_list, default=[5], help="Comma-separated |H_good| values")
    scenario.add_argument("--sigma-loss", type=_float_list, default=[0.2], help="Comma-separated loss spreads")
    scenario.add_argument("--dropout-tolerance", type=float, default=0.0, help="Tolerated dropout fraction")
    run_opts = sim.add_argument_group("Run Options")
    run_opts.add_argument("--repetitions", type=int, default=5000, help="Repetitions per cell (default: 5000)")
    run_opts.add_argument("--seed", type=int, default=None, help=f"Seed (default: ${SEED_ENV_VAR} or 0)")
    run_opts.add_argument("--workers", type=int, default=1, help="Worker threads (default: 1)")
    run_opts.add_argument("--output", type=Path, help="Write results as CSV")

    # run
    run = sub.add_parser("run", help="Full protocol sweep from a config file")
    run.add_argument("config", type=Path, help="Experiment config file")
    overrides = run.add_argument_group("Overrides")
    overrides.add_argument("--seed", type=int, help="Override the config seed")
    overrides.add_argument("--repetitions", type=int, help="Override repetitions")
    overrides.add_argument("--transport", choices=("memory", "socket"), help="Override the transport")
    overrides.add_argument("--workers", type=int, help="Override worker threads")
    output = run.add_argument_group("Output Options")
    output.add_argument("--output", type=Path, default=Path("dphype_report.csv"),
                        help="Report path (default: dphype_report.csv)")
    output.add_argument("--format", choices=("csv", "json"), default="csv", help="Report format")

    # bound
    bound = sub.add_parser("bound", help="Lower bound on selecting a good candidate")
    bound.add_argument("--gamma", type=float, required=True, help="Vote gap between good and bad candidates")
    bound.add_argument("--h-bad", type=int, required=True, help="Number of bad candidates")
    noise = bound.add_mutually_exclusive_group(required=True)
    noise.add_argument("--sigma", type=float, help="Total noise standard deviation")
    noise.add_argument("--epsilon", type=float, help="Calibrate sigma from this epsilon (with -k, --delta)")
    bound.add_argument("-k", type=int, default=5, help="Votes per client when calibrating (default: 5)")
    bound.add_argument("--delta", type=float, default=1e-5, help="Delta when calibrating (default: 1e-5)")

    return parser


def cmd_calibrate(args: argparse.Namespace) -> int:
    logger = logging.getLogger(__name__)
    rows = []
    for epsilon in args.epsilons:
        calibration = calibrate_sigma(PrivacyBudget(epsilon, args.delta), args.k)
        rows.append((epsilon, calibration.sigma, calibration.alpha_star, calibration.eps_achieved))

    if args.format == "csv":
        writer = csv.writer(sys.stdout, lineterminator="\n")
        writer.writerow(("epsilon", "sigma", "alpha", "eps_achieved"))
        writer.writerows(rows)
    else:
        print(f"k={args.k}  delta={args.delta:g}")
        print("sigma is the standard deviation of the summed noise per coordinate (variance sigma^2)")
        print(f"{'epsilon':>10}  {'sigma':>12}  {'alpha':>10}  {'achieved':>10}")
        for epsilon, sigma, alpha, achieved in rows:
            print(f"{epsilon:>10g}  {sigma:>12.4f}  {alpha:>10.3f}  {achieved:>10.4g}")
    logger.debug(f"Calibrated {len(rows)} budget(s)")
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace) -> int:
    logger = logging.getLogger(__name__)
    seed = args.seed if args.seed is not None else default_seed()
    base = SimulationConfig(
        p=args.p,
        good_count=args.good_count[0],
        n=args.n,
        k=args.k[0],
        sigma_loss=args.sigma_loss[0],
        repetitions=args.repetitions,
        budget=PrivacyBudget(args.epsilons[0], args.delta),
        seed=seed,
        dropout_tolerance=args.dropout_tolerance,
        workers=args.workers,
    )
    results = list(sweep_success_rates(base, args.k, args.epsilons, args.good_count, args.sigma_loss))

    header = ("k", "epsilon", "good_count", "sigma_loss", "sigma", "success_rate", "ci_low", "ci_high", "rand_guess")
    rows = [
        (r.config.k, r.config.budget.epsilon, r.config.good_count, r.config.sigma_loss, r.sigma,
         r.success_rate, *r.wilson_95_interval, r.random_guess)
        for r in results
    ]
    print(f"{'k':>4} {'epsilon':>8} {'good':>5} {'s_loss':>7} {'sigma':>10} {'success':>8}  95% CI")
    for k, eps, good, s_loss, sigma, rate, low, high, _ in rows:
        print(f"{k:>4} {eps:>8g} {good:>5} {s_loss:>7g} {sigma:>10.3f} {rate:>8.4f}  [{low:.4f}, {high:.4f}]")

    if args.output:
        try:
            with open(args.output, "w", newline="", encoding="utf-8") as f:
                writer = csv.writer(f, lineterminator="\n")
                writer.writerow(header)
                writer.writerows(rows)
        except OSError as e:
            raise ReportError(args.output, e) from e
        logger.info(f"Wrote {len(rows)} row(s) to {args.output}")
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    logger = logging.getLogger(__name__)
    config = load_config(args.config)
    config = with_overrides(
        config,
        seed=args.seed,
        repetitions=args.repetitions,
        transport=args.transport,
        workers=args.workers,
    )
    report = run_experiment(config)
    emit_report(report, args.format, args.output)

    logger.info("=" * 60)
    logger.info("RUN COMPLETE")
    logger.info("=" * 60)
    for summary in report.summaries:
        low, high = summary.wilson_95_interval
        flag = "" if summary.private else "  (non-private)"
        print(
            f"epsilon={summary.epsilon:g}  sigma={summary.sigma:.4g}  "
            f"success={summary.success_rate:.3f} [{low:.3f}, {high:.3f}]  "
            f"rand_guess={summary.rand_guess:.3f}{flag}"
        )
    print(f"Report: {args.output}")
    return EXIT_OK


def cmd_bound(args: argparse.Namespace) -> int:
    sigma = args.sigma
    if sigma is None:
        sigma = calibrate_sigma(PrivacyBudget(args.epsilon, args.delta), args.k).sigma
    result = utility_lower_bound(args.gamma, args.h_bad, sigma)
    if not result.applicable:
        print(f"gamma={args.gamma:g} is not positive: no bound")
        return EXIT_OK
    print(f"sigma={sigma:.6g}  raw={result.raw_bound:.6g}  lower_bound={result.lower_bound:.6g}")
    if result.vacuous:
        print("(bound is vacuous for these parameters)")
    return EXIT_OK


COMMANDS = {
    "calibrate": cmd_calibrate,
    "simulate": cmd_simulate,
    "run": cmd_run,
    "bound": cmd_bound,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point; returns the process exit code."""
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose, None if args.no_log_file else args.log_file)
    logger = logging.getLogger(__name__)

    logger.info("=" * 60)
    logger.info(f"DP-Hype {args.command}")
    logger.info("=" * 60)

    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except RoundFailureError as e:
        logger.error(str(e))
        return EXIT_ROUND_FAILURE
    except DPHypeError as e:
        logger.error(str(e))
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
