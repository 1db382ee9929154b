# cli.py
"""subset-mle command line: run | simulate | fit | verify | report.

Invoke as `python -m src.cli <command> ...`. Exit codes: 0 success, 1 a check
or fit failed, 2 invalid configuration or missing input.
"""
import argparse
import sys
from pathlib import Path
from typing import List, Optional

import structlog

from .config import configure_logging, get_config
from .errors import (ConfigurationError, ContractError, DomainError, ExperimentError, FitError,
                     NumericalError)
from .estimation.fit import FitConfig, fit_mle
from .experiment import CHECK_ORDER, ExperimentConfig, load_experiment, read_config_json, run_experiment
from .models.importance import ApproxConfig
from .models.params import ModelKind
from .reporting.datasets import read_dataset, write_dataset
from .reporting.formatter import collate_reports, format_json, write_report
from .verify.families import make_family

logger = structlog.get_logger()

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_INVALID = 2

# Checks that need other fits from the same run
DEPENDENCIES = {"rate_condition": ["identification_rate", "lipschitz_order"]}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="subset-mle", description="Consistency checks for crossed mixed models")
    parser.add_argument("--log-level", default=None, help="Override LOG_LEVEL")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="Run every check of an experiment config")
    run.add_argument("config", help="Experiment JSON")
    run.add_argument("--workers", type=int, default=None)
    run.add_argument("--output-dir", default=None)

    simulate = commands.add_parser("simulate", help="Simulate one dataset")
    simulate.add_argument("--model", required=True, choices=[m.value for m in ModelKind])
    simulate.add_argument("--N", type=int, required=True)
    simulate.add_argument("--T", type=int, default=4)
    simulate.add_argument("--seed", type=int, default=0)
    simulate.add_argument("--theta", type=float, nargs="+", default=None)
    simulate.add_argument("--gram-floor", type=float, default=None)
    simulate.add_argument("--design-seed", type=int, default=0)
    simulate.add_argument("--out", default=None, help="CSV path (default <model>_N<N>_seed<seed>.csv)")

    fit = commands.add_parser("fit", help="Fit the MLE to a dataset")
    fit.add_argument("--model", required=True, choices=[m.value for m in ModelKind])
    fit.add_argument("--data", required=True)
    fit.add_argument("--starts", type=int, default=8)
    fit.add_argument("--seed", type=int, default=0)
    fit.add_argument("--grad-tol", type=float, default=1e-6)
    fit.add_argument("--max-iter", type=int, default=200)
    fit.add_argument("--samples", type=int, default=None, help="Importance samples (mglmm)")
    fit.add_argument("--verbose", action="store_true", help="Record every start")
    fit.add_argument("--out", default=None, help="FitResult JSON path (default <data>_fit.json)")

    verify = commands.add_parser("verify", help="Run one named check")
    verify.add_argument("--check", required=True, choices=list(CHECK_ORDER))
    verify.add_argument("--model", required=True, choices=[m.value for m in ModelKind])
    verify.add_argument("--config", default=None, help="Experiment JSON supplying the remaining settings")
    verify.add_argument("--which", choices=["W1", "W2"], default=None)
    verify.add_argument("--sizes", type=int, nargs="+", default=None)
    verify.add_argument("--reps", type=int, default=None)
    verify.add_argument("--epsilon", type=float, default=None)
    verify.add_argument("--seed", type=int, default=None)
    verify.add_argument("--workers", type=int, default=None)
    verify.add_argument("--output-dir", default=None)

    report = commands.add_parser("report", help="Collate report JSON files into a summary")
    report.add_argument("directory")
    return parser


def _emit(reports, output_dir) -> List[str]:
    failed = []
    for name, document in reports:
        write_report(output_dir, name, document)
        print(f"{'PASS' if document['passed'] else 'FAIL'} {name}")
        if not document["passed"]:
            failed.append(name)
    return failed


def command_run(args) -> int:
    cfg = load_experiment(args.config)
    output_dir = Path(args.output_dir or cfg.output_dir)
    failed = _emit(run_experiment(cfg, workers=args.workers), output_dir)
    collate_reports(output_dir)
    if failed:
        logger.warning("checks_failed", config=str(args.config), failed=failed)
        print(f"failed checks: {', '.join(failed)}")
        return EXIT_FAILED
    return EXIT_OK


def command_simulate(args) -> int:
    model = ModelKind(args.model)
    theta = args.theta or get_config().DEFAULT_THETA0.get(model.value)
    family = make_family(model, theta, T=args.T, gram_floor=args.gram_floor, design_seed=args.design_seed)
    family.check_size(args.N)
    data = family.simulate(args.N, args.seed)
    out = args.out or f"{model.value}_N{args.N}_seed{args.seed}.csv"
    csv_path, sidecar = write_dataset(out, data, family.theta0, seed=args.seed)
    print(f"{csv_path} {sidecar}")
    return EXIT_OK


def command_fit(args) -> int:
    model = ModelKind(args.model)
    data, sidecar = read_dataset(args.data)
    if sidecar["model"] is not model:
        raise ConfigurationError("model", f"dataset {args.data} holds {sidecar['model'].value} data")
    approx = ApproxConfig(samples=args.samples, seed=args.seed) if model is ModelKind.MGLMM else None
    cfg = FitConfig(starts=args.starts, grad_tol=args.grad_tol, max_iter=args.max_iter, seed=args.seed,
                    approx=approx)
    result = fit_mle(model, data, cfg)
    document = result.to_dict(verbose=args.verbose)
    document["data"] = str(args.data)
    out = Path(args.out) if args.out else Path(args.data).with_name(Path(args.data).stem + "_fit.json")
    out.write_text(format_json(document), encoding="utf-8")
    print(format_json(document), end="")
    return EXIT_OK


def command_verify(args) -> int:
    raw = {}
    if args.config:
        raw = read_config_json(args.config)
        if not isinstance(raw, dict):
            raise ConfigurationError("config", "top level must be a JSON object")
        raw.pop("name", None)
    if raw.get("model", args.model) != args.model:
        raise ConfigurationError("model", f"--model {args.model} disagrees with the config's {raw['model']}")
    raw["model"] = args.model
    raw["checks"] = DEPENDENCIES.get(args.check, []) + [args.check]
    overrides = {"sizes": args.sizes, "reps": args.reps, "epsilon": args.epsilon, "seed": args.seed,
                 "output_dir": args.output_dir}
    raw.update({k: v for k, v in overrides.items() if v is not None})
    if args.which:
        raw["which"] = [args.which]
    raw.setdefault("sizes", [8, 16, 32, 64])
    cfg = ExperimentConfig.from_dict(raw, name=f"verify_{args.check}")
    reports = [(name, document) for name, document in run_experiment(cfg, workers=args.workers)
               if name.startswith(args.check)]
    if args.output_dir or args.config:
        failed = _emit(reports, Path(cfg.output_dir))
    else:
        for _, document in reports:
            print(format_json(document), end="")
        failed = [name for name, document in reports if not document["passed"]]
    return EXIT_FAILED if failed else EXIT_OK


def command_report(args) -> int:
    summary = collate_reports(args.directory)
    for row in summary["reports"]:
        print(f"{'PASS' if row['passed'] else 'FAIL'} {row['check']} {row['file']}")
    return EXIT_OK


COMMANDS = {
    "run": command_run,
    "simulate": command_simulate,
    "fit": command_fit,
    "verify": command_verify,
    "report": command_report,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return COMMANDS[args.command](args)
    except ConfigurationError as e:
        logger.error("invalid_configuration", command=args.command, field=e.field, line=e.line, error=str(e))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (DomainError, ContractError) as e:
        logger.error("invalid_input", command=args.command, error=str(e))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (FitError, ExperimentError, NumericalError) as e:
        logger.error("command_failed", command=args.command, error=str(e))
        print(f"failed: {e}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
