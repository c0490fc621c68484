import argparse
import logging
import sys
from typing import List, Optional

from .experiment import (
    load_config,
    run_experiment,
    run_point,
    verify_run,
    write_fixtures,
)
from .utils import MobileSensorsError


def _number(value) -> str:
    return "inf" if value is None else "%.4g" % value


def _single_point(args, plan_only: bool) -> int:
    cfg = load_config(args.config)
    if cfg.sweep:
        print("Ignoring sweep axes %s; running the base configuration" % ", ".join(cfg.sweep))
    out_dir = args.out or cfg.outputs
    summary = run_point(
        cfg, "base", out_dir, plan_only=plan_only, plan_report=args.plan_report
    )
    print(
        "Planned %d sensor(s): condition number %s, rank %s"
        % (cfg.sensors, _number(summary["condition"]), summary["rank"])
    )
    if not plan_only:
        print(
            "Steady trace %s, steady reconstruction MSE %s"
            % (_number(summary["steady_trace"]), _number(summary["steady_mse"]))
        )
    print("Saved outputs to %s" % out_dir)
    return 0


def cmd_plan(args) -> int:
    return _single_point(args, plan_only=True)


def cmd_filter(args) -> int:
    return _single_point(args, plan_only=False)


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    manifest = run_experiment(cfg, workers=args.workers, verbose=args.verbose)
    failed = [p["key"] for p in manifest["points"] if p["status"] != "ok"]
    print("Ran %d point(s), %d failed" % (len(manifest["points"]), len(failed)))
    for point in manifest["points"]:
        if point["status"] != "ok":
            print("  %s: %s" % (point["key"], point["error"]))
    print("Saved %d files to %s" % (len(manifest["files"]), cfg.outputs))
    return 0


def cmd_plot(args) -> int:
    from .plots import emit_plots

    written = emit_plots(args.run)
    print("Saved %d plots to %s" % (len(written), args.run))
    return 0


def cmd_verify(args) -> int:
    mismatches = verify_run(args.run)
    if mismatches:
        for path in mismatches:
            print("MISMATCH %s" % path)
        return 1
    print("All files in %s match the manifest" % args.run)
    return 0


def cmd_fixtures(args) -> int:
    written = write_fixtures(args.out)
    print("Saved %d fixture files to %s" % (len(written), args.out))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mobilesensors",
        description="Plan mobile sensor trajectories for reduced-order models and evaluate them with a Kalman filter",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--verbose", action="store_true", help="Log progress and show progress bars")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, func, help_text in [
        ("plan", cmd_plan, "Plan (or place) sensors for the base configuration"),
        ("filter", cmd_filter, "Plan and run the Kalman filter for the base configuration"),
    ]:
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--config", required=True, type=str, help="Experiment YAML file")
        p.add_argument("--out", type=str, help="Output directory (defaults to the config outputs)")
        p.add_argument("--plan-report", action="store_true", help="Write per-selection plan_report.csv")
        p.set_defaults(func=func)

    p = sub.add_parser("sweep", parents=[common], help="Run every sweep point of a configuration")
    p.add_argument("--config", required=True, type=str, help="Experiment YAML file")
    p.add_argument("--workers", type=int, help="Worker processes (overrides config and environment)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("plot", parents=[common], help="Render SVG plots for a finished run")
    p.add_argument("--run", required=True, type=str, help="Run directory containing manifest.json")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("verify", parents=[common], help="Re-hash run outputs against the manifest")
    p.add_argument("--run", required=True, type=str, help="Run directory containing manifest.json")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("fixtures", parents=[common], help="Write the desk-scale experiment configs")
    p.add_argument("--out", required=True, type=str, help="Directory to write configs to")
    p.set_defaults(func=cmd_fixtures)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    verbose = args.verbose
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except MobileSensorsError as e:
        print("%s: %s" % (type(e).__name__, e), file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
