import argparse
import json
import sys
from pathlib import Path

from gapsim.config import OUT_ROOT
from gapsim.display import init_logging, print_error, print_status

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_RUNTIME = 3


def _out_dir(args, scenario_name: str) -> Path:
    return Path(args.out) if args.out else Path(OUT_ROOT) / scenario_name


def cmd_validate(args) -> int:
    from gapsim.scenario import validate

    errors, warnings = validate(args.scenario)
    for w in warnings:
        print_status(f"warning: {w}")
    if errors:
        for e in errors:
            print_error(e)
        return EXIT_INVALID
    print_status(f"{args.scenario}: OK")
    return EXIT_OK


def _load(args):
    from gapsim.scenario import ScenarioError, load_scenario, validate

    errors, warnings = validate(args.scenario)
    for w in warnings:
        print_status(f"warning: {w}")
    if errors:
        for e in errors:
            print_error(e)
        return None
    try:
        return load_scenario(args.scenario)
    except ScenarioError as e:
        print_error(str(e))
        return None


def cmd_run(args) -> int:
    from gapsim.runner import format_run_summary, run_scenario, summary_row

    scenario = _load(args)
    if scenario is None:
        return EXIT_INVALID
    out = _out_dir(args, scenario.name)
    seed = scenario.seed if args.seed is None else args.seed
    try:
        report = run_scenario(scenario, out, seed=seed, duration_ms=args.duration_override)
    except Exception as e:
        print_error(f"Run failed: {type(e).__name__}: {e}")
        return EXIT_RUNTIME
    print(format_run_summary(summary_row(scenario, scenario.autoscaler.name, seed, report)))
    print_status(f"Outputs written to {out}")
    return EXIT_OK


def cmd_compare(args) -> int:
    from gapsim.autoscalers import VALID_POLICIES
    from gapsim.runner import compare, format_comparison

    scenario = _load(args)
    if scenario is None:
        return EXIT_INVALID
    policies = [p.strip().lower() for p in args.policies.split(",") if p.strip()]
    unknown = [p for p in policies if p not in VALID_POLICIES]
    if unknown or len(policies) < 2:
        print_error(f"--policies needs two or more of {', '.join(VALID_POLICIES)}; got {args.policies!r}")
        return EXIT_INVALID
    out = _out_dir(args, f"{scenario.name}-compare")
    try:
        rows = compare(scenario, policies, out, seed=args.seed, duration_ms=args.duration_override)
    except Exception as e:
        print_error(f"Compare failed: {type(e).__name__}: {e}")
        return EXIT_RUNTIME
    print(format_comparison(rows))
    print_status(f"Outputs written to {out}")
    return EXIT_OK if all(r.status == "ok" for r in rows) else EXIT_RUNTIME


def cmd_plot(args) -> int:
    from gapsim.plotting import plot

    run_dir = Path(args.run_dir)
    out = Path(args.out) if args.out else run_dir / f"{args.metric}.svg"
    try:
        plot(run_dir, args.metric, out)
    except ValueError as e:
        print_error(str(e))
        return EXIT_INVALID
    except OSError as e:
        print_error(f"Plot failed: {e}")
        return EXIT_RUNTIME
    print_status(f"Wrote {out}")
    return EXIT_OK


def cmd_gap_report(args) -> int:
    from gapsim.gaps import format_gap_report, gap_report
    from gapsim.runner import write_gap_report
    from gapsim.scenario import ScenarioError, load_scenario

    try:
        scenario = load_scenario(args.scenario)
    except ScenarioError as e:
        print_error(str(e))
        return EXIT_INVALID
    print(format_gap_report(gap_report(scenario)))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_gap_report(scenario, out)
        print_status(f"Wrote {out / 'gap_report.txt'}")
    return EXIT_OK


def cmd_schema(args) -> int:
    from gapsim.scenario import scenario_schema

    text = json.dumps(scenario_schema(), indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8", newline="\n")
        print_status(f"Wrote {args.out}")
    else:
        print(text, end="")
    return EXIT_OK


def main():
    parser = argparse.ArgumentParser(description="Microservice autoscaling gap simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="Check a scenario file or preset")
    p.add_argument("--scenario", required=True, help="Scenario JSON path or preset name")
    p.set_defaults(func=cmd_validate)

    for name, func, helptext in (
        ("run", cmd_run, "Run one scenario and write its outputs"),
        ("compare", cmd_compare, "Run several policies on the same scenario and seed"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--scenario", required=True, help="Scenario JSON path or preset name")
        p.add_argument("--seed", type=int, default=None, help="Override the scenario seed")
        p.add_argument("--out", default=None, help=f"Output directory (default under {OUT_ROOT}/)")
        p.add_argument("--duration-override", type=int, default=None,
                       help="Simulated duration in ms instead of the scenario's")
        if name == "compare":
            p.add_argument("--policies", required=True,
                           help="Comma-separated policies, e.g. khpa,heat,pbscaler")
        p.set_defaults(func=func)

    p = sub.add_parser("plot", help="Render a run's time series to SVG")
    p.add_argument("run_dir", help="Run output directory")
    p.add_argument("--metric", required=True, choices=["latency", "replicas", "cpu", "utilization"])
    p.add_argument("--out", default=None, help="SVG path (default <run_dir>/<metric>.svg)")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("gap-report", help="Show gap status for a scenario")
    p.add_argument("--scenario", required=True, help="Scenario JSON path or preset name")
    p.add_argument("--out", default=None, help="Also write gap_report.txt/.csv here")
    p.set_defaults(func=cmd_gap_report)

    p = sub.add_parser("schema", help="Print the scenario JSON schema")
    p.add_argument("--out", default=None, help="Write to a file instead of stdout")
    p.set_defaults(func=cmd_schema)

    args = parser.parse_args()
    init_logging()
    sys.exit(args.func(args))


if __name__ == "__main__":
    main()
