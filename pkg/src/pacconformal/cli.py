"""Command-line entry point: run, sweep, budget, report, certify."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import harness


def _config(args) -> harness.ExperimentConfig:
    overrides = dict(harness.parse_override(s) for s in args.set or [])
    if args.output:
        overrides["output_dir"] = args.output
    return harness.load_config(args.config, overrides)


def cmd_run(args, sweep: bool) -> int:
    cfg = _config(args)
    if not sweep and cfg.is_sweep():
        print(f"{args.config}: list-valued {', '.join(harness.SWEEP_KEYS)} need the 'sweep' command",
              file=sys.stderr)
        return 2
    run = harness.run_experiment(cfg, workers=args.workers, resume=not args.no_resume)
    for r in run.rows:
        if r["status"] == "ok":
            print(f"{r['cell']}: coverage={r['coverage']:.4f} efficiency={r['mean_efficiency']:.4g}"
                  f" alpha_hat={r['alpha_hat']:.4g}")
        else:
            print(f"{r['cell']}: {r['status']}: {r['message']}")
    print(f"results: {run.results_path}")
    return 1 if run.failed else 0


def cmd_budget(args) -> int:
    grid = None
    if args.alpha_hat:
        grid = [float(a) for a in args.alpha_hat.split(",")]
    rows = harness.emit_budget_table(args.alpha, args.delta, [int(n) for n in args.n.split(",")], grid)
    if args.out:
        harness.write_csv(Path(args.out), rows, harness.BUDGET_COLUMNS)
        print(f"wrote {len(rows)} rows to {args.out}")
    else:
        _print_csv(rows)
    return 0


def _print_csv(rows):
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(harness.BUDGET_COLUMNS)
    for r in rows:
        w.writerow([harness._fmt(r[c]) for c in harness.BUDGET_COLUMNS])


def cmd_report(args) -> int:
    rows = harness.read_results(args.results)
    report = harness.emit_report(rows)
    out = Path(args.out)
    harness.write_csv(out / "summary.csv", report["summary"], harness.SUMMARY_COLUMNS)
    harness.write_csv(out / "runs_flagged.csv", report["runs"],
                      harness.RESULT_COLUMNS + ["coverage_ci_lower", "violation"])
    (out / "summary.json").write_text(json.dumps(report["summary"], indent=2, sort_keys=True))
    for s in report["summary"]:
        print(f"{s['task']} {s['method']} n={s['n_cal']} split={s['data_split']:g}: "
              f"coverage {s['coverage_mean']:.4f}+-{s['coverage_std']:.4f} "
              f"efficiency {s['efficiency_mean']:.4g}+-{s['efficiency_std']:.3g} "
              f"violations {s['violations']}/{s['runs']} failed {s['failed']}")
    return 0


def cmd_certify(args) -> int:
    out = harness.certify(args.predictor, delta=args.delta, gamma=args.gamma)
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pacconformal", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("run", "run one experiment over its seeds"),
                        ("sweep", "run every combination of list-valued method/n_cal/data_split")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("config", help="YAML experiment file")
        s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        s.add_argument("--output", help="output directory (default: $%s/<task>-<hash>)" % harness.OUTPUT_ROOT_ENV)
        s.add_argument("--workers", type=int, default=1)
        s.add_argument("--no-resume", action="store_true", help="rerun cells that already have results")
    b = sub.add_parser("budget", help="KL budget table over (N, alpha_hat)")
    b.add_argument("--alpha", type=float, default=0.1)
    b.add_argument("--delta", type=float, default=0.05)
    b.add_argument("--n", default="1000,10000,100000", help="comma-separated calibration sizes")
    b.add_argument("--alpha-hat", help="comma-separated levels (default: 60 log-spaced)")
    b.add_argument("--out", help="CSV path (default: stdout)")
    r = sub.add_parser("report", help="aggregate results.csv files")
    r.add_argument("results", nargs="+")
    r.add_argument("--out", default="report")
    c = sub.add_parser("certify", help="recompute certificates of a saved predictor")
    c.add_argument("predictor")
    c.add_argument("--delta", type=float)
    c.add_argument("--gamma", type=float)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command in ("run", "sweep"):
            return cmd_run(args, sweep=args.command == "sweep")
        if args.command == "budget":
            return cmd_budget(args)
        if args.command == "report":
            return cmd_report(args)
        return cmd_certify(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
