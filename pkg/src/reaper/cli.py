"""Command line entry point: ``reaper train|stylized|theory|report``.

Exit codes: 0 when everything completed, 2 when an acceptance check
failed, 3 when at least one training run aborted.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

EXIT_OK, EXIT_CHECK_FAILED, EXIT_ABORTED = 0, 2, 3
THEORY_CHECKS = ("misalignment", "decomposition", "bound", "hierarchy", "variance")


def _train(args) -> int:
    from .harness import CampaignConfig, improvement, run_campaign

    data = {}
    if args.config:
        with open(args.config) as fh:
            data = json.load(fh)
    if args.env:
        data["env_id"] = args.env
    if args.seeds is not None:
        data["seed_count"] = args.seeds
    if args.strategy:
        data["strategies"] = args.strategy
    if args.jobs is not None:
        data["jobs"] = args.jobs
    if args.out:
        data["out_dir"] = args.out
    if "env_id" not in data and "env" not in data:
        print("error: no environment given (use --env or a config file)", file=sys.stderr)
        return EXIT_CHECK_FAILED
    config = CampaignConfig.from_dict(data)
    report = run_campaign(config)
    for row in report.rows:
        if row["row_type"] == "aggregate":
            print(f"{row['strategy']:>8}: runs={row['n_runs']} failures={row['failures']} "
                  f"mean_steps={row['steps_to_threshold']} censored={row['censored_runs']} "
                  f"peak={row['peak_score']} q_error={row['final_q_error']}")
    if {"per", "reaper"} <= set(config.strategies):
        gain = improvement(report)
        if gain is not None:
            print(f"reaper vs per steps-to-threshold improvement: {gain:.2f}%")
    print(f"wrote {config.out_dir}")
    return EXIT_ABORTED if report.aborted else EXIT_OK


def _stylized(args) -> int:
    from . import stylized

    results = stylized.run_grid(stylized.parse_lengths(args.lengths), args.seeds, jobs=args.jobs or 1)
    out = args.out or "stylized.csv"
    if os.path.dirname(out):
        os.makedirs(os.path.dirname(out), exist_ok=True)
    stylized.write_csv(results, out)
    check = stylized.check_results(results)
    means = stylized.summarize(results)
    for (sel, cond), v in sorted(((k, v) for k, v in means.items() if len(k) == 2),
                                 key=lambda kv: (kv[0][1].value, kv[0][0].value)):
        print(f"{cond.value:>6} {sel.value:>14}: mean updates {v:.2f}")
    print(f"stylized check {'passed' if check.passed else 'FAILED'}; wrote {out}")
    return EXIT_OK if check.passed else EXIT_CHECK_FAILED


def theory_rows(checks, seeds: int = 100, jobs: int = 1) -> list[dict]:
    from . import theory

    rows = []

    def add(check, metric, value, passed):
        rows.append({"check": check, "metric": metric, "value": value, "passed": passed})

    if "misalignment" in checks:
        r = theory.misalignment_suite()
        add("misalignment", "max_residual", r.max_residual, r.max_residual <= 1e-12)
        add("misalignment", "max_fd_relative_gap", r.max_fd_rel, r.fd_failures == 0)
    if "decomposition" in checks:
        r = theory.decomposition_suite()
        add("decomposition", "max_residual", r.max_residual, r.passed())
    if "bound" in checks:
        r = theory.bound_suite()
        add("bound", "violations", r.violations, r.violations == 0)
        add("bound", "max_violation", r.max_violation, r.violations == 0)
    if "hierarchy" in checks:
        for env_id in ("chain:10", "grid:5x5"):
            r = theory.check_hierarchy(env_id, seeds, jobs=jobs)
            for s, m in r.means.items():
                add(f"hierarchy:{env_id}", f"mean_q_error_{s}", m, r.passed())
            for k, p in r.p_values.items():
                add(f"hierarchy:{env_id}", f"sign_test_p_{k}", p, p < 0.05)
    if "variance" in checks:
        r = theory.variance_suite()
        add("variance", "instances_within_l1_1e-2", r.within_tol, r.passed())
        add("variance", "max_l1", r.max_l1, r.passed())
    return rows


def _theory(args) -> int:
    checks = THEORY_CHECKS if args.check == "all" else (args.check,)
    rows = theory_rows(checks, seeds=args.seeds or 100, jobs=args.jobs or 1)
    out = args.out or "theory.csv"
    if os.path.dirname(out):
        os.makedirs(os.path.dirname(out), exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["check", "metric", "value", "passed"], lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    for row in rows:
        print(f"{'PASS' if row['passed'] else 'FAIL'} {row['check']} {row['metric']} = {row['value']}")
    return EXIT_OK if all(r["passed"] for r in rows) else EXIT_CHECK_FAILED


def _report(args) -> int:
    from .harness import verify_report

    target = args.out or "campaign"
    path = target if target.endswith(".csv") else os.path.join(target, "report.csv")
    problems = verify_report(path)
    for p in problems:
        print(p)
    print(f"{path}: {'consistent' if not problems else f'{len(problems)} mismatches'}")
    return EXIT_OK if not problems else EXIT_CHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reaper", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run a seeded campaign of training runs")
    p.add_argument("--config", help="flat JSON campaign config")
    p.add_argument("--env", help="environment id, e.g. chain:10, grid:5x5, cartpole")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seeds", type=int, help="number of paired seeds")
    p.add_argument("--strategy", action="append", choices=["uniform", "per", "reaper"],
                   help="strategy to run (repeatable; default all three)")
    p.add_argument("--jobs", type=int, help="worker processes")
    p.set_defaults(func=_train)

    p = sub.add_parser("stylized", help="greedy selection on a single optimal-path episode")
    p.add_argument("--lengths", default="10:100:10", help="start:stop:step or comma list")
    p.add_argument("--seeds", type=int, default=100)
    p.add_argument("--out", default="stylized.csv")
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=_stylized)

    p = sub.add_parser("theory", help="numeric checks of the convergence analysis")
    p.add_argument("--check", default="all", choices=("all",) + THEORY_CHECKS)
    p.add_argument("--out", default="theory.csv")
    p.add_argument("--seeds", type=int, help="seeds per strategy for the hierarchy check")
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=_theory)

    p = sub.add_parser("report", help="re-derive a campaign's aggregate rows from its run rows")
    p.add_argument("--out", default="campaign", help="campaign directory or report.csv path")
    p.set_defaults(func=_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
