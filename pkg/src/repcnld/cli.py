"""Command line entry point: run experiments, verification suites, and trace
diagnostics.

    repcnld run <config.json>
    repcnld verify [--suite gradient|swap|strong-error|all] [--seed N] [--draws N]
    repcnld diagnose <trace.csv> [--burn-in N] [--out DIR]

REPCNLD_SEED and REPCNLD_OUTPUT_DIR override the config's seed and output
directory.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import parse_config
from .diagnostics import acf, ess, kde, save_acf_csv, save_ess_csv, save_kde_csv, save_summary_json
from .exceptions import ConfigError
from .runner import read_trace_csv, run_experiment
from .verify import run_suites


def _cmd_run(args):
    try:
        config = parse_config(args.config)
    except ConfigError as err:
        print("configuration rejected:", file=sys.stderr)
        for violation in err.violations:
            print(f"  - {violation}", file=sys.stderr)
        return 2
    try:
        result = run_experiment(config)
    except ConfigError as err:
        print(str(err), file=sys.stderr)
        return 1
    print(f"run complete: {result.trace_path or result.out_dir}")
    for key in ("swap_rate", "ess", "energy_iact", "tv_distance", "mode_occupancy", "ok"):
        if key in result.summary:
            print(f"  {key}: {result.summary[key]}")
    return 0


def _cmd_verify(args):
    suites = ("gradient", "swap", "strong-error") if args.suite == "all" else (args.suite,)
    results = run_suites(suites=suites, seed=args.seed, draws=args.draws)
    failed = 0
    for res in results:
        status = "PASS" if res.ok else "FAIL"
        print(f"[{status}] {res.name}: {res.detail}")
        failed += 0 if res.ok else 1
    return 1 if failed else 0


def _cmd_diagnose(args):
    chains = read_trace_csv(args.trace)
    out_dir = Path(args.out) if args.out else Path(args.trace).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    burn = args.burn_in
    summary = {"trace": str(args.trace), "burn_in": burn}
    energy_acfs = {}
    for cid, (positions, energies, swapped) in sorted(chains.items()):
        retained_e = energies[burn:]
        max_lag = max(1, min(500, retained_e.size // 4))
        energy_acfs[f"chain{cid}"] = acf(retained_e, max_lag)
    save_acf_csv(out_dir / "acf.csv", energy_acfs)
    low = chains[min(chains)]
    positions = low[0][burn:]
    report = ess(positions)
    save_ess_csv(out_dir / "ess.csv", report)
    summary["ess"] = report.ess.tolist()
    summary["iact"] = report.rho.tolist()
    if positions.shape[1] == 1:
        lo, hi = positions.min() - 1.0, positions.max() + 1.0
        estimate = kde(positions[:, 0], np.linspace(lo, hi, 512))
        save_kde_csv(out_dir / "kde_grid.csv", estimate)
    elif positions.shape[1] == 2:
        gx = np.linspace(positions[:, 0].min() - 0.5, positions[:, 0].max() + 0.5, 96)
        gy = np.linspace(positions[:, 1].min() - 0.5, positions[:, 1].max() + 0.5, 96)
        sub = positions[:: max(1, positions.shape[0] // 20000)]
        save_kde_csv(out_dir / "kde_grid.csv", kde(sub, (gx, gy)))
    save_summary_json(out_dir / "diagnose_summary.json", summary)
    print(f"diagnostics written to {out_dir}")
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(prog="repcnld", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a configured experiment")
    p_run.add_argument("config", help="path to a JSON run config")
    p_run.set_defaults(func=_cmd_run)

    p_verify = sub.add_parser("verify", help="run the verification suites")
    p_verify.add_argument("--suite", choices=["gradient", "swap", "strong-error", "all"],
                          default="all")
    p_verify.add_argument("--seed", type=int, default=1)
    p_verify.add_argument("--draws", type=int, default=20,
                          help="prior draws per gradient check")
    p_verify.set_defaults(func=_cmd_verify)

    p_diag = sub.add_parser("diagnose", help="compute diagnostics for a trace CSV")
    p_diag.add_argument("trace", help="path to trace.csv")
    p_diag.add_argument("--burn-in", type=int, default=0, dest="burn_in")
    p_diag.add_argument("--out", default=None, help="output directory (defaults beside the trace)")
    p_diag.set_defaults(func=_cmd_diagnose)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
