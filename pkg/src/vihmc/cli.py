"""``vihmc`` command line.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure,
3 quality gate (for example every chain flagged bad).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .config import ReportConfig, load_config, shipped_config_path
from .errors import NumericalError, VIHMCError


def _config(arg: str):
    p = Path(arg)
    if not p.exists() and not p.suffix:
        p = shipped_config_path(arg)
    return load_config(p)


def _run_dir(args, cfg) -> Path:
    return Path(args.run_dir) if args.run_dir else Path("runs") / cfg.name


def _add_common(p, config=True):
    if config:
        p.add_argument("-c", "--config", required=True, help="YAML config file or shipped config name")
    p.add_argument("-o", "--run-dir", help="run directory (default runs/<config name>)")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage errors share exit code 1 with configuration errors
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="vihmc", description="Hybrid VI / HMC for Bayesian neural networks")
    ap.add_argument("--version", action="version", version=f"vihmc {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the config's dataset")
    _add_common(p)

    p = sub.add_parser("train-vi", help="train the mean-field posterior")
    _add_common(p)

    p = sub.add_parser("sensitivity", help="rank parameters and write the partition")
    _add_common(p)
    p.add_argument("--posterior", help="posterior artifact (default <run-dir>/posterior.json)")
    p.add_argument("--tau", type=float, help="cumulative variance fraction to keep")
    p.add_argument("--rule", choices=("at_least", "at_most"))

    p = sub.add_parser("sample", help="run HMC chains on the full or reduced posterior")
    _add_common(p)
    p.add_argument("--posterior")
    p.add_argument("--partition", help="partition artifact (reduced mode)")
    p.add_argument("--mode", choices=("full", "reduced"), help="override hmc.mode")
    p.add_argument("--out", help="archive directory (default <run-dir>/chains_<mode>)")

    p = sub.add_parser("report", help="tables and band CSVs from archives")
    p.add_argument("--archive", nargs="+", required=True)
    p.add_argument("--posterior", required=True)
    p.add_argument("--data", required=True, help="dataset directory to evaluate on")
    p.add_argument("--out", default="report")
    p.add_argument("-c", "--config", help="config whose report block to use")
    p.add_argument("--pair", nargs=2, action="append", metavar=("A", "B"),
                   help="parameter names (or flat indices) for a joint-scatter CSV")

    p = sub.add_parser("cost-compare", help="full vs reduced at a fixed and at an adapted step size")
    _add_common(p)

    p = sub.add_parser("run", help="train-vi, sensitivity, sample and report in one go")
    _add_common(p)
    p.add_argument("--modes", default=None, help="comma-separated sampling modes (default: hmc.mode)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from . import pipeline, report

    try:
        if args.command == "report":
            rcfg = _config(args.config).report if args.config else ReportConfig()
            tables = report.cmd_report(args.archive, args.posterior, args.data, args.out, rcfg, args.pair)
            print(f"wrote {len(tables)} tables to {args.out}")
            return 0
        cfg = _config(args.config)
        rd = _run_dir(args, cfg)
        if args.command == "gen-data":
            out = pipeline.cmd_gen_data(cfg, rd / "data")
            print(f"wrote {out}")
        elif args.command == "train-vi":
            q, hist = pipeline.cmd_train_vi(cfg, rd)
            print(f"posterior with {len(q)} parameters after {len(hist)} epochs -> {rd / 'posterior.json'}")
        elif args.command == "sensitivity":
            _, part = pipeline.cmd_sensitivity(cfg, rd, args.posterior, args.tau, args.rule)
            print(f"{part.n_sensitive} of {part.n_params} parameters sensitive at tau={part.tau:g}")
        elif args.command == "sample":
            arch = pipeline.cmd_sample(cfg, rd, args.posterior, args.partition, args.mode, args.out)
            rates = ", ".join(f"{c.acceptance_rate(arch.burn_in):.3f}" for c in arch.chains)
            print(f"{len(arch.chains)} chain(s), acceptance {rates}")
        elif args.command == "cost-compare":
            rows = pipeline.cmd_cost_compare(cfg, rd)
            for r in rows:
                print(f"{r['mode']:8s} {r['experiment']:14s} eps={r['step_size']:.3g} L={r['n_steps']} "
                      f"acc={r['acceptance']:.3f} probe={r['probe_acceptance']:.3f}")
        elif args.command == "run":
            modes = args.modes.split(",") if args.modes else None
            pipeline.run_pipeline(cfg, rd, modes)
            print(f"report written to {rd / 'report'}")
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        for k, v in exc.diagnostics.items():
            print(f"  {k}: {v}", file=sys.stderr)
        return exc.exit_code
    except VIHMCError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
