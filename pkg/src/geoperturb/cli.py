"""``geoperturb [verify] <suite> [--config FILE] [--scenario NAME] [--out DIR] [--seed N] [--a A]``.

Exit status: 0 when every check passes, 1 when any check fails, 2 on a
configuration error.
"""

from __future__ import annotations

import argparse
import sys
from typing import List, Optional

from .config import SUITES, load_config, validate
from .errors import ConfigError
from .report import emit_plots


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="geoperturb", description="Run a verification suite and write its report.")
    ap.add_argument("suite", choices=SUITES)
    ap.add_argument("--config", help="JSON configuration document")
    ap.add_argument("--scenario", help="scenario name (overrides the config)")
    ap.add_argument("--out", help="output directory")
    ap.add_argument("--seed", type=int, help="seed for all random sampling")
    ap.add_argument("--a", type=float, dest="length_bound", help="length bound for closed geodesics")
    ap.add_argument("--no-plots", action="store_true", help="skip CSV tables")
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and argv[0] == "verify":
        argv = argv[1:]
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    overrides = {}
    if args.out is not None:
        overrides["output_dir"] = args.out
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.length_bound is not None:
        overrides["length_bound"] = args.length_bound
    try:
        cfg = load_config(args.config, args.scenario, overrides)
        field = validate(cfg)
        from .suites import run_suite

        rep = run_suite(args.suite, cfg, field)
    except ConfigError as exc:
        where = f" [{exc.field}]" if getattr(exc, "field", None) else ""
        print(f"config error{where}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    path = rep.write(cfg.output_dir)
    if not args.no_plots:
        emit_plots(rep, cfg.output_dir)
    for c in rep.checks:
        status = "PASS" if c.passed else "FAIL"
        print(f"{status} {c.name}: {c.value:.6g} {c.relation} {c.tolerance:.6g}")
    print(f"report: {path}")
    return 0 if rep.passed else 1


if __name__ == "__main__":
    sys.exit(main())
