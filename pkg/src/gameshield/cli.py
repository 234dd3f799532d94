"""Command-line toolchain: build-abstraction, synthesize, simulate,
verify-relation, oracle-check, inspect."""
from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import abstraction, advisor
from .abstraction import verify_relation_empirically
from .config import load_config
from .errors import GameshieldError
from .oracle import exhaustive_violation_bound_check, load_instance
from .simulate import ensure_kernel, ensure_tables, monte_carlo


def _add_config_arg(p):
    p.add_argument("--config", required=True, help="experiment YAML file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gameshield",
        description="Sandbox unverified controllers in stochastic two-player "
                    "games with a formal per-run violation budget.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-abstraction", help="grid + transition tensor -> SVKN file")
    _add_config_arg(p)
    p.add_argument("--force", action="store_true", help="rebuild even if cached")

    p = sub.add_parser("synthesize", help="value iteration -> SVVT file (+ lookahead cache)")
    _add_config_arg(p)
    p.add_argument("--force", action="store_true", help="resynthesize even if cached")

    p = sub.add_parser("simulate", help="Monte-Carlo episodes -> metrics.csv + summary")
    _add_config_arg(p)
    p.add_argument("--episodes", type=int, help="override run.episodes")
    p.add_argument("--seed", type=int, help="override run.seed")
    p.add_argument("--out", help="override the output directory")
    p.add_argument("--baseline", action="store_true",
                   help="disable the gate and apply the raw controller")
    p.add_argument("--companion-mode", choices=["max-safety", "max-risk"],
                   help="override supervisor.companion_mode")
    p.add_argument("--export-traces", type=int,
                   help="write per-episode trace CSVs for this many episodes")
    p.add_argument("--strict-relation", action="store_true",
                   help="hard-fail on any relation membership loss")

    p = sub.add_parser("verify-relation", help="empirical one-step relation check")
    _add_config_arg(p)
    p.add_argument("--samples", type=int, default=100000)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("oracle-check", help="exhaustive guarantee check on toy instances")
    p.add_argument("instances", nargs="+", help="instance YAML files")

    p = sub.add_parser("inspect", help="print header/metadata of an SVKN or SVVT file")
    p.add_argument("file")
    return parser


def _cmd_build(args) -> int:
    cfg = load_config(args.config)
    ensure_kernel(cfg, force=args.force)
    return 0


def _cmd_synthesize(args) -> int:
    cfg = load_config(args.config)
    kernel = ensure_kernel(cfg)
    ensure_tables(cfg, kernel, force=args.force)
    return 0


def _cmd_simulate(args) -> int:
    overrides = {}
    if args.episodes is not None:
        overrides["run.episodes"] = args.episodes
    if args.seed is not None:
        overrides["run.seed"] = args.seed
    if args.out is not None:
        overrides["paths.out_dir"] = os.path.abspath(args.out)
    if args.baseline:
        overrides["run.mode"] = "baseline"
    if args.companion_mode is not None:
        overrides["supervisor.companion_mode"] = args.companion_mode
    if args.export_traces is not None:
        overrides["run.export_traces"] = args.export_traces
    cfg = load_config(args.config, overrides)
    monte_carlo(cfg, strict_relation=args.strict_relation)
    return 0


def _cmd_verify_relation(args) -> int:
    cfg = load_config(args.config)
    report = verify_relation_empirically(cfg.game, cfg.grid, cfg.relation,
                                         args.samples, args.seed)
    print(report.summary())
    return 0 if report.ok else 1


def _cmd_oracle(args) -> int:
    status = 0
    for path in args.instances:
        instance = load_instance(path)
        report = exhaustive_violation_bound_check(instance)
        print(report.summary())
        if not report.ok:
            status = 1
    return status


def _cmd_inspect(args) -> int:
    with open(args.file, "rb") as fh:
        magic = fh.read(4)
    if magic == abstraction.KERNEL_MAGIC:
        n_cells, n_u, n_w = abstraction.read_kernel_header(args.file)
        print(f"{args.file}: transition tensor (SVKN v{abstraction.KERNEL_VERSION})")
        print(f"  cells={n_cells} u_hat={n_u} w_hat={n_w} "
              f"rows={n_cells * n_u * n_w} row_length={n_cells + 1}")
        kernel = abstraction.load_kernel(args.file)
        sums = kernel.flat().sum(axis=1)
        print(f"  row sums in [{sums.min():.12f}, {sums.max():.12f}]")
        print(f"  total sink mass {kernel.T[..., -1].sum():.6g}")
    elif magic == advisor.TABLES_MAGIC:
        hdr = advisor.read_tables_header(args.file)
        print(f"{args.file}: value/policy tables (SVVT v{advisor.TABLES_VERSION})")
        print(f"  rows={hdr['n_rows']} monitor_states={hdr['n_q']} u_hat={hdr['n_u']} "
              f"horizon={hdr['horizon']} delta={hdr['delta']:g}")
        print(f"  non-accepting states: {hdr['nonf_states'].tolist()}")
        tables = advisor.load_tables(args.file)
        vfull = tables.values[hdr["horizon"]]
        print(f"  terminal slice value range [{vfull.min():.6g}, {vfull.max():.6g}]")
        for q in hdr["nonf_states"]:
            col = tables.values[hdr["horizon"]][:-1, q]
            print(f"  q{q}: min {col.min():.6g} | median {np.median(col):.6g} "
                  f"| max {col.max():.6g}")
    else:
        print(f"{args.file}: unknown magic {magic!r}", file=sys.stderr)
        return 1
    return 0


COMMANDS = {
    "build-abstraction": _cmd_build,
    "synthesize": _cmd_synthesize,
    "simulate": _cmd_simulate,
    "verify-relation": _cmd_verify_relation,
    "oracle-check": _cmd_oracle,
    "inspect": _cmd_inspect,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except GameshieldError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
