#!/usr/bin/env python3
"""Full quadrotor tracking study: build both axis configs, run the gated
Monte-Carlo simulation plus the ungated baseline, and print a summary table.

    python3 scripts/run_quadrotor_study.py --episodes 10000
    GAMESHIELD_WORKERS=2 python3 scripts/run_quadrotor_study.py --episodes 100000
"""
import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from gameshield.config import load_config
from gameshield.simulate import ensure_kernel, ensure_tables, monte_carlo

REPO = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def run_axis(config_path, episodes, seed, out_root):
    name = os.path.splitext(os.path.basename(config_path))[0]
    cfg = load_config(config_path)
    kernel = ensure_kernel(cfg)
    tables = ensure_tables(cfg, kernel)
    rows = []
    for mode in ("safevisor", "baseline"):
        overrides = {"run.mode": mode, "run.episodes": episodes,
                     "paths.out_dir": os.path.join(out_root, f"{name}-{mode}")}
        if seed is not None:
            overrides["run.seed"] = seed
        cfg_run = load_config(config_path, overrides)
        summary = monte_carlo(cfg_run, kernel, tables, quiet=True)
        rows.append((name, mode, summary))
        print(f"[{name} / {mode}] satisfaction {summary.satisfaction_rate:.4f}  "
              f"acceptance {summary.acceptance_rate:.4f}  "
              f"latency {summary.latency_mean_ms:.3f}±{summary.latency_std_ms:.3f} ms  "
              f"({summary.wall_seconds:.0f}s)")
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--episodes", type=int, default=10000)
    ap.add_argument("--seed", type=int, default=None,
                    help="override the seed from the configs")
    ap.add_argument("--axes", nargs="+", default=["e", "n"], choices=["e", "n"])
    ap.add_argument("--out", default=os.path.join(REPO, "out", "study"))
    args = ap.parse_args()

    all_rows = []
    for axis in args.axes:
        cfg_path = os.path.join(REPO, "configs", f"quadrotor_{axis}.yaml")
        all_rows += run_axis(cfg_path, args.episodes, args.seed, args.out)

    print("\n=== study summary ===")
    header = (f"{'config':14s} {'gate':10s} {'satisfaction':>12s} "
              f"{'acceptance':>10s} {'latency ms':>16s}")
    print(header)
    print("-" * len(header))
    for name, mode, s in all_rows:
        lat = f"{s.latency_mean_ms:.3f} ± {s.latency_std_ms:.3f}" \
            if mode == "safevisor" else "-"
        acc = f"{s.acceptance_rate:.4f}" if mode == "safevisor" else "-"
        print(f"{name:14s} {mode:10s} {s.satisfaction_rate:12.4f} "
              f"{acc:>10s} {lat:>16s}")


if __name__ == "__main__":
    main()
