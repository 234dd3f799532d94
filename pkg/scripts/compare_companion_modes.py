#!/usr/bin/env python3
"""Compare the two companion-selection policies of the gate on one config:
the default picks the feasible abstract input maximizing the look-ahead
survival term (most permissive sound estimate), the alternative picks the
one minimizing it (most conservative estimate). Reports acceptance and
satisfaction for both.

    python3 scripts/compare_companion_modes.py --config configs/quadrotor_e.yaml
"""
import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from gameshield.config import load_config
from gameshield.simulate import ensure_kernel, ensure_tables, monte_carlo

REPO = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=os.path.join(REPO, "configs", "quadrotor_e.yaml"))
    ap.add_argument("--episodes", type=int, default=1000)
    args = ap.parse_args()

    cfg = load_config(args.config)
    kernel = ensure_kernel(cfg)
    tables = ensure_tables(cfg, kernel)
    for mode in ("max-safety", "max-risk"):
        cfg_run = load_config(args.config, overrides={
            "supervisor.companion_mode": mode,
            "run.episodes": args.episodes,
            "paths.out_dir": os.path.join(REPO, "out", "companion", mode)})
        s = monte_carlo(cfg_run, kernel, tables, quiet=True)
        print(f"{mode:11s}: satisfaction {s.satisfaction_rate:.4f}  "
              f"acceptance {s.acceptance_rate:.4f}  "
              f"({s.decisions} decisions, {s.wall_seconds:.0f}s)")


if __name__ == "__main__":
    main()
