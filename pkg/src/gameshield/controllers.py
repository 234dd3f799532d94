"""Unverified-controller and adversary input providers.

Controllers are callables over a StepContext (they may use the per-episode
rng stream or the fallback suggestion); adversaries additionally see the
input that was just applied, reflecting the information asymmetry.
"""
from __future__ import annotations

import numpy as np

from .errors import ConfigError


def uniform_random_controller(lo: float, hi: float):
    """Proposes u ~ Uniform(U) each step from the episode's controller stream."""
    def provider(ctx):
        return float(ctx.rng.uniform(lo, hi))
    return provider


def uniform_random_adversary(lo: float, hi: float):
    def provider(ctx, u_applied):
        return float(ctx.rng.uniform(lo, hi))
    return provider


def constant_controller(value: float):
    def provider(ctx):
        return float(value)
    return provider


def constant_adversary(value: float):
    def provider(ctx, u_applied):
        return float(value)
    return provider


def advisor_mimic_controller():
    """Proposes exactly the fallback controller's refined input."""
    def provider(ctx):
        return float(ctx.u_safe_fn())
    return provider


def load_input_script(path) -> list:
    vals = []
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if line:
                vals.append(float(line))
    return vals


def scripted_controller(values):
    """Replays a fixed input log; out-of-range values are deliberately not
    clamped (the gate counts and rejects them), running past the end errors."""
    values = [float(v) for v in values]

    def provider(ctx):
        if ctx.k >= len(values):
            raise ConfigError(
                f"scripted controller exhausted: step {ctx.k} but only "
                f"{len(values)} inputs in the script")
        return values[ctx.k]
    return provider


def scripted_adversary(values):
    values = [float(v) for v in values]

    def provider(ctx, u_applied):
        if ctx.k >= len(values):
            raise ConfigError(
                f"scripted adversary exhausted: step {ctx.k} but only "
                f"{len(values)} inputs in the script")
        return values[ctx.k]
    return provider


def make_controller(cfg: dict, u_bounds: np.ndarray, base_dir: str = "."):
    kind = cfg.get("kind", "uniform")
    if kind == "uniform":
        return uniform_random_controller(float(u_bounds[0, 0]), float(u_bounds[0, 1]))
    if kind == "constant":
        return constant_controller(cfg["value"])
    if kind == "advisor-mimic":
        return advisor_mimic_controller()
    if kind == "scripted":
        import os
        path = cfg["file"]
        if not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        return scripted_controller(load_input_script(path))
    raise ConfigError(f"unknown controller kind {kind!r}")


def make_adversary(cfg: dict, w_bounds: np.ndarray, base_dir: str = "."):
    kind = cfg.get("kind", "uniform")
    if kind == "uniform":
        return uniform_random_adversary(float(w_bounds[0, 0]), float(w_bounds[0, 1]))
    if kind == "constant":
        return constant_adversary(cfg["value"])
    if kind == "scripted":
        import os
        path = cfg["file"]
        if not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        return scripted_adversary(load_input_script(path))
    raise ConfigError(f"unknown adversary kind {kind!r}")
