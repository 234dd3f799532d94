"""Experiment configuration: one YAML file describing game, grid, relation,
monitor, gate and run settings. Derived artifacts (kernel, value tables) are
cached under the build directory keyed by digests of the sections they
depend on, so editing the run section never invalidates a synthesis.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np
import yaml

from .abstraction import Grid, RelationParams, build_grid, validate_relation_grid
from .automata import SafetySpec, load_dfa_file
from .errors import ConfigError
from .game import LinearGaussianGame

DEFAULT_KERNEL_CAP_MB = 4096.0
DEFAULT_VALUE_CAP_MB = 4096.0


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":"))
                          .encode()).hexdigest()


@dataclass
class ExperimentConfig:
    raw: dict
    path: str
    game: LinearGaussianGame
    grid: Grid
    relation: RelationParams
    spec: SafetySpec
    eta: float
    companion_mode: str
    x0: np.ndarray
    episodes: int
    seed: int
    mode: str
    controller_cfg: dict
    adversary_cfg: dict
    build_dir: str
    out_dir: str
    kernel_cap_mb: float
    value_cap_mb: float
    export_traces: int

    @property
    def name(self) -> str:
        return self.raw.get("name", os.path.splitext(os.path.basename(self.path))[0])

    @property
    def digest(self) -> str:
        return _digest(self.raw)

    @property
    def kernel_digest(self) -> str:
        return _digest({"game": self.raw["game"], "grid": self.raw["grid"]})

    @property
    def tables_digest(self) -> str:
        return _digest({k: self.raw[k] for k in ("game", "grid", "relation", "spec")})

    def kernel_path(self) -> str:
        explicit = self.raw.get("paths", {}).get("kernel")
        if explicit:
            return self._resolve(explicit)
        return os.path.join(self.build_dir, f"{self.name}-{self.kernel_digest[:12]}.svkn")

    def tables_path(self) -> str:
        explicit = self.raw.get("paths", {}).get("tables")
        if explicit:
            return self._resolve(explicit)
        return os.path.join(self.build_dir, f"{self.name}-{self.tables_digest[:12]}.svvt")

    def lookahead_path(self) -> str:
        return self.tables_path() + ".svla"

    def _resolve(self, p: str) -> str:
        if os.path.isabs(p):
            return p
        return os.path.normpath(os.path.join(os.path.dirname(self.path), p))


def _require(raw: dict, key: str, where: str):
    if key not in raw:
        raise ConfigError(f"{where}: missing required key {key!r}")
    return raw[key]


def load_config(path, overrides: dict = None) -> ExperimentConfig:
    """Parse, build and cross-validate every object the pipeline needs."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    if overrides:
        for dotted, value in overrides.items():
            node = raw
            keys = dotted.split(".")
            for k in keys[:-1]:
                node = node.setdefault(k, {})
            node[keys[-1]] = value

    g = _require(raw, "game", path)
    game = LinearGaussianGame(
        A=_require(g, "a", "game"), B=_require(g, "b", "game"),
        D=_require(g, "d", "game"), C_out=_require(g, "c", "game"),
        R_noise=_require(g, "r", "game"),
        x_bounds=_require(g, "x_bounds", "game"),
        u_bounds=_require(g, "u_bounds", "game"),
        w_bounds=_require(g, "w_bounds", "game"),
        x0_set=g.get("x0_set", []), dt=float(g.get("dt", 1.0)))

    gr = _require(raw, "grid", path)
    if "u_hat_values" not in gr and "u_hat_restriction" not in gr:
        raise ConfigError("grid: need u_hat_values or u_hat_restriction")
    grid = build_grid(
        x_bounds=game.x_bounds, cell_sizes=_require(gr, "x_cell_sizes", "grid"),
        u_bounds=game.u_bounds, u_cells=int(_require(gr, "u_cells", "grid")),
        u_hat_restriction=gr.get("u_hat_restriction"),
        w_bounds=game.w_bounds, w_cells=int(_require(gr, "w_cells", "grid")),
        u_hat_values=gr.get("u_hat_values"))

    rel = _require(raw, "relation", path)
    relation = RelationParams(
        M=_require(rel, "m", "relation"), K=_require(rel, "k", "relation"),
        eps=float(_require(rel, "eps", "relation")),
        eps_w=float(_require(rel, "eps_w", "relation")),
        delta=float(rel.get("delta", 0.0)),
        gamma=float(_require(rel, "gamma", "relation")))
    validate_relation_grid(relation, grid, game)

    sp = _require(raw, "spec", path)
    dfa_path = _require(sp, "dfa", "spec")
    if not os.path.isabs(dfa_path):
        dfa_path = os.path.normpath(os.path.join(os.path.dirname(path), dfa_path))
    if not os.path.exists(dfa_path):
        raise ConfigError(f"spec: DFA file {dfa_path} does not exist")
    dfa, labelling = load_dfa_file(dfa_path)
    spec = SafetySpec(dfa=dfa, labelling=labelling,
                      horizon=int(_require(sp, "horizon", "spec")))

    sup = raw.get("supervisor", {})
    eta = float(sup.get("eta", 0.01))
    if not (0.0 <= eta <= 1.0):
        raise ConfigError("supervisor.eta must lie in [0, 1]")
    companion_mode = sup.get("companion_mode", "max-safety")

    run = raw.get("run", {})
    x0 = np.asarray(run.get("x0", game.x0_set[0] if game.x0_set else None),
                    dtype=float).reshape(-1)
    if game.x0_set and not any(np.array_equal(x0, cand) for cand in game.x0_set):
        raise ConfigError(f"run.x0 {x0.tolist()} is not in the declared initial set")
    episodes = int(run.get("episodes", 1))
    if episodes < 1:
        raise ConfigError("run.episodes must be >= 1")
    mode = run.get("mode", "safevisor")
    if mode not in ("safevisor", "baseline", "advisor"):
        raise ConfigError(f"unknown run.mode {mode!r}")

    paths = raw.get("paths", {})
    cfg_dir = os.path.dirname(os.path.abspath(path))
    build_dir = paths.get("build_dir", "build")
    out_dir = paths.get("out_dir", os.path.join("out", raw.get("name", "run")))
    limits = raw.get("limits", {})

    return ExperimentConfig(
        raw=raw, path=os.path.abspath(path), game=game, grid=grid, relation=relation,
        spec=spec, eta=eta, companion_mode=companion_mode, x0=x0, episodes=episodes,
        seed=int(run.get("seed", 0)), mode=mode,
        controller_cfg=run.get("controller", {"kind": "uniform"}),
        adversary_cfg=run.get("adversary", {"kind": "uniform"}),
        build_dir=build_dir if os.path.isabs(build_dir)
        else os.path.join(cfg_dir, build_dir),
        out_dir=out_dir if os.path.isabs(out_dir) else os.path.join(cfg_dir, out_dir),
        kernel_cap_mb=float(limits.get("kernel_memory_mb", DEFAULT_KERNEL_CAP_MB)),
        value_cap_mb=float(limits.get("value_memory_mb", DEFAULT_VALUE_CAP_MB)),
        export_traces=int(run.get("export_traces", 0)))
