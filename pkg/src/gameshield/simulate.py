"""Monte-Carlo experiment driver: builds or loads the artifacts, checks the
feasibility gate, runs episodes (optionally across worker processes sharing
the tables via fork) and writes the deterministic metrics CSV plus a human
summary. Timing statistics live only in the summary: the CSV must be
byte-identical across reruns of the same config and seed.
"""
from __future__ import annotations

import math
import multiprocessing
import os
import time
from dataclasses import dataclass

import numpy as np

from .abstraction import build_kernel, load_kernel, save_kernel
from .advisor import (advisor_guarantee, load_lookahead, load_tables, save_lookahead,
                      save_tables, value_iteration)
from .config import ExperimentConfig
from .controllers import make_adversary, make_controller
from .errors import ConfigError
from .runtime import run_episode
from .supervisor import SupervisorRuntime

WORKERS_ENV = "GAMESHIELD_WORKERS"


@dataclass
class MetricsSummary:
    config_name: str
    config_digest: str
    mode: str
    eta: float
    guarantee: float
    episodes: int
    violations: int
    acceptance_rate: float       # mean of per-episode acceptance rates
    decisions: int
    latency_mean_ms: float
    latency_std_ms: float
    relation_violations: int
    malformed: int
    wall_seconds: float

    @property
    def satisfaction_rate(self) -> float:
        return 1.0 - self.violations / self.episodes if self.episodes else 1.0

    def summary_text(self) -> str:
        return "\n".join([
            f"config:            {self.config_name} ({self.config_digest[:12]})",
            f"mode:              {self.mode}",
            f"eta:               {self.eta:g}",
            f"advisor guarantee: {self.guarantee:.6g}",
            f"episodes:          {self.episodes}",
            f"violations:        {self.violations}",
            f"satisfaction rate: {self.satisfaction_rate:.6f}",
            f"acceptance rate:   {self.acceptance_rate:.6f}",
            f"decisions:         {self.decisions}",
            f"latency mean (ms): {self.latency_mean_ms:.4f}",
            f"latency std (ms):  {self.latency_std_ms:.4f}",
            f"relation events:   {self.relation_violations}",
            f"malformed inputs:  {self.malformed}",
            f"wall time (s):     {self.wall_seconds:.1f}",
        ]) + "\n"


def ensure_kernel(cfg: ExperimentConfig, force: bool = False, quiet: bool = False):
    path = cfg.kernel_path()
    if not force and os.path.exists(path):
        if not quiet:
            print(f"loading kernel {path}")
        return load_kernel(path)
    if not quiet:
        print(f"building kernel ({cfg.grid.n_cells} cells x {cfg.grid.n_u} u x "
              f"{cfg.grid.n_w} w) ...")
    kernel = build_kernel(cfg.game, cfg.grid, memory_cap_mb=cfg.kernel_cap_mb)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    save_kernel(kernel, path)
    if not quiet:
        print(f"wrote {path}")
    return kernel


def ensure_tables(cfg: ExperimentConfig, kernel=None, force: bool = False,
                  quiet: bool = False):
    path = cfg.tables_path()
    if not force and os.path.exists(path):
        if not quiet:
            print(f"loading value tables {path}")
        tables = load_tables(path)
        if not load_lookahead(cfg.lookahead_path(), tables) and not quiet:
            print("lookahead sidecar missing or stale; it will be recomputed")
        return tables
    if kernel is None:
        kernel = ensure_kernel(cfg, quiet=quiet)
    if not quiet:
        print(f"synthesizing value tables (H={cfg.spec.horizon}) ...")
    tables = value_iteration(kernel, cfg.game, cfg.grid, cfg.spec, cfg.relation,
                             memory_cap_mb=cfg.value_cap_mb)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    save_tables(tables, path)
    save_lookahead(tables, cfg.lookahead_path())
    if not quiet:
        print(f"wrote {path}")
    return tables


def feasibility_gate(cfg: ExperimentConfig, tables) -> float:
    """Refuse to run a gate whose budget is below what the fallback achieves."""
    v = advisor_guarantee(tables, cfg.grid, cfg.game, cfg.spec, cfg.relation, cfg.x0)
    if cfg.mode == "safevisor" and v > cfg.eta:
        raise ConfigError(
            f"refusing to run: the synthesized fallback's violation bound is "
            f"v = {v:.6g} from x0 = {cfg.x0.tolist()}, above the budget eta = {cfg.eta:g}; "
            f"no gate can honor eta < v. Raise eta to at least {v:.6g} or improve the "
            f"abstraction (finer state grid or richer u_hat set).")
    return v


_POOL_STATE = {}


def _pool_init(sup, cfg_bits):
    _POOL_STATE["sup"] = sup
    _POOL_STATE["cfg"] = cfg_bits


def _episode_job(idx):
    sup = _POOL_STATE["sup"]
    seed, mode, x0, ctrl_cfg, adv_cfg, base_dir, strict = _POOL_STATE["cfg"]
    controller = make_controller(ctrl_cfg, sup.game.u_bounds, base_dir)
    adversary = make_adversary(adv_cfg, sup.game.w_bounds, base_dir)
    tr = run_episode(sup, x0, controller, adversary, seed, idx, mode=mode,
                     strict_relation=strict, collect_records=False)
    return (idx, tr.violated, tr.steps, tr.accepted, tr.rejected_risk,
            tr.rejected_relation, tr.malformed, tr.relation_violations,
            tr.sink_entries, tr.acceptance_rate, tr.latency_sum_us,
            tr.latency_sumsq_us)


EPISODE_COLUMNS = ("episode,violated,steps,accepted,rejected_risk,rejected_relation,"
                   "malformed,relation_violations,sink_entries,acceptance_rate")


def monte_carlo(cfg: ExperimentConfig, kernel=None, tables=None, quiet: bool = False,
                strict_relation: bool = False) -> MetricsSummary:
    """Run cfg.episodes episodes and write metrics.csv + summary.txt."""
    t0 = time.perf_counter()
    if tables is None:
        tables = ensure_tables(cfg, kernel, quiet=quiet)
    if kernel is None:
        kernel = ensure_kernel(cfg, quiet=quiet)
    v = feasibility_gate(cfg, tables)
    sup = SupervisorRuntime(cfg.game, cfg.grid, cfg.spec, cfg.relation, kernel,
                            tables, eta=cfg.eta, companion_mode=cfg.companion_mode)
    base_dir = os.path.dirname(cfg.path)
    workers = int(os.environ.get(WORKERS_ENV, "1"))
    job_cfg = (cfg.seed, cfg.mode, cfg.x0, cfg.controller_cfg, cfg.adversary_cfg,
               base_dir, strict_relation)

    rows = []
    try:
        if workers > 1:
            ctx = multiprocessing.get_context("fork")
            _pool_init(sup, job_cfg)
            with ctx.Pool(workers) as pool:
                for row in pool.imap(_episode_job, range(cfg.episodes), chunksize=16):
                    rows.append(row)
        else:
            _pool_init(sup, job_cfg)
            for idx in range(cfg.episodes):
                rows.append(_episode_job(idx))
    except KeyboardInterrupt:
        if rows:
            rows.sort(key=lambda r: r[0])
            _write_metrics(cfg, rows)
        raise
    rows.sort(key=lambda r: r[0])
    _write_metrics(cfg, rows)

    if cfg.export_traces > 0:
        _export_traces(cfg, sup, base_dir, strict_relation)

    violations = sum(r[1] for r in rows)
    decisions = sum(r[3] + r[4] + r[5] for r in rows)
    lat_sum = sum(r[10] for r in rows)
    lat_sumsq = sum(r[11] for r in rows)
    lat_n = sum(r[2] for r in rows)
    mean_us = lat_sum / lat_n if lat_n else 0.0
    var_us = max(lat_sumsq / lat_n - mean_us ** 2, 0.0) if lat_n else 0.0
    summary = MetricsSummary(
        config_name=cfg.name, config_digest=cfg.digest, mode=cfg.mode, eta=cfg.eta,
        guarantee=v, episodes=len(rows), violations=violations,
        acceptance_rate=float(np.mean([r[9] for r in rows])) if rows else 0.0,
        decisions=decisions, latency_mean_ms=mean_us / 1000.0,
        latency_std_ms=math.sqrt(var_us) / 1000.0,
        relation_violations=sum(r[7] for r in rows),
        malformed=sum(r[6] for r in rows),
        wall_seconds=time.perf_counter() - t0)
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "summary.txt"), "w", encoding="utf-8") as fh:
        fh.write(summary.summary_text())
    if not quiet:
        print(summary.summary_text(), end="")
    return summary


def _write_metrics(cfg: ExperimentConfig, rows) -> None:
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, "metrics.csv")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(EPISODE_COLUMNS + "\n")
        for r in rows:
            fh.write(f"{r[0]},{int(r[1])},{r[2]},{r[3]},{r[4]},{r[5]},{r[6]},"
                     f"{r[7]},{r[8]},{r[9]:.12g}\n")


TRACE_COLUMNS = "step,y,q,verdict,e_pv,latency_us,u_uc,u_applied,w"


def _export_traces(cfg: ExperimentConfig, sup, base_dir: str, strict: bool) -> None:
    n = min(cfg.export_traces, cfg.episodes)
    for idx in range(n):
        controller = make_controller(cfg.controller_cfg, sup.game.u_bounds, base_dir)
        adversary = make_adversary(cfg.adversary_cfg, sup.game.w_bounds, base_dir)
        tr = run_episode(sup, cfg.x0, controller, adversary, cfg.seed, idx,
                         mode=cfg.mode, strict_relation=strict, collect_records=True)
        path = os.path.join(cfg.out_dir, f"trace_ep{idx:05d}.csv")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(TRACE_COLUMNS + "\n")
            for rec in tr.records:
                e_pv = "" if rec.e_pv is None else f"{rec.e_pv:.12g}"
                u_uc = "" if np.isnan(rec.u_uc) else f"{rec.u_uc:.12g}"
                fh.write(f"{rec.k},{rec.y:.12g},{rec.q},{rec.verdict},{e_pv},"
                         f"{rec.latency_us:.3f},{u_uc},{rec.u_applied:.12g},"
                         f"{rec.w:.12g}\n")
