"""Ground-truth machinery for small instances.

Everything here is deliberately written with plain per-state loops, separate
from the vectorized synthesis path, so the two routes cross-check each other:
fixed-policy value recursion, worst-case adversary construction, explicit
product game, and an exhaustive enumeration of every gate-governed execution
against every adversary behavior. Exponential by nature and hard-capped.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import yaml

from .abstraction import (AbstractKernel, Grid, RelationParams, cell_outputs)
from .advisor import ValueTables, build_reach_masks, value_iteration
from .automata import SafetySpec, dfa_step, label, parse_dfa_text
from .errors import ConfigError, SizingError
from .game import LinearGaussianGame
from .runtime import AugmentedState
from .supervisor import SupervisorRuntime

MAX_PRODUCT_STATES = 64
MAX_PLAYER_CHOICES = 4
MAX_ORACLE_HORIZON = 8


def n_steps_reachable_sets(spec: SafetySpec, y0: float, n_max: int) -> list:
    """Monitor states reachable after consuming y0 and then n arbitrary labels."""
    dfa = spec.dfa
    current = {dfa_step(dfa, dfa.q0, label(spec.labelling, y0))}
    sets = [frozenset(current)]
    for _ in range(n_max):
        current = {dfa_step(dfa, q, pi) for q in current for pi in dfa.alphabet}
        sets.append(frozenset(current))
    return sets


# ---------------------------------------------------------------------------
# Explicit product game
# ---------------------------------------------------------------------------

@dataclass
class FiniteProductGame:
    states: list                 # (cell, q) pairs
    index: dict                  # (cell, q) -> row
    T: np.ndarray                # (n_prod, n_u, n_w, n_prod + 1), sink last
    accepting_rows: np.ndarray   # bool per product state
    succ_q: np.ndarray           # (n_q, n_cells): monitor successor per (q, cell')


def successor_monitor_table(spec: SafetySpec, outputs: np.ndarray) -> np.ndarray:
    """succ_q[q, c] = monitor state after consuming cell c's exact label from q."""
    dfa = spec.dfa
    table = np.empty((dfa.n_states, outputs.shape[0]), dtype=np.int64)
    for q in range(dfa.n_states):
        for c, y in enumerate(outputs):
            table[q, c] = dfa_step(dfa, q, label(spec.labelling, float(y)))
    return table


def build_product(kernel: AbstractKernel, spec: SafetySpec, grid: Grid,
                  game) -> FiniteProductGame:
    """Explicit product of the finite game and the monitor (exact labels)."""
    outputs = cell_outputs(grid, game)
    succ_q = successor_monitor_table(spec, outputs)
    n_cells, n_u, n_w = kernel.n_cells, kernel.n_u, kernel.n_w
    n_q = spec.dfa.n_states
    states = [(c, q) for c in range(n_cells) for q in range(n_q)]
    index = {sq: i for i, sq in enumerate(states)}
    n_prod = len(states)
    T = np.zeros((n_prod, n_u, n_w, n_prod + 1))
    for (c, q), row in index.items():
        for iu in range(n_u):
            for iw in range(n_w):
                src = kernel.T[c, iu, iw]
                for c2 in range(n_cells):
                    q2 = succ_q[q, c2]
                    T[row, iu, iw, index[(c2, q2)]] += src[c2]
                T[row, iu, iw, n_prod] += src[n_cells]
    accepting = np.array([spec.dfa.is_accepting(q) for _, q in states])
    return FiniteProductGame(states=states, index=index, T=T,
                             accepting_rows=accepting, succ_q=succ_q)


# ---------------------------------------------------------------------------
# Fixed-policy recursion and worst-case adversary
# ---------------------------------------------------------------------------

def _pessimistic_q(values_n: np.ndarray, reach_row: np.ndarray) -> int:
    """argmax over the reachable monitor states (ties: lowest index)."""
    best, best_q = -1.0, -1
    for q2, ok in enumerate(reach_row):
        if ok and values_n[q2] > best:
            best, best_q = values_n[q2], q2
    return best_q


def policy_value(kernel: AbstractKernel, game, grid: Grid, spec: SafetySpec,
                 relation: RelationParams, rho: np.ndarray, lam: np.ndarray,
                 horizon: int) -> np.ndarray:
    """Exact violation value of a fixed Markov policy pair.

    rho[k, c, q] is the Player-I input index at time k; lam[k, c, q, iu] the
    Player-II reply. Returns (H+1, n_cells+1, n_q) with the sink row at 1.
    """
    dfa = spec.dfa
    n_cells, n_q = kernel.n_cells, dfa.n_states
    if rho.shape != (horizon, n_cells, n_q):
        raise ValueError(f"player-I policy has shape {rho.shape}")
    if lam.shape != (horizon, n_cells, n_q, kernel.n_u):
        raise ValueError(f"player-II policy has shape {lam.shape}")
    reach = build_reach_masks(cell_outputs(grid, game), spec, relation.eps)
    delta = relation.delta
    values = np.zeros((horizon + 1, n_cells + 1, n_q))
    values[:, :, [q for q in range(n_q) if dfa.is_accepting(q)]] = 1.0
    values[:, n_cells, :] = 1.0
    for n in range(horizon):
        k = horizon - n - 1
        v_n = values[n]
        v_next = values[n + 1]
        for c in range(n_cells):
            for q in range(n_q):
                if dfa.is_accepting(q):
                    continue
                iu = int(rho[k, c, q])
                iw = int(lam[k, c, q, iu])
                row = kernel.T[c, iu, iw]
                total = row[n_cells]  # sink mass at value 1
                for c2 in range(n_cells):
                    p = row[c2]
                    if p == 0.0:
                        continue
                    q_bar = _pessimistic_q(v_n[c2], reach[q][c2])
                    total += p * v_n[c2, q_bar]
                v_next[c, q] = (1.0 - delta) * total + delta
    return values


def worst_case_adversary(kernel: AbstractKernel, game, grid: Grid, spec: SafetySpec,
                         relation: RelationParams, rho: np.ndarray, horizon: int):
    """Adversary maximizing the violation value against a fixed rho.

    Returns (lam_star, values) with values = V under (rho, lam_star).
    """
    dfa = spec.dfa
    n_cells, n_q, n_u, n_w = kernel.n_cells, dfa.n_states, kernel.n_u, kernel.n_w
    reach = build_reach_masks(cell_outputs(grid, game), spec, relation.eps)
    delta = relation.delta
    lam = np.zeros((horizon, n_cells, n_q, n_u), dtype=np.int64)
    values = np.zeros((horizon + 1, n_cells + 1, n_q))
    values[:, :, [q for q in range(n_q) if dfa.is_accepting(q)]] = 1.0
    values[:, n_cells, :] = 1.0
    for n in range(horizon):
        k = horizon - n - 1
        v_n = values[n]
        v_next = values[n + 1]
        for c in range(n_cells):
            for q in range(n_q):
                if dfa.is_accepting(q):
                    continue
                for iu in range(n_u):
                    best, best_w = -1.0, 0
                    for iw in range(n_w):
                        row = kernel.T[c, iu, iw]
                        total = row[n_cells]
                        for c2 in range(n_cells):
                            p = row[c2]
                            if p == 0.0:
                                continue
                            q_bar = _pessimistic_q(v_n[c2], reach[q][c2])
                            total += p * v_n[c2, q_bar]
                        if total > best:
                            best, best_w = total, iw
                    lam[k, c, q, iu] = best_w
                    if iu == int(rho[k, c, q]):
                        v_next[c, q] = (1.0 - delta) * best + delta
    return lam, values


def advisor_policy_time_indexed(tables: ValueTables) -> np.ndarray:
    """Stored policy reindexed by time k (policy slice j serves time-to-go j+1)."""
    H = tables.horizon
    n_cells = tables.n_cells
    rho = np.empty((H, n_cells, tables.n_q), dtype=np.int64)
    for k in range(H):
        rho[k] = tables.policy[H - k - 1][:n_cells, :]
    return rho


def enumerate_markov_policies(n_cells: int, nonf_states, n_u: int, horizon: int,
                              cap: int = 65536):
    """Yield every Markov Player-I policy over the non-accepting states."""
    slots = [(k, c, q) for k in range(horizon) for c in range(n_cells) for q in nonf_states]
    total = n_u ** len(slots)
    if total > cap:
        raise SizingError(f"{total} Markov policies exceed the enumeration cap {cap}")
    n_q_all = max(nonf_states) + 1 if len(nonf_states) else 1

    def emit(assign):
        rho = np.zeros((horizon, n_cells, n_q_all), dtype=np.int64)
        for (k, c, q), iu in zip(slots, assign):
            rho[k, c, q] = iu
        return rho

    assign = [0] * len(slots)
    while True:
        yield emit(assign)
        i = 0
        while i < len(slots):
            assign[i] += 1
            if assign[i] < n_u:
                break
            assign[i] = 0
            i += 1
        else:
            return


# ---------------------------------------------------------------------------
# Exhaustive check of the gate's guarantee on one instance
# ---------------------------------------------------------------------------

@dataclass
class EtaCheck:
    eta: float
    v_supervised: float
    bound_ok: bool
    domination_ok: bool
    min_tail_gap: float
    nodes: int


@dataclass
class OracleReport:
    name: str
    v_advisor: float
    minimax_consistent: bool
    reachable_ok: bool
    checks: list

    @property
    def ok(self) -> bool:
        return (self.minimax_consistent and self.reachable_ok
                and all(c.bound_ok and c.domination_ok for c in self.checks))

    def summary(self) -> str:
        lines = [f"instance {self.name}: advisor worst-case value v = {self.v_advisor:.9f}",
                 f"  minimax consistency (policy recursion vs synthesis): "
                 f"{'ok' if self.minimax_consistent else 'FAIL'}",
                 f"  reachable monitor sets respected: {'ok' if self.reachable_ok else 'FAIL'}"]
        for c in self.checks:
            lines.append(
                f"  eta={c.eta:g}: exact supervised worst case {c.v_supervised:.9f} "
                f"{'<=' if c.bound_ok else '>'} eta "
                f"[{c.nodes} configurations, min e_pv-vs-tail gap {c.min_tail_gap:.3e} "
                f"{'ok' if c.domination_ok else 'FAIL'}]")
        lines.append(f"  overall: {'PASS' if self.ok else 'FAIL'}")
        return "\n".join(lines)


@dataclass
class OracleInstance:
    name: str
    game: LinearGaussianGame
    grid: Grid
    kernel: AbstractKernel
    spec: SafetySpec
    relation: RelationParams
    x0: np.ndarray
    etas: list
    proposals: list               # unverified-controller candidate inputs
    max_nodes: int = 200000

    def guard(self) -> None:
        n_prod = self.kernel.n_cells * self.spec.dfa.n_states
        if n_prod > MAX_PRODUCT_STATES:
            raise SizingError(f"{n_prod} product states exceed the oracle cap "
                              f"{MAX_PRODUCT_STATES}")
        if self.kernel.n_u > MAX_PLAYER_CHOICES or self.kernel.n_w > MAX_PLAYER_CHOICES:
            raise SizingError("player choice sets exceed the oracle cap "
                              f"{MAX_PLAYER_CHOICES}")
        if self.spec.horizon > MAX_ORACLE_HORIZON:
            raise SizingError(f"horizon {self.spec.horizon} exceeds the oracle cap "
                              f"{MAX_ORACLE_HORIZON}")
        if self.relation.eps != 0.0 or self.relation.delta != 0.0:
            raise ConfigError("the exhaustive check requires an exact instance "
                              "(eps = 0 and delta = 0)")


def exhaustive_violation_bound_check(instance: OracleInstance,
                                     tables: ValueTables = None) -> OracleReport:
    """Enumerate every gate-governed execution tree of a small exact instance.

    Asserts the end-to-end guarantee (exact worst-case violation probability
    <= eta for every tested eta >= the advisor optimum) and that each computed
    risk estimate dominates the exact tail of [companion now, advisor after].
    """
    instance.guard()
    game, grid, spec, relation = (instance.game, instance.grid, instance.spec,
                                  instance.relation)
    kernel = instance.kernel
    if tables is None:
        tables = value_iteration(kernel, game, grid, spec, relation)
    H = tables.horizon
    n_cells = kernel.n_cells
    outputs = cell_outputs(grid, game)
    succ_q = successor_monitor_table(spec, outputs)

    # independent advisor tail: fixed-policy recursion against its worst adversary
    rho_adv = advisor_policy_time_indexed(tables)
    _, v_exact = worst_case_adversary(kernel, game, grid, spec, relation, rho_adv, H)
    minimax_consistent = bool(np.max(np.abs(v_exact - tables.values)) <= 1e-12)

    y0 = float(game.C_out[0] @ instance.x0)
    reach_sets = n_steps_reachable_sets(spec, y0, H)

    from .advisor import related_cell
    cell0 = related_cell(grid, relation, instance.x0)
    q0 = dfa_step(spec.dfa, spec.dfa.q0, label(spec.labelling, y0))
    v_advisor = float(tables.values[H][cell0, q0])

    checks = []
    reachable_ok = True
    for eta in instance.etas:
        sup = SupervisorRuntime(game, grid, spec, relation, kernel, tables, eta=eta)
        memo = {}
        nodes = 0
        min_gap = np.inf
        dom_ok = True

        def tail_exact(k, cell, q, iu):
            n = H - k - 1
            best = -1.0
            for iw in range(kernel.n_w):
                row = kernel.T[cell, iu, iw]
                total = row[n_cells]
                for c2 in range(n_cells):
                    p = row[c2]
                    if p:
                        total += p * v_exact[n][c2, succ_q[q, c2]]
                best = max(best, total)
            return (1.0 - relation.delta) * best + relation.delta

        def visit(k, cell, q, c1):
            nonlocal nodes, min_gap, dom_ok, reachable_ok
            if spec.dfa.is_accepting(q):
                return 1.0
            if k == H:
                return 0.0
            key = (k, cell, q, c1)
            if key in memo:
                return memo[key]
            nodes += 1
            if nodes > instance.max_nodes:
                raise SizingError(
                    f"supervised tree exceeds {instance.max_nodes} configurations; "
                    "shrink the instance or raise max_nodes")
            if q not in reach_sets[k]:
                reachable_ok = False
            aug = AugmentedState(x=grid.centers[cell].copy(), cell=cell, q=q,
                                 iu_last=-1, w_last=np.nan, c1=c1, k=k)
            worst = 0.0
            for u_uc in instance.proposals:
                decision = sup.decide(aug, u_uc, k)
                iu = decision.u_hat_companion
                if decision.e_pv is not None:
                    # e_pv was computed with the selected companion, which on a
                    # risk reject differs from the recorded (advisor) companion
                    feas = sup.feasible_set(aug.x, cell, u_uc)
                    iu_star = sup.select_companion(feas, cell, q, k)
                    gap = decision.e_pv - tail_exact(k, cell, q, iu_star)
                    min_gap = min(min_gap, gap)
                    if gap < -1e-9:
                        dom_ok = False
                c1_next = c1 * sup.c1_factor(cell, iu, q)
                for iw in range(kernel.n_w):
                    row = kernel.T[cell, iu, iw]
                    total = row[n_cells]
                    for c2 in range(n_cells):
                        p = row[c2]
                        if p:
                            total += p * visit(k + 1, c2, int(succ_q[q, c2]), c1_next)
                    worst = max(worst, total)
            memo[key] = worst
            return worst

        v_sup = visit(0, cell0, q0, 1.0)
        bound_ok = (v_sup <= eta + 1e-9) if eta >= v_advisor - 1e-12 else True
        checks.append(EtaCheck(eta=eta, v_supervised=v_sup, bound_ok=bound_ok,
                               domination_ok=dom_ok,
                               min_tail_gap=float(min_gap if np.isfinite(min_gap) else 0.0),
                               nodes=nodes))
    return OracleReport(name=instance.name, v_advisor=v_advisor,
                        minimax_consistent=minimax_consistent,
                        reachable_ok=reachable_ok, checks=checks)


# ---------------------------------------------------------------------------
# Instance files: small exact games given directly by their transition rows
# ---------------------------------------------------------------------------

def load_instance(path) -> OracleInstance:
    with open(path, "r", encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    return instance_from_dict(raw, name=raw.get("name", str(path)))


def instance_from_dict(raw: dict, name: str) -> OracleInstance:
    try:
        n_cells = int(raw["cells"])
        horizon = int(raw["horizon"])
        u_hat = [float(v) for v in raw["u_hat"]]
        w_hat = [float(v) for v in raw["w_hat"]]
        kernel_rows = raw["kernel"]
        dfa_text = raw["dfa"]
        etas = [float(e) for e in raw["etas"]]
    except KeyError as exc:
        raise ConfigError(f"oracle instance {name}: missing field {exc}") from exc
    dfa, labelling = parse_dfa_text(dfa_text)
    spec = SafetySpec(dfa=dfa, labelling=labelling, horizon=horizon)

    # 1-d exact game: cells are unit intervals [i, i+1), the abstract twin is
    # the system itself (eps = gamma = 0 forces exact companion matching)
    lo = 0.0
    u_vals = sorted(set(u_hat))
    w_vals = sorted(set(w_hat))
    pad = 1.0
    game = LinearGaussianGame(
        A=[[1.0]], B=[[1.0]], D=[[1.0]], C_out=[[1.0]], R_noise=[[1.0]],
        x_bounds=[[lo, lo + n_cells]],
        u_bounds=[[min(u_vals) - pad, max(u_vals) + pad]],
        w_bounds=[[min(w_vals) - pad, max(w_vals) + pad]],
        x0_set=[[float(raw.get("x0", lo + 0.5))]])
    grid = Grid(x_lo=np.array([lo]), x_sizes=np.array([1.0]),
                x_counts=np.array([n_cells]),
                u_bounds=game.u_bounds, u_lattice=np.asarray(u_vals, dtype=float),
                u_hat_values=np.asarray(u_vals, dtype=float),
                w_bounds=game.w_bounds, w_values=np.asarray(w_vals, dtype=float))
    T = np.asarray(kernel_rows, dtype=float)
    if T.shape != (n_cells, len(u_vals), len(w_vals), n_cells + 1):
        raise ConfigError(
            f"oracle instance {name}: kernel shape {T.shape} != "
            f"{(n_cells, len(u_vals), len(w_vals), n_cells + 1)}")
    kernel = AbstractKernel(T=T)
    kernel.validate(tol=1e-12)
    relation = RelationParams(M=[[1.0]], K=[[0.0]], eps=0.0, eps_w=float(max(
        np.diff(w_vals).max() / 2 if len(w_vals) > 1 else 0.0, 0.0)),
        delta=float(raw.get("delta", 0.0)), gamma=0.0)
    proposals = [float(v) for v in raw.get("proposals", [])] or \
        u_vals + [min(u_vals) + 0.30517578125]  # off-lattice proposal forces a reject
    return OracleInstance(name=raw.get("name", name), game=game, grid=grid,
                          kernel=kernel, spec=spec, relation=relation,
                          x0=np.asarray(game.x0_set[0]), etas=etas,
                          proposals=proposals,
                          max_nodes=int(raw.get("max_nodes", 200000)))
