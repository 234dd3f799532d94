"""Offline synthesis of the fallback controller.

Backward minimax recursion over (cell, monitor-state) pairs: at each step the
controller minimizes and the adversary maximizes the probability of the
monitor ever accepting, with the successor's monitor state resolved
pessimistically over all labels attainable within the output-closeness radius.
The recursion's inner tables (one per remaining-step count) are kept because
the runtime gate reuses them verbatim.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .abstraction import (Grid, RelationParams, cell_label_masks, cell_outputs,
                          check_relation_membership, quantize_state, try_quantize_state, SINK)
from .errors import (ConfigError, HorizonError, InterfaceInfeasibleError,
                     RelationInfeasibleError, SizingError)

TABLES_MAGIC = b"SVVT"
TABLES_VERSION = 1
LOOKAHEAD_MAGIC = b"SVLA"

CLAMP_TOL = 1e-9  # refine() may clamp into U by at most this much


def build_reach_masks(outputs: np.ndarray, spec, eps: float) -> np.ndarray:
    """reach[q, c, q'] == True iff q' is reachable from q via some label
    attainable within eps of cell c's output."""
    dfa = spec.dfa
    label_masks = cell_label_masks(outputs, spec.labelling, eps, dfa.alphabet)
    reach = np.zeros((dfa.n_states, outputs.shape[0], dfa.n_states), dtype=bool)
    for q in range(dfa.n_states):
        for j, lbl in enumerate(dfa.alphabet):
            reach[q, label_masks[:, j], dfa.delta[(q, lbl)]] = True
    return reach


def pessimistic_value_vector(values_slice: np.ndarray, reach_q: np.ndarray) -> np.ndarray:
    """Per successor cell, the worst value over its reachable monitor states,
    with the SINK entry pinned to 1. values_slice is (n_cells+1, n_q)."""
    n_cells = reach_q.shape[0]
    w = np.empty(n_cells + 1)
    w[:n_cells] = np.where(reach_q, values_slice[:n_cells, :], -1.0).max(axis=1)
    w[n_cells] = 1.0
    return w


@dataclass
class ValueTables:
    """Value slices, time-indexed policy and the cached inner Bellman tables.

    values[n] is the violation value with n steps remaining; lookahead[n] is
    max over adversary inputs of the expected successor value (the quantity
    the Bellman minimum ranges over), stored for non-accepting monitor states
    only, in nonf_states order.
    """

    values: np.ndarray           # (H+1, n_cells+1, n_q) float64, sink row last
    policy: np.ndarray           # (H, n_cells+1, n_q) int32; slice j = time-to-go j+1
    horizon: int
    nonf_states: np.ndarray      # ascending indices of non-accepting monitor states
    delta: float
    n_u: int
    lookahead: np.ndarray = None  # (H, n_cells, n_u, n_nonf) or None
    nonf_pos: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.nonf_states = np.asarray(self.nonf_states, dtype=np.int64)
        self.nonf_pos = {int(q): i for i, q in enumerate(self.nonf_states)}

    @property
    def n_cells(self) -> int:
        return self.values.shape[1] - 1

    @property
    def n_q(self) -> int:
        return self.values.shape[2]

    def lookahead_entry(self, n: int, cell: int, iu: int, q: int) -> float:
        return float(self.lookahead[n, cell, iu, self.nonf_pos[q]])


def lookahead_bytes_estimate(grid: Grid, n_nonf: int, horizon: int) -> int:
    return horizon * grid.n_cells * grid.n_u * n_nonf * 8


def value_iteration(kernel, game, grid: Grid, spec, relation: RelationParams,
                    horizon: int = None, memory_cap_mb: float = 4096.0,
                    lookahead_memmap: str = None) -> ValueTables:
    """Backward minimax recursion; ties break to the lowest input index.

    Raises SizingError when the tables would exceed the memory cap; pass
    lookahead_memmap to spill the big table to disk instead.
    """
    H = spec.horizon if horizon is None else int(horizon)
    if H < 1:
        raise ConfigError("horizon must be >= 1")
    dfa = spec.dfa
    n_q = dfa.n_states
    n_cells, n_u, n_w = kernel.n_cells, kernel.n_u, kernel.n_w
    if n_cells != grid.n_cells or n_u != grid.n_u or n_w != grid.n_w:
        raise ConfigError("kernel dimensions do not match the grid")
    nonf = np.array([q for q in range(n_q) if not dfa.is_accepting(q)], dtype=np.int64)
    n_nonf = len(nonf)
    if n_nonf == 0:
        raise ConfigError("every monitor state is accepting; nothing to synthesize")

    need = ((H + 1) * (n_cells + 1) * n_q * 8 + H * (n_cells + 1) * n_q * 4
            + lookahead_bytes_estimate(grid, n_nonf, H))
    cap = int(memory_cap_mb * 1024 * 1024)
    if need > cap and lookahead_memmap is None:
        raise SizingError(
            f"value tables need {need / 1e6:.0f} MB "
            f"(H={H}, {n_cells + 1} rows, {n_q} monitor states, {n_u} inputs) "
            f"but the cap is {memory_cap_mb:.0f} MB; raise limits.value_memory_mb "
            "or spill the lookahead table to disk (lookahead_memmap)")

    outs = cell_outputs(grid, game)
    reach = build_reach_masks(outs, spec, relation.eps)

    values = np.zeros((H + 1, n_cells + 1, n_q))
    values[:, :, list(dfa.accepting)] = 1.0
    values[:, n_cells, :] = 1.0
    policy = np.zeros((H, n_cells + 1, n_q), dtype=np.int32)
    if lookahead_memmap is not None:
        lookahead = np.lib.format.open_memmap(
            lookahead_memmap, mode="w+", dtype=np.float64,
            shape=(H, n_cells, n_u, n_nonf))
    else:
        lookahead = np.empty((H, n_cells, n_u, n_nonf))

    t_flat = kernel.flat()
    delta = relation.delta
    w_stack = np.empty((n_cells + 1, n_nonf))
    for n in range(H):
        v_n = values[n]
        for j, q in enumerate(nonf):
            w_stack[:, j] = pessimistic_value_vector(v_n, reach[q])
        inner = (t_flat @ w_stack).reshape(n_cells, n_u, n_w, n_nonf)
        worst = inner.max(axis=2)
        np.clip(worst, 0.0, 1.0, out=worst)
        lookahead[n] = worst
        bellman = (1.0 - delta) * worst + delta
        v_next = values[n + 1]
        p_slice = policy[n]
        for j, q in enumerate(nonf):
            v_next[:n_cells, q] = bellman[:, :, j].min(axis=1)
            p_slice[:n_cells, q] = bellman[:, :, j].argmin(axis=1)
    return ValueTables(values=values, policy=policy, horizon=H, nonf_states=nonf,
                       delta=delta, n_u=n_u, lookahead=lookahead)


def recompute_lookahead(kernel, game, grid: Grid, spec, relation: RelationParams,
                        tables: ValueTables) -> None:
    """Rebuild the lookahead cache from persisted value slices, in place."""
    outs = cell_outputs(grid, game)
    reach = build_reach_masks(outs, spec, relation.eps)
    H = tables.horizon
    n_cells, n_u, n_w = kernel.n_cells, kernel.n_u, kernel.n_w
    nonf = tables.nonf_states
    t_flat = kernel.flat()
    lookahead = np.empty((H, n_cells, n_u, len(nonf)))
    w_stack = np.empty((n_cells + 1, len(nonf)))
    for n in range(H):
        for j, q in enumerate(nonf):
            w_stack[:, j] = pessimistic_value_vector(tables.values[n], reach[q])
        inner = (t_flat @ w_stack).reshape(n_cells, n_u, n_w, len(nonf))
        worst = inner.max(axis=2)
        np.clip(worst, 0.0, 1.0, out=worst)
        lookahead[n] = worst
    tables.lookahead = lookahead


def compute_qbar(tables: ValueTables, n: int, reach: np.ndarray, q: int) -> np.ndarray:
    """Pessimistic successor monitor state per cell at slice n (ties: lowest)."""
    n_cells = tables.n_cells
    masked = np.where(reach[q], tables.values[n][:n_cells, :], -1.0)
    return masked.argmax(axis=1)


def advisor_input(tables: ValueTables, cell: int, q: int, k: int) -> int:
    """Policy lookup at runtime step k (time-to-go H-k); returns an input index."""
    if k >= tables.horizon or k < 0:
        raise HorizonError(f"step {k} outside the synthesis horizon {tables.horizon}")
    return int(tables.policy[tables.horizon - k - 1][cell, q])


def refine(relation: RelationParams, x, x_hat_rep, u_hat, u_bounds) -> np.ndarray:
    """Concrete input K (x - x_hat) + u_hat; must land in U up to 1e-9."""
    x = np.asarray(x, dtype=float).reshape(-1)
    rep = np.asarray(x_hat_rep, dtype=float).reshape(-1)
    if not check_relation_membership(relation, x, rep):
        raise RelationInfeasibleError("refine called with an unrelated state pair")
    u = relation.K @ (x - rep) + np.atleast_1d(np.asarray(u_hat, dtype=float))
    lo, hi = u_bounds[:, 0], u_bounds[:, 1]
    if np.any(u < lo - CLAMP_TOL) or np.any(u > hi + CLAMP_TOL):
        raise InterfaceInfeasibleError(
            f"refined input {u} leaves U {u_bounds.tolist()} by more than {CLAMP_TOL}; "
            "relation parameters do not guarantee admissibility")
    return np.clip(u, lo, hi)


def related_cell(grid: Grid, relation: RelationParams, x) -> int:
    """Cell whose representative is related to x; searches the 3^s neighborhood
    of the containing cell if the center itself is too far."""
    x = np.asarray(x, dtype=float).reshape(-1)
    idx = try_quantize_state(grid, x)
    if idx != SINK and check_relation_membership(relation, x, grid.centers[idx]):
        return idx
    candidates = []
    if idx != SINK:
        multi = np.array(np.unravel_index(idx, grid.x_counts))
        s = grid.state_dim
        for offset in np.ndindex(*([3] * s)):
            cand = multi + np.array(offset) - 1
            if np.any(cand < 0) or np.any(cand >= grid.x_counts):
                continue
            flat = int(np.ravel_multi_index(cand, grid.x_counts))
            d = relation.m_norm(x - grid.centers[flat])
            if d <= relation.eps + 1e-12:
                candidates.append((d, flat))
    if not candidates:
        raise RelationInfeasibleError(
            f"no abstract cell is related to x={x.tolist()} (eps={relation.eps})")
    candidates.sort(key=lambda t: (t[0], t[1]))
    return candidates[0][1]


def advisor_guarantee(tables: ValueTables, grid: Grid, game, spec,
                      relation: RelationParams, x0) -> float:
    """Upper bound on the violation probability when the fallback controller
    runs alone from x0 over the full horizon."""
    from .automata import dfa_step, label
    from .game import scalar_output
    cell = related_cell(grid, relation, x0)
    q0 = dfa_step(spec.dfa, spec.dfa.q0, label(spec.labelling, scalar_output(game, x0)))
    return float(tables.values[tables.horizon][cell, q0])


# ---------------------------------------------------------------------------
# Persistence: "SVVT" value/policy file and "SVLA" lookahead sidecar
# ---------------------------------------------------------------------------

def save_tables(tables: ValueTables, path) -> None:
    n_rows = tables.n_cells + 1
    header = struct.pack("<4sIIIII", TABLES_MAGIC, TABLES_VERSION,
                         n_rows, tables.n_q, tables.n_u, tables.horizon)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(struct.pack("<d", tables.delta))
        fh.write(np.uint32(len(tables.nonf_states)).tobytes())
        fh.write(tables.nonf_states.astype("<u4").tobytes())
        fh.write(np.ascontiguousarray(tables.values, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(tables.policy, dtype="<i4").tobytes())


def read_tables_header(path) -> dict:
    with open(path, "rb") as fh:
        magic, version, n_rows, n_q, n_u, horizon = struct.unpack("<4sIIIII", fh.read(24))
        if magic != TABLES_MAGIC:
            raise ConfigError(f"{path}: not a value-table file (bad magic {magic!r})")
        if version != TABLES_VERSION:
            raise ConfigError(f"{path}: unsupported version {version}")
        (delta,) = struct.unpack("<d", fh.read(8))
        (n_nonf,) = struct.unpack("<I", fh.read(4))
        nonf = np.frombuffer(fh.read(4 * n_nonf), dtype="<u4").astype(np.int64)
    return {"n_rows": n_rows, "n_q": n_q, "n_u": n_u, "horizon": horizon,
            "delta": delta, "nonf_states": nonf}


def load_tables(path) -> ValueTables:
    hdr = read_tables_header(path)
    n_rows, n_q, H = hdr["n_rows"], hdr["n_q"], hdr["horizon"]
    offset = 24 + 8 + 4 + 4 * len(hdr["nonf_states"])
    with open(path, "rb") as fh:
        fh.seek(offset)
        values = np.frombuffer(fh.read(8 * (H + 1) * n_rows * n_q), dtype="<f8")
        policy = np.frombuffer(fh.read(4 * H * n_rows * n_q), dtype="<i4")
    if values.size != (H + 1) * n_rows * n_q or policy.size != H * n_rows * n_q:
        raise ConfigError(f"{path}: truncated value-table file")
    return ValueTables(values=values.reshape(H + 1, n_rows, n_q).copy(),
                       policy=policy.reshape(H, n_rows, n_q).copy(),
                       horizon=H, nonf_states=hdr["nonf_states"], delta=hdr["delta"],
                       n_u=hdr["n_u"])


def save_lookahead(tables: ValueTables, path) -> None:
    if tables.lookahead is None:
        raise ConfigError("no lookahead table to save")
    H, n_cells, n_u, n_nonf = tables.lookahead.shape
    header = struct.pack("<4sIIIII", LOOKAHEAD_MAGIC, TABLES_VERSION,
                         n_cells, n_u, n_nonf, H)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(tables.nonf_states.astype("<u4").tobytes())
        fh.write(np.ascontiguousarray(tables.lookahead, dtype="<f8").tobytes())


def load_lookahead(path, tables: ValueTables) -> bool:
    """Attach a persisted lookahead cache if it matches the tables; returns success."""
    try:
        with open(path, "rb") as fh:
            magic, version, n_cells, n_u, n_nonf, H = struct.unpack("<4sIIIII", fh.read(24))
            if magic != LOOKAHEAD_MAGIC or version != TABLES_VERSION:
                return False
            nonf = np.frombuffer(fh.read(4 * n_nonf), dtype="<u4").astype(np.int64)
            if H != tables.horizon or n_cells != tables.n_cells \
                    or not np.array_equal(nonf, tables.nonf_states):
                return False
            data = np.fromfile(fh, dtype="<f8")
    except (OSError, struct.error):
        return False
    if data.size != H * n_cells * n_u * n_nonf:
        return False
    tables.lookahead = data.reshape(H, n_cells, n_u, n_nonf)
    return True
