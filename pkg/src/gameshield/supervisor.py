"""Online gate deciding whether an unverified input may be applied.

Per step: (1) find the abstract companion inputs under which applying the
proposed input provably keeps the state related to its abstract twin for
every adversary move (a noise-free quadratic-form test, since both twins are
driven by the same recovered noise); (2) estimate the end-to-end violation
probability from the running product C1 (past steps) and the one-step
lookahead C2 (future under the fallback controller) and accept only while
the configured budget eta is respected.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .abstraction import SINK, safe_abstract_states
from .advisor import (advisor_input, build_reach_masks, pessimistic_value_vector,
                      recompute_lookahead, refine)
from .abstraction import cell_outputs
from .errors import DomainError, HorizonError
from .game import in_box

ACCEPT = "accept"
REJECT_RELATION = "reject-relation"
REJECT_RISK = "reject-risk"

COMPANION_MAX_SAFETY = "max-safety"
COMPANION_MAX_RISK = "max-risk"

FEAS_TOL = 1e-12


@dataclass
class Decision:
    verdict: str
    u_applied: np.ndarray
    u_hat_companion: int  # abstract input recorded into the augmented state
    e_pv: float           # None on reject-relation
    elapsed_us: float

    @property
    def accepted(self) -> bool:
        return self.verdict == ACCEPT


def feasible_abstract_inputs(game, grid, relation, x, cell: int, u_uc) -> np.ndarray:
    """Indices of abstract inputs passing ||A(x-x_hat)+B(u_uc-u_hat)||_M <= eps-gamma."""
    u_uc = np.atleast_1d(np.asarray(u_uc, dtype=float))
    if not in_box(u_uc, game.u_bounds):
        raise DomainError(f"unverified input {u_uc} outside U")
    x = np.asarray(x, dtype=float).reshape(-1)
    rep = grid.centers[cell]
    base = game.A @ (x - rep) + game.B @ u_uc
    offsets = grid.u_hat_values[:, None] * game.B[:, 0][None, :]
    vecs = base[None, :] - offsets
    norms = relation.m_norm_rows(vecs)
    margin = relation.eps - relation.gamma
    return np.flatnonzero(norms <= margin + FEAS_TOL)


def c1_step_factor(kernel, safe_set: np.ndarray, cell: int, iu: int, delta: float) -> float:
    """(1-delta) * min over adversary inputs of the mass staying in the safe set."""
    block = kernel.T[cell, iu]  # (n_w, n_cells+1)
    if safe_set.size == 0:
        return 0.0
    mass = block[:, safe_set].sum(axis=1)
    return (1.0 - delta) * float(mass.min())


def c1_update(c1_prev: float, kernel, safe_sets: dict, cell_prev: int, iu_prev: int,
              q_prev: int, delta: float) -> float:
    """One multiplicative step of the running product; C1(0) = 1 by convention."""
    return c1_prev * c1_step_factor(kernel, safe_sets[q_prev], cell_prev, iu_prev, delta)


def c2_lookahead(kernel, tables, game, grid, spec, relation, cell: int, q: int,
                 iu: int, k: int, reach: np.ndarray = None) -> float:
    """(1-delta)(1 - worst-case expected successor value) from the kernel row.

    Reference single-configuration computation; the runtime uses the cached
    per-step tables, which tests cross-check against this form.
    """
    if not (0 <= k < tables.horizon):
        raise HorizonError(f"step {k} outside horizon {tables.horizon}")
    if spec.dfa.is_accepting(q):
        raise ValueError("lookahead queried at an accepting monitor state")
    n = tables.horizon - k - 1
    if reach is None:
        reach = build_reach_masks(cell_outputs(grid, game), spec, relation.eps)
    w = pessimistic_value_vector(tables.values[n], reach[q])
    inner = kernel.T[cell, iu] @ w  # (n_w,)
    worst = min(max(float(inner.max()), 0.0), 1.0)
    return (1.0 - tables.delta) * (1.0 - worst)


class SupervisorRuntime:
    """Precomputed tables making a single decision a handful of lookups."""

    def __init__(self, game, grid, spec, relation, kernel, tables,
                 eta: float, companion_mode: str = COMPANION_MAX_SAFETY):
        if companion_mode not in (COMPANION_MAX_SAFETY, COMPANION_MAX_RISK):
            raise ValueError(f"unknown companion mode {companion_mode!r}")
        self.game = game
        self.grid = grid
        self.spec = spec
        self.relation = relation
        self.kernel = kernel
        self.tables = tables
        self.eta = float(eta)
        self.companion_mode = companion_mode
        if tables.lookahead is None:
            recompute_lookahead(kernel, game, grid, spec, relation, tables)
        n_q = spec.dfa.n_states
        self.safe_sets = {q: safe_abstract_states(grid, game, spec, relation, q)
                          for q in range(n_q)}
        mask = np.zeros((kernel.n_cells + 1, len(tables.nonf_states)))
        for j, q in enumerate(tables.nonf_states):
            mask[self.safe_sets[int(q)], j] = 1.0
        prod = (kernel.flat() @ mask).reshape(kernel.n_cells, kernel.n_u,
                                              kernel.n_w, len(tables.nonf_states))
        self.c1_table = (1.0 - tables.delta) * prod.min(axis=2)
        # pull loop-hot attributes to plain locals-friendly fields
        self._u_hat = grid.u_hat_values
        self._b_col = game.B[:, 0]
        self._m = relation.M
        self._margin = relation.eps - relation.gamma

    def c1_factor(self, cell: int, iu: int, q: int) -> float:
        return float(self.c1_table[cell, iu, self.tables.nonf_pos[q]])

    def c2_value(self, cell: int, iu: int, q: int, k: int) -> float:
        n = self.tables.horizon - k - 1
        worst = self.tables.lookahead[n, cell, iu, self.tables.nonf_pos[q]]
        return (1.0 - self.tables.delta) * (1.0 - float(worst))

    def feasible_set(self, x, cell: int, u_uc) -> np.ndarray:
        base = self.game.A @ (np.asarray(x, dtype=float).reshape(-1)
                              - self.grid.centers[cell]) + self._b_col * float(u_uc)
        vecs = base[None, :] - self._u_hat[:, None] * self._b_col[None, :]
        norms = np.sqrt(np.einsum("ri,ij,rj->r", vecs, self._m, vecs))
        return np.flatnonzero(norms <= self._margin + FEAS_TOL)

    def select_companion(self, feasible: np.ndarray, cell: int, q: int, k: int) -> int:
        """Best companion in the feasible set; ties go to the lowest input index."""
        if feasible.size == 0:
            raise ValueError("companion requested with an empty feasible set")
        n = self.tables.horizon - k - 1
        worst = self.tables.lookahead[n, cell, feasible, self.tables.nonf_pos[q]]
        if self.companion_mode == COMPANION_MAX_SAFETY:
            pick = int(np.argmin(worst))   # min worst-value == max C2
        else:
            pick = int(np.argmax(worst))
        return int(feasible[pick])

    def advisor_action(self, x, cell: int, q: int, k: int):
        if cell < 0:
            raise ValueError("fallback requested after the abstract state was lost")
        iu = advisor_input(self.tables, cell, q, k)
        u = refine(self.relation, x, self.grid.centers[cell],
                   self._u_hat[iu], self.game.u_bounds)
        return iu, u

    def decide(self, aug, u_uc, k: int = None) -> Decision:
        """Definition-level decision rule over the current augmented state."""
        t0 = time.perf_counter_ns()
        k = aug.k if k is None else k
        if aug.cell == SINK:
            # relation already lost; no companion exists and no fallback can be
            # refined, so apply a neutral clamped-zero input (the violation
            # accounting already scored this path pessimistically)
            u0 = np.clip(np.zeros(self.game.input_dim),
                         self.game.u_bounds[:, 0], self.game.u_bounds[:, 1])
            return Decision(REJECT_RELATION, u0, -1, None,
                            (time.perf_counter_ns() - t0) / 1e3)
        u_uc = np.atleast_1d(np.asarray(u_uc, dtype=float))
        if not in_box(u_uc, self.game.u_bounds):
            raise DomainError(f"unverified input {u_uc} outside U")
        feasible = self.feasible_set(aug.x, aug.cell, float(u_uc[0]))
        if feasible.size == 0:
            iu_c, u_safe = self.advisor_action(aug.x, aug.cell, aug.q, k)
            return Decision(REJECT_RELATION, u_safe, iu_c, None,
                            (time.perf_counter_ns() - t0) / 1e3)
        iu_star = self.select_companion(feasible, aug.cell, aug.q, k)
        e_pv = 1.0 - aug.c1 * self.c2_value(aug.cell, iu_star, aug.q, k)
        if e_pv <= self.eta:
            return Decision(ACCEPT, u_uc, iu_star, e_pv,
                            (time.perf_counter_ns() - t0) / 1e3)
        iu_c, u_safe = self.advisor_action(aug.x, aug.cell, aug.q, k)
        return Decision(REJECT_RISK, u_safe, iu_c, e_pv,
                        (time.perf_counter_ns() - t0) / 1e3)
