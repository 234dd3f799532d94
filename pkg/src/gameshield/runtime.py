"""Execution loop tying plant, abstraction, monitor and gate together.

Each step: the gate decides on the proposed input, the plant moves, the noise
realization is recovered from the observed successor (so the abstract twin
can be driven by the very same noise), the abstract state is propagated with
the recorded companion input and the nearest abstract adversary input, and
the monitor consumes the new output. Episodes stop at the first monitor
acceptance (the property is already violated) or at the horizon.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .abstraction import (SINK, check_relation_membership, nearest_abstract_adversary,
                          try_quantize_state)
from .advisor import related_cell
from .automata import dfa_step, label
from .errors import DomainError, GameshieldError
from .game import in_box, scalar_output
from .supervisor import ACCEPT, Decision, REJECT_RELATION, REJECT_RISK

MODE_SAFEVISOR = "safevisor"
MODE_BASELINE = "baseline"
MODE_ADVISOR = "advisor"

VERDICT_ADVISOR = "advisor"   # advisor-only mode has no proposals to judge
VERDICT_BASELINE = "baseline"


@dataclass
class AugmentedState:
    """Shared memory of gate and fallback controller.

    cell is the abstract twin's cell index or SINK once the relation is lost;
    c1 always equals the running product C1(k) for the stored step index k.
    """

    x: np.ndarray
    cell: int
    q: int
    iu_last: int
    w_last: float
    c1: float
    k: int


@dataclass
class StepRecord:
    k: int
    y: float
    q: int
    u_uc: float
    verdict: str
    u_applied: float
    w: float
    e_pv: float
    latency_us: float
    malformed: bool = False


@dataclass
class EpisodeTrace:
    seed_entropy: int
    episode_index: int
    mode: str
    records: list = field(default_factory=list)
    violated: bool = False
    steps: int = 0
    accepted: int = 0
    rejected_risk: int = 0
    rejected_relation: int = 0
    malformed: int = 0
    relation_violations: int = 0
    sink_entries: int = 0
    latency_sum_us: float = 0.0
    latency_sumsq_us: float = 0.0

    @property
    def decisions(self) -> int:
        return self.accepted + self.rejected_risk + self.rejected_relation

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.decisions if self.decisions else 0.0


def init_augmented(game, grid, relation, spec, x0) -> AugmentedState:
    """Anchor the abstract twin, consume the initial output, start C1 at 1."""
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if not in_box(x0, game.x_bounds):
        raise DomainError(f"initial state {x0.tolist()} outside the state box")
    cell = related_cell(grid, relation, x0)
    q = dfa_step(spec.dfa, spec.dfa.q0, label(spec.labelling, scalar_output(game, x0)))
    return AugmentedState(x=x0, cell=cell, q=q, iu_last=-1, w_last=np.nan, c1=1.0, k=0)


def recover_noise(game, x, u, w, x_next) -> np.ndarray:
    """Invert the plant equation for the realized noise sample."""
    x = np.asarray(x, dtype=float).reshape(-1)
    x_next = np.asarray(x_next, dtype=float).reshape(-1)
    if x.shape != x_next.shape or x.shape[0] != game.state_dim:
        raise DomainError("state dimension mismatch in noise recovery")
    residual = (x_next - game.A @ x - game.B @ np.atleast_1d(np.asarray(u, dtype=float))
                - game.D @ np.atleast_1d(np.asarray(w, dtype=float)))
    return game.R_inv @ residual


def propagate_abstract(game, grid, cell: int, iu: int, iw: int, noise) -> int:
    """Quantized successor of the abstract twin under a given noise sample."""
    if cell == SINK:
        raise ValueError("cannot propagate from SINK")
    mean = (game.A @ grid.centers[cell]
            + game.B @ np.array([grid.u_hat_values[iu]])
            + game.D @ np.array([grid.w_values[iw]])
            + game.R_noise @ np.asarray(noise, dtype=float).reshape(-1))
    return try_quantize_state(grid, mean)


@dataclass
class StepContext:
    k: int
    x: np.ndarray
    y: float
    q: int
    rng: np.random.Generator
    u_safe_fn: object = None  # () -> float, the fallback's refined input


def run_step(sup, aug: AugmentedState, u_uc_provider, w_provider, noise_source,
             trace: EpisodeTrace = None, strict_relation: bool = False,
             record: bool = True):
    """One gated step; returns (new AugmentedState, StepRecord)."""
    game, grid, spec = sup.game, sup.grid, sup.spec
    x = aug.x
    y = float(game.C_out[0] @ x)
    u_uc = float(u_uc_provider(aug.k, x, y, aug.q))
    malformed = False
    try:
        decision = sup.decide(aug, u_uc)
    except DomainError:
        malformed = True
        if aug.cell == SINK:
            u0 = np.clip(np.zeros(game.input_dim), game.u_bounds[:, 0], game.u_bounds[:, 1])
            decision = Decision(REJECT_RELATION, u0, -1, None, 0.0)
        else:
            iu_c, u_safe = sup.advisor_action(x, aug.cell, aug.q, aug.k)
            decision = Decision(REJECT_RELATION, u_safe, iu_c, None, 0.0)
    u_apply = decision.u_applied
    w = float(w_provider(aug.k, x, float(u_apply[0])))
    noise = noise_source()
    x_next = (game.A @ x + game.B @ u_apply + game.D @ np.array([w])
              + game.R_noise @ noise)
    noise_rec = recover_noise(game, x, u_apply, np.array([w]), x_next)

    relation_violation = False
    if aug.cell != SINK and decision.u_hat_companion >= 0:
        c1_next = aug.c1 * sup.c1_factor(aug.cell, decision.u_hat_companion, aug.q)
        iw = nearest_abstract_adversary(grid, w)
        cell_next = propagate_abstract(game, grid, aug.cell, decision.u_hat_companion,
                                       iw, noise_rec)
        if cell_next != SINK:
            if not check_relation_membership(sup.relation, x_next, grid.centers[cell_next]):
                relation_violation = True
                if strict_relation:
                    raise GameshieldError(
                        "relation membership lost after a gated step; "
                        "unsound relation parameters or kernel")
    else:
        c1_next = aug.c1
        cell_next = SINK
    q_next = dfa_step(spec.dfa, aug.q,
                      label(spec.labelling, float(game.C_out[0] @ x_next)))

    rec = StepRecord(k=aug.k, y=y, q=aug.q, u_uc=u_uc, verdict=decision.verdict,
                     u_applied=float(u_apply[0]), w=w, e_pv=decision.e_pv,
                     latency_us=decision.elapsed_us, malformed=malformed)
    if trace is not None:
        _account(trace, rec, cell_next, relation_violation, record)
    new_aug = AugmentedState(x=x_next, cell=cell_next, q=q_next,
                             iu_last=decision.u_hat_companion, w_last=w,
                             c1=c1_next, k=aug.k + 1)
    return new_aug, rec


def _account(trace: EpisodeTrace, rec: StepRecord, cell_next: int,
             relation_violation: bool, record: bool) -> None:
    trace.steps += 1
    if rec.verdict == ACCEPT:
        trace.accepted += 1
    elif rec.verdict == REJECT_RISK:
        trace.rejected_risk += 1
    elif rec.verdict == REJECT_RELATION:
        trace.rejected_relation += 1
    if rec.malformed:
        trace.malformed += 1
    if relation_violation:
        trace.relation_violations += 1
    if cell_next == SINK:
        trace.sink_entries += 1
    trace.latency_sum_us += rec.latency_us
    trace.latency_sumsq_us += rec.latency_us ** 2
    if record:
        trace.records.append(rec)


def run_episode(sup, x0, controller, adversary, seed_entropy: int, episode_index: int,
                horizon: int = None, mode: str = MODE_SAFEVISOR,
                strict_relation: bool = False, collect_records: bool = True) -> EpisodeTrace:
    """Run up to `horizon` gated steps from x0 with per-episode noise streams."""
    game, grid, spec, relation = sup.game, sup.grid, sup.spec, sup.relation
    H = sup.tables.horizon if horizon is None else int(horizon)
    ss = np.random.SeedSequence(entropy=seed_entropy, spawn_key=(episode_index,))
    rng_noise, rng_ctrl, rng_adv = [np.random.default_rng(c) for c in ss.spawn(3)]
    trace = EpisodeTrace(seed_entropy=seed_entropy, episode_index=episode_index, mode=mode)

    if mode == MODE_BASELINE:
        _run_ungated(sup, x0, controller, adversary, rng_noise, rng_ctrl, rng_adv,
                     H, trace, collect_records)
        return trace

    aug = init_augmented(game, grid, relation, spec, x0)
    if spec.dfa.is_accepting(aug.q):
        trace.violated = True
        return trace
    s = game.state_dim

    def u_safe_now(k, x, q):
        if aug.cell == SINK:
            return float(np.clip(0.0, game.u_bounds[0, 0], game.u_bounds[0, 1]))
        return float(sup.advisor_action(x, aug.cell, q, k)[1][0])

    def u_provider(k, x, y, q):
        if mode == MODE_ADVISOR:
            return np.nan  # unused
        ctx = StepContext(k=k, x=x, y=y, q=q, rng=rng_ctrl,
                          u_safe_fn=lambda: u_safe_now(k, x, q))
        return controller(ctx)

    def w_provider(k, x, u_applied):
        return adversary(StepContext(k=k, x=x, y=np.nan, q=aug.q, rng=rng_adv), u_applied)

    def noise_source():
        return rng_noise.standard_normal(s)

    for _ in range(H):
        if mode == MODE_ADVISOR:
            aug, rec = _advisor_step(sup, aug, w_provider, noise_source, trace,
                                     strict_relation, collect_records)
        else:
            aug, rec = run_step(sup, aug, u_provider, w_provider, noise_source,
                                trace, strict_relation, collect_records)
        if spec.dfa.is_accepting(aug.q):
            trace.violated = True
            break
    return trace


def _advisor_step(sup, aug, w_provider, noise_source, trace, strict_relation, record):
    """Fallback-only stepping (the degenerate eta=0 behavior)."""
    game, grid, spec = sup.game, sup.grid, sup.spec
    x = aug.x
    y = float(game.C_out[0] @ x)
    if aug.cell == SINK:
        u_apply = np.clip(np.zeros(game.input_dim), game.u_bounds[:, 0], game.u_bounds[:, 1])
        iu_c = -1
    else:
        iu_c, u_apply = sup.advisor_action(x, aug.cell, aug.q, aug.k)
    w = float(w_provider(aug.k, x, float(u_apply[0])))
    noise = noise_source()
    x_next = (game.A @ x + game.B @ u_apply + game.D @ np.array([w])
              + game.R_noise @ noise)
    noise_rec = recover_noise(game, x, u_apply, np.array([w]), x_next)
    relation_violation = False
    if aug.cell != SINK:
        c1_next = aug.c1 * sup.c1_factor(aug.cell, iu_c, aug.q)
        iw = nearest_abstract_adversary(grid, w)
        cell_next = propagate_abstract(game, grid, aug.cell, iu_c, iw, noise_rec)
        if cell_next != SINK and not check_relation_membership(
                sup.relation, x_next, grid.centers[cell_next]):
            relation_violation = True
            if strict_relation:
                raise GameshieldError("relation membership lost on an advisor step")
    else:
        c1_next = aug.c1
        cell_next = SINK
    q_next = dfa_step(spec.dfa, aug.q, label(spec.labelling, float(game.C_out[0] @ x_next)))
    rec = StepRecord(k=aug.k, y=y, q=aug.q, u_uc=np.nan, verdict=VERDICT_ADVISOR,
                     u_applied=float(u_apply[0]), w=w, e_pv=None, latency_us=0.0)
    if trace is not None:
        _account(trace, rec, cell_next, relation_violation, record)
    return AugmentedState(x=x_next, cell=cell_next, q=q_next, iu_last=iu_c,
                          w_last=w, c1=c1_next, k=aug.k + 1), rec


def _run_ungated(sup, x0, controller, adversary, rng_noise, rng_ctrl, rng_adv,
                 H, trace, record):
    """Raw controller with no gate: the contrast baseline."""
    game, spec = sup.game, sup.spec
    x = np.asarray(x0, dtype=float).reshape(-1)
    q = dfa_step(spec.dfa, spec.dfa.q0, label(spec.labelling, scalar_output(game, x)))
    if spec.dfa.is_accepting(q):
        trace.violated = True
        return
    lo, hi = game.u_bounds[:, 0], game.u_bounds[:, 1]
    for k in range(H):
        y = float(game.C_out[0] @ x)
        q_before = q
        ctx = StepContext(k=k, x=x, y=y, q=q, rng=rng_ctrl, u_safe_fn=None)
        u_uc = float(controller(ctx))
        u = np.clip(np.array([u_uc]), lo, hi)
        w = float(adversary(StepContext(k=k, x=x, y=np.nan, q=q, rng=rng_adv), float(u[0])))
        noise = rng_noise.standard_normal(game.state_dim)
        x = game.A @ x + game.B @ u + game.D @ np.array([w]) + game.R_noise @ noise
        q = dfa_step(spec.dfa, q, label(spec.labelling, float(game.C_out[0] @ x)))
        rec = StepRecord(k=k, y=y, q=q_before, u_uc=u_uc, verdict=VERDICT_BASELINE,
                         u_applied=float(u[0]), w=w, e_pv=None, latency_us=0.0)
        _account(trace, rec, 0, False, record)
        if spec.dfa.is_accepting(q):
            trace.violated = True
            break
