import numpy as np
import pytest

from gameshield.abstraction import SINK, nearest_abstract_adversary
from gameshield.advisor import value_iteration
from gameshield.automata import dfa_step, label
from gameshield.controllers import (advisor_mimic_controller, constant_adversary,
                                    uniform_random_adversary,
                                    uniform_random_controller)
from gameshield.errors import DomainError, RelationInfeasibleError
from gameshield.runtime import (init_augmented, propagate_abstract, recover_noise,
                                run_episode, run_step)
from gameshield.supervisor import SupervisorRuntime

from conftest import toy_path
from gameshield.oracle import load_instance


@pytest.fixture(scope="module")
def small_sup(quad_game, small_grid, small_spec, small_relation, small_kernel,
              small_tables):
    return SupervisorRuntime(quad_game, small_grid, small_spec, small_relation,
                             small_kernel, small_tables, eta=0.01)


def test_init_augmented_tie_rule(quad_game, quad_grid, quad_relation, band_spec):
    aug = init_augmented(quad_game, quad_grid, quad_relation, band_spec, [0.2, 0.2])
    assert quad_grid.centers[aug.cell] == pytest.approx([0.19, 0.19])
    assert aug.q == 0           # y(0) = 0.2 labels p1, staying in the live state
    assert aug.c1 == 1.0 and aug.k == 0


def test_init_augmented_center_exact(quad_game, quad_grid, quad_relation, band_spec):
    aug = init_augmented(quad_game, quad_grid, quad_relation, band_spec, [0.01, 0.01])
    assert quad_grid.centers[aug.cell] == pytest.approx([0.01, 0.01])


def test_init_outside_box_raises(quad_game, quad_grid, quad_relation, band_spec):
    with pytest.raises(DomainError):
        init_augmented(quad_game, quad_grid, quad_relation, band_spec, [0.7, 0.0])


def test_recover_noise_roundtrip(quad_game):
    rng = np.random.default_rng(1)
    for _ in range(50):
        x = rng.uniform(-0.4, 0.4, size=2)
        u, w = rng.uniform(-2.5, 2.5), rng.uniform(-0.6, 0.6)
        noise = rng.standard_normal(2)
        x_next = (quad_game.A @ x + quad_game.B @ [u] + quad_game.D @ [w]
                  + quad_game.R_noise @ noise)
        back = recover_noise(quad_game, x, u, w, x_next)
        assert back == pytest.approx(noise, abs=1e-10)
    assert recover_noise(quad_game, [0.1, 0.1], 0.0, 0.0,
                         quad_game.A @ [0.1, 0.1]) == pytest.approx([0, 0], abs=1e-12)


def test_recover_noise_shape_mismatch(quad_game):
    with pytest.raises(DomainError):
        recover_noise(quad_game, [0.1], 0.0, 0.0, [0.1, 0.2])


def test_propagate_zero_dynamics_fixed_point():
    from gameshield.game import LinearGaussianGame
    from gameshield.abstraction import build_grid
    game = LinearGaussianGame(A=[[0.0]], B=[[0.0]], D=[[0.0]], C_out=[[1.0]],
                              R_noise=[[1.0]], x_bounds=[[-1, 1]],
                              u_bounds=[[-1, 1]], w_bounds=[[-1, 1]])
    grid = build_grid([[-1, 1]], [2.0], [[-1, 1]], 2, (-1, 1), [[-1, 1]], 2)
    assert propagate_abstract(game, grid, 0, 0, 0, [0.0]) == 0


def test_propagate_to_sink(quad_game, quad_grid):
    # huge noise kick leaves the box
    assert propagate_abstract(quad_game, quad_grid, 0, 0, 0, [0.0, 100.0]) == SINK


def test_propagate_distribution_matches_kernel_row(quad_game, small_grid,
                                                   small_kernel):
    rng = np.random.default_rng(123)
    cell, iu, iw = 205, 1, 3
    n = 20000
    counts = np.zeros(small_grid.n_cells + 1)
    for _ in range(n):
        nxt = propagate_abstract(quad_game, small_grid, cell, iu, iw,
                                 rng.standard_normal(2))
        counts[nxt if nxt != SINK else small_grid.n_cells] += 1
    freq = counts / n
    row = small_kernel.T[cell, iu, iw]
    # three-sigma binomial envelope per successor
    sig = np.sqrt(np.maximum(row * (1 - row), 1e-12) / n)
    assert np.all(np.abs(freq - row) <= 3.5 * sig + 1e-9)


def test_run_step_advisor_equivalence(small_sup, quad_game):
    # proposing exactly the fallback input leaves the trajectory unchanged
    adv = uniform_random_adversary(-0.6, 0.6)
    mimic = advisor_mimic_controller()
    tr_m = run_episode(small_sup, [0.2, 0.2], mimic, adv, 42, 0,
                       strict_relation=True)
    tr_a = run_episode(small_sup, [0.2, 0.2], mimic, adv, 42, 0, mode="advisor",
                       strict_relation=True)
    assert [r.y for r in tr_m.records] == [r.y for r in tr_a.records]
    assert [r.u_applied for r in tr_m.records] == [r.u_applied for r in tr_a.records]


def test_run_step_marks_violation(small_sup):
    # start at the band edge with a hostile constant adversary and tiny budget
    inst_ctrl = uniform_random_controller(-2.5, 2.5)
    adv = constant_adversary(0.6)
    violated = 0
    for i in range(40):
        tr = run_episode(small_sup, [0.46, 0.38], inst_ctrl, adv, 9, i,
                         mode="baseline")
        violated += tr.violated
        if tr.violated:
            assert tr.steps <= small_sup.tables.horizon
    assert violated > 0


def test_run_episode_empty_horizon(small_sup):
    ctrl = uniform_random_controller(-2.5, 2.5)
    adv = uniform_random_adversary(-0.6, 0.6)
    tr = run_episode(small_sup, [0.2, 0.2], ctrl, adv, 5, 0, horizon=0)
    assert tr.steps == 0 and not tr.violated


def test_unsatisfiable_monitor_never_violates(quad_game, small_grid, small_relation,
                                              small_kernel):
    # monitor whose accepting state is unreachable: every run is safe
    from gameshield.automata import Dfa, IntervalLabelling, IntervalPiece, SafetySpec
    dfa = Dfa(states=("q0", "q1"), q0=0, alphabet=("a",),
              delta={(0, "a"): 0, (1, "a"): 1}, accepting=frozenset({1}))
    lab = IntervalLabelling(pieces=(
        IntervalPiece("a", float("-inf"), float("inf"), False, False),))
    spec = SafetySpec(dfa=dfa, labelling=lab, horizon=30)
    tables = value_iteration(small_kernel, quad_game, small_grid, spec,
                             small_relation)
    sup = SupervisorRuntime(quad_game, small_grid, spec, small_relation,
                            small_kernel, tables, eta=0.01)
    ctrl = uniform_random_controller(-2.5, 2.5)
    adv = uniform_random_adversary(-0.6, 0.6)
    for i in range(20):
        tr = run_episode(sup, [0.2, 0.2], ctrl, adv, 77, i)
        assert not tr.violated


def test_trace_determinism_and_dfa_replay(small_sup, small_spec):
    ctrl = uniform_random_controller(-2.5, 2.5)
    adv = uniform_random_adversary(-0.6, 0.6)
    tr1 = run_episode(small_sup, [0.2, 0.2], ctrl, adv, 31, 4)
    tr2 = run_episode(small_sup, [0.2, 0.2], ctrl, adv, 31, 4)
    assert [(r.y, r.u_uc, r.u_applied, r.w, r.verdict, r.e_pv) for r in tr1.records] \
        == [(r.y, r.u_uc, r.u_applied, r.w, r.verdict, r.e_pv) for r in tr2.records]

    # the recorded monitor states replay exactly from the recorded outputs
    q = small_spec.dfa.q0
    for rec in tr1.records:
        q = dfa_step(small_spec.dfa, q, label(small_spec.labelling, rec.y))
        assert rec.q == q


def test_c1_trace_matches_offline_recompute(small_sup, quad_game, small_grid,
                                            small_relation, small_spec, small_kernel):
    # re-run a short horizon while capturing augmented states step by step
    from gameshield.runtime import init_augmented
    from gameshield.supervisor import c1_update
    from gameshield.abstraction import safe_abstract_states
    rng_ctrl = np.random.default_rng(3)
    safe_sets = {q: safe_abstract_states(small_grid, quad_game, small_spec,
                                         small_relation, q)
                 for q in range(small_spec.dfa.n_states)}
    aug = init_augmented(quad_game, small_grid, small_relation, small_spec, [0.2, 0.2])
    noise_rng = np.random.default_rng(17)
    c1_offline = 1.0
    history = []
    for k in range(25):
        u_uc = float(rng_ctrl.uniform(-2.5, 2.5))
        aug_next, rec = run_step(small_sup, aug,
                                 lambda kk, x, y, q: u_uc,
                                 lambda kk, x, u: 0.1,
                                 lambda: noise_rng.standard_normal(2))
        history.append((aug.cell, aug_next.iu_last, aug.q))
        aug = aug_next
    for cell, iu, q in history:
        c1_offline = c1_update(c1_offline, small_kernel, safe_sets, cell, iu, q,
                               small_relation.delta)
    assert aug.c1 == pytest.approx(c1_offline, abs=1e-12)
    assert aug.c1 <= 1.0 + 1e-15


def test_scripted_out_of_range_counts_malformed(small_sup):
    from gameshield.controllers import scripted_controller
    ctrl = scripted_controller([0.0, 7.5] + [0.0] * 38)  # 7.5 is outside U
    adv = uniform_random_adversary(-0.6, 0.6)
    tr = run_episode(small_sup, [0.2, 0.2], ctrl, adv, 1, 0)
    assert tr.malformed == 1
    # the malformed step was rejected, not applied
    bad = [r for r in tr.records if r.malformed]
    assert len(bad) == 1 and bad[0].u_uc == 7.5 and bad[0].u_applied != 7.5


def test_relation_maintained_over_supervised_steps(small_sup):
    ctrl = uniform_random_controller(-2.5, 2.5)
    adv = uniform_random_adversary(-0.6, 0.6)
    total = 0
    for i in range(50):
        tr = run_episode(small_sup, [0.2, 0.2], ctrl, adv, 1234, i,
                         strict_relation=True, collect_records=False)
        total += tr.steps
        assert tr.relation_violations == 0
    assert total >= 1500
