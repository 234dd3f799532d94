import numpy as np
import pytest

from gameshield.advisor import value_iteration
from gameshield.errors import ConfigError, SizingError
from gameshield.oracle import (OracleInstance, build_product,
                               enumerate_markov_policies,
                               exhaustive_violation_bound_check, instance_from_dict,
                               load_instance, n_steps_reachable_sets, policy_value,
                               worst_case_adversary)

from conftest import toy_path

DFA_INV = """
states q0 q1
initial q0
accepting q1
alphabet a b
interval a (-inf 2)
interval b [2 inf)
trans q0 a q0
trans q0 b q1
trans q1 a q1
trans q1 b q1
"""


@pytest.fixture(scope="module")
def edge():
    inst = load_instance(toy_path("rebasing_overshoot.yaml"))
    tables = value_iteration(inst.kernel, inst.game, inst.grid, inst.spec,
                             inst.relation)
    return inst, tables


def test_build_product_single_cell():
    raw = dict(name="p1", cells=1, horizon=2, etas=[0.5], u_hat=[0.0], w_hat=[0.0],
               dfa=DFA_INV, kernel=[[[[0.9375, 0.0625]]]])
    inst = instance_from_dict(raw, "p1")
    prod = build_product(inst.kernel, inst.spec, inst.grid, inst.game)
    assert len(prod.states) == 2  # one cell x two monitor states
    assert prod.T.shape == (2, 1, 1, 3)


def test_build_product_mass_and_successors(edge):
    inst, _ = edge
    prod = build_product(inst.kernel, inst.spec, inst.grid, inst.game)
    # row mass is preserved exactly
    assert np.max(np.abs(prod.T.reshape(-1, prod.T.shape[-1]).sum(axis=1) - 1)) \
        <= 1e-12
    # the monitor component of every successor matches a direct step
    from gameshield.automata import dfa_step, label
    for (c, q), row_idx in prod.index.items():
        for iu in range(inst.kernel.n_u):
            for iw in range(inst.kernel.n_w):
                for (c2, q2), col_idx in prod.index.items():
                    mass = prod.T[row_idx, iu, iw, col_idx]
                    if mass > 0:
                        y2 = float(inst.grid.centers[c2][0])
                        assert q2 == dfa_step(inst.spec.dfa, q,
                                              label(inst.spec.labelling, y2))


def test_policy_value_always_safe():
    inst = load_instance(toy_path("always_safe.yaml"))
    H = inst.spec.horizon
    rho = np.zeros((H, 2, 2), dtype=np.int64)
    lam = np.zeros((H, 2, 2, 2), dtype=np.int64)
    vals = policy_value(inst.kernel, inst.game, inst.grid, inst.spec,
                        inst.relation, rho, lam, H)
    assert np.all(vals[:, :2, 0] == 0.0)


def test_policy_value_h0_is_indicator(edge):
    inst, _ = edge
    vals = policy_value(inst.kernel, inst.game, inst.grid, inst.spec, inst.relation,
                        np.zeros((0, 3, 2), dtype=np.int64),
                        np.zeros((0, 3, 2, 2), dtype=np.int64), 0)
    assert vals.shape == (1, 4, 2)
    assert np.all(vals[0][:3, 0] == 0) and np.all(vals[0][:, 1] == 1)


def test_policy_value_hand_expansion():
    # two cells, one input each: V_1(c0) decomposes by hand
    raw = dict(name="hand", cells=2, horizon=2, etas=[0.9],
               u_hat=[0.0], w_hat=[0.0, 1.0], dfa=DFA_INV,
               kernel=[[[[0.75, 0.1875, 0.0625], [0.5, 0.375, 0.125]]],
                       [[[0.25, 0.5, 0.25], [0.125, 0.375, 0.5]]]])
    inst = instance_from_dict(raw, "hand")
    H = 2
    rho = np.zeros((H, 2, 2), dtype=np.int64)
    lam = np.zeros((H, 2, 2, 1), dtype=np.int64)
    lam[1, 0, 0, 0] = 1      # adversary plays w=1 at time 1 in cell 0
    vals = policy_value(inst.kernel, inst.game, inst.grid, inst.spec,
                        inst.relation, rho, lam, H)
    # slice n is computed with the time-(H-n-1) policies: V_1 uses time 1,
    # where cell 0 sees w=1 (sink mass 0.125) and cell 1 sees w=0 (0.25)
    assert vals[1][0, 0] == pytest.approx(0.125)
    assert vals[1][1, 0] == pytest.approx(0.25)
    # V_2 uses time 0 (w=0 everywhere): 0.75*V1(c0) + 0.1875*V1(c1) + 0.0625
    expect = 0.75 * 0.125 + 0.1875 * 0.25 + 0.0625
    assert vals[2][0, 0] == pytest.approx(expect, abs=1e-15)


def test_worst_case_adversary_dominates_enumeration():
    raw = dict(name="wc", cells=2, horizon=2, etas=[0.9],
               u_hat=[0.0], w_hat=[0.0, 1.0], dfa=DFA_INV,
               kernel=[[[[0.75, 0.1875, 0.0625], [0.5, 0.375, 0.125]]],
                       [[[0.25, 0.5, 0.25], [0.125, 0.375, 0.5]]]])
    inst = instance_from_dict(raw, "wc")
    H = 2
    rho = np.zeros((H, 2, 2), dtype=np.int64)
    _, v_star = worst_case_adversary(inst.kernel, inst.game, inst.grid, inst.spec,
                                     inst.relation, rho, H)
    # enumerate every Markov adversary over (k, cell) since q0 is the only
    # live monitor state and there is a single input
    import itertools
    best = np.full(2, -1.0)
    for bits in itertools.product([0, 1], repeat=4):
        lam = np.zeros((H, 2, 2, 1), dtype=np.int64)
        lam[0, 0, 0, 0], lam[0, 1, 0, 0], lam[1, 0, 0, 0], lam[1, 1, 0, 0] = bits
        vals = policy_value(inst.kernel, inst.game, inst.grid, inst.spec,
                            inst.relation, rho, lam, H)
        best = np.maximum(best, vals[H][:2, 0])
    assert np.max(np.abs(best - v_star[H][:2, 0])) <= 1e-12


def test_single_adversary_choice_trivial():
    raw = dict(name="one-w", cells=2, horizon=3, etas=[0.9],
               u_hat=[0.0], w_hat=[0.5], dfa=DFA_INV,
               kernel=[[[[0.875, 0.0625, 0.0625]]], [[[0.25, 0.5, 0.25]]]])
    inst = instance_from_dict(raw, "one-w")
    rho = np.zeros((3, 2, 2), dtype=np.int64)
    lam = np.zeros((3, 2, 2, 1), dtype=np.int64)
    lam_star, v_star = worst_case_adversary(inst.kernel, inst.game, inst.grid,
                                            inst.spec, inst.relation, rho, 3)
    vals = policy_value(inst.kernel, inst.game, inst.grid, inst.spec,
                        inst.relation, rho, lam, 3)
    assert np.array_equal(lam_star, lam)
    assert np.max(np.abs(vals - v_star)) == 0.0


def test_reachable_sets(stepdown_spec):
    sets = n_steps_reachable_sets(stepdown_spec, 0.2, 3)
    assert sets[0] == {1}                  # 0.2 labels p1: obligation state
    assert sets[1] == {1, 2, 4}
    assert 4 in sets[2]


def test_bundled_instances_pass():
    for name in ("always_safe.yaml", "mirror_band.yaml", "obligation_mirror.yaml",
                 "leaky_box.yaml"):
        report = exhaustive_violation_bound_check(load_instance(toy_path(name)))
        assert report.ok, report.summary()
        assert report.minimax_consistent and report.reachable_ok
        for chk in report.checks:
            assert chk.min_tail_gap >= -1e-9


def test_oracle_flags_budget_rebasing_overshoot(edge):
    # adversarially built instance: every per-decision estimate dominates its
    # exact tail, yet the end-to-end worst case exceeds the budget, which the
    # checker must report
    inst, tables = edge
    report = exhaustive_violation_bound_check(inst, tables)
    assert not report.ok
    chk = report.checks[0]
    assert chk.eta == 0.2
    assert chk.v_supervised == pytest.approx(0.206481934, abs=1e-9)
    assert not chk.bound_ok
    assert chk.domination_ok                 # per-decision estimates stay sound
    assert report.minimax_consistent


def test_instance_guards():
    raw = dict(name="big", cells=40, horizon=2, etas=[0.5], u_hat=[0.0],
               w_hat=[0.0], dfa=DFA_INV,
               kernel=[[[[1.0 if j == i else 0.0 for j in range(41)]]]
                       for i in range(40)])
    inst = instance_from_dict(raw, "big")
    with pytest.raises(SizingError, match="product states"):
        inst.guard()
    raw2 = dict(name="deep", cells=1, horizon=9, etas=[0.5], u_hat=[0.0],
                w_hat=[0.0], dfa=DFA_INV, kernel=[[[[1.0, 0.0]]]])
    inst2 = instance_from_dict(raw2, "deep")
    with pytest.raises(SizingError, match="horizon"):
        inst2.guard()


def test_policy_enumeration_cap():
    with pytest.raises(SizingError, match="enumeration cap"):
        list(enumerate_markov_policies(4, [0, 1], 4, 8, cap=100))


def test_kernel_shape_validation():
    raw = dict(name="bad", cells=2, horizon=2, etas=[0.5], u_hat=[0.0],
               w_hat=[0.0], dfa=DFA_INV, kernel=[[[[1.0, 0.0]]]])
    with pytest.raises(ConfigError, match="kernel shape"):
        instance_from_dict(raw, "bad")
