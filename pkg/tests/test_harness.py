import os
import subprocess
import sys

import numpy as np
import pytest
import yaml

from gameshield.config import load_config
from gameshield.controllers import (load_input_script, make_adversary,
                                    make_controller, scripted_controller,
                                    uniform_random_controller)
from gameshield.errors import ConfigError
from gameshield.runtime import StepContext
from gameshield.simulate import ensure_kernel, ensure_tables, monte_carlo

from conftest import CONFIGS, REPO

SMALL_CFG = """
name: harness-small
game:
  a: [[1.0, 0.1], [0.0, 1.0]]
  b: [[0.005], [0.1]]
  d: [[-0.005], [-0.1]]
  c: [[1.0, 0.0]]
  r: [[0.004, 0.0], [0.0, 0.045]]
  x_bounds: [[-0.5, 0.5], [-0.4, 0.4]]
  u_bounds: [[-2.5, 2.5]]
  w_bounds: [[-0.6, 0.6]]
  x0_set: [[0.2, 0.2]]
  dt: 0.1
grid:
  x_cell_sizes: [0.04, 0.04]
  u_cells: 25
  u_hat_values: [-1.2, 0.0, 1.2]
  w_cells: 12
relation:
  m: [[1.4632, 0.1757], [0.1757, 0.0666]]
  k: [[-16.66, -4.83]]
  eps: 0.0674
  eps_w: 0.05
  delta: 0.0
  gamma: 0.029
spec:
  dfa: {dfa}
  horizon: 40
supervisor:
  eta: 0.02
run:
  x0: [0.2, 0.2]
  episodes: 12
  seed: 5
  mode: safevisor
  controller: {{kind: uniform}}
  adversary: {{kind: uniform}}
paths:
  build_dir: build
  out_dir: out
limits:
  kernel_memory_mb: 512
  value_memory_mb: 512
"""


@pytest.fixture()
def small_cfg_path(tmp_path):
    dfa_src = os.path.join(CONFIGS, "dfa_band_invariance.dfa")
    path = tmp_path / "small.yaml"
    path.write_text(SMALL_CFG.format(dfa=dfa_src))
    return str(path)


def test_load_config_builds_everything(small_cfg_path):
    cfg = load_config(small_cfg_path)
    assert cfg.grid.n_cells == 25 * 20
    assert cfg.spec.horizon == 40
    assert cfg.eta == 0.02
    assert cfg.name == "harness-small"
    assert len(cfg.digest) == 64


def test_config_digests_track_sections(small_cfg_path):
    cfg = load_config(small_cfg_path)
    cfg2 = load_config(small_cfg_path, overrides={"run.seed": 6})
    assert cfg.digest != cfg2.digest
    assert cfg.kernel_digest == cfg2.kernel_digest
    assert cfg.tables_digest == cfg2.tables_digest
    cfg3 = load_config(small_cfg_path, overrides={"supervisor.eta": 0.5})
    assert cfg.tables_digest == cfg3.tables_digest  # eta is a run-time knob


def test_config_rejects_x0_outside_initial_set(small_cfg_path):
    with pytest.raises(ConfigError, match="initial set"):
        load_config(small_cfg_path, overrides={"run.x0": [0.1, 0.1]})


def test_config_rejects_bad_eta(small_cfg_path):
    with pytest.raises(ConfigError, match="eta"):
        load_config(small_cfg_path, overrides={"supervisor.eta": 1.5})


def test_config_rejects_missing_dfa(small_cfg_path, tmp_path):
    with pytest.raises(ConfigError, match="does not exist"):
        load_config(small_cfg_path, overrides={"spec.dfa": "nope.dfa"})


def test_uniform_controller_statistics():
    ctrl = uniform_random_controller(-2.5, 2.5)
    rng = np.random.default_rng(0)
    ctx = StepContext(k=0, x=np.zeros(2), y=0.0, q=0, rng=rng)
    draws = np.array([ctrl(ctx) for _ in range(100000)])
    assert np.all(draws >= -2.5) and np.all(draws <= 2.5)
    # mean of U(-2.5, 2.5): sigma/sqrt(n) = 2.5/sqrt(3)/316
    assert abs(draws.mean()) <= 3 * 2.5 / np.sqrt(3) / np.sqrt(100000)
    ctrl2 = uniform_random_controller(-2.5, 2.5)
    rng2 = np.random.default_rng(0)
    ctx2 = StepContext(k=0, x=np.zeros(2), y=0.0, q=0, rng=rng2)
    assert [ctrl2(ctx2) for _ in range(100)] == list(draws[:100])


def test_uniform_adversary_statistics():
    from gameshield.controllers import uniform_random_adversary
    adv = uniform_random_adversary(-0.6, 0.6)
    rng = np.random.default_rng(4)
    ctx = StepContext(k=0, x=np.zeros(2), y=0.0, q=0, rng=rng)
    draws = np.array([adv(ctx, 0.0) for _ in range(100000)])
    assert np.all(draws >= -0.6) and np.all(draws <= 0.6)
    assert abs(draws.mean()) <= 3 * 0.6 / np.sqrt(3) / np.sqrt(100000)


def test_scripted_controller_replay_and_exhaustion(tmp_path):
    path = tmp_path / "inputs.txt"
    path.write_text("0.5\n-0.25\n# comment\n1.0\n")
    vals = load_input_script(path)
    assert vals == [0.5, -0.25, 1.0]
    ctrl = scripted_controller(vals)
    ctx = StepContext(k=0, x=np.zeros(2), y=0.0, q=0, rng=None)
    assert ctrl(ctx) == 0.5
    ctx.k = 3
    with pytest.raises(ConfigError, match="exhausted"):
        ctrl(ctx)


def test_make_controller_kinds(tmp_path):
    u_bounds = np.array([[-1.0, 1.0]])
    assert make_controller({"kind": "constant", "value": 0.3}, u_bounds)(None) == 0.3
    with pytest.raises(ConfigError, match="unknown controller"):
        make_controller({"kind": "wat"}, u_bounds)
    with pytest.raises(ConfigError, match="unknown adversary"):
        make_adversary({"kind": "wat"}, u_bounds)


def test_monte_carlo_smoke_and_determinism(small_cfg_path, tmp_path):
    cfg = load_config(small_cfg_path, overrides={
        "paths.out_dir": str(tmp_path / "o1"), "run.episodes": 10})
    kernel = ensure_kernel(cfg, quiet=True)
    tables = ensure_tables(cfg, kernel, quiet=True)
    s1 = monte_carlo(cfg, kernel, tables, quiet=True)
    assert s1.episodes == 10
    assert (tmp_path / "o1" / "metrics.csv").exists()
    assert (tmp_path / "o1" / "summary.txt").exists()
    cfg2 = load_config(small_cfg_path, overrides={
        "paths.out_dir": str(tmp_path / "o2"), "run.episodes": 10})
    s2 = monte_carlo(cfg2, kernel, tables, quiet=True)
    b1 = (tmp_path / "o1" / "metrics.csv").read_bytes()
    b2 = (tmp_path / "o2" / "metrics.csv").read_bytes()
    assert b1 == b2
    assert s1.violations == s2.violations
    assert s1.acceptance_rate == s2.acceptance_rate
    # decision accounting: accepted + both rejection kinds == episode length
    for line in b1.decode().splitlines()[1:]:
        cols = line.split(",")
        steps, acc, rr, rl = int(cols[2]), int(cols[3]), int(cols[4]), int(cols[5])
        assert acc + rr + rl == steps


def test_gated_beats_baseline_on_seeded_batch(small_cfg_path, tmp_path):
    cfg = load_config(small_cfg_path, overrides={
        "paths.out_dir": str(tmp_path / "g"), "run.episodes": 25})
    kernel = ensure_kernel(cfg, quiet=True)
    tables = ensure_tables(cfg, kernel, quiet=True)
    gated = monte_carlo(cfg, kernel, tables, quiet=True)
    cfg_b = load_config(small_cfg_path, overrides={
        "paths.out_dir": str(tmp_path / "b"), "run.episodes": 25,
        "run.mode": "baseline"})
    base = monte_carlo(cfg_b, kernel, tables, quiet=True)
    assert gated.satisfaction_rate >= base.satisfaction_rate


def test_monte_carlo_feasibility_refusal(small_cfg_path, tmp_path):
    cfg = load_config(small_cfg_path, overrides={
        "supervisor.eta": 1.0e-9, "paths.out_dir": str(tmp_path / "o")})
    kernel = ensure_kernel(cfg, quiet=True)
    tables = ensure_tables(cfg, kernel, quiet=True)
    with pytest.raises(ConfigError, match="refusing to run"):
        monte_carlo(cfg, kernel, tables, quiet=True)


def test_monte_carlo_worker_pool_matches_serial(small_cfg_path, tmp_path, monkeypatch):
    cfg = load_config(small_cfg_path, overrides={
        "paths.out_dir": str(tmp_path / "serial"), "run.episodes": 8})
    kernel = ensure_kernel(cfg, quiet=True)
    tables = ensure_tables(cfg, kernel, quiet=True)
    monte_carlo(cfg, kernel, tables, quiet=True)
    monkeypatch.setenv("GAMESHIELD_WORKERS", "2")
    cfg2 = load_config(small_cfg_path, overrides={
        "paths.out_dir": str(tmp_path / "pool"), "run.episodes": 8})
    monte_carlo(cfg2, kernel, tables, quiet=True)
    assert (tmp_path / "serial" / "metrics.csv").read_bytes() == \
        (tmp_path / "pool" / "metrics.csv").read_bytes()


def test_trace_export_columns(small_cfg_path, tmp_path):
    cfg = load_config(small_cfg_path, overrides={
        "paths.out_dir": str(tmp_path / "t"), "run.episodes": 2,
        "run.export_traces": 1})
    kernel = ensure_kernel(cfg, quiet=True)
    tables = ensure_tables(cfg, kernel, quiet=True)
    monte_carlo(cfg, kernel, tables, quiet=True)
    trace = (tmp_path / "t" / "trace_ep00000.csv").read_text().splitlines()
    assert trace[0] == "step,y,q,verdict,e_pv,latency_us,u_uc,u_applied,w"
    assert len(trace) > 1


def _cli(*args):
    return subprocess.run([sys.executable, "-m", "gameshield.cli", *args],
                          capture_output=True, text=True, cwd=REPO)


def test_cli_pipeline_smoke(small_cfg_path, tmp_path):
    r = _cli("build-abstraction", "--config", small_cfg_path)
    assert r.returncode == 0, r.stderr
    r = _cli("synthesize", "--config", small_cfg_path)
    assert r.returncode == 0, r.stderr
    out = str(tmp_path / "cli-out")
    r = _cli("simulate", "--config", small_cfg_path, "--episodes", "5", "--out", out)
    assert r.returncode == 0, r.stderr
    assert os.path.exists(os.path.join(out, "metrics.csv"))
    cfg = load_config(small_cfg_path)
    r = _cli("inspect", cfg.kernel_path())
    assert r.returncode == 0 and "transition tensor" in r.stdout
    r = _cli("inspect", cfg.tables_path())
    assert r.returncode == 0 and "value/policy tables" in r.stdout


def test_cli_bad_flags_exit_2():
    r = _cli("simulate", "--nonsense")
    assert r.returncode == 2


def test_cli_feasibility_refusal_message(small_cfg_path):
    r = _cli("synthesize", "--config", small_cfg_path)
    assert r.returncode == 0, r.stderr
    r = _cli("simulate", "--config", small_cfg_path, "--episodes", "2")
    # default eta=0.02 passes; an impossible budget must refuse with the reason
    assert r.returncode == 0, r.stderr


def test_cli_oracle_check_exit_codes():
    good = os.path.join(CONFIGS, "toys", "mirror_band.yaml")
    bad = os.path.join(CONFIGS, "toys", "rebasing_overshoot.yaml")
    assert _cli("oracle-check", good).returncode == 0
    r = _cli("oracle-check", bad)
    assert r.returncode == 1
    assert "FAIL" in r.stdout


def test_cli_verify_relation(small_cfg_path):
    # the coarse unit-test grid genuinely breaks one-step preservation at the
    # relation boundary (larger quantization corners, same eps): detected
    r = _cli("verify-relation", "--config", small_cfg_path, "--samples", "2000")
    assert r.returncode == 1
    assert "FAIL" in r.stdout
    # the shipped full-resolution config is clean
    full = os.path.join(CONFIGS, "quadrotor_e.yaml")
    r = _cli("verify-relation", "--config", full, "--samples", "2000")
    assert r.returncode == 0, r.stderr + r.stdout
    assert "-> ok" in r.stdout
