import os

import numpy as np
import pytest

from gameshield.abstraction import RelationParams, build_grid, build_kernel
from gameshield.advisor import value_iteration
from gameshield.automata import SafetySpec, load_dfa_file
from gameshield.game import LinearGaussianGame

REPO = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CONFIGS = os.path.join(REPO, "configs")
TOYS = os.path.join(CONFIGS, "toys")


def quadrotor_game() -> LinearGaussianGame:
    dt = 0.1
    return LinearGaussianGame(
        A=[[1.0, dt], [0.0, 1.0]], B=[[dt * dt / 2], [dt]], D=[[-dt * dt / 2], [-dt]],
        C_out=[[1.0, 0.0]], R_noise=[[0.004, 0.0], [0.0, 0.045]],
        x_bounds=[[-0.5, 0.5], [-0.4, 0.4]], u_bounds=[[-2.5, 2.5]],
        w_bounds=[[-0.6, 0.6]], x0_set=[[0.2, 0.2]], dt=dt)


M_PAPERLIKE = [[1.4632, 0.1757], [0.1757, 0.0666]]
K_PAPERLIKE = [[-16.66, -4.83]]


@pytest.fixture(scope="session")
def quad_game():
    return quadrotor_game()


@pytest.fixture(scope="session")
def quad_relation():
    return RelationParams(M=M_PAPERLIKE, K=K_PAPERLIKE, eps=0.0674, eps_w=0.05,
                          delta=0.0, gamma=0.0152)


@pytest.fixture(scope="session")
def quad_grid(quad_game):
    """Full 50x40 grid of the shipped config."""
    return build_grid(quad_game.x_bounds, [0.02, 0.02], quad_game.u_bounds, 25,
                      None, quad_game.w_bounds, 12, u_hat_values=[-1.2, 0.0, 1.2])


@pytest.fixture(scope="session")
def band_spec():
    dfa, labelling = load_dfa_file(os.path.join(CONFIGS, "dfa_band_invariance.dfa"))
    return SafetySpec(dfa=dfa, labelling=labelling, horizon=600)


@pytest.fixture(scope="session")
def stepdown_spec():
    dfa, labelling = load_dfa_file(os.path.join(CONFIGS, "dfa_band_stepdown.dfa"))
    return SafetySpec(dfa=dfa, labelling=labelling, horizon=600)


# ---------------------------------------------------------------------------
# Reduced quadrotor: same dynamics on a coarse 25x20 grid with a wider
# quantization margin; cheap enough for per-test synthesis.
# ---------------------------------------------------------------------------

@pytest.fixture(scope="session")
def small_grid(quad_game):
    return build_grid(quad_game.x_bounds, [0.04, 0.04], quad_game.u_bounds, 25,
                      None, quad_game.w_bounds, 12, u_hat_values=[-1.2, 0.0, 1.2])


@pytest.fixture(scope="session")
def small_relation():
    # corners of the 0.02-half-width cells cost 0.0274 in the metric, plus the
    # adversary quantization term 0.0015
    return RelationParams(M=M_PAPERLIKE, K=K_PAPERLIKE, eps=0.0674, eps_w=0.05,
                          delta=0.0, gamma=0.029)


@pytest.fixture(scope="session")
def small_spec():
    dfa, labelling = load_dfa_file(os.path.join(CONFIGS, "dfa_band_invariance.dfa"))
    return SafetySpec(dfa=dfa, labelling=labelling, horizon=40)


@pytest.fixture(scope="session")
def small_kernel(quad_game, small_grid):
    return build_kernel(quad_game, small_grid, memory_cap_mb=512)


@pytest.fixture(scope="session")
def small_tables(small_kernel, quad_game, small_grid, small_spec, small_relation):
    return value_iteration(small_kernel, quad_game, small_grid, small_spec,
                           small_relation)


def toy_path(name: str) -> str:
    return os.path.join(TOYS, name)
