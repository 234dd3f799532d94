"""Continuous two-player linear-Gaussian game: exact dynamics and validation.

The plant is x(k+1) = A x + B u + D w + R n with standard-normal noise n,
outputs y = C x. Player I picks u from a compact box U, Player II picks w
from a compact box W. All functions here are pure over immutable game data.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError

BOX_TOL = 1e-12


def _as_matrix(m, name: str) -> np.ndarray:
    a = np.asarray(m, dtype=float)
    if a.ndim != 2:
        raise ConfigError(f"{name} must be a 2-d matrix, got shape {a.shape}")
    return a


def _as_box(b, name: str) -> np.ndarray:
    a = np.asarray(b, dtype=float)
    if a.ndim != 2 or a.shape[1] != 2:
        raise ConfigError(f"{name} must be a list of [lo, hi] pairs")
    if not np.all(np.isfinite(a)):
        raise ConfigError(f"{name} must have finite bounds (compact box)")
    if np.any(a[:, 0] > a[:, 1]):
        raise ConfigError(f"{name} has lo > hi")
    return a


def in_box(v: np.ndarray, box: np.ndarray, tol: float = BOX_TOL) -> bool:
    return bool(np.all(v >= box[:, 0] - tol) and np.all(v <= box[:, 1] + tol))


@dataclass(frozen=True)
class LinearGaussianGame:
    """Matrices and boxes of the continuous game; immutable after construction."""

    A: np.ndarray
    B: np.ndarray
    D: np.ndarray
    C_out: np.ndarray
    R_noise: np.ndarray
    x_bounds: np.ndarray  # s rows of [lo, hi]
    u_bounds: np.ndarray
    w_bounds: np.ndarray
    x0_set: list = field(default_factory=list)
    dt: float = 1.0  # sampling time, metadata only
    R_inv: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "A", _as_matrix(self.A, "A"))
        object.__setattr__(self, "B", _as_matrix(self.B, "B"))
        object.__setattr__(self, "D", _as_matrix(self.D, "D"))
        object.__setattr__(self, "C_out", _as_matrix(self.C_out, "C_out"))
        object.__setattr__(self, "R_noise", _as_matrix(self.R_noise, "R_noise"))
        object.__setattr__(self, "x_bounds", _as_box(self.x_bounds, "x_bounds"))
        object.__setattr__(self, "u_bounds", _as_box(self.u_bounds, "u_bounds"))
        object.__setattr__(self, "w_bounds", _as_box(self.w_bounds, "w_bounds"))
        object.__setattr__(
            self, "x0_set", [np.asarray(x, dtype=float).reshape(-1) for x in self.x0_set]
        )
        report = validate_game(self)
        if not report.ok:
            raise ConfigError("invalid game: " + "; ".join(report.failures))
        object.__setattr__(self, "R_inv", np.linalg.inv(self.R_noise))

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def input_dim(self) -> int:
        return self.B.shape[1]

    @property
    def adversary_dim(self) -> int:
        return self.D.shape[1]

    @property
    def output_dim(self) -> int:
        return self.C_out.shape[0]


@dataclass
class ValidationReport:
    ok: bool
    checks: list  # (name, passed, message)

    @property
    def failures(self) -> list:
        return [msg for _, passed, msg in self.checks if not passed]


def validate_game(game) -> ValidationReport:
    """Report-only structural validation: shapes, noise-gain invertibility, boxes."""
    checks = []
    s = game.A.shape[0]

    def chk(name, cond, msg):
        checks.append((name, bool(cond), msg))

    chk("A square", game.A.shape == (s, s), f"A must be square, got {game.A.shape}")
    chk("B rows", game.B.shape[0] == s, f"dimension mismatch: B has {game.B.shape[0]} rows, expected {s}")
    chk("D rows", game.D.shape[0] == s, f"dimension mismatch: D has {game.D.shape[0]} rows, expected {s}")
    chk("C cols", game.C_out.shape[1] == s, f"dimension mismatch: C_out has {game.C_out.shape[1]} cols, expected {s}")
    chk("R shape", game.R_noise.shape == (s, s), f"R_noise must be {s}x{s}, got {game.R_noise.shape}")
    chk("x_bounds dim", game.x_bounds.shape[0] == s, "x_bounds dimension mismatch")
    chk("u_bounds dim", game.u_bounds.shape[0] == game.B.shape[1], "u_bounds dimension mismatch")
    chk("w_bounds dim", game.w_bounds.shape[0] == game.D.shape[1], "w_bounds dimension mismatch")

    if game.R_noise.shape == (s, s):
        # finite condition number <=> invertible noise gain (needed for noise recovery)
        cond = np.linalg.cond(game.R_noise)
        chk("R invertible", np.isfinite(cond) and cond < 1e12, "noise gain singular")
    for i, x0 in enumerate(game.x0_set):
        chk(f"x0[{i}] in X", x0.shape == (s,) and in_box(x0, game.x_bounds),
            f"initial state {i} outside the state box")
    ok = all(passed for _, passed, _ in checks)
    return ValidationReport(ok=ok, checks=checks)


def step_dynamics(game, x, u, w, noise) -> np.ndarray:
    """One exact transition A x + B u + D w + R noise.

    Inputs must already lie in their boxes (tolerance 1e-12); clamping is the
    caller's job.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    w = np.atleast_1d(np.asarray(w, dtype=float))
    noise = np.asarray(noise, dtype=float).reshape(-1)
    if not in_box(u, game.u_bounds):
        raise DomainError(f"Player-I input {u} outside U bounds {game.u_bounds.tolist()}")
    if not in_box(w, game.w_bounds):
        raise DomainError(f"Player-II input {w} outside W bounds {game.w_bounds.tolist()}")
    return game.A @ x + game.B @ u + game.D @ w + game.R_noise @ noise


def output(game, x) -> np.ndarray:
    """Output map y = C x."""
    return game.C_out @ np.asarray(x, dtype=float).reshape(-1)


def scalar_output(game, x) -> float:
    """Scalar output for monitoring; requires a single-row output map."""
    y = output(game, x)
    if y.shape != (1,):
        raise ConfigError("monitoring requires a scalar output map (C_out with one row)")
    return float(y[0])
