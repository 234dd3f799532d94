"""Finite abstraction of the continuous game.

Uniform grid over the state box with cell centers as representatives, 1-d
lattices for both players' inputs, and the cell-to-cell transition tensor
obtained by integrating the Gaussian one-step kernel over target cells.
Probability mass leaving the state box goes to an absorbing SINK column that
every consumer values pessimistically as a certain violation.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr
from scipy.stats import multivariate_normal

from .automata import labels_within
from .errors import ConfigError, DomainError, OutOfDomainError, SizingError
from .game import in_box

SINK = -1          # sentinel for "abstract state lost"; kernel stores sink mass last
FACE_TIE_TOL = 1e-9  # grid-face ties, in cell-width units (lower index wins)

KERNEL_MAGIC = b"SVKN"
KERNEL_VERSION = 1


@dataclass(frozen=True)
class RelationParams:
    """Quadratic-form state relation, interface gain and runtime margins.

    (x, x_hat) are related when (x-x_hat)' M (x-x_hat) <= eps^2. Player-II
    inputs are related to their nearest lattice point within eps_w. delta is
    the per-step probability budget for losing the relation; gamma bounds the
    one-step contribution of state quantization plus adversary quantization
    and is consumed by the runtime feasibility test.
    """

    M: np.ndarray
    K: np.ndarray
    eps: float
    eps_w: float
    delta: float
    gamma: float
    chol_lower: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        M = np.asarray(self.M, dtype=float)
        K = np.asarray(self.K, dtype=float)
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise ConfigError("relation metric M must be square")
        if not np.allclose(M, M.T, atol=1e-12):
            raise ConfigError("relation metric M must be symmetric")
        if np.min(np.linalg.eigvalsh(M)) <= 0:
            raise ConfigError("relation metric M must be positive definite")
        if K.ndim != 2 or K.shape[1] != M.shape[0]:
            raise ConfigError("feedback gain K must be m x s")
        if self.eps < 0 or self.eps_w < 0 or self.gamma < 0:
            raise ConfigError("eps, eps_w and gamma must be nonnegative")
        if not (0 <= self.delta < 1):
            raise ConfigError("delta must lie in [0, 1)")
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "chol_lower", np.linalg.cholesky(M))

    def m_norm(self, d) -> float:
        d = np.asarray(d, dtype=float).reshape(-1)
        return float(np.sqrt(d @ self.M @ d))

    def m_norm_rows(self, rows: np.ndarray) -> np.ndarray:
        return np.sqrt(np.einsum("ri,ij,rj->r", rows, self.M, rows))


def check_relation_membership(relation: RelationParams, x, x_hat) -> bool:
    """Whether (x - x_hat)' M (x - x_hat) <= eps^2 up to a 1e-12 slack."""
    d = np.asarray(x, dtype=float).reshape(-1) - np.asarray(x_hat, dtype=float).reshape(-1)
    return float(d @ relation.M @ d) <= relation.eps ** 2 + 1e-12


@dataclass(frozen=True)
class Grid:
    """Uniform state grid plus input lattices; immutable after construction."""

    x_lo: np.ndarray
    x_sizes: np.ndarray
    x_counts: np.ndarray         # cells per dimension
    u_bounds: np.ndarray
    u_lattice: np.ndarray        # all Player-I cell centers
    u_hat_values: np.ndarray     # abstract Player-I inputs actually used
    w_bounds: np.ndarray
    w_values: np.ndarray         # abstract Player-II inputs (all cell centers)
    centers: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        axes = [self.x_lo[i] + (np.arange(self.x_counts[i]) + 0.5) * self.x_sizes[i]
                for i in range(len(self.x_counts))]
        mesh = np.meshgrid(*axes, indexing="ij")
        centers = np.stack([m.reshape(-1) for m in mesh], axis=1)
        object.__setattr__(self, "centers", centers)

    @property
    def state_dim(self) -> int:
        return len(self.x_counts)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.x_counts))

    @property
    def n_u(self) -> int:
        return len(self.u_hat_values)

    @property
    def n_w(self) -> int:
        return len(self.w_values)

    @property
    def delta_half(self) -> np.ndarray:
        """Quantization half-widths (center representatives)."""
        return self.x_sizes / 2.0

    @property
    def x_hi(self) -> np.ndarray:
        return self.x_lo + self.x_counts * self.x_sizes

    def representative(self, idx: int) -> np.ndarray:
        return self.centers[idx]


def _divide(lo: float, hi: float, size: float, what: str) -> int:
    n = (hi - lo) / size
    if abs(n - round(n)) > 1e-9 or round(n) < 1:
        raise ConfigError(f"{what}: cell size {size} does not divide [{lo}, {hi}]")
    return int(round(n))


def build_grid(x_bounds, cell_sizes, u_bounds, u_cells, u_hat_restriction,
               w_bounds, w_cells, u_hat_values=None) -> Grid:
    """Construct the grid; cell sizes must tile the boxes to within 1e-9.

    The abstract Player-I set is either given explicitly (u_hat_values) or
    derived from a restriction box: lattice centers inside the box augmented
    with the box endpoints.
    """
    x_bounds = np.asarray(x_bounds, dtype=float)
    cell_sizes = np.asarray(cell_sizes, dtype=float)
    if np.any(cell_sizes <= 0):
        raise ConfigError("cell sizes must be positive")
    counts = np.array([_divide(lo, hi, sz, f"state dim {i}")
                       for i, ((lo, hi), sz) in enumerate(zip(x_bounds, cell_sizes))])

    u_bounds = np.asarray(u_bounds, dtype=float).reshape(-1, 2)
    w_bounds = np.asarray(w_bounds, dtype=float).reshape(-1, 2)
    if u_bounds.shape[0] != 1 or w_bounds.shape[0] != 1:
        raise ConfigError("the gridded abstraction supports scalar player inputs")
    ulo, uhi = u_bounds[0]
    wlo, whi = w_bounds[0]
    u_width = (uhi - ulo) / u_cells
    u_lattice = ulo + (np.arange(u_cells) + 0.5) * u_width
    w_width = (whi - wlo) / w_cells
    w_values = wlo + (np.arange(w_cells) + 0.5) * w_width

    if u_hat_values is not None:
        u_hat = np.asarray(sorted(set(float(v) for v in u_hat_values)), dtype=float)
        if u_hat.size == 0:
            raise ConfigError("u_hat_values must be nonempty")
        if np.any(u_hat < ulo - 1e-12) or np.any(u_hat > uhi + 1e-12):
            raise ConfigError("u_hat_values must lie inside the input box")
    else:
        rlo, rhi = float(u_hat_restriction[0]), float(u_hat_restriction[1])
        if rlo > rhi or rlo < ulo - 1e-12 or rhi > uhi + 1e-12:
            raise ConfigError("u_hat restriction must be a sub-box of the input box")
        inside = u_lattice[(u_lattice >= rlo) & (u_lattice <= rhi)]
        u_hat = np.asarray(sorted(set(map(float, inside)) | {rlo, rhi}), dtype=float)
    return Grid(x_lo=x_bounds[:, 0].copy(), x_sizes=cell_sizes.copy(), x_counts=counts,
                u_bounds=u_bounds, u_lattice=u_lattice, u_hat_values=u_hat,
                w_bounds=w_bounds, w_values=w_values)


def quantize_state(grid: Grid, x) -> int:
    """Flat index of the cell containing x; face ties go to the lower cell."""
    x = np.asarray(x, dtype=float).reshape(-1)
    multi = []
    for i in range(grid.state_dim):
        t = (x[i] - grid.x_lo[i]) / grid.x_sizes[i]
        n = int(grid.x_counts[i])
        r = round(t)
        if abs(t - r) <= FACE_TIE_TOL:
            if r < 0 or r > n:
                raise OutOfDomainError(f"state {x} outside the grid in dim {i}")
            k = max(int(r) - 1, 0)
        else:
            k = int(np.floor(t))
            if k < 0 or k >= n:
                raise OutOfDomainError(f"state {x} outside the grid in dim {i}")
        multi.append(k)
    return int(np.ravel_multi_index(multi, grid.x_counts))


def try_quantize_state(grid: Grid, x) -> int:
    """Like quantize_state but returns SINK instead of raising."""
    try:
        return quantize_state(grid, x)
    except OutOfDomainError:
        return SINK


def nearest_abstract_adversary(grid: Grid, w) -> int:
    """Index of the Player-II lattice point nearest to w.

    Ties (within 1e-12, absorbing float noise in the lattice) go to the
    lower index.
    """
    w = float(np.asarray(w).reshape(-1)[0])
    if not in_box(np.array([w]), grid.w_bounds):
        raise DomainError(f"adversary input {w} outside W bounds")
    dists = np.abs(grid.w_values - w)
    return int(np.flatnonzero(dists <= dists.min() + 1e-12)[0])


def cell_outputs(grid: Grid, game) -> np.ndarray:
    """Scalar output of every cell representative."""
    if game.C_out.shape[0] != 1:
        raise ConfigError("monitoring requires a scalar output map")
    return (grid.centers @ game.C_out[0]).reshape(-1)


def cell_label_masks(outputs: np.ndarray, labelling, eps: float, alphabet) -> np.ndarray:
    """Boolean (n_cells, n_labels): label attainable within eps of each output."""
    masks = np.zeros((outputs.shape[0], len(alphabet)), dtype=bool)
    col = {lbl: j for j, lbl in enumerate(alphabet)}
    a = outputs - eps
    b = outputs + eps
    for p in labelling.pieces:
        left = (p.lo < b) | ((p.lo == b) & p.lo_closed)
        right = (p.hi > a) | ((p.hi == a) & p.hi_closed)
        masks[:, col[p.label]] |= left & right
    return masks


def safe_abstract_states(grid: Grid, game, spec, relation: RelationParams,
                         q: int) -> np.ndarray:
    """Cells whose every eps-attainable label keeps q outside F (sorted indices)."""
    dfa = spec.dfa
    if dfa.is_accepting(q):
        return np.empty(0, dtype=np.int64)
    outs = cell_outputs(grid, game)
    masks = cell_label_masks(outs, spec.labelling, relation.eps, dfa.alphabet)
    bad_labels = np.array([dfa.is_accepting(dfa.delta[(q, pi)]) for pi in dfa.alphabet])
    unsafe = (masks & bad_labels[None, :]).any(axis=1)
    return np.flatnonzero(~unsafe).astype(np.int64)


# ---------------------------------------------------------------------------
# Transition tensor
# ---------------------------------------------------------------------------

@dataclass
class AbstractKernel:
    """Dense transition tensor T[x_hat, u_hat, w_hat, successor-or-SINK]."""

    T: np.ndarray  # (n_cells, n_u, n_w, n_cells + 1), sink mass last

    @property
    def n_cells(self) -> int:
        return self.T.shape[0]

    @property
    def n_u(self) -> int:
        return self.T.shape[1]

    @property
    def n_w(self) -> int:
        return self.T.shape[2]

    def validate(self, tol: float = 1e-9) -> None:
        if np.any(self.T < -1e-15) or np.any(self.T > 1 + 1e-12):
            raise ConfigError("kernel entries outside [0, 1]")
        sums = self.T.reshape(-1, self.T.shape[-1]).sum(axis=1)
        worst = float(np.max(np.abs(sums - 1.0)))
        if worst > tol:
            raise ConfigError(f"kernel rows do not sum to 1 (worst deviation {worst:.3e})")

    def flat(self) -> np.ndarray:
        return self.T.reshape(-1, self.T.shape[-1])


def _noise_sigmas(game) -> np.ndarray:
    """Per-dimension standard deviations when the noise covariance is diagonal."""
    cov = game.R_noise @ game.R_noise.T
    off = cov - np.diag(np.diag(cov))
    if np.max(np.abs(off)) > 1e-12 * max(1.0, float(np.max(np.abs(cov)))):
        return None
    return np.sqrt(np.diag(cov))


def _dim_edges(grid: Grid, i: int) -> np.ndarray:
    return grid.x_lo[i] + grid.x_sizes[i] * np.arange(grid.x_counts[i] + 1)


def _rows_from_means(grid: Grid, means: np.ndarray, sigmas: np.ndarray) -> np.ndarray:
    """In-box cell probabilities + sink for a batch of one-step means.

    Diagonal noise: each cell mass is a product over dimensions of Gaussian
    CDF differences at the scaled cell edges.
    """
    n = means.shape[0]
    per_dim = []
    for i in range(grid.state_dim):
        edges = _dim_edges(grid, i)
        cdf = ndtr((edges[None, :] - means[:, i:i + 1]) / sigmas[i])
        per_dim.append(np.diff(cdf, axis=1))
    joint = per_dim[0]
    for d in per_dim[1:]:
        joint = joint[:, :, None] * d[:, None, :]
        joint = joint.reshape(n, -1)
    rows = np.empty((n, grid.n_cells + 1))
    rows[:, :-1] = joint
    rows[:, -1] = 1.0 - joint.sum(axis=1)
    np.clip(rows[:, -1], 0.0, None, out=rows[:, -1])
    return rows


def _row_correlated(game, grid: Grid, mean: np.ndarray) -> np.ndarray:
    """Slow fallback for non-diagonal noise: corner-CDF inclusion-exclusion."""
    cov = game.R_noise @ game.R_noise.T
    mvn = multivariate_normal(mean=mean, cov=cov, allow_singular=False)
    s = grid.state_dim
    row = np.empty(grid.n_cells + 1)
    for idx in range(grid.n_cells):
        multi = np.unravel_index(idx, grid.x_counts)
        total = 0.0
        for corner in range(1 << s):
            pt = np.empty(s)
            sign = 1.0
            for i in range(s):
                hi_side = (corner >> i) & 1
                edge = grid.x_lo[i] + grid.x_sizes[i] * (multi[i] + hi_side)
                pt[i] = edge
                if not hi_side:
                    sign = -sign
            total += sign * mvn.cdf(pt)
        row[idx] = max(total, 0.0)
    row[-1] = max(0.0, 1.0 - row[:-1].sum())
    return row


def _one_step_mean(game, grid: Grid, cells: np.ndarray, u_val: float, w_val: float) -> np.ndarray:
    shift = (game.B @ np.array([u_val]) + game.D @ np.array([w_val])).reshape(-1)
    return np.einsum("cs,ts->ct", grid.centers[cells], game.A) + shift[None, :]


def abstract_transition_row(game, grid: Grid, ix: int, iu: int, iw: int) -> np.ndarray:
    """Distribution over successor cells + SINK from one abstract configuration."""
    means = _one_step_mean(game, grid, np.array([ix]),
                           float(grid.u_hat_values[iu]), float(grid.w_values[iw]))
    sigmas = _noise_sigmas(game)
    if sigmas is None:
        return _row_correlated(game, grid, means[0])
    return _rows_from_means(grid, means, sigmas)[0]


def kernel_bytes_estimate(grid: Grid) -> int:
    return grid.n_cells * grid.n_u * grid.n_w * (grid.n_cells + 1) * 8


def build_kernel(game, grid: Grid, memory_cap_mb: float = 4096.0) -> AbstractKernel:
    """Full transition tensor over (cell, u_hat, w_hat); deterministic."""
    need = kernel_bytes_estimate(grid)
    cap = int(memory_cap_mb * 1024 * 1024)
    if need > cap:
        raise SizingError(
            f"kernel needs {need / 1e6:.0f} MB "
            f"({grid.n_cells} cells x {grid.n_u} u x {grid.n_w} w x {grid.n_cells + 1} cols x 8 B) "
            f"but the cap is {memory_cap_mb:.0f} MB; raise limits.kernel_memory_mb or coarsen the grid")
    sigmas = _noise_sigmas(game)
    T = np.empty((grid.n_cells, grid.n_u, grid.n_w, grid.n_cells + 1))
    all_cells = np.arange(grid.n_cells)
    for iu, u_val in enumerate(grid.u_hat_values):
        for iw, w_val in enumerate(grid.w_values):
            means = _one_step_mean(game, grid, all_cells, float(u_val), float(w_val))
            if sigmas is None:
                for ix in range(grid.n_cells):
                    T[ix, iu, iw] = _row_correlated(game, grid, means[ix])
            else:
                T[:, iu, iw, :] = _rows_from_means(grid, means, sigmas)
    kernel = AbstractKernel(T=T)
    kernel.validate()
    return kernel


def transition_row_quadrature(game, grid: Grid, ix: int, iu: int, iw: int,
                              order: int = 48) -> np.ndarray:
    """Independent per-cell Gauss-Legendre integration of the one-step density.

    Validation oracle for the CDF-difference construction; diagonal noise only.
    """
    sigmas = _noise_sigmas(game)
    if sigmas is None:
        raise ConfigError("quadrature oracle requires diagonal noise covariance")
    mean = _one_step_mean(game, grid, np.array([ix]),
                          float(grid.u_hat_values[iu]), float(grid.w_values[iw]))[0]
    nodes, weights = np.polynomial.legendre.leggauss(order)
    per_dim = []
    for i in range(grid.state_dim):
        edges = _dim_edges(grid, i)
        lo, hi = edges[:-1], edges[1:]
        mid = (lo + hi) / 2.0
        half = (hi - lo) / 2.0
        pts = mid[:, None] + half[:, None] * nodes[None, :]
        pdf = np.exp(-0.5 * ((pts - mean[i]) / sigmas[i]) ** 2) / (sigmas[i] * np.sqrt(2 * np.pi))
        per_dim.append((pdf * weights[None, :]).sum(axis=1) * half)
    joint = per_dim[0]
    for d in per_dim[1:]:
        joint = (joint[:, None] * d[None, :]).reshape(-1)
    row = np.empty(grid.n_cells + 1)
    row[:-1] = joint
    row[-1] = max(0.0, 1.0 - joint.sum())
    return row


# ---------------------------------------------------------------------------
# Relation margins and empirical validation
# ---------------------------------------------------------------------------

def gamma_lower_bound(relation: RelationParams, grid: Grid, game) -> float:
    """Exact quantization-plus-adversary margin the configured gamma must cover."""
    s = grid.state_dim
    half = grid.delta_half
    corners = np.array([[half[i] * (1 if (c >> i) & 1 else -1) for i in range(s)]
                        for c in range(1 << s)])
    quant = float(np.max(relation.m_norm_rows(corners)))
    lt_d = relation.chol_lower.T @ game.D
    adv = relation.eps_w * float(np.linalg.norm(lt_d, 2))
    return quant + adv


def validate_relation_grid(relation: RelationParams, grid: Grid, game) -> None:
    """Cross-object invariants checked at config load."""
    bound = gamma_lower_bound(relation, grid, game)
    if relation.gamma + 1e-12 < bound:
        raise ConfigError(
            f"configured gamma {relation.gamma} is below the required margin {bound:.6g}; "
            "the feasibility test would be unsound")
    w_half = float(np.max(np.diff(grid.w_values))) / 2.0 if grid.n_w > 1 else 0.0
    if w_half > relation.eps_w + 1e-12:
        raise ConfigError(
            f"Player-II lattice spacing {2 * w_half} exceeds 2*eps_w={2 * relation.eps_w}; "
            "adversary quantization would break the relation")


@dataclass
class RelationReport:
    """Sink exits are reported separately: mass leaving the state box is
    already written off as a certain violation by the value bookkeeping, so
    only membership failures among in-box successors count against delta."""

    samples: int
    violations: int
    sink_losses: int
    max_norm: float
    delta: float

    @property
    def in_box_samples(self) -> int:
        return self.samples - self.sink_losses

    @property
    def frequency(self) -> float:
        return self.violations / self.in_box_samples if self.in_box_samples else 0.0

    @property
    def ok(self) -> bool:
        return self.samples == 0 or (1.0 - self.frequency) >= 1.0 - self.delta - 1e-12

    def summary(self) -> str:
        if self.samples == 0:
            return "relation check: no samples requested"
        return (f"relation check: {self.samples} one-step samples, "
                f"{self.violations} membership violations, {self.sink_losses} sink exits, "
                f"max successor norm {self.max_norm:.6g}; "
                f"empirical hold rate {1 - self.frequency:.6f} vs required {1 - self.delta:.6f} "
                f"-> {'ok' if self.ok else 'FAIL'}")


def verify_relation_empirically(game, grid: Grid, relation: RelationParams,
                                sample_count: int, seed: int) -> RelationReport:
    """Monte-Carlo one-step test of relation preservation under the interface.

    Samples related pairs uniformly (cells x the relation ellipsoid), random
    abstract inputs and adversary inputs, applies the interface with a shared
    noise draw and checks successor membership.
    """
    if sample_count == 0:
        return RelationReport(0, 0, 0, 0.0, relation.delta)
    rng = np.random.default_rng(seed)
    s = grid.state_dim
    lt_inv = np.linalg.inv(relation.chol_lower.T)
    violations = 0
    sink_losses = 0
    max_norm = 0.0
    for _ in range(sample_count):
        ix = int(rng.integers(grid.n_cells))
        z = rng.standard_normal(s)
        z /= np.linalg.norm(z)
        d = relation.eps * (rng.random() ** (1.0 / s)) * (lt_inv @ z)
        rep = grid.centers[ix]
        x = rep + d
        iu = int(rng.integers(grid.n_u))
        u_hat = float(grid.u_hat_values[iu])
        u = relation.K @ d + u_hat
        w = rng.uniform(grid.w_bounds[0, 0], grid.w_bounds[0, 1])
        iw = nearest_abstract_adversary(grid, w)
        noise = rng.standard_normal(s)
        x_next = game.A @ x + game.B @ u + game.D @ np.array([w]) + game.R_noise @ noise
        mean_hat = (game.A @ rep + game.B @ np.array([u_hat])
                    + game.D @ np.array([grid.w_values[iw]]) + game.R_noise @ noise)
        nxt = try_quantize_state(grid, mean_hat)
        if nxt == SINK:
            sink_losses += 1
            continue
        norm = relation.m_norm(x_next - grid.centers[nxt])
        max_norm = max(max_norm, norm)
        if norm > relation.eps + 1e-12:
            violations += 1
    return RelationReport(sample_count, violations, sink_losses, max_norm, relation.delta)


# ---------------------------------------------------------------------------
# Kernel persistence (magic "SVKN")
# ---------------------------------------------------------------------------

def save_kernel(kernel: AbstractKernel, path) -> None:
    header = struct.pack("<4sIIII", KERNEL_MAGIC, KERNEL_VERSION,
                         kernel.n_cells, kernel.n_u, kernel.n_w)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(kernel.T, dtype="<f8").tobytes())


def read_kernel_header(path) -> tuple:
    with open(path, "rb") as fh:
        header = fh.read(20)
    magic, version, n_cells, n_u, n_w = struct.unpack("<4sIIII", header)
    if magic != KERNEL_MAGIC:
        raise ConfigError(f"{path}: not a kernel file (bad magic {magic!r})")
    if version != KERNEL_VERSION:
        raise ConfigError(f"{path}: unsupported kernel version {version}")
    return n_cells, n_u, n_w


def load_kernel(path) -> AbstractKernel:
    n_cells, n_u, n_w = read_kernel_header(path)
    data = np.fromfile(path, dtype="<f8", offset=20)
    expect = n_cells * n_u * n_w * (n_cells + 1)
    if data.size != expect:
        raise ConfigError(f"{path}: truncated kernel file ({data.size} of {expect} values)")
    kernel = AbstractKernel(T=data.reshape(n_cells, n_u, n_w, n_cells + 1))
    kernel.validate()
    return kernel
