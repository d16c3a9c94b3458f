"""Material inversion from image-space modes by penalized dual ascent.

The solver minimizes, over voxel fields ``w``, ``v`` and full-field modes
``u_i``::

    1/(2k) sum_i y_i |K u_i - om_i^2 M u_i|^2 + alpha_u/(2k) sum_i |P u_i - g_i|^2
      + alpha_w/(2m) |L w|^2 + alpha_v/(2m) |L v|^2 + (mean(w) - w_bar)^2

with ``K = sum w_e K_e`` and ``M = sum v_e M_e``. Each outer iteration solves
exactly for the modes at fixed materials, then for the materials at fixed
modes (both blocks are linear least squares), then raises every penalty
weight ``y_i`` by ``eta`` times its eigen-residual norm.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import AnchorMissingError, DivergenceError, ShapeError, ValidationError
from .fem import UnitMatrixSet, VoxelGrid
from .observation import Observations, SamplingOperator

log = logging.getLogger(__name__)


@dataclass
class InversionConfig:
    alpha_u: float = 10.0
    alpha_w: float = 1e-10
    alpha_v: float = 1e-7
    eta: float = 1.0
    w_bar: float = 9000.0
    w_init: float = 9000.0
    v_init: float = 1270.0
    y_init: float = 1.0
    max_iters: int = 100
    rel_tol: float = 1e-4
    # proximal ridge on v, relative to the mean diagonal of the v block
    v_ridge: float = 1e-8
    clamp: bool = True

    def __post_init__(self):
        for name in ("alpha_u", "alpha_w", "alpha_v", "y_init", "v_ridge"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be non-negative")
        if not self.eta > 0:
            raise ValidationError("eta must be positive")
        if not self.w_bar > 0:
            raise ValidationError("w_bar must be positive")
        if self.max_iters < 1:
            raise ValidationError("max_iters must be at least 1")

    @classmethod
    def cube_defaults(cls, n_modes: int, **overrides) -> "InversionConfig":
        """Simulated-cube hyperparameters; ``alpha_u`` depends on the mode count."""
        base = dict(alpha_u=10.0 if n_modes >= 10 else 1.0, alpha_w=1e-10, alpha_v=1e-7, eta=1.0,
                    w_bar=9000.0, w_init=9000.0, v_init=1270.0)
        return cls(**{**base, **overrides})

    @classmethod
    def drum_defaults(cls, **overrides) -> "InversionConfig":
        base = dict(alpha_u=1e12, eta=1.0, alpha_w=0.1, alpha_v=0.1, w_bar=1e6, w_init=1e6, v_init=1e3)
        return cls(**{**base, **overrides})

    @classmethod
    def jello_defaults(cls, **overrides) -> "InversionConfig":
        base = dict(alpha_u=0.1, eta=1.0, alpha_w=1e-10, alpha_v=1e-8, w_bar=1e4, w_init=1e4, v_init=1500.0)
        return cls(**{**base, **overrides})

    @classmethod
    def from_dict(cls, doc: dict) -> "InversionConfig":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown config field(s): {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)


def build_laplacian(grid: VoxelGrid) -> sp.csr_matrix:
    """Second-difference operator on the voxel grid with mirrored boundaries.

    Interior rows carry the usual ``[1, -2, 1]`` stencil per axis; axes of
    length 1 contribute nothing, so (nx, ny, 1) grids get the 4-neighbour
    stencil. Rows sum to zero and the matrix is symmetric.
    """
    idx = np.arange(grid.m).reshape(grid.dims)
    rows, cols = [], []
    for axis in range(3):
        if grid.dims[axis] < 2:
            continue
        a = np.take(idx, np.arange(grid.dims[axis] - 1), axis=axis).ravel()
        b = np.take(idx, np.arange(1, grid.dims[axis]), axis=axis).ravel()
        rows += [a, b]
        cols += [b, a]
    if not rows:
        return sp.csr_matrix((grid.m, grid.m))
    r, c = np.concatenate(rows), np.concatenate(cols)
    adj = sp.csr_matrix((np.ones(r.size), (r, c)), shape=(grid.m, grid.m))
    deg = np.asarray(adj.sum(axis=1)).ravel()
    return sp.csr_matrix(adj - sp.diags(deg))


@dataclass(eq=False)
class InverseProblem:
    """Everything the blocks need that does not change across iterations."""

    units: UnitMatrixSet
    P: sp.csr_matrix
    gammas: np.ndarray
    omegas: np.ndarray
    laplacian: sp.csr_matrix
    config: InversionConfig

    def __post_init__(self):
        self.gammas = np.asarray(self.gammas, dtype=float).reshape(self.P.shape[0], -1)
        self.omegas = np.asarray(self.omegas, dtype=float).ravel()
        if self.gammas.shape[1] != self.omegas.size:
            raise ShapeError("need one frequency per observed mode")
        if self.P.shape[1] != self.units.n:
            raise ShapeError(f"sampling operator has {self.P.shape[1]} columns, system has {self.units.n} DOFs")
        if self.laplacian.shape != (self.units.m, self.units.m):
            raise ShapeError("Laplacian does not match the voxel count")
        self.PtP = (self.P.T @ self.P).toarray()
        self.Ptg = np.asarray(self.P.T @ self.gammas)
        self.LtL = (self.laplacian.T @ self.laplacian).toarray()

    @property
    def k(self) -> int:
        return self.omegas.size

    @property
    def m(self) -> int:
        return self.units.m

    @property
    def n(self) -> int:
        return self.units.n


@dataclass(eq=False)
class SolverState:
    w: np.ndarray
    v: np.ndarray
    U: np.ndarray
    y: np.ndarray
    iter: int = 0
    objective_history: list = field(default_factory=list)
    residuals: list = field(default_factory=list)
    block_history: list = field(default_factory=list)
    y_history: list = field(default_factory=list)
    clamp_count: int = 0
    converged: bool = False

    def copy(self) -> "SolverState":
        return SolverState(self.w.copy(), self.v.copy(), self.U.copy(), self.y.copy(), self.iter,
                           list(self.objective_history), list(self.residuals), list(self.block_history),
                           list(self.y_history), self.clamp_count, self.converged)


def initial_state(problem: InverseProblem) -> SolverState:
    cfg = problem.config
    m, n, k = problem.m, problem.n, problem.k
    w = np.broadcast_to(np.asarray(cfg.w_init, dtype=float), (m,)).copy()
    v = np.broadcast_to(np.asarray(cfg.v_init, dtype=float), (m,)).copy()
    return SolverState(w, v, np.zeros((n, k)), np.full(k, float(cfg.y_init)))


def eigen_residuals(state: SolverState, problem: InverseProblem) -> np.ndarray:
    """(n, k) matrix of ``K u_i - om_i^2 M u_i``."""
    K, M = problem.units.assemble(state.w, state.v)
    return K @ state.U - (M @ state.U) * problem.omegas ** 2


def objective(state: SolverState, problem: InverseProblem) -> float:
    cfg = problem.config
    k, m = problem.k, problem.m
    total = 0.0
    if k:
        R = eigen_residuals(state, problem)
        D = problem.P @ state.U - problem.gammas
        total += np.sum(state.y * np.einsum("ij,ij->j", R, R)) / (2 * k)
        total += cfg.alpha_u * np.sum(D * D) / (2 * k)
    Lw = problem.laplacian @ state.w
    Lv = problem.laplacian @ state.v
    total += cfg.alpha_w * (Lw @ Lw) / (2 * m) + cfg.alpha_v * (Lv @ Lv) / (2 * m)
    total += (state.w.mean() - cfg.w_bar) ** 2
    return float(total)


def _spd_solve(H: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve a symmetric PSD system; ridge ``1e-12 * trace / n`` is added if it is singular."""
    try:
        c = sla.cho_factor(H, lower=True, check_finite=False)
        x = sla.cho_solve(c, rhs, check_finite=False)
        if np.all(np.isfinite(x)):
            return x
    except np.linalg.LinAlgError:
        pass
    ridge = 1e-12 * max(np.trace(H) / len(H), np.finfo(float).tiny)
    Hr = H + ridge * np.eye(len(H))
    try:
        c = sla.cho_factor(Hr, lower=True, check_finite=False)
        return sla.cho_solve(c, rhs, check_finite=False)
    except np.linalg.LinAlgError:
        return sla.lstsq(Hr, rhs)[0]


def mode_system(state: SolverState, problem: InverseProblem, i: int, K=None, M=None):
    """Normal equations ``(H, rhs)`` of the mode block for mode ``i``."""
    if K is None:
        K, M = problem.units.assemble(state.w, state.v)
    A = sp.csr_matrix(K - problem.omegas[i] ** 2 * M)
    cfg = problem.config
    H = state.y[i] * (A @ A).toarray() + cfg.alpha_u * problem.PtP
    rhs = cfg.alpha_u * problem.Ptg[:, i]
    return H, rhs


def solve_modes_block(state: SolverState, problem: InverseProblem) -> np.ndarray:
    """Closed-form minimizer over each ``u_i`` with materials held fixed.

    Solves ``(y_i A_i^T A_i + alpha_u P^T P) u = alpha_u P^T g_i`` with
    ``A_i = K - om_i^2 M``. A zero penalty weight reduces to the least-norm
    fit of ``P u = g_i``.
    """
    K, M = problem.units.assemble(state.w, state.v)
    U = np.zeros((problem.n, problem.k))
    for i in range(problem.k):
        if state.y[i] == 0:
            U[:, i] = spla.lsqr(problem.P, problem.gammas[:, i], atol=1e-14, btol=1e-14,
                                iter_lim=10 * problem.n)[0]
            continue
        H, rhs = mode_system(state, problem, i, K, M)
        U[:, i] = _spd_solve(H, rhs)
    return U


def material_system(state: SolverState, problem: InverseProblem, ridge: bool = True, anchor: bool = True):
    """Normal equations ``(H, g)`` of the material block over ``z = [w, v]``.

    The block objective is ``z^T H z / 2 - g^T z + const``; without the
    ridge its gradient ``H z - g`` is the gradient of :func:`objective`.
    With ``anchor=False`` the rank-one mean-anchor term ``(2/m^2) 1 1^T``
    (and its share of ``g``) is left out. Returns ``(H, g, data_in_v)``
    where ``data_in_v`` tells whether any mode constrains the density.
    """
    cfg = problem.config
    m, k = problem.m, problem.k
    H = np.zeros((2 * m, 2 * m))
    g = np.zeros(2 * m)
    for i in range(k):
        BK = problem.units.apply_stiffness(state.U[:, i])
        BM = problem.units.apply_mass(state.U[:, i]) * (-problem.omegas[i] ** 2)
        B = sp.hstack([BK, BM]).tocsc()
        H += (state.y[i] / k) * (B.T @ B).toarray()
    data_in_v = bool(np.any(np.diag(H)[m:] > 0))
    H[:m, :m] += cfg.alpha_w / m * problem.LtL
    H[m:, m:] += cfg.alpha_v / m * problem.LtL
    if anchor:
        H[:m, :m] += 2.0 / m ** 2
        g[:m] += 2.0 * cfg.w_bar / m
    if ridge and cfg.v_ridge > 0 and data_in_v:
        eps = cfg.v_ridge * np.diag(H)[m:].mean()
        H[m:, m:] += 2 * eps * np.eye(m)
        g[m:] += 2 * eps * state.v
    return H, g, data_in_v


def material_gradient(state: SolverState, problem: InverseProblem) -> np.ndarray:
    """Gradient of :func:`objective` with respect to ``[w, v]`` at fixed modes."""
    H, g, _ = material_system(state, problem, ridge=False)
    return H @ np.concatenate([state.w, state.v]) - g


def _scaled_solve(H, g):
    d = np.sqrt(np.diag(H))
    d[d == 0] = 1.0
    scale = d if g.ndim == 1 else d[:, None]
    Hs = H / np.outer(d, d)
    zs = _spd_solve(Hs, g / scale)
    # one step of iterative refinement
    zs += _spd_solve(Hs, g / scale - Hs @ zs)
    return zs / scale


def _anchored_solve(H, g, m: int, w_bar: float):
    """Minimize ``z^T H z / 2 - g^T z + (mean(z[:m]) - w_bar)^2``.

    The anchor adds ``(2/m^2) a a^T`` with ``a = [1, .., 1, 0, .., 0]`` to
    the Hessian. Folding it into ``H`` would dominate the diagonal and wreck
    the Jacobi scaling (the data terms are many orders of magnitude smaller
    in SI units), so it is applied exactly with Sherman-Morrison instead.
    When ``H`` is nearly singular along the joint-scale direction the two
    solves below behave like inverse iteration and the normalization
    cancels the error along that direction.
    """
    c = 2.0 / m ** 2
    a = np.zeros(len(g))
    a[:m] = 1.0
    if not np.any(g):
        # the usual case: the solution is a rescaled H^{-1} a
        xa = _scaled_solve(H, a)
        return xa * (c * m * w_bar / (1.0 + c * xa[:m].sum()))
    X = _scaled_solve(H, np.column_stack([g, a]))
    x0, xa = X[:, 0], X[:, 1]
    return x0 + xa * (c * (m * w_bar - x0[:m].sum()) / (1.0 + c * xa[:m].sum()))


def solve_material_block(state: SolverState, problem: InverseProblem):
    """Closed-form minimizer over ``(w, v)`` with modes held fixed.

    Raises :class:`AnchorMissingError` when no mode constrains the density;
    the error carries the stiffness solution, which is still determined by
    the mean anchor and smoothness terms.
    """
    m, w_bar = problem.m, problem.config.w_bar
    H, g, data_in_v = material_system(state, problem, anchor=False)
    if not data_in_v:
        w = _anchored_solve(H[:m, :m], g[:m], m, w_bar)
        raise AnchorMissingError(
            "density is unconstrained: no observed mode has a nonzero full-field estimate; "
            "provide modes or enable a density ridge", w=w)
    z = _anchored_solve(H, g, m, w_bar)
    return z[:m], z[m:]


def dual_update(state: SolverState, problem: InverseProblem) -> np.ndarray:
    """``y_i + eta * |K u_i - om_i^2 M u_i|`` (non-squared residual norm)."""
    if problem.k == 0:
        return state.y.copy()
    R = eigen_residuals(state, problem)
    return state.y + problem.config.eta * np.linalg.norm(R, axis=0)


def _clamp(state: SolverState, w, v, cfg: InversionConfig):
    w_floor = 1e-6 * cfg.w_bar
    v_floor = 1e-6 * float(np.mean(cfg.v_init))
    low = int(np.sum(w < w_floor) + np.sum(v < v_floor))
    if low:
        state.clamp_count += low
        w = np.maximum(w, w_floor)
        v = np.maximum(v, v_floor)
    return w, v


def iterate(state: SolverState, problem: InverseProblem) -> SolverState:
    """One outer iteration: mode block, material block, dual update (in place)."""
    cfg = problem.config
    f0 = objective(state, problem)
    state.U = solve_modes_block(state, problem)
    f1 = objective(state, problem)
    w, v = solve_material_block(state, problem)
    if cfg.clamp:
        w, v = _clamp(state, w, v, cfg)
    state.w, state.v = w, v
    f2 = objective(state, problem)
    state.block_history.append((f0, f1, f2))
    state.objective_history.append(f2)
    R = eigen_residuals(state, problem)
    state.residuals.append(np.linalg.norm(R, axis=0))
    if not np.isfinite(f2):
        raise DivergenceError(f"objective became non-finite at iteration {state.iter}", state=state)
    state.y = dual_update(state, problem)
    state.y_history.append(state.y.copy())
    state.iter += 1
    return state


def make_problem(observations: Observations, units: UnitMatrixSet, grid: VoxelGrid,
                 config: InversionConfig, sampler: SamplingOperator) -> InverseProblem:
    if observations.q != sampler.q:
        raise ShapeError(f"observations are for {observations.q} vertices, sampler for {sampler.q}")
    if grid.m != units.m:
        raise ShapeError("grid voxel count does not match the unit matrices")
    return InverseProblem(units, sampler.P, observations.gammas, observations.omegas,
                          build_laplacian(grid), config)


def run_inversion(observations: Observations, units: UnitMatrixSet, grid: VoxelGrid,
                  config: InversionConfig, sampler: SamplingOperator, callback=None):
    """Alternate the two block solves and the dual update until ``(w, v)`` settle.

    Returns ``(w, v, state)``. Convergence is declared when the largest
    relative change of ``w`` and ``v`` over one iteration drops below
    ``config.rel_tol``; ``state.converged`` records whether that happened
    within ``config.max_iters``.
    """
    problem = make_problem(observations, units, grid, config, sampler)
    state = initial_state(problem)
    for _ in range(config.max_iters):
        w_old, v_old = state.w.copy(), state.v.copy()
        iterate(state, problem)
        change = max(np.linalg.norm(state.w - w_old) / np.linalg.norm(w_old),
                     np.linalg.norm(state.v - v_old) / np.linalg.norm(v_old))
        log.debug("iter %d objective %.6e change %.3e", state.iter, state.objective_history[-1], change)
        if callback is not None:
            callback(state)
        if change < config.rel_tol:
            state.converged = True
            break
    return state.w.copy(), state.v.copy(), state


def result_to_dict(state: SolverState) -> dict:
    return {
        "w": state.w.tolist(),
        "v": state.v.tolist(),
        "objective_history": [float(f) for f in state.objective_history],
        "residuals": [r.tolist() for r in state.residuals],
        "iterations": state.iter,
        "clamp_count": state.clamp_count,
        "converged": state.converged,
        "y": state.y.tolist(),
    }


def save_config(config: InversionConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=1))


def load_config(path) -> InversionConfig:
    return InversionConfig.from_dict(json.loads(Path(path).read_text()))
