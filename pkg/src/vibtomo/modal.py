"""Generalized eigensolves and damped free vibration by modal superposition."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import EigenConvergenceError, UnsupportedDampingError, ValidationError
from .fem import GlobalSystem, Mesh

DENSE_LIMIT = 500
RESIDUAL_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class ModalBasis:
    """Mass-normalized modes (columns of ``modes``) sorted by eigenvalue.

    ``mass`` is the mass matrix the modes are orthonormal against; it is
    needed to project initial conditions onto the basis.
    """

    modes: np.ndarray
    eigenvalues: np.ndarray
    mass: sp.spmatrix | np.ndarray | None = None

    @property
    def k(self) -> int:
        return self.modes.shape[1]

    @property
    def omegas(self) -> np.ndarray:
        return np.sqrt(np.clip(self.eigenvalues, 0.0, None))

    @property
    def frequencies(self) -> np.ndarray:
        return self.omegas / (2 * np.pi)

    def truncate(self, k: int) -> "ModalBasis":
        return ModalBasis(self.modes[:, :k], self.eigenvalues[:k], self.mass)


def relative_residuals(K, M, U, lam) -> np.ndarray:
    """``|K u - lam M u| / (lam |M u|)`` per mode.

    Near-zero eigenvalues (rigid-body modes) use ``|K u| + |lam| |M u|`` as
    the denominator instead.
    """
    KU = K @ U
    MU = M @ U
    res = np.linalg.norm(KU - MU * lam, axis=0)
    denom = np.abs(lam) * np.linalg.norm(MU, axis=0)
    rigid = np.abs(lam) <= 1e-8 * np.abs(lam).max()
    denom[rigid] += np.linalg.norm(KU[:, rigid], axis=0) + 1e-300
    return res / denom


def _rayleigh_ritz(K, M, V):
    Kr = V.T @ (K @ V)
    Mr = V.T @ (M @ V)
    Kr = (Kr + Kr.T) / 2
    Mr = (Mr + Mr.T) / 2
    lam, Q = sla.eigh(Kr, Mr)
    return lam, V @ Q


def solve_modes(system: GlobalSystem, count: int, freq_ceiling: float | None = None,
                method: str = "auto", tol: float = 1e-10, maxiter: int | None = None) -> ModalBasis:
    """Lowest ``count`` eigenpairs of ``K u = omega^2 M u``.

    ``method`` is ``"dense"``, ``"shift-invert"`` or ``"auto"`` (dense for
    n <= 500). Modes come back M-orthonormal and sorted ascending; with
    ``freq_ceiling`` [Hz] only modes at or below the ceiling are kept.
    """
    K = sp.csr_matrix(system.K)
    M = sp.csr_matrix(system.M)
    n = K.shape[0]
    k = int(count)
    if not 1 <= k <= n:
        raise ValidationError(f"mode count must be in [1, {n}], got {count}")
    if method not in ("auto", "dense", "shift-invert"):
        raise ValidationError(f"unknown eigensolver method {method!r}")
    dense = method == "dense" or (method == "auto" and n <= DENSE_LIMIT) or k >= n - 1
    if dense:
        lam, U = sla.eigh(K.toarray(), M.toarray(), subset_by_index=[0, k - 1])
    else:
        scale = K.diagonal().mean() / M.diagonal().mean()
        sigma = -1e-6 * scale
        ncv = min(n, max(2 * k + 1, k + 20))
        maxiter = maxiter if maxiter is not None else 10 * k * ncv
        try:
            _, V = spla.eigsh(K.tocsc(), k=k, M=M.tocsc(), sigma=sigma, which="LM",
                              tol=tol, ncv=ncv, maxiter=maxiter)
        except spla.ArpackNoConvergence as exc:
            raise EigenConvergenceError(f"shift-invert Lanczos did not converge: {exc}") from None
        lam, U = _rayleigh_ritz(K, M, V)
    order = np.argsort(lam, kind="stable")
    lam, U = lam[order], U[:, order]
    # M-normalize and fix sign so the largest-magnitude entry is positive
    U = U / np.sqrt(np.einsum("ij,ij->j", U, M @ U))
    big = np.argmax(np.abs(U), axis=0)
    U = U * np.sign(U[big, np.arange(U.shape[1])])
    if not dense:
        res = relative_residuals(K, M, U, lam)
        if np.any(res > RESIDUAL_TOL):
            raise EigenConvergenceError(f"eigen-residual {res.max():.2e} exceeds {RESIDUAL_TOL:g}")
    if freq_ceiling is not None:
        keep = np.sqrt(np.clip(lam, 0, None)) / (2 * np.pi) <= freq_ceiling
        lam, U = lam[keep], U[:, keep]
    return ModalBasis(U, lam, M)


@dataclass(frozen=True)
class RayleighDamping:
    """Damping matrix ``alpha M + beta K``."""

    alpha: float = 0.0
    beta: float = 0.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValidationError("Rayleigh coefficients must be non-negative")

    def ratio(self, omega):
        omega = np.asarray(omega, dtype=float)
        with np.errstate(divide="ignore"):
            return self.alpha / (2 * omega) + self.beta * omega / 2


def rayleigh_from_ratios(p1, p2) -> RayleighDamping:
    """Rayleigh coefficients matching damping ratios at two frequencies.

    ``p1`` and ``p2`` are ``(frequency_hz, zeta)`` pairs.
    """
    (f1, z1), (f2, z2) = p1, p2
    if f1 <= 0 or f2 <= 0:
        raise ValidationError("frequencies must be positive")
    if min(z1, z2) < 0:
        raise ValidationError("damping ratios must be non-negative")
    w1, w2 = 2 * np.pi * f1, 2 * np.pi * f2
    A = np.array([[1 / (2 * w1), w1 / 2], [1 / (2 * w2), w2 / 2]])
    if np.isclose(w1, w2, rtol=1e-12, atol=0):
        raise ValidationError("Rayleigh fit needs two distinct frequencies")
    alpha, beta = np.linalg.solve(A, [z1, z2])
    # exact zeros stay zero; tiny negative round-off is clipped
    return RayleighDamping(max(alpha, 0.0), max(beta, 0.0))


@dataclass(frozen=True, eq=False)
class DisplacementSeries:
    frames: np.ndarray
    fps: float

    def __post_init__(self):
        if self.frames.ndim != 2 or len(self.frames) < 2:
            raise ValidationError("a displacement series needs at least two frames")
        if not self.fps > 0:
            raise ValidationError("fps must be positive")

    @property
    def T(self) -> int:
        return len(self.frames)

    @property
    def n(self) -> int:
        return self.frames.shape[1]

    @property
    def duration(self) -> float:
        return self.T / self.fps


def modal_response(omega, zeta, q0, qd0, t):
    """Closed-form free response of independent damped oscillators.

    Returns ``(q, qdot)`` of shape (len(t), len(omega)).
    """
    omega = np.asarray(omega, dtype=float)
    zeta = np.asarray(zeta, dtype=float)
    t = np.asarray(t, dtype=float)[:, None]
    wd = omega * np.sqrt(1 - zeta ** 2)
    c = (qd0 + zeta * omega * q0) / wd
    env = np.exp(-zeta * omega * t)
    cos, sin = np.cos(wd * t), np.sin(wd * t)
    q = env * (q0 * cos + c * sin)
    qd = env * ((c * wd - zeta * omega * q0) * cos - (q0 * wd + zeta * omega * c) * sin)
    return q, qd


def frame_count(fps: float, duration: float) -> int:
    return int(round(fps * duration))


def simulate_transient(basis: ModalBasis, damping: RayleighDamping, d0, fps: float, duration: float,
                       v0=None, output=None) -> DisplacementSeries:
    """Free vibration from initial displacement ``d0`` (and velocity ``v0``).

    Frames are ``sum_i q_i(t) u_i``; frame 0 is the M-orthogonal projection of
    ``d0`` onto the retained modes (``d0`` itself for a complete basis).
    ``output`` is an optional linear map applied to every frame, e.g. a
    sampling operator, so that the full-field history is never stored.
    """
    if not fps > 0:
        raise ValidationError("fps must be positive")
    T = frame_count(fps, duration)
    if T < 2:
        raise ValidationError(f"duration {duration} s at {fps} FPS gives fewer than two frames")
    if basis.mass is None:
        raise ValidationError("basis carries no mass matrix; cannot project initial conditions")
    omega = basis.omegas
    if np.any(omega <= 0):
        raise ValidationError("transient simulation needs strictly positive eigenfrequencies")
    zeta = damping.ratio(omega)
    if np.any(zeta >= 1):
        raise UnsupportedDampingError(f"{int(np.sum(zeta >= 1))} mode(s) have damping ratio >= 1")
    U = basis.modes
    d0 = np.asarray(d0, dtype=float)
    q0 = U.T @ (basis.mass @ d0)
    qd0 = np.zeros_like(q0) if v0 is None else U.T @ (basis.mass @ np.asarray(v0, dtype=float))
    t = np.arange(T) / fps
    q, _ = modal_response(omega, zeta, q0, qd0, t)
    shapes = U if output is None else np.asarray(output @ U)
    return DisplacementSeries(q @ shapes.T, float(fps))


def nearest_vertex(mesh: Mesh, point) -> int:
    return int(np.argmin(np.linalg.norm(mesh.vertices - np.asarray(point, dtype=float), axis=1)))


# fractional corner positions on the unit cube; front is y = 0
CORNERS = {
    "top-front": (1.0, 0.0, 1.0),
    "top-back": (1.0, 1.0, 1.0),
    "top-front-left": (0.0, 0.0, 1.0),
    "top-back-left": (0.0, 1.0, 1.0),
}


def corner_vertex(mesh: Mesh, corner) -> int:
    frac = CORNERS[corner] if isinstance(corner, str) else corner
    lo = np.asarray(mesh.grid.origin)
    return nearest_vertex(mesh, lo + np.asarray(frac) * mesh.grid.extent)


def pluck_displacement(mesh: Mesh, system: GlobalSystem, vertex: int, displacement) -> np.ndarray:
    """Static deformation with ``vertex`` pulled by ``displacement`` [m].

    A point load along the pluck direction is applied at the vertex and
    ``K x = f`` is solved; the result is scaled so the vertex moves by
    ``|displacement|`` along that direction.
    """
    displacement = np.atleast_1d(np.asarray(displacement, dtype=float))
    dofs = mesh.dof_map[vertex]
    if np.any(dofs < 0):
        raise ValidationError(f"vertex {vertex} is fixed and cannot be plucked")
    amp = np.linalg.norm(displacement)
    if amp == 0:
        return np.zeros(mesh.n)
    direction = displacement / amp
    f = np.zeros(mesh.n)
    f[dofs] = direction
    x = spla.spsolve(sp.csc_matrix(system.K), f)
    along = x[dofs] @ direction
    return x * (amp / along)


# ---------------------------------------------------------------------------
# binary series container

_MAGIC = b"VTDS0001"
_HEADER = struct.Struct("<8sQQd")


def write_series(path, series: DisplacementSeries, mesh_file: str | None = None) -> None:
    """Header ``(magic, n, T, fps)`` then row-major little-endian float64 frames, plus a JSON sidecar."""
    path = Path(path)
    frames = np.ascontiguousarray(series.frames, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, series.n, series.T, series.fps))
        fh.write(frames.tobytes(order="C"))
    sidecar = {"n": series.n, "T": series.T, "fps": series.fps, "dtype": "<f8", "mesh": mesh_file}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=1))


def read_series(path) -> DisplacementSeries:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValidationError(f"{path}: truncated series header")
    magic, n, T, fps = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ValidationError(f"{path}: not a displacement series file")
    data = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    if data.size != n * T:
        raise ValidationError(f"{path}: expected {n * T} values, found {data.size}")
    return DisplacementSeries(data.reshape(T, n).astype(float), fps)
