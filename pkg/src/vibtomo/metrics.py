"""Reconstruction scores: normalized correlation, intrinsic resolution, frequency agreement."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .errors import ShapeError, UndefinedCorrelationError, ValidationError
from .fem import MaterialField, UnitMatrixSet, VoxelGrid, assemble_global
from .modal import solve_modes


def normalized_correlation(est, truth) -> float:
    """Pearson correlation of two flattened fields."""
    a = np.asarray(est, dtype=float).ravel()
    b = np.asarray(truth, dtype=float).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"fields differ in size ({a.size} vs {b.size})")
    a = a - a.mean()
    b = b - b.mean()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    # relative test so that round-off on a constant field does not count as variation
    if na <= 1e-12 * np.sqrt(a.size) * max(np.abs(est).max(), 1e-300) or \
            nb <= 1e-12 * np.sqrt(b.size) * max(np.abs(truth).max(), 1e-300):
        raise UndefinedCorrelationError("correlation is undefined for a constant field")
    return float(np.clip((a @ b) / (na * nb), -1.0, 1.0))


def gaussian_blur(values, grid: VoxelGrid, sigma: float) -> np.ndarray:
    """Separable Gaussian blur on the voxel grid, radius ceil(3 sigma), mirrored boundary.

    The boundary mode is half-sample symmetric (``d c b a | a b c d``), which
    keeps the field mean unchanged.
    """
    vol = grid.reshape(np.asarray(values, dtype=float)).copy()
    if sigma < 0:
        raise ValidationError("blur sigma must be non-negative")
    if sigma == 0:
        return vol.ravel()
    radius = int(np.ceil(3 * sigma))
    for axis in range(3):
        if vol.shape[axis] > 1:
            vol = gaussian_filter1d(vol, sigma, axis=axis, mode="reflect", radius=radius)
    return vol.ravel()


def intrinsic_resolution(est, truth, grid: VoxelGrid, sigmas):
    """Blur scale at which the blurred truth correlates best with ``est``.

    Returns ``(sigma_star, curve)`` with ``curve`` the correlation per sigma.
    Ties go to the smallest sigma.
    """
    sigmas = np.asarray(sigmas, dtype=float)
    if sigmas.size == 0:
        raise ValidationError("sigma sweep is empty")
    curve = np.array([normalized_correlation(est, gaussian_blur(truth, grid, s)) for s in sigmas])
    return float(sigmas[int(np.argmax(curve))]), curve


@dataclass
class ReconReport:
    corr_w: float
    corr_v: float
    sigma_star: float | None = None
    sigma_curve: list = field(default_factory=list)
    freq_table: list = field(default_factory=list)
    mode_similarity: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "corr_w": self.corr_w,
            "corr_v": self.corr_v,
            "sigma_star": self.sigma_star,
            "sigma_curve": self.sigma_curve,
            "freq_table": self.freq_table,
            "mode_similarity": self.mode_similarity,
        }


def _pair_greedy(pred, ref):
    """Match each reference to a distinct prediction, references in ascending order."""
    free = list(range(len(pred)))
    pairs = []
    for j in np.argsort(ref, kind="stable"):
        if not free:
            break
        best = min(free, key=lambda i: abs(pred[i] - ref[j]))
        free.remove(best)
        pairs.append((int(j), best))
    return pairs


def compare_frequencies(estimate: MaterialField, units: UnitMatrixSet, reference, count: int,
                        sampler=None, gammas=None):
    """Predicted vs reference eigenfrequencies of an estimated field.

    ``reference`` is either a :class:`MaterialField` (true frequencies are
    computed on the same unit matrices) or an array of observed angular
    frequencies in rad/s. With ``sampler`` and ``gammas`` (2q x k), the
    per-mode image-space ``|cos|`` between predicted and observed modes is
    reported as well.

    Returns ``(table, similarity)``; table rows are
    ``(reference_hz, predicted_hz, relative_error)``.
    """
    basis = solve_modes(assemble_global(units, estimate), count)
    if isinstance(reference, MaterialField):
        ref_hz = solve_modes(assemble_global(units, reference), count).frequencies
    else:
        ref_hz = np.asarray(reference, dtype=float) / (2 * np.pi)
    pred_hz = basis.frequencies
    table, sim = [], []
    for j, i in _pair_greedy(pred_hz, ref_hz):
        table.append((float(ref_hz[j]), float(pred_hz[i]), float(abs(pred_hz[i] - ref_hz[j]) / ref_hz[j])))
        if sampler is not None and gammas is not None:
            g_pred = sampler.P @ basis.modes[:, i]
            g_obs = gammas[:, j]
            denom = np.linalg.norm(g_pred) * np.linalg.norm(g_obs)
            sim.append(float(abs(g_pred @ g_obs) / denom) if denom > 0 else 0.0)
    return table, sim


def coefficient_of_variation(values) -> float:
    values = np.asarray(values, dtype=float)
    return float(values.std() / abs(values.mean()))


def bright_region(values, grid: VoxelGrid, quantile: float = 0.9):
    """Bounding box ``(lo, hi)`` voxel indices (hi exclusive) of values above a quantile."""
    vol = grid.reshape(values)
    mask = vol >= np.quantile(vol, quantile)
    idx = np.argwhere(mask)
    return idx.min(axis=0), idx.max(axis=0) + 1


def boxes_overlap(a, b) -> bool:
    (alo, ahi), (blo, bhi) = a, b
    return bool(np.all(np.asarray(alo) < np.asarray(bhi)) and np.all(np.asarray(blo) < np.asarray(ahi)))
