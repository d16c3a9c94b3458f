"""Camera model, image-space sampling and spectral mode identification.

Motion series here are per-vertex pixel displacements, i.e. what a video
motion extractor would report at the projected mesh vertices. Image-space
vectors stack ``(dx, dy)`` per mesh vertex in vertex order, so a vector has
length ``2 q``; rows of unseen vertices are zero.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.signal as ss
import scipy.sparse as sp
from scipy.optimize import least_squares

from .errors import FitError, RankDeficiencyError, ShapeError, ValidationError
from .fem import FACES, HEX8, TRI3, Mesh, _face_mask
from .modal import DisplacementSeries, ModalBasis

_FACE_NORMALS = {
    "left": (-1, 0, 0), "right": (1, 0, 0), "front": (0, -1, 0),
    "back": (0, 1, 0), "bottom": (0, 0, -1), "top": (0, 0, 1),
}


@dataclass(frozen=True, eq=False)
class ProjectionModel:
    """Affine camera ``p = A X + b`` with ``A`` in pixels per metre."""

    A: np.ndarray
    b: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        b = np.asarray(self.b, dtype=float).ravel()
        if A.shape != (2, 3) or b.shape != (2,):
            raise ShapeError("projection needs A of shape (2, 3) and b of length 2")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    def project(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.A.T + self.b

    @property
    def view_direction(self) -> np.ndarray:
        """Unit vector pointing from the camera into the scene."""
        d = np.cross(self.A[0], self.A[1])
        nrm = np.linalg.norm(d)
        if nrm == 0:
            raise RankDeficiencyError("projection matrix has rank < 2")
        return d / nrm

    def to_dict(self) -> dict:
        return {"A": self.A.tolist(), "b": self.b.tolist()}


def look_at_camera(view_dir, scale: float, offset=(0.0, 0.0), up=(0.0, 0.0, 1.0)) -> ProjectionModel:
    """Orthographic camera looking along ``view_dir``; image x is right, image y is down."""
    f = np.asarray(view_dir, dtype=float)
    f = f / np.linalg.norm(f)
    right = np.cross(f, up)
    if np.linalg.norm(right) < 1e-12:
        right = np.cross(f, (0.0, 1.0, 0.0))
    right /= np.linalg.norm(right)
    down = np.cross(f, right)
    return ProjectionModel(scale * np.stack([right, down]), np.asarray(offset, dtype=float))


def three_face_camera(scale: float = 2000.0) -> ProjectionModel:
    """Monocular view of the top, front (y min) and right (x max) faces of a box."""
    return look_at_camera((-1.0, 1.0, -1.0), scale)


def fit_projection(points3d, pixels) -> ProjectionModel:
    """Least-squares affine camera from >= 4 point correspondences."""
    X = np.asarray(points3d, dtype=float)
    p = np.asarray(pixels, dtype=float)
    if X.ndim != 2 or X.shape[1] != 3 or p.shape != (len(X), 2):
        raise ShapeError("need matching (N, 3) points and (N, 2) pixel coordinates")
    if len(X) < 4:
        raise ValidationError(f"affine fit needs at least 4 correspondences, got {len(X)}")
    centred = X - X.mean(axis=0)
    _, s, Vt = np.linalg.svd(centred, full_matrices=True)
    s = np.concatenate([s, np.zeros(3 - len(s))])
    if s[2] <= 1e-10 * s[0]:
        raise RankDeficiencyError(
            f"reference points are coplanar; no information along direction {np.round(Vt[2], 6).tolist()}",
            direction=Vt[2])
    design = np.hstack([X, np.ones((len(X), 1))])
    sol, *_ = np.linalg.lstsq(design, p, rcond=None)
    return ProjectionModel(sol[:3].T, sol[3])


# ---------------------------------------------------------------------------
# sampling operator


@dataclass(frozen=True, eq=False)
class SamplingOperator:
    """Sparse ``2q x n`` map from free-DOF displacement to stacked pixel displacement."""

    P: sp.csr_matrix
    visible_vertices: np.ndarray
    q: int
    projection: ProjectionModel

    @property
    def row_mask(self) -> np.ndarray:
        mask = np.zeros(2 * self.q, dtype=bool)
        mask[2 * self.visible_vertices] = True
        mask[2 * self.visible_vertices + 1] = True
        return mask

    def __matmul__(self, u):
        return self.P @ u


def auto_visible(mesh: Mesh, proj: ProjectionModel) -> np.ndarray:
    """Vertices on camera-facing faces of the mesh's bounding box (all vertices for membranes)."""
    if mesh.kind == TRI3:
        return np.arange(mesh.q)
    d = proj.view_direction
    mask = np.zeros(mesh.q, dtype=bool)
    for face in FACES:
        if np.dot(_FACE_NORMALS[face], d) < -1e-12:
            mask |= _face_mask(mesh.vertices, mesh.grid, face)
    return np.flatnonzero(mask)


def _vertex_weights(mesh: Mesh, proj: ProjectionModel) -> np.ndarray:
    """(dof_per_vertex, 2) pixel response of a unit displacement of each vertex DOF."""
    if mesh.kind == HEX8:
        return proj.A.T
    # membranes move along the surface normal
    return (proj.A @ np.array([0.0, 0.0, 1.0]))[None, :]


def interpolation_operator(source: Mesh, points) -> sp.csr_matrix:
    """(3 P) x n_source map giving source displacements at ``points``.

    Trilinear interpolation on a structured hex8 source mesh; points outside
    the box are clamped to it.
    """
    if source.kind != HEX8 or not source.structured:
        raise ValidationError("interpolation needs a structured hex8 source mesh")
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    g = source.grid
    dims = np.asarray(g.dims)
    rel = (pts - np.asarray(g.origin)) / g.spacing
    cell = np.clip(np.floor(rel).astype(int), 0, dims - 1)
    t = np.clip(rel - cell, 0.0, 1.0)
    rows, cols, vals = [], [], []
    for a in (0, 1):
        for b in (0, 1):
            for c in (0, 1):
                wgt = ((t[:, 0] if a else 1 - t[:, 0]) * (t[:, 1] if b else 1 - t[:, 1])
                       * (t[:, 2] if c else 1 - t[:, 2]))
                vid = ((cell[:, 0] + a) * (dims[1] + 1) + cell[:, 1] + b) * (dims[2] + 1) + cell[:, 2] + c
                for comp in range(3):
                    dof = source.dof_map[vid, comp]
                    ok = (dof >= 0) & (wgt != 0)
                    rows.append(3 * np.flatnonzero(ok) + comp)
                    cols.append(dof[ok])
                    vals.append(wgt[ok])
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(3 * len(pts), source.n))


def build_sampling_operator(mesh: Mesh, proj: ProjectionModel, visible="auto",
                            source: Mesh | None = None) -> SamplingOperator:
    """Sampling operator for the visible vertices of ``mesh``.

    With ``source`` given, rows still refer to the vertices of ``mesh`` but
    columns are the free DOFs of ``source``: the source displacement field is
    interpolated at the vertex positions of ``mesh`` before projection. This
    models a video of one object sampled at the vertices of a different
    (coarser) inference mesh.
    """
    if isinstance(visible, str):
        if visible != "auto":
            raise ValidationError(f"visible must be 'auto' or a vertex list, got {visible!r}")
        vis = auto_visible(mesh, proj)
    else:
        vis = np.unique(np.asarray(visible, dtype=np.int64))
    if vis.size == 0:
        raise ValidationError("no visible vertices")
    if vis.min() < 0 or vis.max() >= mesh.q:
        raise ValidationError("visible vertex index out of range")

    if source is None:
        W = _vertex_weights(mesh, proj)
        rows, cols, vals = [], [], []
        for comp in range(mesh.dof_per_vertex):
            dof = mesh.dof_map[vis, comp]
            ok = dof >= 0
            for r in range(2):
                rows.append(2 * vis[ok] + r)
                cols.append(dof[ok])
                vals.append(np.full(ok.sum(), W[comp, r]))
        P = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(2 * mesh.q, mesh.n))
    else:
        interp = interpolation_operator(source, mesh.vertices[vis])
        blocks = sp.kron(sp.eye(len(vis)), sp.csr_matrix(proj.A))
        local = sp.csr_matrix(blocks @ interp)
        select = sp.csr_matrix((np.ones(2 * len(vis)),
                                (np.ravel(np.stack([2 * vis, 2 * vis + 1], axis=1)), np.arange(2 * len(vis)))),
                               shape=(2 * mesh.q, 2 * len(vis)))
        P = sp.csr_matrix(select @ local)
    P.sort_indices()
    return SamplingOperator(P, vis, mesh.q, proj)


# ---------------------------------------------------------------------------
# spectra


@dataclass(frozen=True, eq=False)
class Spectrum:
    """One-sided motion power spectrum without the DC bin.

    ``freqs[l - 1] = fps * l / T`` for FFT bins ``l = 1 .. T // 2``;
    ``power`` sums ``|X_l|^2`` over all image-space DOFs, with ``X`` the
    unnormalized DFT (numpy convention).
    """

    freqs: np.ndarray
    power: np.ndarray
    fps: float
    T: int
    coeffs: np.ndarray | None = None

    @property
    def bin_width(self) -> float:
        return self.fps / self.T

    def frequency(self, bin_: int) -> float:
        return self.fps * bin_ / self.T

    def total_variance(self) -> float:
        """Sum over DOFs of the population variance in time, recovered from ``power``."""
        p = self.power
        if self.T % 2 == 0:
            return (2 * p[:-1].sum() + p[-1]) / self.T ** 2
        return 2 * p.sum() / self.T ** 2


def _as_array(series) -> tuple[np.ndarray, float | None]:
    if isinstance(series, DisplacementSeries):
        return series.frames, series.fps
    return np.asarray(series, dtype=float), None


def power_spectrum(series, fps: float | None = None, window: str | None = None,
                   keep_coeffs: bool = False, chunk: int = 512) -> Spectrum:
    """Per-DOF FFT over time, summed into one power value per frequency."""
    x, series_fps = _as_array(series)
    fps = fps if fps is not None else series_fps
    if fps is None or not fps > 0:
        raise ValidationError("power_spectrum needs a positive fps")
    if x.ndim == 1:
        x = x[:, None]
    T = len(x)
    if T < 4:
        raise ValidationError(f"need at least 4 frames, got {T}")
    if window not in (None, "none", "hann"):
        raise ValidationError(f"unknown window {window!r}")
    taper = ss.windows.hann(T, sym=False)[:, None] if window == "hann" else None
    L = T // 2
    power = np.zeros(L)
    coeffs = np.empty((L, x.shape[1]), dtype=complex) if keep_coeffs else None
    for start in range(0, x.shape[1], chunk):
        block = x[:, start:start + chunk]
        if taper is not None:
            block = block * taper
        X = np.fft.rfft(block, axis=0)[1:L + 1]
        power += np.einsum("ij,ij->i", X.real, X.real) + np.einsum("ij,ij->i", X.imag, X.imag)
        if keep_coeffs:
            coeffs[:, start:start + chunk] = X
    freqs = fps * np.arange(1, L + 1) / T
    return Spectrum(freqs, power, float(fps), T, coeffs)


def find_peaks(spectrum: Spectrum, min_prominence: float = 2.0, min_separation: int = 2,
               max_peaks: int | None = None, floor: float = 1e-12) -> list[int]:
    """FFT bins of prominent local maxima of the natural-log power.

    Power is floored at ``floor * max(power)`` before the log so round-off
    noise cannot form peaks. Candidates are accepted greedily by descending
    prominence subject to ``min_separation`` bins; the result is sorted by
    frequency.
    """
    p = spectrum.power
    if p.size == 0:
        raise ValidationError("empty spectrum")
    top = p.max()
    if top <= 0:
        return []
    logp = np.log(p + floor * top)
    idx, props = ss.find_peaks(logp, prominence=min_prominence)
    order = np.argsort(-props["prominences"], kind="stable")
    kept: list[int] = []
    for i in idx[order]:
        if all(abs(i - j) >= min_separation for j in kept):
            kept.append(int(i))
            if max_peaks is not None and len(kept) >= max_peaks:
                break
    return sorted(i + 1 for i in kept)


# ---------------------------------------------------------------------------
# image-space modes


@dataclass(frozen=True, eq=False)
class ObservedMode:
    gamma: np.ndarray
    omega: float
    bin: int = -1
    power: float = 0.0

    @property
    def frequency(self) -> float:
        return self.omega / (2 * np.pi)


def _sign_fix(g: np.ndarray) -> np.ndarray:
    nz = np.flatnonzero(np.abs(g) > 1e-8 * np.abs(g).max())
    return -g if nz.size and g[nz[0]] < 0 else g


def real_mode_shape(coeffs: np.ndarray) -> np.ndarray:
    """Real part of ``coeffs`` after the global phase rotation that maximizes its energy."""
    theta = 0.5 * np.angle(np.sum(coeffs * coeffs))
    return np.real(coeffs * np.exp(-1j * theta))


def _normalize(g: np.ndarray) -> np.ndarray:
    nrm = np.linalg.norm(g)
    if nrm == 0:
        raise ValidationError("image-space mode is identically zero")
    return _sign_fix(g / nrm)


def extract_modes(series, peaks, sampler: SamplingOperator, fps: float | None = None) -> list[ObservedMode]:
    """Image-space modes at the given FFT bins of an image-space series (T x 2q)."""
    x, series_fps = _as_array(series)
    fps = fps if fps is not None else series_fps
    if fps is None:
        raise ValidationError("extract_modes needs fps")
    T = len(x)
    if x.shape[1] != 2 * sampler.q:
        raise ShapeError(f"series has {x.shape[1]} columns, sampler expects {2 * sampler.q}")
    mask = sampler.row_mask
    t = np.arange(T)
    out = []
    for ell in peaks:
        ell = int(ell)
        if ell <= 0:
            raise ValidationError("cannot extract a mode at the DC bin")
        if ell > T // 2:
            raise ValidationError(f"bin {ell} beyond the Nyquist bin {T // 2}")
        c = np.exp(-2j * np.pi * ell * t / T) @ x
        g = real_mode_shape(c)
        g[~mask] = 0.0
        out.append(ObservedMode(_normalize(g), 2 * np.pi * fps * ell / T, ell, float(np.vdot(c, c).real)))
    return out


def true_image_modes(basis: ModalBasis, sampler: SamplingOperator) -> list[ObservedMode]:
    """Noise-free image-space modes ``P u / |P u|`` straight from the forward model."""
    G = np.asarray(sampler.P @ basis.modes)
    return [ObservedMode(_normalize(G[:, i].copy()), float(w)) for i, w in enumerate(basis.omegas)]


def merge_modes(mode_lists, tol: float) -> list[ObservedMode]:
    """Combine modes from several runs; modes closer than ``tol`` rad/s are averaged.

    Within a group the strongest mode is the reference; the others are
    sign-aligned to it before averaging.
    """
    allm = sorted((m for lst in mode_lists for m in lst), key=lambda m: m.omega)
    groups: list[list[ObservedMode]] = []
    for mode in allm:
        if groups and mode.omega - groups[-1][0].omega <= tol:
            groups[-1].append(mode)
        else:
            groups.append([mode])
    merged = []
    for grp in groups:
        if len(grp) == 1:
            merged.append(grp[0])
            continue
        ref = max(grp, key=lambda m: m.power)
        acc = np.zeros_like(ref.gamma)
        for m in grp:
            acc += m.gamma if np.dot(m.gamma, ref.gamma) >= 0 else -m.gamma
        merged.append(ObservedMode(_normalize(acc), float(np.mean([m.omega for m in grp])),
                                   ref.bin, max(m.power for m in grp)))
    return merged


def add_gamma_noise(modes, snr: float, rng: np.random.Generator, mask=None) -> list[ObservedMode]:
    """White Gaussian noise on gamma entries; ``snr`` is signal RMS over noise std on visible rows."""
    out = []
    for m in modes:
        vis = np.abs(m.gamma) > 0 if mask is None else mask
        rms = np.sqrt(np.mean(m.gamma[vis] ** 2))
        g = m.gamma.copy()
        g[vis] += rng.normal(0.0, rms / snr, vis.sum())
        out.append(ObservedMode(_normalize(g), m.omega, m.bin, m.power))
    return out


def estimate_damping_ratio(spectrum: Spectrum, peak: int, half_window: int | None = None):
    """Fit ``h (2 z f0^2)^2 / ((f^2 - f0^2)^2 + (2 z f0 f)^2)`` around a peak.

    This is the squared magnitude of a damped oscillator's frequency
    response, normalized so that ``h`` is the peak height. Returns
    ``(zeta, f0)``.
    """
    i = int(peak) - 1
    p = spectrum.power
    f = spectrum.freqs
    if not 0 <= i < len(p):
        raise ValidationError(f"peak bin {peak} outside the spectrum")
    h0 = p[i]
    if h0 <= 0:
        raise FitError("no power at the peak")
    # initial width from the half-power points
    lo = i
    while lo > 0 and p[lo - 1] > h0 / 2:
        lo -= 1
    hi = i
    while hi < len(p) - 1 and p[hi + 1] > h0 / 2:
        hi += 1
    width_bins = hi - lo + 1
    if half_window is None:
        half_window = max(4, 3 * width_bins)
    a, b = i - half_window, i + half_window + 1
    a, b = max(a, 0), min(b, len(p))
    if i - a < 2 or b - 1 - i < 2:
        raise FitError("peak needs at least two bins of support on each side")
    fw, pw = f[a:b], p[a:b]
    others = np.delete(pw, i - a)
    if others.max() <= 1e-10 * h0:
        # all power in one bin: an undamped tone centred on the bin
        return 0.0, float(f[i])
    f0_init = f[i]
    zeta_init = max(width_bins * spectrum.bin_width / (2 * f0_init), 1e-4)
    df = spectrum.bin_width

    def model(theta):
        h, f0, z = theta
        num = (2 * z * f0 ** 2) ** 2
        return h * num / ((fw ** 2 - f0 ** 2) ** 2 + (2 * z * f0 * fw) ** 2 + 1e-300)

    def resid(theta):
        return (model(theta) - pw) / h0

    try:
        res = least_squares(resid, [h0, f0_init, zeta_init],
                            bounds=([0, f0_init - 2 * df, 0], [np.inf, f0_init + 2 * df, 1.0]),
                            x_scale=[h0, df, zeta_init], xtol=1e-12, ftol=1e-12, gtol=1e-12, max_nfev=5000)
    except ValueError as exc:
        raise FitError(f"Lorentzian fit failed: {exc}") from None
    if not res.success or not np.all(np.isfinite(res.x)):
        raise FitError(f"Lorentzian fit did not converge: {res.message}")
    h, f0, z = res.x
    ss_res = np.sum((model(res.x) - pw) ** 2)
    ss_tot = np.sum((pw - pw.mean()) ** 2)
    if ss_tot > 0 and 1 - ss_res / ss_tot < 0.5:
        raise FitError(f"poor Lorentzian fit (R^2 = {1 - ss_res / ss_tot:.3f})")
    return float(z), float(f0)


# ---------------------------------------------------------------------------
# observation files


@dataclass(frozen=True, eq=False)
class Observations:
    modes: list
    q: int
    projection: ProjectionModel
    visible_vertices: np.ndarray

    @property
    def k(self) -> int:
        return len(self.modes)

    @property
    def gammas(self) -> np.ndarray:
        """(2q, k) matrix of observed image-space modes."""
        if not self.modes:
            return np.zeros((2 * self.q, 0))
        return np.stack([m.gamma for m in self.modes], axis=1)

    @property
    def omegas(self) -> np.ndarray:
        return np.array([m.omega for m in self.modes], dtype=float)

    def first(self, k: int) -> "Observations":
        """The ``k`` lowest-frequency modes."""
        order = np.argsort([m.omega for m in self.modes], kind="stable")[:k]
        return Observations([self.modes[i] for i in sorted(order)], self.q, self.projection,
                            self.visible_vertices)

    def to_dict(self) -> dict:
        return {
            "q": self.q,
            "modes": [{"omega_rad_s": m.omega, "bin": m.bin, "power": m.power, "gamma": m.gamma.tolist()}
                      for m in self.modes],
            "projection": self.projection.to_dict(),
            "visible_vertices": np.asarray(self.visible_vertices).tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Observations":
        try:
            q = int(doc["q"])
            modes = [ObservedMode(np.asarray(m["gamma"], dtype=float), float(m["omega_rad_s"]),
                                  int(m.get("bin", -1)), float(m.get("power", 0.0))) for m in doc["modes"]]
            proj = ProjectionModel(doc["projection"]["A"], doc["projection"]["b"])
            vis = np.asarray(doc["visible_vertices"], dtype=np.int64)
        except KeyError as exc:
            raise ValidationError(f"observation file missing field {exc.args[0]!r}") from None
        for i, m in enumerate(modes):
            if m.gamma.size != 2 * q:
                raise ShapeError(f"mode {i}: gamma has {m.gamma.size} entries, expected {2 * q}")
        return cls(modes, q, proj, vis)


def save_observations(obs: Observations, path) -> None:
    Path(path).write_text(json.dumps(obs.to_dict()))


def load_observations(path) -> Observations:
    return Observations.from_dict(json.loads(Path(path).read_text()))
