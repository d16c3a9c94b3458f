"""Experiment descriptions, truth volumes and the synthetic observation pipeline."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ShapeError, ValidationError
from .fem import (FACES, HEX8, TRI3, MaterialField, Mesh, VoxelGrid, assemble_global, assemble_unit_matrices,
                  build_cube_mesh, build_membrane_mesh)
from .inverse import InversionConfig
from .modal import (CORNERS, RayleighDamping, corner_vertex, pluck_displacement, rayleigh_from_ratios,
                    simulate_transient, solve_modes)
from .observation import (Observations, SamplingOperator, add_gamma_noise, build_sampling_operator,
                          extract_modes, find_peaks, look_at_camera, merge_modes, power_spectrum,
                          three_face_camera, true_image_modes)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# spec dataclasses

def _build(cls, doc, path):
    """Instantiate a flat dataclass from a dict, reporting problems with a field path."""
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: expected an object")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ValidationError(f"{path}: unknown field(s) {unknown}")
    try:
        return cls(**doc)
    except ValidationError as exc:
        raise ValidationError(f"{path}.{exc}") from None
    except TypeError as exc:
        raise ValidationError(f"{path}: {exc}") from None


@dataclass
class GridSpec:
    dims: tuple = (8, 8, 8)
    spacing: float = 0.05 / 8
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.origin = tuple(float(o) for o in self.origin)
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValidationError("dims: need three positive integers")
        if not self.spacing > 0:
            raise ValidationError("spacing: must be positive")

    def grid(self) -> VoxelGrid:
        return VoxelGrid(self.dims, float(self.spacing), self.origin)


@dataclass
class Defect:
    """Axis-aligned box of voxels (forward grid indices), ``corner`` inclusive."""

    corner: tuple
    size: tuple
    E: float
    rho: float

    def __post_init__(self):
        self.corner = tuple(int(c) for c in self.corner)
        self.size = tuple(int(s) for s in self.size)
        if len(self.corner) != 3 or len(self.size) != 3:
            raise ValidationError("corner/size: need three integers each")
        if min(self.corner) < 0 or min(self.size) < 1:
            raise ValidationError("corner must be non-negative and size positive")
        if not (self.E > 0 and self.rho > 0):
            raise ValidationError("E and rho must be positive")

    def slices(self):
        return tuple(slice(c, c + s) for c, s in zip(self.corner, self.size))


@dataclass
class CameraSpec:
    kind: str = "three-face"       # "three-face" or "look-at"
    scale: float = 2000.0          # pixels per meter
    view_dir: tuple = (-1.0, 1.0, -1.0)
    visible: str = "auto"          # "auto" or "all"

    def __post_init__(self):
        self.view_dir = tuple(float(x) for x in self.view_dir)
        if self.kind not in ("three-face", "look-at"):
            raise ValidationError(f"kind: unknown camera kind {self.kind!r}")
        if self.visible not in ("auto", "all"):
            raise ValidationError(f"visible: expected 'auto' or 'all', got {self.visible!r}")

    def projection(self):
        if self.kind == "three-face":
            return three_face_camera(self.scale)
        return look_at_camera(self.view_dir, self.scale)


@dataclass
class PluckSpec:
    corner: str | tuple = "top-front"
    displacement: tuple = (0.005, 0.005, 0.005)

    def __post_init__(self):
        if not isinstance(self.corner, str):
            self.corner = tuple(float(c) for c in self.corner)
        self.displacement = tuple(float(d) for d in self.displacement)
        if isinstance(self.corner, str) and self.corner not in CORNERS:
            raise ValidationError(f"corner: unknown corner {self.corner!r}, expected one of {sorted(CORNERS)}")


@dataclass
class DampingSpec:
    """Rayleigh damping, either as coefficients or as two (frequency Hz, ratio) pairs."""

    alpha: float = 0.0
    beta: float = 0.0
    ratios: list | None = None

    def model(self) -> RayleighDamping:
        if self.ratios is not None:
            if len(self.ratios) != 2:
                raise ValidationError("ratios: need exactly two (frequency, ratio) pairs")
            return rayleigh_from_ratios(*[tuple(p) for p in self.ratios])
        return RayleighDamping(self.alpha, self.beta)


@dataclass
class ExperimentSpec:
    forward: GridSpec = field(default_factory=GridSpec)
    inference: GridSpec | None = None
    mesh_kind: str = HEX8
    fixed_face: str | None = "bottom"
    nu: float = 0.3
    background: tuple = (9000.0, 1270.0)        # (E Pa, rho kg/m^3)
    defects: list = field(default_factory=list)
    camera: CameraSpec = field(default_factory=CameraSpec)
    source: str = "video"                      # "video" (simulated plucks) or "modes" (true modes)
    forward_modes: int = 40
    freq_ceiling: float | None = None
    plucks: list = field(default_factory=lambda: [PluckSpec()])
    damping: DampingSpec = field(default_factory=DampingSpec)
    fps: float = 2000.0
    duration: float = 6.0
    min_prominence: float = 2.0
    min_separation: int = 2
    max_peaks: int | None = None
    merge_bins: float = 1.0
    snr: float | None = None
    seed: int = 0
    inversion: InversionConfig = field(default_factory=InversionConfig)
    output_dir: str = "out"

    def __post_init__(self):
        self.background = tuple(float(x) for x in self.background)
        if self.mesh_kind not in (HEX8, TRI3):
            raise ValidationError(f"mesh_kind: unknown kind {self.mesh_kind!r}")
        if self.fixed_face is not None and self.fixed_face not in FACES:
            raise ValidationError(f"fixed_face: unknown face {self.fixed_face!r}")
        if self.source not in ("video", "modes"):
            raise ValidationError(f"source: expected 'video' or 'modes', got {self.source!r}")
        if not 0 <= self.nu < 0.5:
            raise ValidationError("nu: must lie in [0, 0.5)")
        if len(self.background) != 2 or min(self.background) <= 0:
            raise ValidationError("background: need positive (E, rho)")
        if self.forward_modes < 1:
            raise ValidationError("forward_modes: must be at least 1")
        if not self.fps > 0:
            raise ValidationError("fps: must be positive")
        if self.source == "video":
            if not self.duration > 0:
                raise ValidationError("duration: must be positive")
            if int(round(self.fps * self.duration)) < 4:
                raise ValidationError("duration: fewer than four frames at this fps")
            if not self.plucks:
                raise ValidationError("plucks: at least one pluck is needed for video synthesis")
        if self.freq_ceiling is not None and not self.fps > 2 * self.freq_ceiling:
            raise ValidationError(f"fps: {self.fps} does not exceed twice the frequency ceiling {self.freq_ceiling}")
        if self.snr is not None and not self.snr > 0:
            raise ValidationError("snr: must be positive")
        inf = self.inference_spec()
        if not np.allclose(np.multiply(inf.dims, inf.spacing), np.multiply(self.forward.dims, self.forward.spacing)):
            raise ValidationError("inference: grid extent must match the forward grid")
        for i, d in enumerate(self.defects):
            hi = np.add(d.corner, d.size)
            if np.any(hi > np.asarray(self.forward.dims)):
                raise ValidationError(f"defects[{i}]: box {d.corner}+{d.size} extends outside the grid "
                                      f"{self.forward.dims}")

    def inference_spec(self) -> GridSpec:
        return self.inference if self.inference is not None else self.forward

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentSpec":
        if not isinstance(doc, dict):
            raise ValidationError("spec: expected an object")
        doc = dict(doc)
        nested = {
            "forward": lambda d: _build(GridSpec, d, "spec.forward"),
            "inference": lambda d: None if d is None else _build(GridSpec, d, "spec.inference"),
            "camera": lambda d: _build(CameraSpec, d, "spec.camera"),
            "damping": lambda d: _build(DampingSpec, d, "spec.damping"),
            "defects": lambda lst: [_build(Defect, d, f"spec.defects[{i}]") for i, d in enumerate(lst)],
            "plucks": lambda lst: [_build(PluckSpec, d, f"spec.plucks[{i}]") for i, d in enumerate(lst)],
        }
        for key, make in nested.items():
            if key in doc:
                doc[key] = make(doc[key])
        if "inversion" in doc:
            try:
                doc["inversion"] = InversionConfig.from_dict(doc["inversion"])
            except (ValidationError, TypeError) as exc:
                raise ValidationError(f"spec.inversion: {exc}") from None
        return _build(cls, doc, "spec")

    def to_dict(self) -> dict:
        return asdict(self)


def load_spec(path) -> ExperimentSpec:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None
    return ExperimentSpec.from_dict(doc)


# ---------------------------------------------------------------------------
# volumes

@dataclass(eq=False)
class VolumeFile:
    dims: tuple
    spacing: float
    name: str
    units: str
    values: np.ndarray

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.values = np.asarray(self.values, dtype=float).ravel()
        if self.values.size != int(np.prod(self.dims)):
            raise ShapeError(f"volume {self.name!r}: {self.values.size} values for dims {self.dims}")

    def to_dict(self) -> dict:
        return {"dims": list(self.dims), "spacing": self.spacing, "name": self.name, "units": self.units,
                "values": self.values.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "VolumeFile":
        try:
            return cls(doc["dims"], float(doc["spacing"]), doc["name"], doc["units"], doc["values"])
        except KeyError as exc:
            raise ValidationError(f"volume document missing field {exc.args[0]!r}") from None


_UNITS = {"w": "Pa", "v": "kg/m^3"}


def make_volume(grid: VoxelGrid, name: str, values) -> VolumeFile:
    return VolumeFile(grid.dims, grid.spacing, name, _UNITS.get(name, ""), values)


def save_volume(vol: VolumeFile, path) -> None:
    Path(path).write_text(json.dumps(vol.to_dict()))


def load_volume(path) -> VolumeFile:
    return VolumeFile.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# truth fields

def truth_field(spec: ExperimentSpec) -> MaterialField:
    """Background material with box defects, on the forward grid."""
    dims = spec.forward.dims
    W = np.full(dims, float(spec.background[0]))
    V = np.full(dims, float(spec.background[1]))
    for d in spec.defects:
        W[d.slices()] = d.E
        V[d.slices()] = d.rho
    return MaterialField(W.ravel(), V.ravel(), spec.nu)


def _overlap_1d(n_to: int, n_from: int) -> np.ndarray:
    """Fraction of each target cell covered by each source cell (rows sum to 1)."""
    a = np.linspace(0.0, 1.0, n_to + 1)
    b = np.linspace(0.0, 1.0, n_from + 1)
    O = np.minimum(a[1:, None], b[None, 1:]) - np.maximum(a[:-1, None], b[None, :-1])
    return np.clip(O, 0.0, None) * n_to


def resample_volume(values, src: VoxelGrid, dst: VoxelGrid) -> np.ndarray:
    """Volume-weighted average of a voxel field onto another grid of the same extent."""
    F = src.reshape(values)
    Ox, Oy, Oz = (_overlap_1d(t, s) for t, s in zip(dst.dims, src.dims))
    return np.einsum("ai,bj,ck,ijk->abc", Ox, Oy, Oz, F).ravel()


# ---------------------------------------------------------------------------
# synthesis

def build_mesh(grid: VoxelGrid, spec: ExperimentSpec) -> Mesh:
    if spec.mesh_kind == TRI3:
        return build_membrane_mesh(grid, boundary_fixed=spec.fixed_face is not None)
    return build_cube_mesh(grid, spec.fixed_face)


@dataclass(eq=False)
class Synthesis:
    """Everything produced by :func:`synthesize`."""

    forward_mesh: Mesh
    mesh: Mesh
    truth: MaterialField
    truth_w: np.ndarray
    truth_v: np.ndarray
    sampler: SamplingOperator
    observations: Observations
    forward_frequencies: np.ndarray
    runs: list = field(default_factory=list)


def synthesize(spec: ExperimentSpec) -> Synthesis:
    """Forward model, plucks, spectra and mode extraction for one experiment.

    The forward system lives on ``spec.forward``; observations are sampled
    at the vertices of the inference mesh (trilinear interpolation of the
    forward displacement when the two differ). With ``source="modes"`` the
    forward eigenmodes are projected directly instead of simulating video.
    """
    gf, gi = spec.forward.grid(), spec.inference_spec().grid()
    mesh_f, mesh_i = build_mesh(gf, spec), build_mesh(gi, spec)
    truth = truth_field(spec)
    units_f = assemble_unit_matrices(mesh_f, spec.nu)
    system = assemble_global(units_f, truth)
    basis = solve_modes(system, spec.forward_modes, freq_ceiling=spec.freq_ceiling)
    log.info("forward model: %d DOFs, %d modes up to %.2f Hz", mesh_f.n, basis.k, basis.frequencies[-1])
    proj = spec.camera.projection()
    visible = "auto" if spec.camera.visible == "auto" else np.arange(mesh_i.q)
    sampler = build_sampling_operator(mesh_i, proj, visible=visible)
    same = gf.dims == gi.dims and mesh_f.kind == mesh_i.kind
    forward_sampler = sampler if same else build_sampling_operator(mesh_i, proj, visible=visible, source=mesh_f)

    runs = []
    if spec.source == "modes":
        modes = true_image_modes(basis, forward_sampler)
    else:
        damping = spec.damping.model()
        lists = []
        for pl in spec.plucks:
            vertex = corner_vertex(mesh_f, pl.corner)
            disp = pl.displacement if mesh_f.kind == HEX8 else [float(np.linalg.norm(pl.displacement))]
            d0 = pluck_displacement(mesh_f, system, vertex, disp)
            series = simulate_transient(basis, damping, d0, spec.fps, spec.duration, output=forward_sampler.P)
            spectrum = power_spectrum(series)
            peaks = find_peaks(spectrum, spec.min_prominence, spec.min_separation, spec.max_peaks)
            if spec.freq_ceiling is not None:
                peaks = [p for p in peaks if spectrum.frequency(p) <= spec.freq_ceiling]
            found = extract_modes(series, peaks, sampler)
            log.info("pluck %s: %d peaks", pl.corner, len(found))
            runs.append({"corner": pl.corner, "peaks": [int(p) for p in peaks],
                         "frequencies_hz": [m.frequency for m in found]})
            lists.append(found)
        T = int(round(spec.fps * spec.duration))
        modes = merge_modes(lists, tol=spec.merge_bins * 2 * np.pi * spec.fps / T)
    if spec.snr is not None:
        modes = add_gamma_noise(modes, spec.snr, np.random.default_rng(spec.seed), mask=sampler.row_mask)
    obs = Observations(modes, mesh_i.q, proj, sampler.visible_vertices)
    same_grid = gf.dims == gi.dims
    tw = truth.w if same_grid else resample_volume(truth.w, gf, gi)
    tv = truth.v if same_grid else resample_volume(truth.v, gf, gi)
    return Synthesis(mesh_f, mesh_i, truth, tw, tv, sampler, obs, basis.frequencies, runs)
