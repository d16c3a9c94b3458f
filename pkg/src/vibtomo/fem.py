"""Voxel grids, meshes and linear finite elements.

Global matrices are kept as linear functions of per-voxel material values::

    K = sum_e w_e K_e        M = sum_e v_e M_e

where ``K_e``/``M_e`` are assembled at unit Young's modulus and unit density.
Fixed (Dirichlet) degrees of freedom are removed by row/column deletion.

Index conventions
-----------------
Voxel ``(i, j, k)`` of a grid with dims ``(nx, ny, nz)`` has flat index
``(i * ny + j) * nz + k``, i.e. C order on an ``(nx, ny, nz)`` array.
Lattice vertices of structured meshes follow the same rule on the
``(nx + 1, ny + 1, nz + 1)`` lattice.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import DegenerateSystemError, MeshQualityError, ShapeError, ValidationError

HEX8 = "hex8"
TRI3 = "tri3"
_DOF_PER_VERTEX = {HEX8: 3, TRI3: 1}

# reference coordinates of the hex8 nodes (bottom face ccw, then top face ccw)
HEX8_NODES = np.array(
    [[-1, -1, -1], [1, -1, -1], [1, 1, -1], [-1, 1, -1],
     [-1, -1, 1], [1, -1, 1], [1, 1, 1], [-1, 1, 1]], dtype=float)

FACES = ("left", "right", "front", "back", "bottom", "top")


@dataclass(frozen=True)
class VoxelGrid:
    dims: tuple
    spacing: float
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ShapeError(f"grid dims must be three integers >= 1, got {self.dims}")
        if not self.spacing > 0:
            raise ValidationError(f"grid spacing must be positive, got {self.spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", float(self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def m(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.dims, dtype=float) * self.spacing

    def reshape(self, values) -> np.ndarray:
        """View a flat voxel array as ``(nx, ny, nz)``."""
        values = np.asarray(values)
        if values.size != self.m:
            raise ShapeError(f"expected {self.m} voxel values, got {values.size}")
        return values.reshape(self.dims)

    def centers(self) -> np.ndarray:
        """Voxel centre coordinates, shape (m, 3)."""
        axes = [self.origin[a] + (np.arange(self.dims[a]) + 0.5) * self.spacing for a in range(3)]
        g = np.meshgrid(*axes, indexing="ij")
        return np.stack([c.ravel() for c in g], axis=1)

    def nearest_voxel(self, points) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        idx = np.floor((points - np.asarray(self.origin)) / self.spacing).astype(int)
        idx = np.clip(idx, 0, np.asarray(self.dims) - 1)
        nx, ny, nz = self.dims
        return (idx[:, 0] * ny + idx[:, 1]) * nz + idx[:, 2]

    def to_dict(self) -> dict:
        return {"dims": list(self.dims), "spacing": self.spacing, "origin": list(self.origin)}


@dataclass(frozen=True)
class Mesh:
    """Linear mesh with per-element voxel assignment.

    ``kind`` is ``"hex8"`` (3 displacement DOFs per vertex) or ``"tri3"``
    (scalar transverse membrane, 1 DOF per vertex).
    """

    vertices: np.ndarray
    elements: np.ndarray
    kind: str
    fixed_vertices: np.ndarray
    voxel_of_element: np.ndarray
    grid: VoxelGrid
    structured: bool = False

    def __post_init__(self):
        if self.kind not in _DOF_PER_VERTEX:
            raise ValidationError(f"unknown mesh kind {self.kind!r}")
        verts = np.asarray(self.vertices, dtype=float)
        elems = np.asarray(self.elements, dtype=np.int64)
        fixed = np.unique(np.asarray(self.fixed_vertices, dtype=np.int64))
        vox = np.asarray(self.voxel_of_element, dtype=np.int64)
        npe = 8 if self.kind == HEX8 else 3
        if verts.ndim != 2 or verts.shape[1] != 3:
            raise ShapeError("vertices must have shape (q, 3)")
        if elems.ndim != 2 or elems.shape[1] != npe:
            raise ShapeError(f"{self.kind} elements need {npe} vertices each")
        q = len(verts)
        if elems.size and (elems.min() < 0 or elems.max() >= q):
            raise ValidationError("element vertex index out of range")
        if fixed.size and (fixed.min() < 0 or fixed.max() >= q):
            raise ValidationError("fixed vertex index out of range")
        if vox.shape != (len(elems),):
            raise ShapeError("voxel_of_element must map every element to one voxel")
        if vox.size and (vox.min() < 0 or vox.max() >= self.grid.m):
            raise ValidationError("voxel index out of range")
        for name, arr in (("vertices", verts), ("elements", elems),
                          ("fixed_vertices", fixed), ("voxel_of_element", vox)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def q(self) -> int:
        return len(self.vertices)

    @property
    def dof_per_vertex(self) -> int:
        return _DOF_PER_VERTEX[self.kind]

    @cached_property
    def dof_map(self) -> np.ndarray:
        """(q, dof_per_vertex) array of free-DOF indices, -1 where fixed."""
        d = self.dof_per_vertex
        free = np.ones(self.q, dtype=bool)
        free[self.fixed_vertices] = False
        out = -np.ones((self.q, d), dtype=np.int64)
        out[free] = np.arange(free.sum() * d).reshape(-1, d)
        return out

    @property
    def n(self) -> int:
        return self.dof_per_vertex * (self.q - len(self.fixed_vertices))

    def element_dofs(self) -> np.ndarray:
        """(E, npe * dof_per_vertex) free-DOF indices per element, -1 for fixed."""
        return self.dof_map[self.elements].reshape(len(self.elements), -1)

    def full_displacement(self, u) -> np.ndarray:
        """Expand a free-DOF vector to (q, dof_per_vertex) with zeros at fixed vertices."""
        u = np.asarray(u, dtype=float)
        out = np.zeros((self.q, self.dof_per_vertex))
        mask = self.dof_map >= 0
        out[mask] = u[self.dof_map[mask]]
        return out


def _lattice_index(i, j, k, dims):
    nx, ny, nz = dims
    return (i * (ny + 1) + j) * (nz + 1) + k


def _face_mask(points, grid: VoxelGrid, face: str) -> np.ndarray:
    lo = np.asarray(grid.origin)
    hi = lo + grid.extent
    tol = 1e-9 * grid.spacing
    axis = {"left": 0, "right": 0, "front": 1, "back": 1, "bottom": 2, "top": 2}[face]
    bound = lo[axis] if face in ("left", "front", "bottom") else hi[axis]
    return np.abs(points[:, axis] - bound) <= tol


def _lattice_vertices(grid: VoxelGrid, nz_nodes: int) -> np.ndarray:
    nx, ny, _ = grid.dims
    axes = [grid.origin[0] + np.arange(nx + 1) * grid.spacing,
            grid.origin[1] + np.arange(ny + 1) * grid.spacing,
            grid.origin[2] + np.arange(nz_nodes) * grid.spacing]
    g = np.meshgrid(*axes, indexing="ij")
    return np.stack([c.ravel() for c in g], axis=1)


def build_cube_mesh(grid: VoxelGrid, fixed_face: str | None = "bottom") -> Mesh:
    """Structured hex8 mesh with one element per voxel."""
    nx, ny, nz = grid.dims
    verts = _lattice_vertices(grid, nz + 1)
    i, j, k = (a.ravel() for a in np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"))
    corners = [(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0), (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)]
    elems = np.stack([_lattice_index(i + a, j + b, k + c, grid.dims) for a, b, c in corners], axis=1)
    vox = (i * ny + j) * nz + k
    if fixed_face is None:
        fixed = np.empty(0, dtype=np.int64)
    else:
        if fixed_face not in FACES:
            raise ValidationError(f"unknown face {fixed_face!r}; choose from {FACES}")
        fixed = np.flatnonzero(_face_mask(verts, grid, fixed_face))
    return Mesh(verts, elems, HEX8, fixed, vox, grid, structured=True)


def build_membrane_mesh(grid: VoxelGrid, boundary_fixed: bool = True) -> Mesh:
    """Structured tri3 membrane over an (nx, ny, 1) grid, two triangles per cell."""
    nx, ny, nz = grid.dims
    if nz != 1:
        raise ShapeError(f"membrane grids need nz = 1, got dims {grid.dims}")
    verts = _lattice_vertices(grid, 1)
    i, j = (a.ravel() for a in np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij"))

    def vid(a, b):
        return a * (ny + 1) + b

    v00, v10, v11, v01 = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
    lower = np.stack([v00, v10, v11], axis=1)
    upper = np.stack([v00, v11, v01], axis=1)
    elems = np.stack([lower, upper], axis=1).reshape(-1, 3)
    vox = np.repeat(i * ny + j, 2)
    if boundary_fixed:
        vi, vj = np.divmod(np.arange(len(verts)), ny + 1)
        fixed = np.flatnonzero((vi == 0) | (vi == nx) | (vj == 0) | (vj == ny))
    else:
        fixed = np.empty(0, dtype=np.int64)
    return Mesh(verts, elems, TRI3, fixed, vox, grid, structured=True)


def mesh_from_elements(vertices, elements, kind, grid: VoxelGrid, fixed_vertices=()) -> Mesh:
    """Unstructured mesh; each element goes to the voxel nearest its centroid."""
    vertices = np.asarray(vertices, dtype=float)
    elements = np.asarray(elements, dtype=np.int64)
    if elements.size and (elements.min() < 0 or elements.max() >= len(vertices)):
        raise ValidationError("element vertex index out of range")
    centroids = vertices[elements].mean(axis=1)
    return Mesh(vertices, elements, kind, fixed_vertices, grid.nearest_voxel(centroids), grid)


@dataclass(frozen=True)
class MaterialField:
    """Per-voxel Young's modulus ``w`` [Pa], density ``v`` [kg/m^3] and uniform Poisson ratio."""

    w: np.ndarray
    v: np.ndarray
    nu: float = 0.3

    def __post_init__(self):
        w = np.array(self.w, dtype=float).ravel()
        v = np.array(self.v, dtype=float).ravel()
        if w.shape != v.shape:
            raise ShapeError(f"w and v lengths differ ({w.size} vs {v.size})")
        if not (np.all(w > 0) and np.all(v > 0)):
            raise ValidationError("Young's modulus and density must be positive")
        if not 0 <= self.nu < 0.5:
            raise ValidationError(f"Poisson's ratio must be in [0, 0.5), got {self.nu}")
        w.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "v", v)

    @property
    def m(self) -> int:
        return self.w.size

    @classmethod
    def homogeneous(cls, m: int, E: float, rho: float, nu: float = 0.3) -> "MaterialField":
        return cls(np.full(m, float(E)), np.full(m, float(rho)), nu)

    def scaled(self, s: float) -> "MaterialField":
        return MaterialField(self.w * s, self.v * s, self.nu)


# ---------------------------------------------------------------------------
# element matrices


def _gauss_points_3d():
    g = 1.0 / np.sqrt(3.0)
    pts = np.array([[a, b, c] for a in (-g, g) for b in (-g, g) for c in (-g, g)])
    return pts, np.ones(8)


def hex8_shape(xi) -> tuple[np.ndarray, np.ndarray]:
    """Trilinear shape functions and reference gradients at points ``xi`` (p, 3).

    Returns N of shape (p, 8) and dN/dxi of shape (p, 3, 8).
    """
    xi = np.atleast_2d(xi)
    s = 1.0 + xi[:, None, :] * HEX8_NODES[None, :, :]  # (p, 8, 3)
    N = s.prod(axis=2) / 8.0
    dN = np.empty((len(xi), 3, 8))
    for a in range(3):
        others = [b for b in range(3) if b != a]
        dN[:, a, :] = HEX8_NODES[:, a] * s[:, :, others[0]] * s[:, :, others[1]] / 8.0
    return N, dN


def elasticity_matrix(E: float, nu: float) -> np.ndarray:
    """Isotropic 6x6 constitutive matrix, Voigt order (xx, yy, zz, xy, yz, zx), engineering shear."""
    lam = E * nu / ((1 + nu) * (1 - 2 * nu))
    mu = E / (2 * (1 + nu))
    D = np.zeros((6, 6))
    D[:3, :3] = lam
    D[np.arange(3), np.arange(3)] += 2 * mu
    D[np.arange(3, 6), np.arange(3, 6)] = mu
    return D


def hex8_element_matrices(coords, nu: float, E: float = 1.0, rho: float = 1.0):
    """Stiffness and consistent mass of hex8 elements, 2x2x2 Gauss quadrature.

    ``coords`` has shape (E, 8, 3). DOFs are ordered node-major
    ``(u0x, u0y, u0z, u1x, ...)``. Returns two arrays of shape (E, 24, 24).
    """
    coords = np.asarray(coords, dtype=float).reshape(-1, 8, 3)
    pts, wts = _gauss_points_3d()
    N, dN = hex8_shape(pts)
    D = elasticity_matrix(E, nu)
    ne = len(coords)
    ke = np.zeros((ne, 24, 24))
    me = np.zeros((ne, 24, 24))
    for g in range(len(pts)):
        J = np.einsum("an,enb->eab", dN[g], coords)
        detJ = np.linalg.det(J)
        if np.any(detJ <= 0):
            bad = np.flatnonzero(detJ <= 0)
            raise MeshQualityError(f"non-positive Jacobian in hex8 element(s) {bad[:10].tolist()}")
        dx = np.linalg.solve(J, np.broadcast_to(dN[g], (ne, 3, 8)))  # (E, 3, 8)
        B = np.zeros((ne, 6, 24))
        B[:, 0, 0::3] = dx[:, 0]
        B[:, 1, 1::3] = dx[:, 1]
        B[:, 2, 2::3] = dx[:, 2]
        B[:, 3, 0::3] = dx[:, 1]
        B[:, 3, 1::3] = dx[:, 0]
        B[:, 4, 1::3] = dx[:, 2]
        B[:, 4, 2::3] = dx[:, 1]
        B[:, 5, 0::3] = dx[:, 2]
        B[:, 5, 2::3] = dx[:, 0]
        scale = (wts[g] * detJ)[:, None, None]
        ke += scale * np.einsum("eki,kl,elj->eij", B, D, B)
        nn = np.outer(N[g], N[g])
        me += rho * scale * np.kron(nn, np.eye(3))[None]
    return ke, me


def tri3_element_matrices(coords, E: float = 1.0, rho: float = 1.0, thickness: float = 1.0):
    """Scalar membrane (Laplacian) stiffness and consistent mass for tri3 elements.

    ``coords`` has shape (E, 3, 2) or (E, 3, 3); only x and y are used.
    """
    coords = np.asarray(coords, dtype=float)
    x, y = coords[..., 0], coords[..., 1]
    det = (x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0])
    if np.any(det <= 0):
        bad = np.flatnonzero(det <= 0)
        raise MeshQualityError(f"non-positive area in tri3 element(s) {bad[:10].tolist()}")
    area = det / 2
    b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1) / det[:, None]
    c = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1) / det[:, None]
    ke = E * thickness * area[:, None, None] * (b[:, :, None] * b[:, None, :] + c[:, :, None] * c[:, None, :])
    base = (np.ones((3, 3)) + np.eye(3)) / 12.0
    me = rho * thickness * area[:, None, None] * base[None]
    return ke, me


# ---------------------------------------------------------------------------
# unit matrices and assembly


@dataclass(frozen=True, eq=False)
class UnitMatrixSet:
    """Per-voxel unit stiffness and mass matrices on the free DOFs.

    The matrices are stored in compact form: ``K.data = stiffness_map @ w``
    where ``pattern`` fixes the shared CSR sparsity of K and M.
    Element-level arrays are kept for fast products ``K_e u``.
    """

    n: int
    m: int
    nu: float
    ke: np.ndarray
    me: np.ndarray
    element_dofs: np.ndarray
    voxel_of_element: np.ndarray
    pattern: sp.csr_matrix
    stiffness_map: sp.csr_matrix
    mass_map: sp.csr_matrix

    def assemble(self, w, v):
        """Raw (K, M) for arbitrary (possibly non-physical) coefficient vectors."""
        w = np.asarray(w, dtype=float).ravel()
        v = np.asarray(v, dtype=float).ravel()
        if w.size != self.m or v.size != self.m:
            raise ShapeError(f"expected {self.m} voxel values, got w:{w.size} v:{v.size}")
        K = self.pattern.copy()
        K.data = self.stiffness_map @ w
        M = self.pattern.copy()
        M.data = self.mass_map @ v
        return K, M

    def _unit(self, cmap, e):
        A = self.pattern.copy()
        A.data = np.asarray(cmap[:, e].todense()).ravel()
        A.eliminate_zeros()
        return A

    def stiffness(self, e: int) -> sp.csr_matrix:
        return self._unit(self.stiffness_map, e)

    def mass(self, e: int) -> sp.csr_matrix:
        return self._unit(self.mass_map, e)

    def _apply(self, local, u):
        u = np.asarray(u, dtype=float)
        ext = np.append(u, 0.0)
        loc = np.einsum("eij,ej->ei", local, ext[self.element_dofs])
        mask = self.element_dofs >= 0
        cols = np.broadcast_to(self.voxel_of_element[:, None], mask.shape)
        return sp.csr_matrix((loc[mask], (self.element_dofs[mask], cols[mask])), shape=(self.n, self.m))

    def apply_stiffness(self, u) -> sp.csr_matrix:
        """n x m matrix whose column e is ``K_e u``."""
        return self._apply(self.ke, u)

    def apply_mass(self, u) -> sp.csr_matrix:
        """n x m matrix whose column e is ``M_e u``."""
        return self._apply(self.me, u)


def assemble_unit_matrices(mesh: Mesh, nu: float = 0.3, thickness: float = 1.0) -> UnitMatrixSet:
    if not 0 <= nu < 0.5:
        raise ValidationError(f"Poisson's ratio must be in [0, 0.5), got {nu}")
    n = mesh.n
    if n == 0:
        raise DegenerateSystemError("mesh has no free degrees of freedom")
    coords = mesh.vertices[mesh.elements]
    if mesh.kind == HEX8:
        ke, me = hex8_element_matrices(coords, nu)
    else:
        ke, me = tri3_element_matrices(coords, thickness=thickness)
    edofs = mesh.element_dofs()
    ne, d = edofs.shape

    rows = np.broadcast_to(edofs[:, :, None], (ne, d, d))
    cols = np.broadcast_to(edofs[:, None, :], (ne, d, d))
    mask = (rows >= 0) & (cols >= 0)
    r, c = rows[mask], cols[mask]
    elem = np.broadcast_to(np.arange(ne)[:, None, None], (ne, d, d))[mask]

    # position of each local entry inside the CSR data array of the global pattern
    pattern = sp.csr_matrix((np.ones(r.size), (r, c)), shape=(n, n))
    pattern.sum_duplicates()
    pattern.sort_indices()
    key = r.astype(np.int64) * n + c
    pat_rows = np.repeat(np.arange(n), np.diff(pattern.indptr))
    pat_key = pat_rows.astype(np.int64) * n + pattern.indices
    slot = np.searchsorted(pat_key, key)
    voxel = mesh.voxel_of_element[elem]
    shape = (pattern.nnz, mesh.grid.m)
    kmap = sp.csr_matrix((ke[mask], (slot, voxel)), shape=shape)
    mmap = sp.csr_matrix((me[mask], (slot, voxel)), shape=shape)
    pattern.data[:] = 0.0
    for arr in (ke, me, edofs):
        arr.setflags(write=False)
    return UnitMatrixSet(n, mesh.grid.m, float(nu), ke, me, edofs, np.asarray(mesh.voxel_of_element),
                         pattern, kmap, mmap)


@dataclass(frozen=True, eq=False)
class GlobalSystem:
    K: sp.csr_matrix
    M: sp.csr_matrix

    @property
    def n(self) -> int:
        return self.K.shape[0]


def assemble_global(units: UnitMatrixSet, field) -> GlobalSystem:
    """K = sum w_e K_e, M = sum v_e M_e.

    ``field`` is a :class:`MaterialField` or a raw ``(w, v)`` pair; the raw
    form skips positivity checks so that linear combinations can be assembled.
    """
    if isinstance(field, MaterialField):
        w, v = field.w, field.v
    else:
        w, v = field
    K, M = units.assemble(w, v)
    return GlobalSystem(K, M)


# ---------------------------------------------------------------------------
# serialization


def mesh_to_dict(mesh: Mesh) -> dict:
    doc = {**mesh.grid.to_dict(), "kind": mesh.kind, "fixed_vertices": mesh.fixed_vertices.tolist()}
    if not mesh.structured:
        doc["vertices"] = mesh.vertices.tolist()
        doc["elements"] = mesh.elements.tolist()
        doc["voxel_of_element"] = mesh.voxel_of_element.tolist()
    return doc


def mesh_from_dict(doc: dict) -> Mesh:
    try:
        grid = VoxelGrid(tuple(doc["dims"]), doc["spacing"], tuple(doc.get("origin", (0, 0, 0))))
        kind = doc["kind"]
        fixed = np.asarray(doc.get("fixed_vertices", []), dtype=np.int64)
    except KeyError as exc:
        raise ValidationError(f"mesh document missing field {exc.args[0]!r}") from None
    if "vertices" in doc:
        vox = doc.get("voxel_of_element")
        if vox is None:
            return mesh_from_elements(doc["vertices"], doc["elements"], kind, grid, fixed)
        return Mesh(np.asarray(doc["vertices"]), np.asarray(doc["elements"]), kind, fixed, np.asarray(vox), grid)
    if kind == HEX8:
        base = build_cube_mesh(grid, None)
    elif kind == TRI3:
        base = build_membrane_mesh(grid, False)
    else:
        raise ValidationError(f"unknown mesh kind {kind!r}")
    return Mesh(base.vertices, base.elements, kind, fixed, base.voxel_of_element, grid, structured=True)


def save_mesh(mesh: Mesh, path) -> None:
    Path(path).write_text(json.dumps(mesh_to_dict(mesh), indent=1))


def load_mesh(path) -> Mesh:
    return mesh_from_dict(json.loads(Path(path).read_text()))
