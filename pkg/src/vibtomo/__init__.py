"""Vibration-based material tomography: recover per-voxel Young's modulus and
density from image-space modes of a vibrating object."""

from .errors import *  # noqa: F401,F403
from .fem import (MaterialField, Mesh, UnitMatrixSet, VoxelGrid, assemble_global, assemble_unit_matrices,
                  build_cube_mesh, build_membrane_mesh)
from .inverse import InversionConfig, run_inversion
from .modal import ModalBasis, RayleighDamping, solve_modes, simulate_transient
from .observation import Observations, build_sampling_operator, three_face_camera

__version__ = "0.1.0"
