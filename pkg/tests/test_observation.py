import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vibtomo.errors import FitError, RankDeficiencyError, ShapeError, ValidationError
from vibtomo.fem import (MaterialField, VoxelGrid, assemble_global, assemble_unit_matrices, build_cube_mesh,
                         build_membrane_mesh)
from vibtomo.modal import (DisplacementSeries, RayleighDamping, corner_vertex, pluck_displacement,
                           rayleigh_from_ratios, simulate_transient, solve_modes)
from vibtomo.observation import (ObservedMode, Observations, ProjectionModel, add_gamma_noise,
                                 build_sampling_operator, estimate_damping_ratio, extract_modes, find_peaks,
                                 fit_projection, load_observations, look_at_camera, merge_modes, power_spectrum,
                                 real_mode_shape, save_observations, three_face_camera, true_image_modes)


@pytest.fixture(scope="module")
def cube():
    grid = VoxelGrid((4, 4, 4), 0.05 / 4)
    mesh = build_cube_mesh(grid, "bottom")
    units = assemble_unit_matrices(mesh, 0.3)
    W = np.full(grid.dims, 9000.0)
    W[2:, :2, 2:] = 3e4  # break the symmetry so no eigenvalue is repeated
    system = assemble_global(units, MaterialField(W.ravel(), np.full(grid.m, 1270.0), 0.3))
    basis = solve_modes(system, 12)
    sampler = build_sampling_operator(mesh, three_face_camera())
    return mesh, system, basis, sampler


# ---------------------------------------------------------------- projection

def test_fit_orthographic_exact():
    s = 1500.0
    A = np.array([[s, 0, 0], [0, 0, -s]])
    b = np.array([12.0, -3.0])
    X = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 1]], dtype=float)
    proj = fit_projection(X, X @ A.T + b)
    assert np.allclose(proj.A, A, rtol=0, atol=1e-9)
    assert np.allclose(proj.b, b, rtol=0, atol=1e-9)


def test_fit_random_roundtrip():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(2, 3)) * 1000
    b = rng.normal(size=2) * 100
    X = rng.uniform(0, 0.05, (8, 3))
    proj = fit_projection(X, X @ A.T + b)
    assert np.max(np.abs(proj.A - A)) <= 1e-10 * np.abs(A).max()
    assert np.max(np.abs(proj.b - b)) <= 1e-10 * np.abs(A).max()


def test_fit_coplanar_names_direction():
    X = np.array([[0, 0, 1], [1, 0, 1], [0, 1, 1], [1, 1, 1]], dtype=float)
    with pytest.raises(RankDeficiencyError) as info:
        fit_projection(X, X[:, :2])
    assert np.allclose(np.abs(info.value.direction), [0, 0, 1])


def test_three_face_view():
    d = three_face_camera().view_direction
    assert np.allclose(d, np.array([-1, 1, -1]) / np.sqrt(3))


# ---------------------------------------------------------------- sampling

def test_monocular_counts():
    grid = VoxelGrid((8, 8, 8), 0.05 / 8)
    free = build_sampling_operator(build_cube_mesh(grid, None), three_face_camera())
    assert len(free.visible_vertices) == 217
    assert free.P.getnnz(axis=1).astype(bool).sum() == 434
    fixed = build_sampling_operator(build_cube_mesh(grid, "bottom"), three_face_camera())
    # the bottom edge of the front and right faces is clamped
    assert len(fixed.visible_vertices) == 217
    assert fixed.P.getnnz(axis=1).astype(bool).sum() == 400


def test_all_visible_orthographic_selects_xy():
    mesh = build_cube_mesh(VoxelGrid((2, 2, 2), 1.0), None)
    proj = ProjectionModel(np.array([[1.0, 0, 0], [0, 1.0, 0]]))
    S = build_sampling_operator(mesh, proj, visible=np.arange(mesh.q))
    u = np.random.default_rng(1).normal(size=mesh.n)
    assert np.array_equal(S.P @ u, u.reshape(-1, 3)[:, :2].ravel())


def test_sampling_matches_loop_oracle(cube):
    mesh, _, basis, S = cube
    u = basis.modes[:, 3]
    disp = mesh.full_displacement(u)
    ref = np.zeros(2 * mesh.q)
    for vtx in S.visible_vertices:
        ref[2 * vtx:2 * vtx + 2] = S.projection.A @ disp[vtx]
    assert np.allclose(S.P @ u, ref, rtol=0, atol=1e-12 * np.abs(ref).max())
    assert np.all((S.P @ u)[~S.row_mask] == 0)


@settings(max_examples=20, deadline=None)
@given(a=st.floats(-10, 10), b=st.floats(-10, 10), seed=st.integers(0, 2 ** 32 - 1))
def test_sampling_linear(cube, a, b, seed):
    _, _, _, S = cube
    rng = np.random.default_rng(seed)
    u, w = rng.normal(size=(2, S.P.shape[1]))
    lhs = S.P @ (a * u + b * w)
    rhs = a * (S.P @ u) + b * (S.P @ w)
    assert np.allclose(lhs, rhs, rtol=0, atol=1e-12 * (abs(a) + abs(b) + 1) * np.abs(S.P).max() * 10)


def test_interpolating_operator_on_same_mesh(cube):
    mesh, _, basis, S = cube
    S2 = build_sampling_operator(mesh, S.projection, source=mesh)
    u = basis.modes[:, 0]
    assert np.allclose(S2.P @ u, S.P @ u, rtol=0, atol=1e-12 * np.abs(S.P @ u).max())


def test_mismatch_interpolates_linear_field():
    # a displacement linear in position (zero on the clamped bottom face) is
    # reproduced exactly by trilinear interpolation
    fine = build_cube_mesh(VoxelGrid((6, 6, 6), 1.0 / 6), "bottom")
    coarse = build_cube_mesh(VoxelGrid((4, 4, 4), 0.25), "bottom")
    proj = three_face_camera(1.0)
    G = np.outer([0.3, 0.4, 0.2], [0.0, 0.0, 1.0])
    u_fine = (fine.vertices @ G.T)[fine.dof_map[:, 0] >= 0].ravel()
    S = build_sampling_operator(coarse, proj, source=fine)
    expected = np.zeros((coarse.q, 2))
    vis = S.visible_vertices
    expected[vis] = (coarse.vertices[vis] @ G.T) @ proj.A.T
    assert np.allclose(S.P @ u_fine, expected.ravel(), atol=1e-12)


def test_membrane_sampling():
    mesh = build_membrane_mesh(VoxelGrid((3, 3, 1), 0.1))
    proj = three_face_camera(100.0)
    S = build_sampling_operator(mesh, proj)
    assert len(S.visible_vertices) == mesh.q
    u = np.ones(mesh.n)
    out = (S.P @ u).reshape(-1, 2)
    interior = mesh.dof_map[:, 0] >= 0
    assert np.allclose(out[interior], proj.A[:, 2])
    assert np.all(out[~interior] == 0)


def test_empty_visible_rejected(cube):
    mesh, _, _, S = cube
    with pytest.raises(ValidationError):
        build_sampling_operator(mesh, S.projection, visible=[])


# ---------------------------------------------------------------- spectra and peaks

def test_constant_series_has_no_power():
    spec = power_spectrum(np.ones((64, 3)), fps=10.0)
    assert np.all(spec.power == 0)
    assert find_peaks(spec) == []


def test_pure_tone_single_bin():
    T, ell = 128, 9
    t = np.arange(T)
    x = np.stack([np.cos(2 * np.pi * ell * t / T + 0.3), 2 * np.sin(2 * np.pi * ell * t / T)], axis=1)
    spec = power_spectrum(x, fps=64.0)
    peak = np.argmax(spec.power) + 1
    assert peak == ell
    others = np.delete(spec.power, ell - 1)
    assert others.max() <= 1e-10 * spec.power[ell - 1]
    assert spec.freqs[ell - 1] == pytest.approx(64.0 * ell / T)


def test_two_tones_two_peaks():
    T = 256
    t = np.arange(T)
    x = np.cos(2 * np.pi * 20 * t / T) + 0.3 * np.cos(2 * np.pi * 45 * t / T)
    rng = np.random.default_rng(3)
    x = x[:, None] + 1e-6 * rng.normal(size=(T, 1))
    assert find_peaks(power_spectrum(x, fps=100.0)) == [20, 45]


def test_flat_spectrum_has_no_peaks():
    from vibtomo.observation import Spectrum
    spec = Spectrum(np.arange(1, 51) * 0.5, np.full(50, 3.0), 100.0, 200)
    assert find_peaks(spec) == []


def test_separation_and_max_peaks():
    T = 512
    t = np.arange(T)
    x = (np.cos(2 * np.pi * 40 * t / T) + 0.5 * np.cos(2 * np.pi * 42 * t / T)
         + 0.2 * np.cos(2 * np.pi * 90 * t / T))
    x = x[:, None] + 1e-7 * np.random.default_rng(0).normal(size=(T, 1))
    spec = power_spectrum(x, fps=100.0)
    assert find_peaks(spec, min_prominence=0.5, min_separation=2) == [40, 42, 90]
    assert find_peaks(spec, min_prominence=0.5, min_separation=3) == [40, 90]
    assert find_peaks(spec, min_prominence=0.5, max_peaks=1) == [40]


@settings(max_examples=30, deadline=None)
@given(T=st.integers(4, 200), d=st.integers(1, 5), seed=st.integers(0, 2 ** 32 - 1))
def test_parseval(T, d, seed):
    x = np.random.default_rng(seed).normal(size=(T, d))
    spec = power_spectrum(x, fps=30.0)
    assert spec.total_variance() == pytest.approx(x.var(axis=0).sum(), rel=1e-9)


def test_short_series_rejected():
    with pytest.raises(ValidationError):
        power_spectrum(np.zeros((3, 2)), fps=10.0)


# ---------------------------------------------------------------- mode extraction

def _single_mode_series(basis, S, i, fps=200.0, duration=4.0):
    return simulate_transient(basis, RayleighDamping(), basis.modes[:, i], fps, duration, output=S.P)


def test_single_mode_extraction(cube):
    _, _, basis, S = cube
    series = _single_mode_series(basis, S, 2)
    spec = power_spectrum(series)
    peaks = find_peaks(spec)
    assert len(peaks) == 1
    (mode,) = extract_modes(series, peaks, S)
    target = S.P @ basis.modes[:, 2]
    cos = abs(mode.gamma @ target) / np.linalg.norm(target)
    assert cos >= 0.999
    assert np.linalg.norm(mode.gamma) == pytest.approx(1.0, rel=1e-12)
    assert np.all(mode.gamma[~S.row_mask] == 0)
    first = mode.gamma[np.flatnonzero(mode.gamma)[0]]
    assert first > 0


def test_phase_rotation_recovers_real_shape():
    g = np.random.default_rng(4).normal(size=10)
    for phase in (0.0, 0.7, 2.0, -1.3):
        out = real_mode_shape(np.exp(1j * phase) * g)
        assert abs(out @ g) / (np.linalg.norm(out) * np.linalg.norm(g)) == pytest.approx(1.0, abs=1e-12)


def test_extract_rejects_dc(cube):
    _, _, basis, S = cube
    series = _single_mode_series(basis, S, 0)
    with pytest.raises(ValidationError):
        extract_modes(series, [0], S)


def test_projection_scale_invariance(cube):
    mesh, _, basis, S = cube
    S2 = build_sampling_operator(mesh, ProjectionModel(3.7 * S.projection.A, S.projection.b))
    a = true_image_modes(basis, S)
    b = true_image_modes(basis, S2)
    for x, y in zip(a, b):
        assert np.allclose(x.gamma, y.gamma, atol=1e-12)


def test_two_plucks_merge_superset(cube):
    mesh, system, basis, S = cube
    fps, duration = 200.0, 6.0
    lists = []
    for corner in ("top-front", "top-back"):
        d0 = pluck_displacement(mesh, system, corner_vertex(mesh, corner), (0.005, 0.005, 0.005))
        series = simulate_transient(basis, RayleighDamping(), d0, fps, duration, output=S.P)
        lists.append(extract_modes(series, find_peaks(power_spectrum(series)), S))
    tol = 2 * np.pi * fps / (fps * duration)
    merged = merge_modes(lists, tol)
    merged_w = np.array([m.omega for m in merged])
    for lst in lists:
        for m in lst:
            assert np.min(np.abs(merged_w - m.omega)) <= tol
    assert len(merged) >= max(len(lst) for lst in lists)
    assert all(np.linalg.norm(m.gamma) == pytest.approx(1.0) for m in merged)


def test_merge_sign_aligns():
    g = np.array([1.0, 2.0, -2.0])
    a = ObservedMode(g / 3, 10.0, 1, 2.0)
    b = ObservedMode(-g / 3, 10.05, 1, 1.0)
    (m,) = merge_modes([[a], [b]], tol=0.1)
    assert np.allclose(m.gamma, g / 3)


def test_gamma_noise_seeded(cube):
    _, _, basis, S = cube
    modes = true_image_modes(basis, S)
    a = add_gamma_noise(modes, 10.0, np.random.default_rng(7), mask=S.row_mask)
    b = add_gamma_noise(modes, 10.0, np.random.default_rng(7), mask=S.row_mask)
    for x, y, clean in zip(a, b, modes):
        assert np.array_equal(x.gamma, y.gamma)
        assert np.all(x.gamma[~S.row_mask] == 0)
        assert 0.9 < abs(x.gamma @ clean.gamma) < 1.0


# ---------------------------------------------------------------- damping fit

def _damped_tone(f0, zeta, fps=200.0, duration=40.0):
    t = np.arange(int(fps * duration)) / fps
    w = 2 * np.pi * f0
    x = np.exp(-zeta * w * t) * np.cos(w * np.sqrt(1 - zeta ** 2) * t)
    return DisplacementSeries(x[:, None], fps)


def test_damping_fit_recovers_zeta():
    spec = power_spectrum(_damped_tone(12.5, 0.02))
    peak = int(np.argmax(spec.power)) + 1
    zeta, f0 = estimate_damping_ratio(spec, peak)
    assert 0.015 <= zeta <= 0.025
    assert f0 == pytest.approx(12.5, abs=2 * spec.bin_width)


def test_undamped_tone_gives_zero():
    fps, T, ell = 100.0, 400, 50
    t = np.arange(T) / fps
    x = np.cos(2 * np.pi * (fps * ell / T) * t)[:, None]
    spec = power_spectrum(x, fps=fps)
    zeta, f0 = estimate_damping_ratio(spec, ell)
    assert zeta <= 1e-3
    assert f0 == pytest.approx(fps * ell / T)


def test_damping_fit_needs_support():
    spec = power_spectrum(_damped_tone(12.5, 0.02))
    with pytest.raises(FitError):
        estimate_damping_ratio(spec, 1)


def test_jello_ratios_on_matched_cube():
    # Rayleigh damping fitted to the jello ratios, applied to a cube with modes near 12-16 Hz
    grid = VoxelGrid((4, 4, 4), 0.05 / 4)
    mesh = build_cube_mesh(grid, "bottom")
    units = assemble_unit_matrices(mesh, 0.3)
    system = assemble_global(units, MaterialField.homogeneous(grid.m, 9000.0 * 5.5, 1270.0))
    basis = solve_modes(system, 6)
    damping = rayleigh_from_ratios((12.5, 0.01749), (15.5, 0.01999))
    band = (basis.frequencies > 12) & (basis.frequencies < 16)
    assert band.any()
    i = int(np.flatnonzero(band)[0])
    series = simulate_transient(basis, damping, basis.modes[:, i], 400.0, 30.0)
    spec = power_spectrum(series)
    peak = int(np.argmax(spec.power)) + 1
    zeta, _ = estimate_damping_ratio(spec, peak)
    assert 0.0165 <= zeta <= 0.0215
    assert zeta == pytest.approx(float(damping.ratio(basis.omegas[i])), abs=0.002)


# ---------------------------------------------------------------- files

def test_observations_roundtrip(tmp_path, cube):
    mesh, _, basis, S = cube
    obs = Observations(true_image_modes(basis, S), mesh.q, S.projection, S.visible_vertices)
    save_observations(obs, tmp_path / "obs.json")
    back = load_observations(tmp_path / "obs.json")
    assert np.array_equal(back.gammas, obs.gammas)
    assert np.array_equal(back.omegas, obs.omegas)
    assert np.array_equal(back.projection.A, obs.projection.A)
    assert np.array_equal(back.visible_vertices, obs.visible_vertices)


def test_observations_validation():
    proj = look_at_camera((0, 1, 0), 1.0)
    doc = {"q": 3, "modes": [{"omega_rad_s": 1.0, "gamma": [1.0, 0, 0, 0]}],
           "projection": proj.to_dict(), "visible_vertices": [0]}
    with pytest.raises(ShapeError):
        Observations.from_dict(doc)
    del doc["projection"]
    with pytest.raises(ValidationError):
        Observations.from_dict(doc)
