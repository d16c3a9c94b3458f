import csv
import json

import numpy as np
import pytest

from vibtomo.cli import apply_overrides, main, trend_flags
from vibtomo.errors import ValidationError
from vibtomo.experiment import (ExperimentSpec, VoxelGrid, load_spec, load_volume, make_volume, resample_volume,
                                save_volume, synthesize, truth_field)
from vibtomo.inverse import InversionConfig

JELLO_DAMPING = {"ratios": [[12.5, 0.01749], [15.5, 0.01999]]}


def small_spec(**extra):
    doc = {"forward": {"dims": [4, 4, 4], "spacing": 0.0125}, "forward_modes": 16, "fps": 400.0,
           "duration": 4.0, "defects": [{"corner": [1, 1, 2], "size": [2, 2, 1], "E": 1e5, "rho": 2000.0}],
           "inversion": {"max_iters": 20}}
    doc.update(extra)
    return doc


def write_spec(tmp_path, **extra):
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(small_spec(output_dir=str(tmp_path / "synth"), **extra)))
    return path


# ---------------------------------------------------------------- spec parsing

def test_spec_defaults_and_roundtrip():
    spec = ExperimentSpec.from_dict(small_spec())
    assert spec.inference_spec() == spec.forward
    again = ExperimentSpec.from_dict(json.loads(json.dumps(spec.to_dict())))
    assert again == spec


@pytest.mark.parametrize("patch, where", [
    ({"forward": {"dims": [4, 4, 0]}}, "spec.forward"),
    ({"camera": {"kind": "fisheye"}}, "spec.camera"),
    ({"plucks": [{"corner": "top-front"}, {"corner": "middle"}]}, "spec.plucks[1]"),
    ({"defects": [{"corner": [3, 3, 3], "size": [2, 1, 1], "E": 1.0, "rho": 1.0}]}, "spec.defects[0]"),
    ({"inversion": {"alpha_u": -1.0}}, "spec.inversion"),
    ({"duration": 0.0}, "spec.duration"),
    ({"bogus": 1}, "spec"),
    ({"freq_ceiling": 300.0}, "spec.fps"),
    ({"inference": {"dims": [3, 3, 3], "spacing": 0.01}}, "spec.inference"),
])
def test_spec_errors_name_the_field(patch, where):
    with pytest.raises(ValidationError) as info:
        ExperimentSpec.from_dict(small_spec(**patch))
    assert str(info.value).startswith(where)


def test_load_spec_bad_json(tmp_path):
    (tmp_path / "s.json").write_text("{not json")
    with pytest.raises(ValidationError):
        load_spec(tmp_path / "s.json")


def test_truth_field_places_defect():
    spec = ExperimentSpec.from_dict(small_spec())
    truth = spec.forward.grid().reshape(truth_field(spec).w)
    assert np.all(truth[1:3, 1:3, 2:3] == 1e5)
    assert np.sum(truth == 1e5) == 4
    assert np.all(truth[truth != 1e5] == 9000.0)


# ---------------------------------------------------------------- volumes

def test_volume_roundtrip(tmp_path):
    grid = VoxelGrid((3, 4, 2), 0.01)
    values = np.random.default_rng(0).uniform(1e3, 1e4, grid.m)
    save_volume(make_volume(grid, "w", values), tmp_path / "w.json")
    back = load_volume(tmp_path / "w.json")
    assert back.units == "Pa" and back.dims == (3, 4, 2)
    assert np.array_equal(back.values, values)
    assert make_volume(grid, "v", values).units == "kg/m^3"


def test_volume_shape_checked(tmp_path):
    doc = make_volume(VoxelGrid((2, 2, 2), 0.01), "w", np.ones(8)).to_dict()
    doc["values"] = doc["values"][:-1]
    (tmp_path / "bad.json").write_text(json.dumps(doc))
    with pytest.raises(ValidationError):
        load_volume(tmp_path / "bad.json")


def test_resample_conserves_volume_average():
    src, dst = VoxelGrid((8, 8, 8), 1 / 8), VoxelGrid((6, 6, 6), 1 / 6)
    values = np.random.default_rng(1).uniform(0, 1, src.m)
    out = resample_volume(values, src, dst)
    assert out.mean() == pytest.approx(values.mean(), rel=1e-12)
    assert np.allclose(resample_volume(np.full(src.m, 4.0), src, dst), 4.0)
    # an aligned 2x2x2 block of the 8-grid covers coarse voxels by their overlap fraction
    block = np.zeros(src.dims)
    block[:2, :2, :2] = 1.0
    coarse = dst.reshape(resample_volume(block.ravel(), src, dst))
    assert coarse[0, 0, 0] == pytest.approx(1.0)
    # coarse voxel 1 spans x in [1/6, 2/6]; the block covers [0, 1/4] -> half its width
    assert coarse[1, 0, 0] == pytest.approx(0.5)


# ---------------------------------------------------------------- synthesis

def test_synth_undamped_recovers_many_modes():
    syn = synthesize(ExperimentSpec.from_dict(small_spec()))
    assert syn.observations.k >= 8
    observed = syn.observations.omegas / (2 * np.pi)
    # every observed mode sits within one frequency bin of a forward mode
    for f in observed:
        assert np.min(np.abs(syn.forward_frequencies - f)) <= 1 / 4.0


def test_two_plucks_never_lose_modes():
    one = synthesize(ExperimentSpec.from_dict(small_spec(damping=JELLO_DAMPING, min_prominence=0.5)))
    two = synthesize(ExperimentSpec.from_dict(small_spec(
        damping=JELLO_DAMPING, min_prominence=0.5, plucks=[{"corner": "top-front"}, {"corner": "top-back"}])))
    assert two.observations.k >= one.observations.k
    assert len(two.runs) == 2


def test_synth_mismatched_grids():
    syn = synthesize(ExperimentSpec.from_dict(small_spec(
        forward={"dims": [6, 6, 6], "spacing": 0.05 / 6}, inference={"dims": [4, 4, 4], "spacing": 0.0125},
        defects=[], source="modes", forward_modes=8)))
    assert syn.mesh.grid.dims == (4, 4, 4)
    assert syn.observations.q == syn.mesh.q
    assert np.allclose(syn.truth_w, 9000.0)


def test_noise_is_seeded():
    a = synthesize(ExperimentSpec.from_dict(small_spec(source="modes", snr=10.0, seed=3)))
    b = synthesize(ExperimentSpec.from_dict(small_spec(source="modes", snr=10.0, seed=3)))
    c = synthesize(ExperimentSpec.from_dict(small_spec(source="modes", snr=10.0, seed=4)))
    assert np.array_equal(a.observations.gammas, b.observations.gammas)
    assert not np.array_equal(a.observations.gammas, c.observations.gammas)


# ---------------------------------------------------------------- CLI

@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    spec = write_spec(tmp)
    assert main(["synth", str(spec)]) == 0
    return tmp / "synth"


def test_synth_outputs(synth_dir):
    for name in ("mesh.json", "forward_mesh.json", "observations.json", "truth_w.json", "truth_v.json",
                 "inversion.json", "synth.json"):
        assert (synth_dir / name).exists(), name
    summary = json.loads((synth_dir / "synth.json").read_text())
    assert summary["n_modes"] >= 8


def test_invert_is_deterministic(synth_dir, tmp_path):
    args = ["invert", str(synth_dir / "observations.json"), str(synth_dir / "mesh.json"),
            "--config", str(synth_dir / "inversion.json"), "--set", "max_iters=5"]
    main(args + ["--out", str(tmp_path / "a")])
    main(args + ["--out", str(tmp_path / "b")])
    for name in ("w.json", "v.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_invert_exit_codes(synth_dir, tmp_path):
    base = ["invert", str(synth_dir / "observations.json"), str(synth_dir / "mesh.json")]
    assert main(base + ["--set", "max_iters=2", "--set", "rel_tol=0", "--out", str(tmp_path / "nc")]) == 3
    state = json.loads((tmp_path / "nc" / "state.json").read_text())
    assert state["iterations"] == 2
    assert main(base + ["--set", "max_iters=3", "--set", "rel_tol=1e9", "--out", str(tmp_path / "ok")]) == 0
    assert main(base + ["--set", "no_such_field=1", "--out", str(tmp_path / "bad")]) == 2


def test_invert_without_modes_is_numerical_failure(synth_dir, tmp_path):
    doc = json.loads((synth_dir / "observations.json").read_text())
    doc["modes"] = []
    (tmp_path / "empty.json").write_text(json.dumps(doc))
    code = main(["invert", str(tmp_path / "empty.json"), str(synth_dir / "mesh.json"), "--out", str(tmp_path)])
    assert code == 4


def test_missing_input_is_invalid(tmp_path):
    assert main(["invert", str(tmp_path / "nope.json"), str(tmp_path / "mesh.json")]) == 2


def test_eval_truth_against_itself(synth_dir, tmp_path):
    tw, tv = str(synth_dir / "truth_w.json"), str(synth_dir / "truth_v.json")
    assert main(["eval", tw, tv, tw, tv, "--mesh", str(synth_dir / "mesh.json"), "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["corr_w"] == pytest.approx(1.0, abs=1e-12)
    assert report["corr_v"] == pytest.approx(1.0, abs=1e-12)
    assert report["sigma_star"] == 0.0
    assert max(row[2] for row in report["freq_table"]) <= 1e-8
    for name in ("w.png", "v.png", "sigma_curve.csv", "freq_table.csv"):
        assert (tmp_path / name).stat().st_size > 0


def test_eval_dims_mismatch(tmp_path):
    a = make_volume(VoxelGrid((2, 2, 2), 0.01), "w", np.arange(1.0, 9.0))
    b = make_volume(VoxelGrid((2, 2, 1), 0.01), "w", np.arange(1.0, 5.0))
    save_volume(a, tmp_path / "a.json")
    save_volume(b, tmp_path / "b.json")
    pa, pb = str(tmp_path / "a.json"), str(tmp_path / "b.json")
    assert main(["eval", pa, pa, pb, pa, "--no-heatmaps", "--out", str(tmp_path / "e")]) == 2


def test_sweep_writes_trend_flags(tmp_path):
    spec = write_spec(tmp_path, source="modes")
    out = tmp_path / "sweep"
    assert main(["sweep", str(spec), "--counts", "4", "6", "--set", "max_iters=5", "--out", str(out)]) == 0
    with open(out / "sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["k"] for r in rows] == ["4", "6"]
    assert {"corr_w_nondecreasing", "sigma_nonincreasing"} <= set(rows[0])
    doc = json.loads((out / "sweep.json").read_text())
    assert doc["corr_w_trend_ok"] == all(r["corr_w_nondecreasing"] for r in doc["rows"])


def test_trend_flags():
    assert trend_flags([0.1, 0.3, 0.29, 0.5], tol=0.02) == [True, True, True, True]
    assert trend_flags([0.1, 0.3, 0.2], tol=0.02) == [True, True, False]
    assert trend_flags([2.0, 1.5, 1.5, 1.75], increasing=False) == [True, True, True, False]


def test_apply_overrides():
    cfg = apply_overrides(InversionConfig(), ["alpha_w=1e-13", "max_iters=7", "clamp=false"])
    assert cfg.alpha_w == 1e-13 and cfg.max_iters == 7 and cfg.clamp is False
    with pytest.raises(ValidationError):
        apply_overrides(InversionConfig(), ["alpha_w"])


def test_damping_and_modes_commands(tmp_path):
    from vibtomo.fem import MaterialField, assemble_global, assemble_unit_matrices, build_cube_mesh, save_mesh
    from vibtomo.modal import RayleighDamping, simulate_transient, solve_modes, write_series
    grid = VoxelGrid((3, 3, 3), 0.05 / 3)
    mesh = build_cube_mesh(grid, "bottom")
    system = assemble_global(assemble_unit_matrices(mesh), MaterialField.homogeneous(grid.m, 9000.0, 1270.0))
    basis = solve_modes(system, 6)
    d0 = basis.modes @ np.array([1.0, 0.8, 0.6, 0.5, 0.4, 0.3]) * 1e-3
    series = simulate_transient(basis, RayleighDamping(0.5, 1e-4), d0, 400.0, 8.0)
    write_series(tmp_path / "s.bin", series)
    save_mesh(mesh, tmp_path / "m.json")
    assert main(["damping", str(tmp_path / "s.bin"), "--min-prominence", "0.5",
                 "--out", str(tmp_path / "d.csv")]) == 0
    with open(tmp_path / "d.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows
    expected = RayleighDamping(0.5, 1e-4)
    for r in rows:
        f0, zeta = float(r["f0_hz"]), float(r["zeta"])
        assert zeta == pytest.approx(expected.ratio(2 * np.pi * f0), abs=0.005)
    assert main(["modes", str(tmp_path / "s.bin"), str(tmp_path / "m.json"), "--min-prominence", "0.5",
                 "--out", str(tmp_path / "o.json")]) == 0
    assert json.loads((tmp_path / "o.json").read_text())["modes"]
