"""Homogeneous control: invert a homogeneous cube and a defect cube with the same settings.

Reports the coefficient of variation of the homogeneous reconstruction and how
much more the defect reconstruction resembles the defect truth than the
homogeneous reconstruction.
"""
import argparse
from pathlib import Path

from vibtomo.experiment import load_spec, synthesize
from vibtomo.fem import assemble_unit_matrices
from vibtomo.inverse import run_inversion
from vibtomo.metrics import coefficient_of_variation, normalized_correlation

SPECS = Path(__file__).parent / "specs"


def reconstruct(spec, k):
    syn = synthesize(spec)
    units = assemble_unit_matrices(syn.mesh, spec.nu)
    w, v, _ = run_inversion(syn.observations.first(k), units, syn.mesh.grid, spec.inversion, syn.sampler)
    return syn, w, v


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--homogeneous", default=str(SPECS / "homogeneous_cube.json"))
    ap.add_argument("--defect", default=str(SPECS / "defect_cube.json"))
    ap.add_argument("--modes", type=int, default=20)
    args = ap.parse_args()
    _, wh, vh = reconstruct(load_spec(args.homogeneous), args.modes)
    syn, wd, _ = reconstruct(load_spec(args.defect), args.modes)
    own = normalized_correlation(wd, syn.truth_w)
    other = normalized_correlation(wd, wh)
    print(f"homogeneous reconstruction: CV(w) {coefficient_of_variation(wh):.4f}  "
          f"CV(v) {coefficient_of_variation(vh):.4f}")
    print(f"defect reconstruction: corr vs defect truth {own:.3f}, vs homogeneous reconstruction {other:.3f}, "
          f"margin {own - other:.3f}")


if __name__ == "__main__":
    main()
