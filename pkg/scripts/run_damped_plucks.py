"""Damped two-pluck video synthesis and Lorentzian damping fits.

Simulates the jello-like cube with Rayleigh damping, picks peaks from each
pluck, merges the extracted modes, and compares fitted damping ratios to the
Rayleigh model at each peak frequency.
"""
import argparse
from pathlib import Path

import numpy as np

from vibtomo.errors import FitError
from vibtomo.experiment import build_mesh, load_spec, synthesize, truth_field
from vibtomo.fem import assemble_global, assemble_unit_matrices
from vibtomo.modal import corner_vertex, pluck_displacement, simulate_transient, solve_modes
from vibtomo.observation import build_sampling_operator, estimate_damping_ratio, find_peaks, power_spectrum


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--spec", default=str(Path(__file__).parent / "specs" / "jello_damped.json"))
    args = ap.parse_args()
    spec = load_spec(args.spec)
    syn = synthesize(spec)
    print(f"{syn.observations.k} merged modes from {len(spec.plucks)} plucks: "
          + ", ".join(f"{len(r['peaks'])}" for r in syn.runs) + " peaks per pluck")

    damping = spec.damping.model()
    grid = spec.forward.grid()
    mesh = build_mesh(grid, spec)
    system = assemble_global(assemble_unit_matrices(mesh, spec.nu), truth_field(spec))
    basis = solve_modes(system, spec.forward_modes)
    S = build_sampling_operator(mesh, spec.camera.projection())
    pl = spec.plucks[0]
    d0 = pluck_displacement(mesh, system, corner_vertex(mesh, pl.corner), pl.displacement)
    spectrum = power_spectrum(simulate_transient(basis, damping, d0, spec.fps, spec.duration, output=S.P))
    print(f"{'f0 [Hz]':>9} {'zeta fit':>9} {'zeta model':>10}")
    for p in find_peaks(spectrum, spec.min_prominence, spec.min_separation):
        try:
            zeta, f0 = estimate_damping_ratio(spectrum, p)
        except FitError as exc:
            print(f"{spectrum.fps * p / spectrum.T:9.3f} {'rejected':>9} {'':>10}  ({exc})")
            continue
        print(f"{f0:9.3f} {zeta:9.5f} {float(damping.ratio(2 * np.pi * f0)):10.5f}")


if __name__ == "__main__":
    main()
