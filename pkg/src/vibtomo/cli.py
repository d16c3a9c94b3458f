"""Command-line entry point: ``vibtomo {synth,invert,eval,modes,damping,sweep}``.

Exit codes: 0 success, 2 invalid input, 3 inversion hit ``max_iters``
without converging, 4 numerical failure. ``VIBTOMO_THREADS`` caps the
BLAS/LAPACK thread pool.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import (AnchorMissingError, DegenerateSystemError, DivergenceError, EigenConvergenceError, FitError,
                     RankDeficiencyError, UndefinedCorrelationError, UnsupportedDampingError, ValidationError)
from .experiment import (ExperimentSpec, load_spec, load_volume, make_volume, save_volume, synthesize)
from .fem import MaterialField, VoxelGrid, assemble_unit_matrices, load_mesh, save_mesh
from .inverse import InversionConfig, load_config, result_to_dict, run_inversion
from .metrics import ReconReport, compare_frequencies, intrinsic_resolution, normalized_correlation
from .modal import read_series
from .observation import (Observations, ProjectionModel, build_sampling_operator, estimate_damping_ratio,
                          extract_modes, find_peaks, load_observations, power_spectrum, save_observations,
                          three_face_camera)

log = logging.getLogger("vibtomo")

EXIT_OK, EXIT_INVALID, EXIT_NOT_CONVERGED, EXIT_NUMERICAL = 0, 2, 3, 4
NUMERICAL_ERRORS = (AnchorMissingError, DegenerateSystemError, DivergenceError, EigenConvergenceError, FitError,
                    RankDeficiencyError, UndefinedCorrelationError, UnsupportedDampingError,
                    np.linalg.LinAlgError)
DEFAULT_SIGMAS = tuple(np.round(np.arange(0.0, 3.01, 0.25), 2))


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: InversionConfig, pairs) -> InversionConfig:
    """``key=value`` overrides on an inversion config; values are parsed as JSON."""
    doc = config.to_dict()
    for pair in pairs or ():
        key, sep, value = pair.partition("=")
        if not sep:
            raise ValidationError(f"override {pair!r} is not of the form key=value")
        doc[key] = _parse_value(value)
    return InversionConfig.from_dict(doc)


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=1))


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# commands

def cmd_synth(spec: ExperimentSpec, out: Path) -> dict:
    """Forward simulation and mode extraction; writes mesh, truth volumes and observations."""
    out.mkdir(parents=True, exist_ok=True)
    syn = synthesize(spec)
    grid = syn.mesh.grid
    save_mesh(syn.mesh, out / "mesh.json")
    save_mesh(syn.forward_mesh, out / "forward_mesh.json")
    save_observations(syn.observations, out / "observations.json")
    save_volume(make_volume(grid, "w", syn.truth_w), out / "truth_w.json")
    save_volume(make_volume(grid, "v", syn.truth_v), out / "truth_v.json")
    _write_json(out / "inversion.json", spec.inversion.to_dict())
    summary = {
        "n_modes": syn.observations.k,
        "observed_hz": [m.frequency for m in syn.observations.modes],
        "forward_hz": syn.forward_frequencies.tolist(),
        "runs": syn.runs,
    }
    _write_json(out / "synth.json", summary)
    log.info("wrote %d observed modes to %s", syn.observations.k, out)
    return summary


def cmd_invert(observations: Observations, mesh, config: InversionConfig, out: Path, nu: float = 0.3,
               n_modes: int | None = None):
    """Run the inversion; writes ``w.json``, ``v.json`` and ``state.json``. Returns the solver state."""
    out.mkdir(parents=True, exist_ok=True)
    if n_modes is not None:
        observations = observations.first(n_modes)
    if observations.q != mesh.q:
        raise ValidationError(f"observations are for {observations.q} vertices, mesh has {mesh.q}")
    units = assemble_unit_matrices(mesh, nu)
    sampler = build_sampling_operator(mesh, observations.projection, visible=observations.visible_vertices)
    w, v, state = run_inversion(observations, units, mesh.grid, config, sampler)
    save_volume(make_volume(mesh.grid, "w", w), out / "w.json")
    save_volume(make_volume(mesh.grid, "v", v), out / "v.json")
    _write_json(out / "state.json", result_to_dict(state))
    log.info("inversion: %d iterations, converged=%s", state.iter, state.converged)
    return state


def evaluate(w, v, truth_w, truth_v, grid, sigmas=DEFAULT_SIGMAS, mesh=None, observations=None,
             nu: float = 0.3, count: int | None = None) -> ReconReport:
    """Correlations, intrinsic resolution of ``w`` and (optionally) frequency agreement."""
    corr_w = normalized_correlation(w, truth_w)
    corr_v = normalized_correlation(v, truth_v)
    sigma_star, curve = intrinsic_resolution(w, truth_w, grid, sigmas)
    report = ReconReport(corr_w, corr_v, sigma_star, [[float(s), float(c)] for s, c in zip(sigmas, curve)])
    if mesh is not None:
        units = assemble_unit_matrices(mesh, nu)
        est = MaterialField(np.asarray(w), np.asarray(v), nu)
        if observations is not None and observations.k:
            sampler = build_sampling_operator(mesh, observations.projection,
                                              visible=observations.visible_vertices)
            table, sim = compare_frequencies(est, units, observations.omegas, observations.k, sampler,
                                             observations.gammas)
        else:
            table, sim = compare_frequencies(est, units, MaterialField(truth_w, truth_v, nu), count or 10)
        report.freq_table = [list(row) for row in table]
        report.mode_similarity = sim
    return report


def cmd_eval(w_vol, v_vol, tw_vol, tv_vol, out: Path, sigmas=DEFAULT_SIGMAS, mesh=None, observations=None,
             heatmaps: bool = True) -> ReconReport:
    for a, b in ((w_vol, tw_vol), (v_vol, tv_vol), (w_vol, v_vol)):
        if a.dims != b.dims:
            raise ValidationError(f"volume dims differ: {a.name} {a.dims} vs {b.name} {b.dims}")
    out.mkdir(parents=True, exist_ok=True)
    grid = mesh.grid if mesh is not None else None
    if grid is None:
        grid = VoxelGrid(w_vol.dims, w_vol.spacing)
    report = evaluate(w_vol.values, v_vol.values, tw_vol.values, tv_vol.values, grid, sigmas, mesh, observations)
    _write_json(out / "report.json", report.to_dict())
    _write_csv(out / "sigma_curve.csv", ["sigma_voxels", "correlation"], report.sigma_curve)
    if report.freq_table:
        _write_csv(out / "freq_table.csv", ["reference_hz", "predicted_hz", "relative_error"], report.freq_table)
    if heatmaps:
        from .plots import slice_heatmaps
        slice_heatmaps({"estimate": w_vol.values, "truth": tw_vol.values}, grid, out / "w.png",
                       title=f"Young's modulus (corr {report.corr_w:.3f})")
        slice_heatmaps({"estimate": v_vol.values, "truth": tv_vol.values}, grid, out / "v.png",
                       title=f"density (corr {report.corr_v:.3f})")
    log.info("corr_w %.4f corr_v %.4f sigma* %.2f", report.corr_w, report.corr_v, report.sigma_star)
    return report


def trend_flags(values, tol: float = 0.0, increasing: bool = True) -> list[bool]:
    """Per-step flags: True when a value does not move against the expected trend by more than ``tol``."""
    flags = [True]
    for a, b in zip(values[:-1], values[1:]):
        flags.append(bool(b >= a - tol) if increasing else bool(b <= a + tol))
    return flags


def mode_count_sweep(spec: ExperimentSpec, counts, out: Path, sigmas=DEFAULT_SIGMAS) -> list[dict]:
    """Synthesize once, invert with the lowest ``k`` modes for each count, and score each run."""
    out.mkdir(parents=True, exist_ok=True)
    syn = synthesize(spec)
    units = assemble_unit_matrices(syn.mesh, spec.nu)
    grid = syn.mesh.grid
    rows = []
    for k in counts:
        if k > syn.observations.k:
            log.warning("only %d modes observed; skipping k=%d", syn.observations.k, k)
            continue
        w, v, state = run_inversion(syn.observations.first(k), units, grid, spec.inversion, syn.sampler)
        rep = evaluate(w, v, syn.truth_w, syn.truth_v, grid, sigmas)
        rows.append({"k": k, "corr_w": rep.corr_w, "corr_v": rep.corr_v, "sigma_star": rep.sigma_star,
                     "iterations": state.iter, "converged": state.converged})
        save_volume(make_volume(grid, "w", w), out / f"w_k{k}.json")
        save_volume(make_volume(grid, "v", v), out / f"v_k{k}.json")
        log.info("k=%d corr_w %.3f corr_v %.3f sigma* %.2f", k, rep.corr_w, rep.corr_v, rep.sigma_star)
    cw = trend_flags([r["corr_w"] for r in rows])
    ss = trend_flags([r["sigma_star"] for r in rows], increasing=False)
    for r, a, b in zip(rows, cw, ss):
        r["corr_w_nondecreasing"] = a
        r["sigma_nonincreasing"] = b
    header = ["k", "corr_w", "corr_v", "sigma_star", "iterations", "converged", "corr_w_nondecreasing",
              "sigma_nonincreasing"]
    _write_csv(out / "sweep.csv", header, [[r[h] for h in header] for r in rows])
    _write_json(out / "sweep.json", {"rows": rows, "corr_w_trend_ok": all(cw), "sigma_trend_ok": all(ss)})
    return rows


def observations_from_series(series, mesh, projection: ProjectionModel, min_prominence=2.0, min_separation=2,
                             max_peaks=None, freq_ceiling=None) -> Observations:
    """Peak picking and mode extraction on a stored series (image-space or full-field)."""
    sampler = build_sampling_operator(mesh, projection)
    frames = series.frames
    if series.n == mesh.n and series.n != 2 * mesh.q:
        frames = np.asarray(sampler.P @ frames.T).T
    elif series.n != 2 * mesh.q:
        raise ValidationError(f"series has {series.n} columns; expected {2 * mesh.q} (image space) "
                              f"or {mesh.n} (full field)")
    spectrum = power_spectrum(frames, series.fps)
    peaks = find_peaks(spectrum, min_prominence, min_separation, max_peaks)
    if freq_ceiling is not None:
        peaks = [p for p in peaks if spectrum.frequency(p) <= freq_ceiling]
    modes = extract_modes(frames, peaks, sampler, series.fps)
    return Observations(modes, mesh.q, projection, sampler.visible_vertices)


def damping_table(series, min_prominence=2.0, min_separation=2, max_peaks=None):
    """Lorentzian damping fit at every spectral peak; rows ``(bin, f0_hz, zeta)`` (NaN where the fit fails)."""
    spectrum = power_spectrum(series)
    rows = []
    for p in find_peaks(spectrum, min_prominence, min_separation, max_peaks):
        try:
            zeta, f0 = estimate_damping_ratio(spectrum, p)
        except FitError as exc:
            log.warning("bin %d: %s", p, exc)
            zeta, f0 = float("nan"), spectrum.frequency(p)
        rows.append((int(p), float(f0), float(zeta)))
    return rows


# ---------------------------------------------------------------------------
# argument handling

def _load_projection(path):
    if path is None:
        return three_face_camera()
    doc = json.loads(Path(path).read_text())
    return ProjectionModel(doc["A"], doc["b"])


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vibtomo", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="simulate an experiment and extract observations")
    p.add_argument("spec", help="experiment spec (JSON)")
    p.add_argument("--out", help="output directory (default: spec output_dir)")
    p.add_argument("--seed", type=int)
    p.add_argument("--freq-ceiling", type=float, help="drop modes above this frequency [Hz]")

    p = sub.add_parser("invert", help="reconstruct w and v from observations")
    p.add_argument("observations")
    p.add_argument("mesh")
    p.add_argument("--config", help="inversion config (JSON)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
    p.add_argument("--modes", type=int, help="use only the lowest N observed modes")
    p.add_argument("--nu", type=float, default=0.3)
    p.add_argument("--out", default="result")

    p = sub.add_parser("eval", help="score a reconstruction against truth volumes")
    p.add_argument("w")
    p.add_argument("v")
    p.add_argument("truth_w")
    p.add_argument("truth_v")
    p.add_argument("--mesh", help="mesh file; enables the frequency comparison")
    p.add_argument("--observations", help="observed modes to compare predicted frequencies against")
    p.add_argument("--sigmas", type=float, nargs="+", default=list(DEFAULT_SIGMAS))
    p.add_argument("--no-heatmaps", action="store_true")
    p.add_argument("--out", default="eval")

    p = sub.add_parser("modes", help="peak picking and mode extraction from a displacement series")
    p.add_argument("series")
    p.add_argument("mesh")
    p.add_argument("--projection", help="JSON {A, b}; default three-face camera")
    p.add_argument("--min-prominence", type=float, default=2.0)
    p.add_argument("--min-separation", type=int, default=2)
    p.add_argument("--max-peaks", type=int)
    p.add_argument("--freq-ceiling", type=float)
    p.add_argument("--out", default="observations.json")

    p = sub.add_parser("damping", help="Lorentzian damping-ratio fit at each spectral peak")
    p.add_argument("series")
    p.add_argument("--min-prominence", type=float, default=2.0)
    p.add_argument("--min-separation", type=int, default=2)
    p.add_argument("--max-peaks", type=int)
    p.add_argument("--out", default="damping.csv")

    p = sub.add_parser("sweep", help="mode-count sweep with trend flags")
    p.add_argument("spec")
    p.add_argument("--counts", type=int, nargs="+", default=[8, 10, 12, 16, 20])
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override an inversion config field")
    p.add_argument("--out")
    return ap


def _run(args) -> int:
    if args.command == "synth":
        spec = load_spec(args.spec)
        doc = spec.to_dict()
        if args.seed is not None:
            doc["seed"] = args.seed
        if args.freq_ceiling is not None:
            doc["freq_ceiling"] = args.freq_ceiling
        spec = ExperimentSpec.from_dict(doc)
        summary = cmd_synth(spec, Path(args.out or spec.output_dir))
        print(f"{summary['n_modes']} modes observed")
        return EXIT_OK

    if args.command == "invert":
        obs = load_observations(args.observations)
        mesh = load_mesh(args.mesh)
        config = load_config(args.config) if args.config else InversionConfig()
        config = apply_overrides(config, args.set)
        state = cmd_invert(obs, mesh, config, Path(args.out), nu=args.nu, n_modes=args.modes)
        print(f"{state.iter} iterations, converged={state.converged}")
        return EXIT_OK if state.converged else EXIT_NOT_CONVERGED

    if args.command == "eval":
        vols = [load_volume(p) for p in (args.w, args.v, args.truth_w, args.truth_v)]
        mesh = load_mesh(args.mesh) if args.mesh else None
        obs = load_observations(args.observations) if args.observations else None
        rep = cmd_eval(*vols, Path(args.out), sorted(args.sigmas), mesh, obs, heatmaps=not args.no_heatmaps)
        print(f"corr_w {rep.corr_w:.4f} corr_v {rep.corr_v:.4f} sigma* {rep.sigma_star:g}")
        return EXIT_OK

    if args.command == "modes":
        obs = observations_from_series(read_series(args.series), load_mesh(args.mesh),
                                       _load_projection(args.projection), args.min_prominence,
                                       args.min_separation, args.max_peaks, args.freq_ceiling)
        save_observations(obs, args.out)
        print(f"{obs.k} modes written to {args.out}")
        return EXIT_OK

    if args.command == "damping":
        rows = damping_table(read_series(args.series), args.min_prominence, args.min_separation, args.max_peaks)
        _write_csv(args.out, ["bin", "f0_hz", "zeta"], rows)
        for b, f0, z in rows:
            print(f"{f0:10.4f} Hz  zeta {z:.5f}")
        return EXIT_OK

    if args.command == "sweep":
        spec = load_spec(args.spec)
        doc = spec.to_dict()
        doc["inversion"] = apply_overrides(spec.inversion, args.set).to_dict()
        spec = ExperimentSpec.from_dict(doc)
        out = Path(args.out or spec.output_dir)
        rows = mode_count_sweep(spec, args.counts, out)
        for r in rows:
            print(f"k={r['k']:3d} corr_w {r['corr_w']:.3f} corr_v {r['corr_v']:.3f} sigma* {r['sigma_star']:g}")
        return EXIT_OK
    raise AssertionError(args.command)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("VIBTOMO_THREADS")
    try:
        if threads:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=int(threads)):
                return _run(args)
        return _run(args)
    except (ValidationError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
