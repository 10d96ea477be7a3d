"""Command-line front end: simulate, reconstruct, analyze,
check-identifiability, export-volume.

Exit codes: 0 success, 2 solver did not converge, 3 validation failure,
4 I/O failure.
"""

import argparse
import csv
import hashlib
import json
import os
import sys
import warnings

import numpy as np

from . import __version__, analysis, moments, serialization, solver
from .config import ExperimentConfig
from .errors import GridMismatchError, ModmError, NonConvergenceError, ValidationError
from .model import (
    DistributionCoefficients,
    PolarGrid,
    random_distribution,
    random_volume,
)

EXIT_OK = 0
EXIT_NONCONVERGED = 2
EXIT_VALIDATION = 3
EXIT_IO = 4


def _out_dir(args):
    root = args.out or os.environ.get("MODM_OUT_ROOT", ".")
    os.makedirs(root, exist_ok=True)
    return root


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out, config, outputs, extra=None):
    manifest = {
        "version": __version__,
        "config": config.to_dict() if config is not None else None,
        "config_hash": config.hash() if config is not None else None,
        "outputs": {name: _sha256(os.path.join(out, name)) for name in outputs},
    }
    if extra:
        manifest.update(extra)
    path = os.path.join(out, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _config_from_args(args, overrides):
    if args.config:
        return ExperimentConfig.from_file(args.config, overrides)
    return ExperimentConfig.from_dict({}, overrides)


def _seed_overrides(args):
    ov = {}
    if getattr(args, "seed", None) is not None:
        ov.update(
            solver_seed=args.seed,
            volume_seed=args.seed + 1,
            dist_seed=args.seed + 2,
            image_seed=args.seed + 3,
        )
    for flag, key in [
        ("restarts", "restarts"),
        ("max_iter", "max_iter"),
        ("tol", "tol"),
        ("svd_cutoff", "svd_cutoff"),
        ("analytic", "analytic"),
        ("n_images", "n_images"),
        ("sigma", "sigma"),
        ("save_images", "save_images"),
    ]:
        value = getattr(args, flag, None)
        if value is not None and value is not False:
            ov[key] = value
    return ov


def cmd_simulate(args):
    config = _config_from_args(args, _seed_overrides(args)).validate()
    out = _out_dir(args)
    grid = PolarGrid.build(config.n_radial, config.n_angular, config.r_max)
    vol = random_volume(config.bandlimit, grid, config.volume_seed)
    if config.dist_file:
        dist = serialization.load_distribution(config.dist_file)
    else:
        dist = random_distribution(config.dist_degree, config.dist_seed, config.concentration)

    outputs = []
    serialization.save_volume(os.path.join(out, "volume_true.modm"), vol,
                              {"config_hash": config.hash(), "version": __version__})
    serialization.save_distribution(os.path.join(out, "distribution_true.modm"), dist,
                                    {"config_hash": config.hash(), "version": __version__})
    outputs += ["volume_true.modm", "distribution_true.modm"]

    if config.analytic:
        m2u = moments.m2_uniform_analytic(vol)
        m2n = moments.m2_analytic(vol, dist)
        m1_tables = moments.MomentTables(vol.bandlimit, grid, None, m2u.m1,
                                         {"kind": "analytic", "distribution": "uniform"})
    else:
        batch_u = moments.simulate_images(
            vol, DistributionCoefficients.uniform(), config.n_images, config.sigma,
            config.image_seed,
        )
        batch_n = moments.simulate_images(
            vol, dist, config.n_images, config.sigma, config.image_seed + 1
        )
        m2u = moments.empirical_moments(batch_u, vol.bandlimit)
        m2n = moments.empirical_moments(batch_n, vol.bandlimit)
        m1_tables = moments.MomentTables(vol.bandlimit, grid, None, m2u.m1, dict(m2u.meta))
        if config.save_images:
            serialization.write_container(
                os.path.join(out, "images_nonuniform.modm"),
                {"type": "images", "sigma": batch_n.sigma, "grid": grid.to_dict()},
                [("images", batch_n.images), ("rotations", batch_n.rotations)],
            )
            outputs.append("images_nonuniform.modm")
    meta = {"config_hash": config.hash(), "version": __version__}
    serialization.save_moments(os.path.join(out, "m2_uniform.modm"), m2u, meta)
    serialization.save_moments(os.path.join(out, "m2_nonuniform.modm"), m2n, meta)
    serialization.save_moments(os.path.join(out, "m1_uniform.modm"), m1_tables, meta)
    outputs += ["m2_uniform.modm", "m2_nonuniform.modm", "m1_uniform.modm"]
    _write_manifest(out, config, outputs, {"seeds": {
        "volume": config.volume_seed, "distribution": config.dist_seed,
        "images": config.image_seed}})
    print(f"simulate: wrote {len(outputs)} files to {out}")
    return EXIT_OK


def cmd_reconstruct(args):
    config = _config_from_args(args, _seed_overrides(args))
    out = _out_dir(args)
    m2u = serialization.load_moments(args.m2_uniform)
    m2n = serialization.load_moments(args.m2_nonuniform)
    m1 = serialization.load_moments(args.m1_uniform)
    if m1.m1 is None:
        raise ValidationError(f"{args.m1_uniform} carries no first moment")
    vol_est, dist_est, state = solver.run_modm(
        m2u,
        m2n,
        m1,
        max_iter=config.max_iter,
        tol=config.tol,
        restarts=config.restarts,
        seed=config.solver_seed,
        svd_cutoff=config.svd_cutoff,
        stop_resid=config.stop_resid,
    )
    meta = {"config_hash": config.hash(), "version": __version__}
    serialization.save_volume(os.path.join(out, "volume_est.modm"), vol_est, meta)
    serialization.save_distribution(os.path.join(out, "distribution_est.modm"), dist_est, meta)
    serialization.save_solver_state(os.path.join(out, "solver_state.modm"), state, meta)
    with open(os.path.join(out, "residuals.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "objective"])
        for i, v in enumerate(state.residual_trace):
            writer.writerow([i, f"{v:.17g}"])
    from . import figures

    figures.residual_figure([state.residual_trace], os.path.join(out, "residuals.png"))
    outputs = ["volume_est.modm", "distribution_est.modm", "solver_state.modm",
               "residuals.csv", "residuals.png"]
    _write_manifest(out, config, outputs, {"solver": {
        "status": state.status, "residual": state.residual,
        "iterations": state.iterations, "restarts": state.meta.get("restarts"),
        "factor_cond": state.meta.get("factor_cond")}})
    print(f"reconstruct: status={state.status} residual={state.residual:.3e} -> {out}")
    if state.status != "converged":
        raise NonConvergenceError(f"solver finished with status {state.status}")
    return EXIT_OK


def cmd_analyze(args):
    out = _out_dir(args)
    ref = serialization.load_volume(args.reference)
    est = serialization.load_volume(args.estimate)
    result = analysis.align(ref, est)
    aligned = analysis.apply_alignment(est, result)
    shell = analysis.fsc(ref, aligned)
    with open(os.path.join(out, "fsc.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["radius", "fsc"])
        for r, v in zip(ref.grid.radii, shell):
            writer.writerow([f"{r:.17g}", f"{v:.17g}"])
    from . import figures

    figures.fsc_figure(ref.grid.radii, shell, os.path.join(out, "fsc.png"))
    report = {
        "rotation_zyz": list(result.angles),
        "chirality": result.chirality,
        "aligned_relative_error": result.rel_error,
        "per_degree_residuals": result.per_degree,
        "fsc_mean": float(np.nanmean(shell)),
        "version": __version__,
    }
    with open(os.path.join(out, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write("alignment report\n")
        fh.write(f"  rotation (ZYZ): {result.angles}\n")
        fh.write(f"  chirality flip: {'yes' if result.chirality else 'no'}\n")
        fh.write(f"  aligned relative error: {result.rel_error:.6e}\n")
        fh.write(f"  mean shell correlation: {np.nanmean(shell):.4f}\n")
    _write_manifest(out, None, ["fsc.csv", "fsc.png", "report.json", "report.txt"])
    print(f"analyze: aligned error {result.rel_error:.3e}, mean FSC {np.nanmean(shell):.3f}")
    return EXIT_OK


def cmd_check_identifiability(args):
    out = _out_dir(args)
    reports = []
    for bandlimit in range(args.l_min, args.l_max + 1):
        reports.append(analysis.check_injectivity(bandlimit))
        if bandlimit >= 4:
            reports.append(analysis.check_column_rank(bandlimit, seed=args.seed or 0))
    sparse = analysis.sparse_instance_check()
    reports.append(sparse)
    nonvanish = analysis.check_nonvanishing()
    doc = {
        "rank_checks": [r.to_dict() for r in reports],
        "nonvanishing": nonvanish,
        "all_passed": bool(all(r.passed for r in reports) and nonvanish["passed"]),
        "version": __version__,
    }
    with open(os.path.join(out, "identifiability.json"), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out, "identifiability.txt"), "w", encoding="utf-8") as fh:
        for r in reports:
            fh.write(
                f"{r.lemma} (L={r.bandlimit}): rank {r.rank} expected {r.expected_rank} "
                f"gap {r.spectral_gap:.2e} -> {'pass' if r.passed else 'FAIL'}\n"
            )
        fh.write(
            f"nonvanishing sweeps: min |coupling| {nonvanish['min_abs_cg_product']:.3e}, "
            f"min |normalizer| {nonvanish['min_abs_gated_normalizer']:.3e} -> "
            f"{'pass' if nonvanish['passed'] else 'FAIL'}\n"
        )
    from . import figures

    figures.spectra_figure(reports, os.path.join(out, "spectra.png"))
    _write_manifest(out, None, ["identifiability.json", "identifiability.txt", "spectra.png"])
    print(f"check-identifiability: {'all passed' if doc['all_passed'] else 'FAILURES'} -> {out}")
    return EXIT_OK if doc["all_passed"] else EXIT_VALIDATION


def cmd_export_volume(args):
    out = _out_dir(args)
    vol = serialization.load_volume(args.coefficients)
    g = args.grid_size
    if g > 512:
        raise ValidationError("grid size capped at 512")
    if g < 4 * vol.bandlimit:
        warnings.warn(f"grid size {g} below 4*bandlimit; export will be undersampled")
    freqs = np.fft.fftfreq(g)
    wx, wy, wz = np.meshgrid(freqs, freqs, freqs, indexing="ij")
    pts = np.column_stack([wx.ravel(), wy.ravel(), wz.ravel()])
    values = vol.evaluate(pts).reshape(g, g, g)
    if g % 2 == 0:  # unpaired Nyquist planes break Hermitian symmetry
        values[g // 2, :, :] = 0.0
        values[:, g // 2, :] = 0.0
        values[:, :, g // 2] = 0.0
    real_space = np.fft.fftshift(np.fft.ifftn(values))
    imag_level = float(np.abs(real_space.imag).max())
    scale = max(float(np.abs(real_space.real).max()), 1e-300)
    if imag_level > 1e-6 * scale:
        warnings.warn(f"exported volume has imaginary residue {imag_level:.2e}")
    raw = real_space.real.astype("<f4")
    raw_name = args.raw_name or "volume.raw"
    raw.tofile(os.path.join(out, raw_name))
    sidecar = {
        "dimensions": [g, g, g],
        "dtype": "float32-le",
        "order": "C",
        "voxel_size": 1.0,
        "r_max": vol.grid.r_max,
        "bandlimit": vol.bandlimit,
        "source": os.path.basename(args.coefficients),
        "version": __version__,
    }
    with open(os.path.join(out, raw_name + ".json"), "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(out, None, [raw_name, raw_name + ".json"])
    print(f"export-volume: wrote {raw_name} ({g}^3 float32)")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="modm",
        description="moment-based 3-D structure recovery from paired orientation datasets",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", default=None, help="output directory (default $MODM_OUT_ROOT or .)")

    p = sub.add_parser("simulate", help="synthesize moment files (empirical or analytic)")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--analytic", action="store_true", default=None,
                   help="write population moments instead of sampling images")
    p.add_argument("--n-images", dest="n_images", type=int, default=None)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--save-images", dest="save_images", action="store_true", default=None)
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("reconstruct", help="run the full reconstruction from moment files")
    p.add_argument("m2_uniform")
    p.add_argument("m2_nonuniform")
    p.add_argument("m1_uniform")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--restarts", type=int, default=None)
    p.add_argument("--max-iter", dest="max_iter", type=int, default=None)
    p.add_argument("--tol", type=float, default=None)
    p.add_argument("--svd-cutoff", dest="svd_cutoff", type=float, default=None)
    common(p)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("analyze", help="align an estimate to a reference and report errors")
    p.add_argument("reference")
    p.add_argument("estimate")
    common(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("check-identifiability", help="numerical rank and nonvanishing checks")
    p.add_argument("--l-min", dest="l_min", type=int, default=3)
    p.add_argument("--l-max", dest="l_max", type=int, default=6)
    p.add_argument("--seed", type=int, default=None)
    common(p)
    p.set_defaults(func=cmd_check_identifiability)

    p = sub.add_parser("export-volume", help="evaluate coefficients on a voxel grid")
    p.add_argument("coefficients")
    p.add_argument("--grid-size", dest="grid_size", type=int, default=64)
    p.add_argument("--raw-name", dest="raw_name", default=None)
    common(p)
    p.set_defaults(func=cmd_export_volume)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NonConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    except (ValidationError, GridMismatchError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ModmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
