"""Command-line driver: ``vbtactile {build-h,simulate,solve,reconstruct,bench}``.

Every option may also come from a YAML ``--config`` file whose keys are the
option names with dashes replaced by underscores.  Precedence is: explicit
flag, then config file, then built-in default.  Data goes to files only;
diagnostics go to stderr.  The exit status is 0 exactly when the command
finished without error.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
import time

import numpy as np
import yaml

from vbtactile.contact import compression, decompose_force, estimate_normals, noise_floor_threshold
from vbtactile.elasticity import ConversionMatrix, FingertipGeometry, Material, build_conversion_matrix, to_blocks
from vbtactile.errors import TactileError
from vbtactile.forcesolve import SolveKernel, build_kernel, resultant, sweep_regularizer
from vbtactile.friction import FrictionParams, classify_bands
from vbtactile.mapping import export_ply, write_empty_ply
from vbtactile.pipeline import FrameInput, reconstruct
from vbtactile.pipelineio import (
    FrameRecord, MatrixFile, Recording, RecordingHeader, read_keyvalue, read_matrix, read_poses,
    read_recording, write_keyvalue, write_matrix, write_poses, write_recording,
)

log = logging.getLogger("vbtactile")

_DEFAULTS = {
    # geometry and material
    "rows": 20, "cols": 20, "spacing": 1.27, "thickness": 8.0, "radius": 45.0, "length": None,
    "subdivisions": 3, "layers": None, "youngs_kpa": 250.0, "poisson": 0.48,
    # solve
    "w": 0.0, "sweep": False, "sigma": None, "sweep_seed": 0,
    # reconstruct
    "threshold": None, "noise_factor": 5.0, "r": 3.0, "alpha": 2.0, "beta": 4.0,
    "slip_threshold": 0.1, "voxel": 0.5,
    # simulate
    "seed": None, "pixel_sigma": None, "displacement_sigma": None,
    # bench
    "frames": 200, "warmup": 20, "markers": None, "bench_seed": 0,
}


class CliError(Exception):
    pass


# -- helpers ----------------------------------------------------------------

def _settings(args) -> dict:
    """Merge defaults, config file and explicit flags (in rising precedence)."""
    out = dict(_DEFAULTS)
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            cfg = yaml.safe_load(fh) or {}
        unknown = set(cfg) - set(_DEFAULTS) - set(vars(args))
        if unknown:
            raise CliError(f"unknown config keys: {', '.join(sorted(unknown))}")
        out.update(cfg)
    for k, v in vars(args).items():
        if v is not None and k not in ("func", "config"):
            out[k] = v
    return out


def _geometry(s) -> FingertipGeometry:
    return FingertipGeometry(
        rows=int(s["rows"]), cols=int(s["cols"]), spacing=float(s["spacing"]), thickness=float(s["thickness"]),
        radius=float(s["radius"]), length=None if s["length"] is None else float(s["length"]),
        subdivisions=int(s["subdivisions"]), layers=None if s["layers"] is None else int(s["layers"]),
    )


def _sidecar(path):
    return str(path) + ".geometry"


def _write_geometry(path, geom: FingertipGeometry, mat: Material):
    write_keyvalue(_sidecar(path), {
        "rows": geom.rows, "cols": geom.cols, "spacing": float(geom.spacing),
        "thickness": float(geom.thickness), "radius": float(geom.radius),
        "length": float(geom.length), "subdivisions": geom.subdivisions,
        "layers": "-" if geom.layers is None else geom.layers,
        "youngs_kpa": float(mat.youngs_kpa), "poisson": float(mat.poisson), "digest": geom.digest(),
    })


def _load_h(path) -> ConversionMatrix:
    if not path or not os.path.exists(path):
        raise CliError(f"H file not found: {path}")
    mf = read_matrix(path)
    if mf.kind != "H":
        raise CliError(f"{path} holds a {mf.kind} matrix, expected H")
    geom = None
    if os.path.exists(_sidecar(path)):
        g = read_keyvalue(_sidecar(path))
        geom = FingertipGeometry(
            rows=int(g["rows"]), cols=int(g["cols"]), spacing=float(g["spacing"]),
            thickness=float(g["thickness"]), radius=float(g["radius"]), length=float(g["length"]),
            subdivisions=int(g["subdivisions"]), layers=None if g["layers"] == "-" else int(g["layers"]),
        )
        if mf.geometry and geom.digest() != mf.geometry:
            raise CliError(f"geometry sidecar does not match {path}")
    return ConversionMatrix(mf.matrix, mf.rows, mf.cols, geometry=geom)


def _kernel(s) -> SolveKernel:
    if s.get("k"):
        mf = read_matrix(s["k"])
        if mf.kind != "K":
            raise CliError(f"{s['k']} holds a {mf.kind} matrix, expected K")
        return SolveKernel(mf.matrix, mf.w, mf.geometry)
    H = _load_h(s.get("h"))
    return build_kernel(H, float(s["w"]))


def _report(s, items):
    if s.get("report"):
        write_keyvalue(s["report"], items)


# -- commands ---------------------------------------------------------------

def cmd_build_h(s):
    geom = _geometry(s)
    mat = Material(float(s["youngs_kpa"]), float(s["poisson"]))
    t0 = time.perf_counter()
    H, mesh, _ = build_conversion_matrix(geom, mat)
    elapsed = time.perf_counter() - t0
    sv = np.linalg.svd(H.H, compute_uv=False)
    cond = float(sv[0] / sv[-1])
    write_matrix(s["out"], MatrixFile(H.H, "H", geom.rows, geom.cols, 0.0, geom.digest()))
    _write_geometry(s["out"], geom, mat)
    log.info("N = %d, symmetry residual %.3e, condition %.3e, %.1f s",
             H.n_markers, H.symmetry_residual(), cond, elapsed)
    _report(s, {"n_markers": H.n_markers, "rows": geom.rows, "cols": geom.cols,
                "symmetry_residual": H.symmetry_residual(), "condition": cond,
                "mesh_elements": len(mesh.elements), "seconds": elapsed, "digest": geom.digest()})
    return 0


def _measured_positions(positions, pixel_sigma, seed, solution):
    from vbtactile.geometry.optics import triangulate
    from vbtactile.simharness import render_markers

    a, b = render_markers(solution, positions, pixel_sigma, seed)
    X, _ = triangulate(solution.virtual_cameras[0], solution.virtual_cameras[1], a, b)
    return X


def cmd_simulate(s):
    from vbtactile import simharness as sim

    H = _load_h(s.get("h"))
    if H.geometry is None:
        raise CliError("H file has no geometry sidecar")
    if not s.get("scenario"):
        raise CliError("--scenario is required")
    with open(s["scenario"], encoding="utf-8") as fh:
        cfg = yaml.safe_load(fh)
    for key in ("seed", "pixel_sigma", "displacement_sigma"):
        if s.get(key) is not None:
            cfg[key] = s[key]
    sc = sim.scenario_from_dict(cfg)
    if sc.kind == "slide":
        frames = sim.simulate_slide(H, sc)
    elif sc.kind == "press":
        frames = [sim.simulate_press(H, sc.obj, sc.poses[0], sc.depth, sc.stiffness_factor)]
    elif sc.kind == "pins":
        frames = [sim.simulate_pin_array(H, float(cfg["pin_spacing"]), int(cfg.get("pin_rows", 3)),
                                         int(cfg.get("pin_cols", 3)), sc.depth,
                                         float(cfg.get("pin_radius", 1.0)),
                                         tuple(cfg.get("pin_center", (0.0, 0.0))), sc.stiffness_factor)]
    else:
        raise CliError(f"unknown scenario kind {sc.kind!r}")
    solution = None
    if sc.pixel_sigma > 0:
        from vbtactile.geometry.lightpath import LightPathSpec, solve_light_path
        solution = solve_light_path(LightPathSpec())
    geom = H.geometry
    poses_path = s.get("poses") or os.path.splitext(s["out"])[0] + ".poses"
    header = dict(rows=geom.rows, cols=geom.cols, spacing=geom.spacing, geometry=geom.digest(),
                  hfile=os.path.basename(s["h"]), poses=os.path.basename(poses_path))
    meas = Recording(RecordingHeader(**header))
    truth = Recording(RecordingHeader(**header))
    for fr in frames:
        pos = fr.positions
        if solution is not None:
            pos = _measured_positions(pos, sc.pixel_sigma, sc.seed * 100003 + fr.index, solution)
        disp = pos - fr.rest
        if sc.displacement_sigma > 0:
            rng = np.random.default_rng(sc.seed * 100003 + fr.index + 7)
            disp = disp + rng.normal(0.0, sc.displacement_sigma, disp.shape)
        meas.frames.append(FrameRecord(fr.index, fr.timestamp, fr.rest + disp, disp))
        truth.frames.append(FrameRecord(
            fr.index, fr.timestamp, fr.positions, fr.displacements, fr.forces, fr.contact, fr.slip,
            {"mu": [repr(float(v)) for v in fr.mu]}))
    write_recording(s["out"], meas)
    truth_path = s.get("truth") or os.path.splitext(s["out"])[0] + ".truth"
    write_recording(truth_path, truth)
    write_poses(poses_path, [fr.pose for fr in frames], [fr.index for fr in frames])
    log.info("%d frame(s) written to %s", len(frames), s["out"])
    _report(s, {"frames": len(frames), "kind": sc.kind,
                "contact_markers_first_frame": int(frames[0].contact.sum()),
                "slip_frames": int(sum(bool(fr.slip.any()) for fr in frames))})
    return 0


def cmd_solve(s):
    rec = read_recording(s["recording"])
    H = None
    truth = read_recording(s["truth"]) if s.get("truth") else None
    if s.get("sweep"):
        H = _load_h(s.get("h"))
        if s.get("sigma") is None:
            raise CliError("--sweep needs --sigma")
        if truth is not None:
            trials = [to_blocks(f.forces) for f in truth.frames[:: max(1, len(truth.frames) // 10)]]
        else:
            rng = np.random.default_rng(s["sweep_seed"])
            trials = rng.normal(0.0, 0.01, (5, H.H.shape[0]))
        sw = sweep_regularizer(H, float(s["sigma"]), trials, seed=int(s["sweep_seed"]))
        kernel = build_kernel(H, sw.w_best)
        log.info("swept w = %.3e", sw.w_best)
    else:
        kernel = _kernel(s)
    n = kernel.n_markers
    if rec.header.n_markers != n:
        raise CliError(f"recording has {rec.header.n_markers} markers, kernel expects {n}")
    errs, res_errs = [], []
    for k, fr in enumerate(rec.frames):
        F = (kernel.K @ to_blocks(fr.displacements)).reshape(3, -1).T
        fr.forces = F
        if truth is not None:
            T = truth.frames[k].forces
            scale = np.linalg.norm(T)
            if scale > 0:
                errs.append(float(np.linalg.norm(F - T) / scale))
                R0 = resultant(to_blocks(T))
                res_errs.append(float(np.abs(resultant(to_blocks(F)) - R0).max() / np.linalg.norm(R0)))
    write_recording(s["out"], rec)
    items = {"frames": len(rec.frames), "w": float(kernel.w), "n_markers": n}
    if errs:
        items.update(max_relative_error=max(errs), max_resultant_error=max(res_errs))
        log.info("force error max %.3e, resultant error max %.3e", max(errs), max(res_errs))
    if s.get("sweep"):
        items["w_best"] = float(sw.w_best)
    _report(s, items)
    return 0


def cmd_reconstruct(s):
    rec = read_recording(s["recording"])
    if not rec.frames or rec.frames[0].forces is None:
        raise CliError("recording carries no forces; run solve first")
    poses_path = s.get("poses")
    if not poses_path:
        poses_path = os.path.join(os.path.dirname(s["recording"]), rec.header.poses)
    idx, poses = read_poses(poses_path)
    by_index = dict(zip(idx, poses))
    missing = [fr.index for fr in rec.frames if fr.index not in by_index]
    if missing:
        raise CliError(f"no pose for frame(s) {missing[:5]}")
    params = FrictionParams(float(s["r"]), float(s["alpha"]), float(s["beta"]), float(s["slip_threshold"]))
    threshold = s.get("threshold")
    if threshold is None:
        if s.get("sigma") is None or not (s.get("h") or s.get("k")):
            raise CliError("give --threshold, or --sigma with --h/--k for the noise-floor threshold")
        kernel = _kernel(s)
        rest = rec.frames[0].positions - rec.frames[0].displacements
        normals = estimate_normals(rest, k=min(9, len(rest)))
        threshold = noise_floor_threshold(kernel, normals, float(s["sigma"]), factor=float(s["noise_factor"]))
    threshold = float(threshold)
    n = rec.header.n_markers
    dummy = SolveKernel(np.zeros((3 * n, 3 * n)), 0.0)
    frames = [FrameInput(fr.index, fr.positions - fr.displacements, fr.displacements, by_index[fr.index],
                         fr.timestamp) for fr in rec.frames]
    out = reconstruct(dummy, frames, threshold, params, float(s["voxel"]),
                      forces=[fr.forces for fr in rec.frames])
    if len(out.cloud) == 0:
        log.warning("no contact in any frame; writing an empty cloud")
        write_empty_ply(s["out"])
    else:
        export_ply(s["out"], out.cloud)
    bands = classify_bands(out.cloud.mu) if len(out.cloud) else []
    counts = {b: sum(1 for x in bands if x.value == b) for b in ("high", "medium", "low", "undefined")}
    log.info("%d points, %d slip samples, bands %s", len(out.cloud), len(out.samples), counts)
    _report(s, {"points": len(out.cloud), "slip_samples": len(out.samples), "threshold": threshold,
                **{f"band_{k}": v for k, v in counts.items()}})
    return 0


def bench_loop(kernel: SolveKernel, rest, frames=200, warmup=20, seed=0, threshold=1e-3):
    """Time ``frames`` iterations of solve + normals + contact + decomposition.

    Returns frames per second over the timed (post warm-up) iterations.
    """
    rng = np.random.default_rng(seed)
    n = kernel.n_markers
    D = rng.normal(0.0, 0.01, (warmup + frames, 3 * n))
    t0 = None
    for k in range(warmup + frames):
        if k == warmup:
            t0 = time.perf_counter()
        F = (kernel.K @ D[k]).reshape(3, -1).T
        pos = rest + D[k].reshape(3, -1).T
        nrm = estimate_normals(pos, k=min(9, n)).normals
        comp = compression(F, nrm)
        contact = comp >= threshold
        decompose_force(F[contact], nrm[contact])
    return frames / (time.perf_counter() - t0)


def cmd_bench(s):
    if s.get("k") or s.get("h"):
        kernel = _kernel(s)
        n = kernel.n_markers
    else:
        n = int(s["markers"] or 400)
        rng = np.random.default_rng(s["bench_seed"])
        kernel = SolveKernel(rng.normal(size=(3 * n, 3 * n)), 0.0)
    side = int(round(math.sqrt(n)))
    if side * side != n:
        raise CliError(f"bench needs a square marker grid, got N = {n}")
    rest = FingertipGeometry(rows=side, cols=side, subdivisions=1).marker_positions()
    hz = bench_loop(kernel, rest, int(s["frames"]), int(s["warmup"]), int(s["bench_seed"]))
    log.info("%d markers: %.1f Hz over %d frames (%d warm-up excluded)", n, hz, s["frames"], s["warmup"])
    _report(s, {"n_markers": n, "hz": hz, "frames": int(s["frames"]), "warmup": int(s["warmup"])})
    return 0


# -- parser -----------------------------------------------------------------

def _parser():
    p = argparse.ArgumentParser(prog="vbtactile", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML file with option values")
        sp.add_argument("--report", help="write a key = value summary here")

    b = sub.add_parser("build-h", help="mesh, assemble and condense the conversion matrix")
    common(b)
    b.add_argument("--out", required=True)
    for name, typ in [("rows", int), ("cols", int), ("spacing", float), ("thickness", float),
                      ("radius", float), ("length", float), ("subdivisions", int), ("layers", int),
                      ("youngs-kpa", float), ("poisson", float)]:
        b.add_argument(f"--{name}", type=typ)
    b.set_defaults(func=cmd_build_h)

    m = sub.add_parser("simulate", help="generate a synthetic recording and its ground truth")
    common(m)
    m.add_argument("--h", required=True)
    m.add_argument("--scenario")
    m.add_argument("--out", required=True)
    m.add_argument("--truth")
    m.add_argument("--poses")
    m.add_argument("--seed", type=int)
    m.add_argument("--pixel-sigma", type=float)
    m.add_argument("--displacement-sigma", type=float)
    m.set_defaults(func=cmd_simulate)

    so = sub.add_parser("solve", help="marker displacements to forces")
    common(so)
    so.add_argument("--recording", required=True)
    so.add_argument("--out", required=True)
    so.add_argument("--h")
    so.add_argument("--k")
    so.add_argument("--w", type=float)
    so.add_argument("--sweep", action="store_true", default=None)
    so.add_argument("--sigma", type=float)
    so.add_argument("--sweep-seed", type=int)
    so.add_argument("--truth")
    so.set_defaults(func=cmd_solve)

    r = sub.add_parser("reconstruct", help="forces and poses to a friction-coloured cloud")
    common(r)
    r.add_argument("--recording", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--poses")
    r.add_argument("--h")
    r.add_argument("--k")
    r.add_argument("--w", type=float)
    r.add_argument("--sigma", type=float)
    r.add_argument("--threshold", type=float)
    r.add_argument("--noise-factor", type=float)
    r.add_argument("--r", type=float)
    r.add_argument("--alpha", type=float)
    r.add_argument("--beta", type=float)
    r.add_argument("--slip-threshold", type=float)
    r.add_argument("--voxel", type=float)
    r.set_defaults(func=cmd_reconstruct)

    be = sub.add_parser("bench", help="per-frame solve and contact throughput")
    common(be)
    be.add_argument("--h")
    be.add_argument("--k")
    be.add_argument("--w", type=float)
    be.add_argument("--markers", type=int)
    be.add_argument("--frames", type=int)
    be.add_argument("--warmup", type=int)
    be.add_argument("--bench-seed", type=int)
    be.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
    func = args.func
    del args.verbose, args.command
    try:
        return func(_settings(args))
    except (CliError, TactileError, ValueError, OSError, KeyError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
