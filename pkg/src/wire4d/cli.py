"""Command-line interface.

Subcommands: init, fit, render, metrics, validate-projection, export-svg,
export-mesh. Exit codes: 0 success, 2 input error, 3 runtime error, 4 bridge
error; failures emit a machine-readable JSON object on stderr. The
WIRE4D_BRIDGE environment variable supplies the guidance socket address when
the run config does not.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .depth import load_mesh, render_depth, save_depth
from .export import edge_manifold_ok, export_svg, save_obj, wire_to_tube_mesh
from .guidance import BridgeError
from .initialize import InitVolume, import_polyline, sample_init_volume, tsp_order, wire_from_path
from .metrics import convergence_report, metrics_summary
from .optimize import RunConfig, load_config, load_views, run_schedule
from .projection import Camera, ClipError, canonical_camera, canonical_helix, load_camera, project_wire
from .raster import RasterSettings, rasterize, save_render_png
from .spline import DEFAULT_WIDTH_CLAMP, fit_to_polyline, load_wire, save_wire
from .topology import default_width_epsilon

RENDER_CADENCE = 100


def _fail(kind: str, message: str) -> None:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)


# ---------------------------------------------------------------------------
# init
# ---------------------------------------------------------------------------

def cmd_init(args) -> int:
    clamp = tuple(args.clamp)
    if args.kind == "polyline":
        pts = import_polyline(args.polyline)
        wire, rms = fit_to_polyline(pts, args.count, initial_width=args.width,
                                    width_clamp=clamp)
        summary = {"kind": "polyline", "points": len(pts), "fit_rms": rms}
    else:
        if args.kind == "sphere":
            volume = InitVolume("sphere", radius=args.radius,
                                center=tuple(args.center))
        else:
            from .raster import load_mask_png
            camera = load_camera(args.camera)
            mask = load_mask_png(args.mask)
            volume = InitVolume("silhouette_cone", mask=mask, camera=camera,
                                depth_range=tuple(args.depth_range))
        pts = sample_init_volume(volume, args.count, rng_seed=args.seed)
        path = pts[tsp_order(pts)]
        wire = wire_from_path(path, args.count, initial_width=args.width,
                              width_clamp=clamp)
        summary = {"kind": args.kind, "points": len(pts)}
    save_wire(wire, args.out)
    summary["controls"] = wire.n_controls
    summary["out"] = str(args.out)
    print(json.dumps(summary))
    return 0


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def _initial_wire(config: RunConfig, views):
    if config.init_kind == "polyline":
        if not config.init_polyline:
            raise ValueError("init_kind 'polyline' needs init_polyline in the config")
        pts = import_polyline(config.init_polyline)
        wire, _ = fit_to_polyline(pts, config.control_count,
                                  initial_width=config.initial_width,
                                  width_clamp=config.width_clamp)
        return wire
    from .optimize import reinit_volume
    volume = reinit_volume(config, views)
    pts = sample_init_volume(volume, config.control_count, rng_seed=config.seed)
    path = pts[tsp_order(pts)]
    return wire_from_path(path, config.control_count,
                          initial_width=config.initial_width,
                          width_clamp=config.width_clamp)


def _save_loss_figure(log, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    iters = [rec["iter"] for rec in log]
    ax.plot(iters, [rec["loss"] for rec in log], label="total")
    ax.plot(iters, [rec["image"] for rec in log], label="image")
    ax.plot(iters, [rec["jerk"] for rec in log], label="jerk")
    for rec in log:
        if "pruned" in rec or "inserted_spans" in rec:
            ax.axvline(rec["iter"], color="gray", lw=0.5, ls=":")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_fit(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.epsilon_px is not None:
        config = replace(config, epsilon_px=args.epsilon_px)
    if args.views:
        wanted = [int(i) for i in args.views.split(",")]
        config = replace(config, views=tuple(config.views[i] for i in wanted))
    if config.bridge_address is None and os.environ.get("WIRE4D_BRIDGE"):
        config = replace(config, bridge_address=os.environ["WIRE4D_BRIDGE"])
    views = load_views(config)
    if not views:
        raise ValueError("run config declares no views")
    wire = _initial_wire(config, views)

    if args.dry_run:
        print(json.dumps({
            "dry_run": True,
            "views": len(views),
            "controls": wire.n_controls,
            "iterations": config.iterations,
        }))
        return 0

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    settings = config.raster_settings()
    log_path = out / "run_log.jsonl"
    state = {"wire": wire, "log": []}

    def snapshot(iteration, current, record):
        state["wire"] = current
        state["log"].append(record)
        if iteration % RENDER_CADENCE == 0 or iteration == config.iterations:
            for vi, view in enumerate(views):
                batch = project_wire(current, view.camera, config.epsilon_px)
                img = rasterize(batch, view.camera.width, view.camera.height, settings)
                save_render_png(img, out / f"render_v{vi}_iter{iteration:05d}.png")

    try:
        final, log = run_schedule(config, wire, views, progress_callback=snapshot)
    except Exception:
        # keep whatever the run produced before failing
        save_wire(state["wire"], out / "wire_partial.json")
        with open(log_path, "w") as fh:
            for rec in state["log"]:
                fh.write(json.dumps(rec) + "\n")
        raise
    save_wire(final, out / "wire.json")
    with open(log_path, "w") as fh:
        for rec in log:
            fh.write(json.dumps(rec) + "\n")
    if log:
        _save_loss_figure(log, out / "loss_curve.png")
    print(json.dumps({
        "out": str(out),
        "iterations": len(log),
        "final_loss": log[-1]["loss"] if log else None,
        "controls": final.n_controls,
    }))
    return 0


# ---------------------------------------------------------------------------
# render / metrics / validate-projection
# ---------------------------------------------------------------------------

def cmd_render(args) -> int:
    wire = load_wire(args.wire)
    camera = load_camera(args.camera)
    batch = project_wire(wire, camera, args.epsilon_px)
    img = rasterize(batch, camera.width, camera.height, RasterSettings())
    save_render_png(img, args.out)
    print(json.dumps({"out": str(args.out), "strokes": len(batch)}))
    return 0


def cmd_metrics(args) -> int:
    wire = load_wire(args.wire)
    threshold = args.threshold
    if threshold is None:
        threshold = default_width_epsilon(wire.width_clamp)
    print(json.dumps(metrics_summary(wire, threshold)))
    return 0


def cmd_validate_projection(args) -> int:
    wire = load_wire(args.wire) if args.wire else canonical_helix()
    camera = load_camera(args.camera) if args.camera else canonical_camera(512)
    rows = convergence_report(wire, camera, levels=args.levels)
    csv_path = Path(args.out_csv)
    with open(csv_path, "w") as fh:
        fh.write("h,error_normalized,subdivision\n")
        for h, err, s in rows:
            fh.write(f"{h!r},{err!r},{s}\n")
    hs = np.array([r[0] for r in rows])
    errs = np.array([r[1] for r in rows])
    slope = float(np.polyfit(np.log(hs), np.log(errs), 1)[0])

    fig_path = Path(args.out_figure) if args.out_figure else csv_path.with_suffix(".png")
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    ax.loglog(hs, errs, "o-", label="measured")
    ref = errs[0] * (hs / hs[0]) ** 2
    ax.loglog(hs, ref, ":", label="quadratic reference")
    ax.set_xlabel("segment length h")
    ax.set_ylabel("normalized screen error")
    ax.set_title(f"fitted slope {slope:.2f}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)
    print(json.dumps({"csv": str(csv_path), "figure": str(fig_path), "slope": slope}))
    return 0


# ---------------------------------------------------------------------------
# exports
# ---------------------------------------------------------------------------

def cmd_export_svg(args) -> int:
    wire = load_wire(args.wire)
    camera = load_camera(args.camera)
    count = export_svg(wire, camera, args.out, epsilon_px=args.epsilon_px)
    print(json.dumps({"out": str(args.out), "paths": count}))
    return 0


def cmd_export_mesh(args) -> int:
    wire = load_wire(args.wire)
    vertices, faces = wire_to_tube_mesh(wire, sides=args.sides, samples=args.samples)
    if not edge_manifold_ok(faces):
        raise RuntimeError("tube mesh failed the edge-manifold audit")
    save_obj(vertices, faces, args.out)
    print(json.dumps({"out": str(args.out),
                      "vertices": int(len(vertices)), "faces": int(len(faces))}))
    return 0


def cmd_render_mesh_depth(args) -> int:
    mesh = load_mesh(args.mesh, normalize=args.normalize)
    camera = load_camera(args.camera)
    save_depth(render_depth(mesh, camera), args.out)
    print(json.dumps({"out": str(args.out), "faces": mesh.n_faces}))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wire4d",
        description="Differentiable 4D wire kernel: initialization, "
                    "optimization, rendering, metrics, and export.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="create an initial wire file")
    p.add_argument("--kind", choices=["sphere", "silhouette", "polyline"],
                   default="sphere")
    p.add_argument("--count", type=int, default=150)
    p.add_argument("--width", type=float, default=0.01)
    p.add_argument("--clamp", type=float, nargs=2, default=list(DEFAULT_WIDTH_CLAMP))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--radius", type=float, default=0.5)
    p.add_argument("--center", type=float, nargs=3, default=[0.0, 0.0, 0.0])
    p.add_argument("--mask")
    p.add_argument("--camera")
    p.add_argument("--depth-range", type=float, nargs=2)
    p.add_argument("--polyline")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("fit", help="run the optimization schedule")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--views", help="comma-separated view indices to keep")
    p.add_argument("--epsilon-px", type=float)
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("render", help="rasterize a wire through a camera")
    p.add_argument("--wire", required=True)
    p.add_argument("--camera", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epsilon-px", type=float, default=0.5)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("metrics", help="structural metrics as JSON")
    p.add_argument("--wire", required=True)
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("validate-projection",
                       help="convergence report: CSV plus log-log figure")
    p.add_argument("--wire")
    p.add_argument("--camera")
    p.add_argument("--levels", type=int, default=5)
    p.add_argument("--out-csv", required=True)
    p.add_argument("--out-figure")
    p.set_defaults(func=cmd_validate_projection)

    p = sub.add_parser("export-svg", help="projected wire as an SVG document")
    p.add_argument("--wire", required=True)
    p.add_argument("--camera", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epsilon-px", type=float, default=0.5)
    p.set_defaults(func=cmd_export_svg)

    p = sub.add_parser("export-mesh", help="watertight tube mesh as OBJ")
    p.add_argument("--wire", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sides", type=int, default=12)
    p.add_argument("--samples", type=int, default=200)
    p.set_defaults(func=cmd_export_mesh)

    p = sub.add_parser("mesh-depth", help="render a mesh depth buffer")
    p.add_argument("--mesh", required=True)
    p.add_argument("--camera", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--normalize", action="store_true")
    p.set_defaults(func=cmd_render_mesh_depth)

    return parser


_INPUT_ERRORS = (FileNotFoundError, IsADirectoryError, PermissionError,
                 ValueError, KeyError, json.JSONDecodeError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except BridgeError as exc:
        _fail(type(exc).__name__, str(exc))
        return 4
    except _INPUT_ERRORS as exc:
        _fail(type(exc).__name__, str(exc))
        return 2
    except Exception as exc:  # includes ClipError and internal failures
        _fail(type(exc).__name__, str(exc))
        return 3


if __name__ == "__main__":
    sys.exit(main())
