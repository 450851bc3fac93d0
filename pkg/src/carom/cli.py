"""carom command line: calibrate, track, shape, scene, serve, export, synth, eval.

Exit codes: 0 success, 2 usage (click), 3 missing file, 4 schema/config
error, 5 other pipeline error.
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click

from . import __version__
from .config import PipelineConfig
from .errors import CaromError, ConfigError, SchemaMismatch

EXIT_FILE = 3
EXIT_SCHEMA = 4
EXIT_ERROR = 5


def _handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except FileNotFoundError as e:
            click.echo(f"error: file not found: {e.filename or e}", err=True)
            sys.exit(EXIT_FILE)
        except (SchemaMismatch, ConfigError) as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(EXIT_SCHEMA)
        except CaromError as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(EXIT_ERROR)
    return wrapper


def _load_config(path: str | None, seed: int | None) -> PipelineConfig:
    cfg = PipelineConfig.load(path) if path else PipelineConfig()
    if seed is not None:
        cfg.ransac.seed = seed
    return cfg


@click.group()
@click.version_option(__version__, "--version")
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="Pipeline config JSON (per-module sections).")
@click.option("--seed", type=int, default=None, help="Deterministic seed override.")
@click.pass_context
def main(ctx, config_path, seed):
    """Monocular traffic-camera 3D vehicle tracking and scene replay toolkit."""
    ctx.ensure_object(dict)
    ctx.obj["config_path"] = config_path
    ctx.obj["seed"] = seed


@main.command()
@click.option("--points", "points_path", required=True, type=click.Path(),
              help="JSON with image/world point correspondences and image size.")
@click.option("--map", "map_path", required=True, type=click.Path(),
              help="JSON describing the map frame (kind, scale, anchor).")
@click.option("-o", "--output", required=True, type=click.Path())
@click.pass_context
@_handle_errors
def calibrate(ctx, points_path, map_path, output):
    """Estimate the camera projection and ground transform from labeled points."""
    from .calib import (MapFrame, PointCorrespondence, estimate_homography,
                        estimate_projection, ground_transform_from_camera,
                        save_calibration)

    cfg = _load_config(ctx.obj["config_path"], ctx.obj["seed"])
    with open(points_path) as f:
        pts_doc = json.load(f)
    with open(map_path) as f:
        map_doc = json.load(f)
    corrs = [PointCorrespondence(image_point=tuple(c["image"]),
                                 world_point=tuple(c["world"]))
             for c in pts_doc["correspondences"]]
    image_size = tuple(pts_doc["image_size"])
    map_frame = MapFrame(kind=map_doc.get("kind", "planar"),
                         scale=map_doc.get("scale", 1.0),
                         anchor_px=tuple(map_doc.get("anchor_px", (0.0, 0.0))),
                         rotation=map_doc.get("rotation", 0.0),
                         geodetic_anchor=(tuple(map_doc["geodetic_anchor"])
                                          if map_doc.get("geodetic_anchor") else None))
    dims = {len(c.world_point) for c in corrs}
    if dims == {3} and len({tuple(c.world_point[2:]) for c in corrs}) > 1:
        camera = estimate_projection(corrs, image_size,
                                     reproj_tol_px=cfg.calib.reproj_tol_px)
        transform = ground_transform_from_camera(camera)
        save_calibration(output, camera, map_frame, transform,
                         heightfield_path=map_doc.get("heightfield"))
        click.echo(f"calibrated: reprojection RMS {camera.reproj_rms_px:.4f} px "
                   f"-> {output}")
    else:
        transform = estimate_homography(corrs)
        save_calibration(output, None, map_frame, transform)
        click.echo(f"calibrated (homography-only, no 3D boxes) -> {output}")


@main.command()
@click.option("--calib", "calib_path", required=True, type=click.Path())
@click.option("--detections", "det_path", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="Pipeline config JSON (overrides the global --config).")
@click.option("--fps", type=float, default=30.0, show_default=True)
@click.option("-o", "--output", required=True, type=click.Path())
@click.pass_context
@_handle_errors
def track(ctx, calib_path, det_path, config_path, fps, output):
    """Run tracking/localization over a detection stream."""
    from .calib import load_calibration
    from .errors import MissingCalibration
    from .track import read_detections, run_tracking, write_records

    cfg = _load_config(config_path or ctx.obj["config_path"], ctx.obj["seed"])
    camera, map_frame, transform = load_calibration(calib_path)
    if camera is None:
        raise MissingCalibration(
            f"{calib_path} has no projection matrix; 3D tracking needs a full "
            "camera calibration (>= 6 non-coplanar points)")
    dets = read_detections(det_path)
    records = run_tracking(camera, transform, dets, config=cfg,
                           frame_dt=1.0 / fps,
                           planar=map_frame.kind == "planar")
    write_records(output, records)
    n_tracks = len({r.track_id for r in records})
    click.echo(f"tracked {n_tracks} vehicles, {len(records)} records -> {output}")


@main.command()
@click.option("--tracks", "tracks_path", required=True, type=click.Path())
@click.option("--detections", "det_paths", required=True, multiple=True,
              type=click.Path())
@click.option("--calibs", "calib_paths", required=True, multiple=True,
              type=click.Path())
@click.option("--prior", "prior_path", required=True, type=click.Path())
@click.option("-o", "--output", required=True, type=click.Path())
@click.pass_context
@_handle_errors
def shape(ctx, tracks_path, det_paths, calib_paths, prior_path, output):
    """Reconstruct per-track shape vectors from masks across views."""
    from .calib import load_calibration
    from .shape import ShapePrior, reconstruct_track_shape, write_shapes
    from .track import read_detections, read_records

    cfg = _load_config(ctx.obj["config_path"], ctx.obj["seed"])
    if len(det_paths) != len(calib_paths):
        raise SchemaMismatch("need one --calibs per --detections (same order)")
    records = read_records(tracks_path)
    detections = [read_detections(p) for p in det_paths]
    cameras = []
    for p in calib_paths:
        camera, _, _ = load_calibration(p)
        if camera is None:
            raise SchemaMismatch(f"{p} has no projection matrix")
        cameras.append(camera)
    prior = ShapePrior.load(prior_path)
    shapes = {}
    for track_id in sorted({r.track_id for r in records}):
        vec, hist = reconstruct_track_shape(
            records, detections, cameras, track_id, prior,
            voxel_size=cfg.shape.voxel_size_m, lam=cfg.shape.lam,
            max_views=cfg.shape.max_views)
        dims = next(r for r in records if r.track_id == track_id).dims
        shapes[track_id] = (vec, hist, dims)
    write_shapes(output, shapes)
    n_fit = sum(1 for v, _, _ in shapes.values() if v.provenance == "fitted")
    click.echo(f"reconstructed {len(shapes)} shapes ({n_fit} fitted, "
               f"{len(shapes) - n_fit} template) -> {output}")


@main.command()
@click.option("-o", "--output", required=True, type=click.Path())
@click.option("--models", type=int, default=80, show_default=True)
@click.pass_context
@_handle_errors
def prior(ctx, output, models):
    """Build the bundled synthetic shape prior (PCA basis + templates)."""
    from .shape import build_default_prior

    seed = ctx.obj["seed"] or 0
    p = build_default_prior(n_models=models, seed=seed)
    p.save(output)
    click.echo(f"prior: {p.model_vectors.shape[0]} models, "
               f"{p.basis.shape[1]} components -> {output}")


@main.command("scene")
@click.option("--tracks", "tracks_path", required=True, type=click.Path())
@click.option("--calib", "calib_path", required=True, type=click.Path())
@click.option("--shapes", "shapes_path", default=None, type=click.Path())
@click.option("--fps", type=float, default=30.0, show_default=True)
@click.option("--backdrop", default=None, type=click.Path())
@click.option("-o", "--output", required=True, type=click.Path())
@_handle_errors
def scene_cmd(tracks_path, calib_path, shapes_path, fps, backdrop, output):
    """Assemble a replayable scene file from tracking outputs."""
    from .calib import load_calibration
    from .scene import Scene, save_scene

    _, map_frame, _ = load_calibration(calib_path)
    out_dir = Path(output).parent

    def rel(p):
        p = Path(p)
        try:
            return str(p.relative_to(out_dir))
        except ValueError:
            return str(p.resolve())

    scn = Scene(map_frame=map_frame, frame_dt=1.0 / fps, tracks={},
                backdrop=backdrop)
    save_scene(scn, output, tracks_file=rel(tracks_path),
               shapes_file=rel(shapes_path) if shapes_path else None,
               calib_file=rel(calib_path))
    click.echo(f"scene -> {output}")


@main.command()
@click.option("--scene", "scene_path", required=True, type=click.Path())
@click.option("--bind", default="127.0.0.1:8008", show_default=True)
@click.option("--ui", "ui_dir", default=None, type=click.Path(),
              help="Static UI directory to mount at /ui.")
@_handle_errors
def serve(scene_path, bind, ui_dir):
    """Serve a scene for replay (GET /scene /frame /tracks /shape, POST /edit)."""
    from .scene import load_scene, serve as serve_scene

    scn = load_scene(scene_path)
    host, _, port = bind.partition(":")
    click.echo(f"serving {scene_path} on http://{bind}")
    serve_scene(scn, host=host or "127.0.0.1", port=int(port or 8008),
                ui_dir=ui_dir)


@main.command()
@click.option("--scene", "scene_path", required=True, type=click.Path())
@click.option("--format", "fmt", type=click.Choice(["csv", "jsonl"]),
              default="csv", show_default=True)
@click.option("-o", "--output", required=True, type=click.Path())
@_handle_errors
def export(scene_path, fmt, output):
    """Export a scene's records to CSV or JSON-lines."""
    from .scene import load_scene
    from .track import write_csv, write_records

    scn = load_scene(scene_path)
    records = [r for tid in scn.track_ids() for r in scn.tracks[tid]]
    records.sort(key=lambda r: (r.frame_id, r.track_id))
    if fmt == "csv":
        write_csv(output, records, scn.frame_dt)
    else:
        write_records(output, records)
    click.echo(f"exported {len(records)} records -> {output}")


@main.command()
@click.option("--scenario", "scenario_path", required=True, type=click.Path())
@click.option("-o", "--output", required=True, type=click.Path(),
              help="Detection stream output (JSON-lines).")
@click.option("--truth", "truth_path", required=True, type=click.Path())
@click.option("--calib-out", "calib_out", default=None, type=click.Path(),
              help="Also write the scenario camera's calibration file.")
@click.pass_context
@_handle_errors
def synth(ctx, scenario_path, output, truth_path, calib_out):
    """Generate a synthetic detection stream plus ground truth."""
    from .calib import ground_transform_from_camera, save_calibration
    from .synth import Scenario, generate, scenario_map_frame, write_truth
    from .track import write_detections

    scen = Scenario.load(scenario_path)
    if ctx.obj["seed"] is not None:
        scen.seed = ctx.obj["seed"]
    dets, truth = generate(scen)
    write_detections(output, dets)
    write_truth(truth_path, truth)
    if calib_out:
        camera = scen.camera.camera_model()
        save_calibration(calib_out, camera, scenario_map_frame(scen),
                         ground_transform_from_camera(camera))
    click.echo(f"synth: {len(dets)} detections, {len(truth)} truth rows "
               f"-> {output}, {truth_path}")


@main.command("eval")
@click.option("--pred", "pred_path", required=True, type=click.Path())
@click.option("--truth", "truth_path", required=True, type=click.Path())
@click.option("-o", "--output", required=True, type=click.Path())
@click.pass_context
@_handle_errors
def eval_cmd(ctx, pred_path, truth_path, output):
    """Score tracking output against ground truth (CLEAR + L/V-Diff)."""
    from .synth import evaluate, read_truth
    from .track import read_records

    cfg = _load_config(ctx.obj["config_path"], ctx.obj["seed"])
    pred = read_records(pred_path)
    truth = read_truth(truth_path)
    report = evaluate(pred, truth,
                      dist_gate_m=cfg.eval.dist_gate_m,
                      range_bins_m=tuple(cfg.eval.range_bins_m),
                      mt_threshold=cfg.eval.mt_threshold,
                      ml_threshold=cfg.eval.ml_threshold,
                      occlusion_hidden=cfg.eval.occlusion_hidden)
    report.save(output)
    click.echo(report.format_table())


@main.command("dump-config")
@click.option("-o", "--output", required=True, type=click.Path())
@click.pass_context
@_handle_errors
def dump_config(ctx, output):
    """Write the effective configuration (defaults + overrides)."""
    cfg = _load_config(ctx.obj["config_path"], ctx.obj["seed"])
    cfg.dump(output)
    click.echo(f"config -> {output}")


if __name__ == "__main__":
    main()
