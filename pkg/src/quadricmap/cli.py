"""Command-line pipelines over the library modules.

Subcommands: synth (dataset generation), init (single-frame mapping),
slam (init + optional orientation refinement + joint optimization),
eval (map metrics), sweep-yaw (symmetry-cost curve per descriptor) and
export (PLY visualization). Every run writes a manifest naming the
config hash, the seed and the library versions; nothing in any output
depends on the clock, so a run is reproducible bit for bit from its
config.
"""

from __future__ import annotations

import argparse
import json
import math
import platform
import re
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import (
    ConfigError,
    RunConfig,
    config_hash,
    dump_config,
    load_config,
)
from .dataio import (
    DataError,
    MapDocument,
    TrajectoryRecord,
    export_ply,
    load_detections,
    load_frame_index,
    load_map,
    load_pgm,
    load_planes_intrinsics,
    load_scale_table,
    load_trajectory,
    poses_for_frames,
    save_detections,
    save_frame_index,
    save_map,
    save_pgm,
    save_planes_intrinsics,
    save_scale_table,
    save_trajectory,
)
from .evalmap import EvalError, evaluate_map
from .factors import (
    FactorGraph,
    NoiseModel,
    Observation,
    OdometryFactor,
    ScaleFactor,
    SupportFactor,
)
from .geometry import (
    BBox,
    CameraIntrinsics,
    Ellipsoid,
    GeometryError,
    compose_projection,
    project_dual_conic_bbox,
    rotation_about_axis,
)
from .solver import (
    LMConfig,
    SolverError,
    init_single_frame,
    optimize_map,
    refine_orientation,
)
from .symmetry import (
    EdgeMap,
    SymmetryError,
    distance_transform_argmin,
    sample_points,
    symmetry_cost,
)
from .synth import SceneConfig, SynthError, generate_scene, render_symmetric_edges

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_SOLVER = 3

_EDGE_NAME = "edges_obj{oid}_frame{frame:04d}.pgm"
_EDGE_RE = re.compile(r"edges_obj(\d+)_frame(\d+)\.pgm$")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# config plumbing


def _effective_config(args) -> RunConfig:
    if getattr(args, "config", None):
        return load_config(args.config)
    return RunConfig()


def _noise(cfg: RunConfig) -> NoiseModel:
    return NoiseModel(sigma_det=cfg.sigma_det, sigma_ssc=cfg.sigma_ssc,
                      sigma_sym=cfg.sigma_sym,
                      sigma_odom_rot=cfg.sigma_odom_rot,
                      sigma_odom_trans=cfg.sigma_odom_trans,
                      huber_delta=cfg.huber_delta)


def _lm(cfg: RunConfig) -> LMConfig:
    return LMConfig(max_iterations=cfg.max_iterations, lambda0=cfg.lambda0)


def _intrinsics(cfg: RunConfig) -> CameraIntrinsics:
    return CameraIntrinsics(cfg.fx, cfg.fy, cfg.cx, cfg.cy)


def _scene_config(cfg: RunConfig) -> SceneConfig:
    return SceneConfig(n_objects=cfg.n_objects, trajectory=cfg.trajectory,
                       radius=cfg.radius, length=cfg.length,
                       n_frames=cfg.n_frames, intrinsics=_intrinsics(cfg),
                       image_size=(cfg.image_width, cfg.image_height),
                       bbox_noise=cfg.bbox_noise, stride=cfg.stride,
                       spread=cfg.spread, seed=cfg.seed)


def _versions() -> dict:
    return {"python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "quadricmap": __version__}


def _write_manifest(out, command: str, cfg: RunConfig) -> None:
    out = Path(out)
    path = out / "manifest.json" if out.is_dir() \
        else out.with_suffix(".manifest.json")
    payload = {"command": command, "config_hash": config_hash(cfg),
               "seed": cfg.seed, "versions": _versions()}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")


def _base_metadata(command: str, cfg: RunConfig) -> dict:
    return {"command": command, "config_hash": config_hash(cfg),
            "seed": cfg.seed, "versions": _versions()}


# ---------------------------------------------------------------------------
# dataset access


def _dataset_paths(data_dir) -> dict:
    d = Path(data_dir)
    return {"trajectory": d / "trajectory.txt",
            "detections": d / "detections.txt",
            "scales": d / "scales.txt",
            "calib": d / "calib.txt",
            "frame_index": d / "frame_index.txt",
            "gt": d / "gt.json"}


def _load_dataset(data_dir, cfg: RunConfig):
    paths = _dataset_paths(data_dir)
    planes, intr = load_planes_intrinsics(paths["calib"])
    if not planes:
        raise DataError(f"{paths['calib']}: no support plane")
    plane = planes[0].normalized()
    records = load_trajectory(paths["trajectory"])
    index = load_frame_index(paths["frame_index"])
    poses = poses_for_frames(index, records)
    detections = load_detections(
        paths["detections"], filter_partial=cfg.filter_partial,
        margin=cfg.partial_margin,
        image_size=(cfg.image_width, cfg.image_height))
    table = load_scale_table(paths["scales"])
    usable = [d for d in detections if d.frame_id in poses]
    return plane, intr, records, index, poses, usable, table


def _edge_map_for(data_dir, oid: int):
    """(EdgeMap, frame_id) from the object's rendered edge file, or None."""
    hits = []
    for path in Path(data_dir).glob(f"edges_obj{oid}_frame*.pgm"):
        m = _EDGE_RE.search(path.name)
        if m and int(m.group(1)) == oid:
            hits.append((int(m.group(2)), path))
    if not hits:
        return None
    frame, path = min(hits)
    gray = load_pgm(path)
    return EdgeMap(gray > 127.0, origin=(0, 0), gray=gray), frame


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args, cfg: RunConfig) -> int:
    scene = generate_scene(_scene_config(cfg))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = _dataset_paths(out)
    save_trajectory(scene.trajectory, paths["trajectory"])
    save_detections(scene.detections, paths["detections"])
    save_scale_table(scene.table, paths["scales"])
    save_planes_intrinsics([scene.config.plane], scene.config.intrinsics,
                           paths["calib"])
    save_frame_index(scene.frame_index, paths["frame_index"])
    gt = MapDocument(scene.objects, scene.trajectory,
                     _base_metadata("synth", cfg))
    save_map(gt, paths["gt"])
    n_edges = 0
    if cfg.render_edges:
        window = BBox(0.0, 0.0, float(cfg.image_width),
                      float(cfg.image_height))
        for oid in sorted(scene.objects):
            frames = sorted(d.frame_id for d in scene.detections
                            if d.object_id == oid)
            if not frames:
                continue
            frame = frames[0]
            p = compose_projection(scene.trajectory[frame].pose,
                                   scene.config.intrinsics)
            try:
                edges = render_symmetric_edges(
                    scene.objects[oid], p, window,
                    pattern_seed=cfg.seed * 997 + oid)
            except SynthError as ex:
                print(f"object {oid}: no edge map ({ex})", file=sys.stderr)
                continue
            name = _EDGE_NAME.format(oid=oid, frame=frame)
            save_pgm(edges.mask, out / name)
            n_edges += 1
    _write_manifest(out, "synth", cfg)
    print(f"wrote {len(scene.objects)} objects, "
          f"{len(scene.detections)} detections, {n_edges} edge maps "
          f"to {out}")
    return EXIT_OK


def _initialize_objects(plane, intr, poses, usable, table, cfg, noise, lm):
    """Per-object single-frame estimates from each first usable detection."""
    objects = {}
    failures = {}
    by_object: dict = {}
    for det in usable:
        by_object.setdefault(det.object_id, []).append(det)
    for oid in sorted(by_object):
        det = min(by_object[oid], key=lambda d: d.frame_id)
        p = compose_projection(poses[det.frame_id], intr)
        try:
            objects[oid] = init_single_frame(
                det.bbox, plane, det.label,
                table if cfg.use_ssc else {}, p, noise, lm)
        except (SolverError, GeometryError, ValueError) as ex:
            failures[oid] = str(ex)
            print(f"object {oid}: initialization failed ({ex})",
                  file=sys.stderr)
    return objects, failures, by_object


def _refine_objects(data_dir, objects, poses, intr, plane, by_object, cfg,
                    noise, lm):
    """In-place yaw refinement against rendered edge maps.

    Texture enters the pipeline here, between initialization and the
    joint optimization: the sparse synthetic patterns give the
    nearest-edge descriptor no support away from the drawn curves, so
    wiring it into the multi-frame graph as a per-frame factor creates
    spurious minima; the dedicated refinement stage with its coarse
    scan is where the signal is usable. Returns the refined ids.
    """
    refined = []
    for oid in sorted(objects):
        found = _edge_map_for(data_dir, oid)
        if found is None:
            continue
        edges, frame = found
        if frame not in poses:
            continue
        dets = [d for d in by_object.get(oid, []) if d.frame_id == frame]
        if not dets:
            continue
        try:
            samples = sample_points(dets[0].bbox, edges)
            dfield = distance_transform_argmin(edges)
        except SymmetryError as ex:
            print(f"object {oid}: refinement skipped ({ex})", file=sys.stderr)
            continue
        p = compose_projection(poses[frame], intr)
        objects[oid] = refine_orientation(objects[oid], samples, dfield, p,
                                          plane, noise, lm)
        refined.append(oid)
    return refined


def _run_mapping(args, cfg: RunConfig, do_optimize: bool) -> int:
    command = "slam" if do_optimize else "init"
    noise, lm = _noise(cfg), _lm(cfg)
    plane, intr, records, index, poses, usable, table = \
        _load_dataset(args.data, cfg)
    if not usable:
        raise DataError("no usable detections (after filtering and pose "
                        "matching)")
    objects, failures, by_object = _initialize_objects(
        plane, intr, poses, usable, table, cfg, noise, lm)
    if not objects:
        raise SolverError("initialization failed for every object")
    refined = []
    if cfg.use_symmetry:
        refined = _refine_objects(args.data, objects, poses, intr, plane,
                                  by_object, cfg, noise, lm)
    metadata = _base_metadata(command, cfg)
    if cfg.use_symmetry:
        metadata["refined"] = refined
    metadata["observations"] = {str(oid): len(by_object[oid])
                                for oid in sorted(objects)}
    if failures:
        metadata["init_failures"] = {str(oid): msg
                                     for oid, msg in sorted(failures.items())}
    frames = sorted({d.frame_id for d in usable if d.object_id in objects})
    if do_optimize:
        graph = FactorGraph(
            intrinsics=intr,
            poses={k: poses[k] for k in frames},
            objects=objects,
            observations=[Observation(d.frame_id, d.object_id, d.bbox,
                                      d.label)
                          for d in usable if d.object_id in objects],
            odometry=[OdometryFactor(i, j,
                                     poses[i].inverse().compose(poses[j]))
                      for i, j in zip(frames[:-1], frames[1:])],
            support=[SupportFactor(oid, plane) for oid in sorted(objects)]
            if cfg.use_support else [],
            scale=[ScaleFactor(oid, objects[oid].label)
                   for oid in sorted(objects)
                   if objects[oid].label in table]
            if cfg.use_ssc else [],
            symmetry=[],
            table=table)
        graph, report = optimize_map(graph, noise, lm)
        objects = graph.objects
        out_poses = graph.poses
        metadata["solver"] = {"converged": report.converged,
                              "iterations": report.iterations,
                              "initial_cost": report.initial_cost,
                              "final_cost": report.final_cost}
    else:
        out_poses = {k: poses[k] for k in frames}
    trajectory = [TrajectoryRecord(index[k], out_poses[k])
                  for k in sorted(out_poses)]
    save_map(MapDocument(objects, trajectory, metadata), args.out)
    _write_manifest(args.out, command, cfg)
    print(f"wrote {len(objects)} objects to {args.out}")
    return EXIT_OK


def cmd_init(args, cfg: RunConfig) -> int:
    return _run_mapping(args, cfg, do_optimize=False)


def cmd_slam(args, cfg: RunConfig) -> int:
    return _run_mapping(args, cfg, do_optimize=True)


def cmd_eval(args, cfg: RunConfig) -> int:
    est = load_map(args.est)
    gt = load_map(args.gt)
    raw = est.metadata.get("observations")
    observations = None
    if isinstance(raw, dict):
        try:
            observations = {int(k): int(v) for k, v in raw.items()}
        except (TypeError, ValueError):
            raise DataError(f"{args.est}: malformed observation counts") \
                from None
    report = evaluate_map(est, gt, observations=observations,
                          min_observations=cfg.min_observations,
                          resolution=cfg.iou_resolution,
                          allow_reflections=cfg.allow_reflections)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("object_id,label,iou,rot_deg\n")
        for row in report.results:
            fh.write(f"{row.object_id},{row.label},{row.iou!r},"
                     f"{row.rot_deg!r}\n")
        fh.write(f"mean,,{report.mean_iou!r},{report.mean_rot_deg!r}\n")
    for oid, reason in report.skipped:
        print(f"skipped object {oid}: {reason}", file=sys.stderr)
    _write_manifest(args.out, "eval", cfg)
    print(f"evaluated {report.n_objects} objects: "
          f"mean_iou={report.mean_iou:.3f} "
          f"mean_rot_deg={report.mean_rot_deg:.2f}")
    return EXIT_OK


def cmd_sweep_yaw(args, cfg: RunConfig) -> int:
    paths = _dataset_paths(args.data)
    gt = load_map(paths["gt"])
    oid = args.object
    if oid not in gt.objects:
        raise DataError(f"object {oid} not in {paths['gt']}")
    found = _edge_map_for(args.data, oid)
    if found is None:
        raise DataError(f"no edge map for object {oid}; generate the "
                        f"dataset with render_edges = true")
    edges, frame = found
    plane, intr, records, index, poses, _, _ = _load_dataset(args.data, cfg)
    if frame not in poses:
        raise DataError(f"edge map frame {frame} has no pose")
    p = compose_projection(poses[frame], intr)
    e = gt.objects[oid]
    dfield = distance_transform_argmin(edges)
    samples = sample_points(project_dual_conic_bbox(e, p), edges)
    yaws = np.arange(-cfg.sweep_range_deg,
                     cfg.sweep_range_deg + 0.5 * cfg.sweep_step_deg,
                     cfg.sweep_step_deg)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("yaw_deg,cost_gray,cost_2dt,cost_3dt\n")
        for yaw in yaws:
            spun = Ellipsoid(
                e.center,
                rotation_about_axis(plane.normal,
                                    math.radians(float(yaw))) @ e.rotation,
                e.half_axes, label=e.label)
            costs = []
            for descriptor in ("gray", "2dt", "3dt"):
                try:
                    costs.append(symmetry_cost(spun, samples, dfield, p,
                                               descriptor=descriptor,
                                               edges=edges))
                except SymmetryError:
                    costs.append(float("nan"))
            fh.write(f"{float(yaw)!r},{costs[0]!r},{costs[1]!r},"
                     f"{costs[2]!r}\n")
    _write_manifest(args.out, "sweep-yaw", cfg)
    print(f"swept {len(yaws)} yaw angles for object {oid} at frame {frame}")
    return EXIT_OK


def cmd_export(args, cfg: RunConfig) -> int:
    doc = load_map(args.map)
    export_ply(doc, args.out)
    _write_manifest(args.out, "export", cfg)
    print(f"wrote {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser and dispatch


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--print-config", action="store_true",
                        help="print the effective config and exit")

    parser = _Parser(prog="quadricmap",
                     description="Object mapping pipelines with ellipsoid "
                                 "landmarks")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common],
                       help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("init", parents=[common],
                       help="single-frame initialization of every object")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output map JSON")
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("slam", parents=[common],
                       help="initialize, refine and jointly optimize")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output map JSON")
    p.set_defaults(func=cmd_slam)

    p = sub.add_parser("eval", parents=[common],
                       help="compare an estimated map against ground truth")
    p.add_argument("--est", required=True, help="estimated map JSON")
    p.add_argument("--gt", required=True, help="ground-truth map JSON")
    p.add_argument("--out", required=True, help="output report CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-yaw", parents=[common],
                       help="symmetry cost vs yaw for each descriptor")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--object", required=True, type=int, help="object id")
    p.add_argument("--out", required=True, help="output curve CSV")
    p.set_defaults(func=cmd_sweep_yaw)

    p = sub.add_parser("export", parents=[common],
                       help="export a map to ASCII PLY")
    p.add_argument("--map", required=True, help="map JSON")
    p.add_argument("--out", required=True, help="output PLY file")
    p.set_defaults(func=cmd_export)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as ex:
        print(f"error: {ex}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except SystemExit as ex:  # --help
        return int(ex.code or 0)
    try:
        cfg = _effective_config(args)
        if args.print_config:
            sys.stdout.write(dump_config(cfg))
            return EXIT_OK
        return int(args.func(args, cfg))
    except (ConfigError, DataError, SynthError, EvalError, SymmetryError,
            OSError) as ex:
        print(f"error: {ex}", file=sys.stderr)
        return EXIT_DATA
    except (SolverError, GeometryError) as ex:
        print(f"error: {ex}", file=sys.stderr)
        return EXIT_SOLVER


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
