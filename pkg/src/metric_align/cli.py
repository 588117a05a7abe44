"""Command-line pipeline surface.

Subcommands: templates, align, pose, relpose, gen, stats, eval. Every
run writes its fully-resolved configuration (defaults and seeds
included) to run_config.json in the output directory, and exit codes
are a stable contract: 0 success, 2 I/O, 3 render, 4 estimation
failure, 5 format error.
"""

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import fixtures, metrics
from .alignment import (
    FineConfig,
    coarse_align,
    dump_trace,
    estimate_query_pose,
    fine_align,
    refine_step_icp,
)
from .errors import (
    BehindCamera,
    EmptyRender,
    IoFailure,
    MalformedInput,
    MetricAlignError,
    NonPositiveDepth,
)
from .geometry import CameraIntrinsics, relative_pose
from .matching import MatcherConfig, match_view
from .mesh import load_mesh, make_blob, save_obj
from .pngio import read_depth_png
from .raster import render_templates, sample_viewpoints, template_radius
from .scenegen import (
    AZIMUTH_EDGES,
    DISTANCE_EDGES,
    ELEVATION_EDGES,
    VISIBILITY_EDGES,
    SceneConfig,
    dataset_stats,
    generate_dataset,
    iter_annotations,
    load_manifest,
    occluder_library,
    worker_count,
)

EXIT_OK = 0
EXIT_IO = 2
EXIT_RENDER = 3
EXIT_ESTIMATION = 4
EXIT_FORMAT = 5

MIN_EVAL_VISIBILITY = 0.1


def _echo_config(out_dir, subcommand, params):
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise IoFailure("cannot create %s: %s" % (out_dir, exc)) from exc
    record = {"subcommand": subcommand}
    record.update(params)
    fixtures.write_json(record, os.path.join(out_dir, "run_config.json"))


def _matcher_from(ns):
    cfg = MatcherConfig(max_matches=ns.max_matches, rng_seed=ns.seed)
    return lambda template, obs: match_view(template, obs, cfg)


def _intrinsics_from_flags(ns) -> CameraIntrinsics:
    return CameraIntrinsics(
        fx=ns.fx,
        fy=ns.fy if ns.fy is not None else ns.fx,
        cx=ns.cx if ns.cx is not None else ns.width / 2.0,
        cy=ns.cy if ns.cy is not None else ns.height / 2.0,
        width=ns.width,
        height=ns.height,
    )


def _check_bundle_intrinsics(bundle_k, obs_k):
    if bundle_k != obs_k:
        raise MalformedInput(
            "template bundle intrinsics %s do not match observation intrinsics %s"
            % (fixtures.intrinsics_to_dict(bundle_k), fixtures.intrinsics_to_dict(obs_k))
        )


def cmd_templates(ns):
    mesh = load_mesh(ns.mesh, frame="normalized")
    k = _intrinsics_from_flags(ns)
    _echo_config(
        ns.out,
        "templates",
        {
            "mesh": ns.mesh,
            "count": ns.count,
            "fill": ns.fill,
            "intrinsics": fixtures.intrinsics_to_dict(k),
        },
    )
    views = sample_viewpoints(ns.count, template_radius(mesh, k, ns.fill))
    templates = render_templates(mesh, k, views)
    fixtures.save_template_bundle(ns.out, templates, k)


def cmd_align(ns):
    mesh = load_mesh(ns.mesh, frame="normalized")
    obs = fixtures.load_observation(ns.anchor)
    templates, bundle_k = fixtures.load_template_bundle(ns.templates)
    _check_bundle_intrinsics(bundle_k, obs.intrinsics)
    _echo_config(
        ns.out,
        "align",
        {
            "mesh": ns.mesh,
            "anchor": ns.anchor,
            "templates": ns.templates,
            "matcher": ns.matcher,
            "max_matches": ns.max_matches,
            "max_iterations": ns.max_iterations,
            "seed": ns.seed,
        },
    )
    matcher = _matcher_from(ns)

    coarse = coarse_align(mesh, obs, templates, matcher)
    result = fine_align(
        mesh,
        obs,
        coarse,
        refine_step_icp,
        matcher,
        templates,
        FineConfig(max_iterations=ns.max_iterations),
    )

    record = fixtures.pose_to_dict(result.pose.pose)
    record.update(
        {
            "scale": result.pose.scale,
            "cumulative_scale": result.cumulative_scale,
            "converged": result.converged,
            "iterations": result.iterations,
        }
    )
    fixtures.write_json(record, os.path.join(ns.out, "alignment.json"))
    dump_trace(result, os.path.join(ns.out, "trace.json"))
    save_obj(mesh.scaled(result.pose.scale), os.path.join(ns.out, "metric_mesh.obj"))


def cmd_pose(ns):
    mesh = load_mesh(ns.mesh, frame="metric")
    obs = fixtures.load_observation(ns.query)
    _echo_config(
        ns.out,
        "pose",
        {
            "mesh": ns.mesh,
            "query": ns.query,
            "templates": ns.templates,
            "count": ns.count,
            "fill": ns.fill,
            "matcher": ns.matcher,
            "max_matches": ns.max_matches,
            "seed": ns.seed,
        },
    )
    if ns.templates:
        templates, bundle_k = fixtures.load_template_bundle(ns.templates)
        _check_bundle_intrinsics(bundle_k, obs.intrinsics)
    else:
        k = obs.intrinsics
        views = sample_viewpoints(ns.count, template_radius(mesh, k, ns.fill))
        templates = render_templates(mesh, k, views)
    pose = estimate_query_pose(mesh, obs, templates, _matcher_from(ns), refine_step_icp)
    fixtures.write_json(fixtures.pose_to_dict(pose), os.path.join(ns.out, "pose.json"))


def cmd_relpose(ns):
    anchor = fixtures.load_pose(ns.anchor_pose)
    query = fixtures.load_pose(ns.query_pose)
    _echo_config(
        ns.out,
        "relpose",
        {"anchor_pose": ns.anchor_pose, "query_pose": ns.query_pose},
    )
    rel = relative_pose(anchor, query)
    fixtures.write_json(
        fixtures.pose_to_dict(rel), os.path.join(ns.out, "relative_pose.json")
    )


def default_mesh_library():
    """Four smooth targets plus the ten primitive occluders, metric scale."""
    targets = [
        make_blob(seed=i + 1).scaled(s)
        for i, s in enumerate((0.06, 0.075, 0.09, 0.105))
    ]
    return targets + occluder_library()


def cmd_gen(ns):
    overrides = {}
    if ns.config:
        rec = fixtures.read_json(ns.config)
        if not isinstance(rec, dict):
            raise MalformedInput("scene config must be a JSON object")
        overrides.update(rec)
    for field, value in (
        ("rng_seed", ns.seed),
        ("camera_count", ns.cameras),
        ("target_count", ns.targets),
        ("occluder_count", ns.occluders),
    ):
        if value is not None:
            overrides[field] = value
    known = {f.name for f in dataclasses.fields(SceneConfig)}
    unknown = set(overrides) - known
    if unknown:
        raise MalformedInput("unknown scene config fields: %s" % sorted(unknown))
    for tuple_field in ("placement_bounds", "distance_range"):
        if tuple_field in overrides:
            overrides[tuple_field] = tuple(
                tuple(v) if isinstance(v, list) else v for v in overrides[tuple_field]
            )
    try:
        cfg = SceneConfig(**overrides)
    except (TypeError, ValueError) as exc:
        raise MalformedInput("bad scene config: %s" % exc) from exc
    _echo_config(
        ns.out,
        "gen",
        {"scenes": ns.scenes, "config": dataclasses.asdict(cfg)},
    )
    generate_dataset(default_mesh_library(), cfg, ns.scenes, ns.out)


def _write_histogram_svg(path, counts, edges, title, xlabel):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "metric-align"
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge", edgecolor="black")
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("annotations")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_stats(ns):
    stats = dataset_stats(ns.dataset)
    record = {
        "annotation_count": stats.annotation_count,
        "azimuth": {"edges": AZIMUTH_EDGES.tolist(), "counts": stats.azimuth_hist.tolist()},
        "elevation": {"edges": ELEVATION_EDGES.tolist(), "counts": stats.elevation_hist.tolist()},
        "distance": {"edges": DISTANCE_EDGES.tolist(), "counts": stats.distance_hist.tolist()},
        "visibility": {"edges": VISIBILITY_EDGES.tolist(), "counts": stats.visibility_hist.tolist()},
    }
    _echo_config(ns.out, "stats", {"dataset": ns.dataset})
    fixtures.write_json(record, os.path.join(ns.out, "stats.json"))
    for name, counts, edges, xlabel in (
        ("azimuth", stats.azimuth_hist, AZIMUTH_EDGES, "degrees"),
        ("elevation", stats.elevation_hist, ELEVATION_EDGES, "degrees"),
        ("distance", stats.distance_hist, DISTANCE_EDGES, "meters"),
        ("visibility", stats.visibility_hist, VISIBILITY_EDGES, "visible fraction"),
    ):
        try:
            _write_histogram_svg(
                os.path.join(ns.out, "%s.svg" % name), counts, edges, name, xlabel
            )
        except OSError as exc:
            raise IoFailure("cannot write %s.svg: %s" % (name, exc)) from exc


class _EvalContext:
    """Caches meshes, model points, and diameters across annotations."""

    def __init__(self, dataset_dir, manifest):
        self.dataset_dir = dataset_dir
        self.models = manifest.get("models", [])
        self._meshes = {}

    def mesh(self, obj_id):
        if obj_id not in self._meshes:
            rel = os.path.join("models", "obj_%06d.obj" % obj_id)
            if rel not in self.models:
                raise MalformedInput("dataset has no model for obj_id %d" % obj_id)
            mesh = load_mesh(os.path.join(self.dataset_dir, rel), frame="metric")
            pts = metrics.model_points_for_metrics(mesh)
            self._meshes[obj_id] = (mesh, pts, metrics.diameter(mesh))
        return self._meshes[obj_id]


def _eval_row(ctx, k, obs_depth, scene, img_id, obj_i, gt_row, gt_pose, est_pose):
    mesh, pts, dia = ctx.mesh(gt_row["obj_id"])
    image_diag = float(np.hypot(k.width, k.height))
    row = {"scene": scene, "image": img_id, "obj": obj_i}
    if est_pose is None:
        row.update(
            add=np.inf, adds=np.inf, chamfer=np.inf,
            vsd_recall=0.0, mssd_recall=0.0, mspd_recall=0.0, ar=0.0,
        )
        return row
    syms = metrics.SymmetrySet.identity_only()
    row["add"] = metrics.add(pts, gt_pose, est_pose)
    row["adds"] = metrics.adds(pts, gt_pose, est_pose)
    row["chamfer"] = metrics.chamfer(est_pose.apply(pts), gt_pose.apply(pts))
    vsd_errors = metrics.vsd_profile(
        mesh, k, gt_pose, est_pose, obs_depth, metrics.vsd_tau_grid(dia)
    )
    mssd_val = metrics.mssd(mesh, syms, gt_pose, est_pose)
    try:
        mspd_val = metrics.mspd(mesh, syms, k, gt_pose, est_pose)
    except BehindCamera:
        mspd_val = np.inf
    recalls = metrics.bop_average_recall(
        vsd_errors[None, :], [mssd_val], [mspd_val], dia, image_diag
    )
    row.update(recalls)
    return row


def cmd_eval(ns):
    manifest = load_manifest(ns.dataset)
    estimates = fixtures.read_estimates_csv(ns.estimates)
    _echo_config(
        ns.out,
        "eval",
        {
            "dataset": ns.dataset,
            "estimates": ns.estimates,
            "min_visibility": ns.min_visibility,
        },
    )
    ctx = _EvalContext(ns.dataset, manifest)

    jobs = []
    for scene, img_id, obj_i, gt_row, gt_pose, info in iter_annotations(ns.dataset, manifest):
        if info["visib_fract"] < ns.min_visibility:
            continue
        jobs.append((scene, img_id, obj_i, gt_row, gt_pose))

    cam_cache = {}

    def run(job):
        scene, img_id, obj_i, gt_row, gt_pose = job
        if (scene, img_id) not in cam_cache:
            cam_rec = fixtures.read_json(
                os.path.join(ns.dataset, scene, "scene_camera.json")
            )[str(img_id)]
            depth = read_depth_png(
                os.path.join(ns.dataset, scene, "depth", "%06d.png" % img_id),
                depth_scale=cam_rec["depth_scale"],
            )
            kk = cam_rec["cam_K"]
            h, w = depth.shape
            cam_cache[(scene, img_id)] = (
                CameraIntrinsics(fx=kk[0], fy=kk[4], cx=kk[2], cy=kk[5], width=w, height=h),
                depth,
            )
        k, obs_depth = cam_cache[(scene, img_id)]
        est = estimates.get((scene, img_id, obj_i))
        return _eval_row(ctx, k, obs_depth, scene, img_id, obj_i, gt_row, gt_pose, est)

    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run, jobs))
    else:
        rows = [run(job) for job in jobs]

    metrics.write_report_csv(rows, os.path.join(ns.out, "report.csv"))
    metrics.write_report_json(rows, os.path.join(ns.out, "report.json"))


def _add_matcher_flags(p):
    p.add_argument("--matcher", choices=["depth"], default="depth",
                   help="correspondence source (depth-patch matching)")
    p.add_argument("--max-matches", type=int, default=1200)
    p.add_argument("--seed", type=int, default=0)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="metric-align",
        description="Metric-scale one-shot pose alignment pipeline",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("templates", help="render a template view bundle")
    p.add_argument("--mesh", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=42)
    p.add_argument("--fill", type=float, default=0.6)
    p.add_argument("--width", type=int, default=640)
    p.add_argument("--height", type=int, default=480)
    p.add_argument("--fx", type=float, default=600.0)
    p.add_argument("--fy", type=float, default=None)
    p.add_argument("--cx", type=float, default=None)
    p.add_argument("--cy", type=float, default=None)
    p.set_defaults(func=cmd_templates)

    p = sub.add_parser("align", help="anchor-view joint pose and scale")
    p.add_argument("--mesh", required=True, help="normalized-frame mesh file")
    p.add_argument("--anchor", required=True, help="anchor observation directory")
    p.add_argument("--templates", required=True, help="template bundle directory")
    p.add_argument("--out", required=True)
    p.add_argument("--max-iterations", type=int, default=30)
    _add_matcher_flags(p)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("pose", help="query-view pose of the metric model")
    p.add_argument("--mesh", required=True, help="metric mesh file")
    p.add_argument("--query", required=True, help="query observation directory")
    p.add_argument("--templates", default=None,
                   help="template bundle; rendered from the mesh when omitted")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=42)
    p.add_argument("--fill", type=float, default=0.6)
    _add_matcher_flags(p)
    p.set_defaults(func=cmd_pose)

    p = sub.add_parser("relpose", help="anchor-to-query relative pose")
    p.add_argument("--anchor-pose", required=True)
    p.add_argument("--query-pose", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_relpose)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--config", default=None, help="SceneConfig JSON file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--cameras", type=int, default=None)
    p.add_argument("--targets", type=int, default=None)
    p.add_argument("--occluders", type=int, default=None)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("stats", help="pose-distribution statistics")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("eval", help="evaluate an estimates CSV against a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--estimates", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-visibility", type=float, default=MIN_EVAL_VISIBILITY)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    try:
        ns.func(ns)
    except IoFailure as exc:
        print("error: %s: %s" % (type(exc).__name__, exc), file=sys.stderr)
        return EXIT_IO
    except (EmptyRender, BehindCamera, NonPositiveDepth) as exc:
        print("error: %s: %s" % (type(exc).__name__, exc), file=sys.stderr)
        return EXIT_RENDER
    except MalformedInput as exc:
        print("error: %s: %s" % (type(exc).__name__, exc), file=sys.stderr)
        return EXIT_FORMAT
    except MetricAlignError as exc:
        print("error: %s: %s" % (type(exc).__name__, exc), file=sys.stderr)
        return EXIT_ESTIMATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
