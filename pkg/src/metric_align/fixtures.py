"""On-disk interchange formats and the synthetic end-to-end fixture.

Observation directories (depth PNG + mask PNG + intrinsics JSON),
template bundles (per-view PNG pair + poses JSON), pose JSON records,
and the estimates CSV consumed by evaluation. The fixture builder
renders a deterministic anchor/query observation pair with ground-truth
sidecars plus a miniature dataset, which is what the CLI pipeline tests
drive end to end.
"""

import csv
import json
import os

import numpy as np

from .errors import IoFailure, MalformedInput
from .geometry import CameraIntrinsics, RigidTransform, relative_pose, rotvec_to_matrix
from .mesh import make_blob, save_obj
from .pngio import read_depth_png, read_mask_png, write_depth_png, write_mask_png
from .raster import Observation, TemplateView, rasterize
from .scenegen import SceneConfig, generate_dataset, iter_annotations, occluder_library

ESTIMATE_COLUMNS = (
    ["scene", "image", "obj"]
    + ["r%d%d" % (i, j) for i in (1, 2, 3) for j in (1, 2, 3)]
    + ["tx", "ty", "tz"]
)

FIXTURE_CAMERA = dict(fx=600.0, fy=600.0, cx=320.0, cy=240.0, width=640, height=480)
FIXTURE_SCALE = 0.31
FIXTURE_FILL = 0.8


def read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise IoFailure("cannot read %s: %s" % (path, exc)) from exc
    except json.JSONDecodeError as exc:
        raise MalformedInput("%s is not valid JSON: %s" % (path, exc)) from exc


def write_json(record, path):
    try:
        with open(path, "w") as fh:
            json.dump(record, fh, indent=2, sort_keys=True)
    except OSError as exc:
        raise IoFailure("cannot write %s: %s" % (path, exc)) from exc


def intrinsics_to_dict(k: CameraIntrinsics):
    return {
        "fx": k.fx,
        "fy": k.fy,
        "cx": k.cx,
        "cy": k.cy,
        "width": k.width,
        "height": k.height,
    }


def intrinsics_from_dict(rec) -> CameraIntrinsics:
    try:
        return CameraIntrinsics(
            fx=float(rec["fx"]),
            fy=float(rec["fy"]),
            cx=float(rec["cx"]),
            cy=float(rec["cy"]),
            width=int(rec["width"]),
            height=int(rec["height"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedInput("bad intrinsics record: %s" % exc) from exc


def pose_to_dict(pose: RigidTransform):
    return {
        "rotation": [float(v) for v in pose.rotation.reshape(-1)],
        "translation": [float(v) for v in pose.translation],
    }


def pose_from_dict(rec) -> RigidTransform:
    try:
        rot = np.asarray(rec["rotation"], dtype=np.float64).reshape(3, 3)
        t = np.asarray(rec["translation"], dtype=np.float64).reshape(3)
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedInput("bad pose record: %s" % exc) from exc
    return RigidTransform(rot, t)


def load_pose(path) -> RigidTransform:
    return pose_from_dict(read_json(path))


def write_observation(out_dir, obs: Observation):
    """Observation directory: depth.png, mask.png, intrinsics.json."""
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise IoFailure("cannot create %s: %s" % (out_dir, exc)) from exc
    write_depth_png(os.path.join(out_dir, "depth.png"), obs.depth)
    write_mask_png(os.path.join(out_dir, "mask.png"), obs.mask)
    write_json(intrinsics_to_dict(obs.intrinsics), os.path.join(out_dir, "intrinsics.json"))


def load_observation(obs_dir) -> Observation:
    k = intrinsics_from_dict(read_json(os.path.join(obs_dir, "intrinsics.json")))
    depth = read_depth_png(os.path.join(obs_dir, "depth.png"))
    mask = read_mask_png(os.path.join(obs_dir, "mask.png"))
    try:
        return Observation(depth, mask, k)
    except ValueError as exc:
        raise MalformedInput("inconsistent observation in %s: %s" % (obs_dir, exc)) from exc


def save_template_bundle(out_dir, templates, k: CameraIntrinsics):
    """Template bundle: depth/mask PNG per view plus templates.json.

    Depth PNGs reuse the 16-bit 0.1 mm-unit encoding; for normalized
    models the stored unit is 1e-4 model units instead of meters.
    """
    try:
        os.makedirs(os.path.join(out_dir, "depth"), exist_ok=True)
        os.makedirs(os.path.join(out_dir, "mask"), exist_ok=True)
    except OSError as exc:
        raise IoFailure("cannot create %s: %s" % (out_dir, exc)) from exc
    views = []
    for i, tpl in enumerate(templates):
        write_depth_png(os.path.join(out_dir, "depth", "%06d.png" % i), tpl.depth)
        write_mask_png(os.path.join(out_dir, "mask", "%06d.png" % i), tpl.mask)
        rec = pose_to_dict(tpl.camera_from_object)
        rec["model_scale"] = float(tpl.model_scale)
        views.append(rec)
    write_json(
        {"intrinsics": intrinsics_to_dict(k), "views": views},
        os.path.join(out_dir, "templates.json"),
    )


def load_template_bundle(bundle_dir):
    """:return: (templates, intrinsics)."""
    rec = read_json(os.path.join(bundle_dir, "templates.json"))
    try:
        k = intrinsics_from_dict(rec["intrinsics"])
        view_recs = rec["views"]
    except (KeyError, TypeError) as exc:
        raise MalformedInput("bad template bundle: %s" % exc) from exc
    templates = []
    for i, view in enumerate(view_recs):
        depth = read_depth_png(os.path.join(bundle_dir, "depth", "%06d.png" % i))
        mask = read_mask_png(os.path.join(bundle_dir, "mask", "%06d.png" % i))
        templates.append(
            TemplateView(
                camera_from_object=pose_from_dict(view),
                depth=depth,
                mask=mask,
                model_scale=float(view.get("model_scale", 1.0)),
            )
        )
    return templates, k


def write_estimates_csv(rows, path):
    """rows: iterables of (scene, image, obj, RigidTransform)."""
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(ESTIMATE_COLUMNS)
            for scene, image, obj, pose in rows:
                writer.writerow(
                    [scene, int(image), int(obj)]
                    + [repr(float(v)) for v in pose.rotation.reshape(-1)]
                    + [repr(float(v)) for v in pose.translation]
                )
    except OSError as exc:
        raise IoFailure("cannot write %s: %s" % (path, exc)) from exc


def read_estimates_csv(path):
    """:return: dict keyed by (scene, image, obj) holding RigidTransform."""
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            rows = list(reader)
    except OSError as exc:
        raise IoFailure("cannot read %s: %s" % (path, exc)) from exc
    if not rows or rows[0] != ESTIMATE_COLUMNS:
        raise MalformedInput("estimates CSV must start with header %s" % ",".join(ESTIMATE_COLUMNS))
    estimates = {}
    for line_no, row in enumerate(rows[1:], start=2):
        if len(row) != len(ESTIMATE_COLUMNS):
            raise MalformedInput("estimates CSV line %d has %d fields, want %d"
                                 % (line_no, len(row), len(ESTIMATE_COLUMNS)))
        try:
            key = (row[0], int(row[1]), int(row[2]))
            rot = np.array([float(v) for v in row[3:12]]).reshape(3, 3)
            t = np.array([float(v) for v in row[12:15]])
            estimates[key] = RigidTransform(rot, t)
        except ValueError as exc:
            raise MalformedInput("estimates CSV line %d: %s" % (line_no, exc)) from exc
    return estimates


def fixture_mesh():
    """The standard smooth asymmetric test object, normalized frame."""
    return make_blob(seed=3, subdivisions=4, lobes=10)


def fixture_intrinsics() -> CameraIntrinsics:
    return CameraIntrinsics(**FIXTURE_CAMERA)


def _fixture_observation(mesh, k, pose, scale):
    depth, mask = rasterize(mesh.scaled(scale), k, pose)
    # Pass the depth through its storage quantization so in-memory and
    # reloaded fixtures agree exactly.
    depth = np.round(depth * 10000.0) / 10000.0
    return Observation(depth, mask, k)


def make_pipeline_fixture(out_dir):
    """Write the standard fixture: mesh, anchor/query observations, GT.

    Also generates a miniature dataset plus its ground-truth estimates
    CSV so an evaluation stage can run against the same tree. Returns
    the ground-truth record (also stored as gt.json).
    """
    mesh = fixture_mesh()
    k = fixture_intrinsics()
    distance = FIXTURE_SCALE * 2.0 * k.fx / (FIXTURE_FILL * k.height)

    anchor_pose = RigidTransform(
        rotvec_to_matrix([0.2, -0.3, 0.15]), np.array([0.01, -0.02, distance])
    )
    query_pose = RigidTransform(
        rotvec_to_matrix([0.1, 0.5, -0.1]) @ anchor_pose.rotation,
        np.array([-0.02, 0.01, distance * 1.1]),
    )

    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise IoFailure("cannot create %s: %s" % (out_dir, exc)) from exc
    save_obj(mesh, os.path.join(out_dir, "mesh.obj"))
    write_observation(os.path.join(out_dir, "anchor"), _fixture_observation(mesh, k, anchor_pose, FIXTURE_SCALE))
    write_observation(os.path.join(out_dir, "query"), _fixture_observation(mesh, k, query_pose, FIXTURE_SCALE))

    dataset_dir = os.path.join(out_dir, "dataset")
    cfg = SceneConfig(
        target_count=2,
        occluder_count=2,
        camera_count=2,
        image_width=320,
        image_height=240,
        focal=280.0,
        distance_range=(0.4, 0.9),
        rng_seed=7,
    )
    meshes = [make_blob(seed=1).scaled(0.06), make_blob(seed=2).scaled(0.08)] + occluder_library()[:2]
    generate_dataset(meshes, cfg, scene_count=1, output_dir=dataset_dir)
    write_estimates_csv(
        (
            (scene, img, obj, pose)
            for scene, img, obj, _, pose, _ in iter_annotations(dataset_dir)
        ),
        os.path.join(out_dir, "gt_estimates.csv"),
    )

    gt = {
        "scale": FIXTURE_SCALE,
        "fill": FIXTURE_FILL,
        "anchor_pose": pose_to_dict(anchor_pose),
        "query_pose": pose_to_dict(query_pose),
        "relative_pose": pose_to_dict(relative_pose(anchor_pose, query_pose)),
        "intrinsics": intrinsics_to_dict(k),
    }
    write_json(gt, os.path.join(out_dir, "gt.json"))
    return gt
