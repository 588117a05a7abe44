"""Domain-randomized synthetic scene and dataset generation.

Scenes are clutter piles of target and occluder meshes with cameras on
a noisy look-at shell; datasets are written in a BOP-style layout
(16-bit depth PNGs, per-object amodal masks, JSON ground truth) so the
generated data is directly consumable by the observation loader and the
metrics module. Everything is deterministic given (config, seed).
"""

import dataclasses
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import IoFailure, PlacementFailed
from .geometry import CameraIntrinsics, RigidTransform, chain_object_pose, compose, invert, rotation_about_axis
from .mesh import TriangleMesh, make_box, make_cylinder, make_ellipsoid, make_icosphere, make_plane, save_obj
from .pngio import DEPTH_SCALE, write_depth_png, write_mask_png
from .raster import render_scene

MAX_PLACEMENT_REJECTIONS = 10_000
ALLOWED_PENETRATION = 0.10

AZIMUTH_EDGES = np.linspace(-180.0, 180.0, 37)
ELEVATION_EDGES = np.linspace(-90.0, 90.0, 19)
DISTANCE_EDGES = np.linspace(0.0, 4.0, 21)
VISIBILITY_EDGES = np.linspace(0.0, 1.0, 21)


@dataclass(frozen=True)
class SceneConfig:
    target_count: int = 4
    occluder_count: int = 10
    camera_count: int = 100
    placement_bounds: tuple = ((-0.25, -0.25, 0.0), (0.25, 0.25, 0.35))
    eccentric_noise_sigma: float = 0.05
    roll_noise_sigma: float = float(np.radians(15.0))
    distance_range: tuple = (0.5, 1.5)
    rng_seed: int = 0
    image_width: int = 640
    image_height: int = 480
    focal: float = 572.0
    ground_plane: bool = True

    def __post_init__(self):
        if min(self.target_count, self.occluder_count, self.camera_count) < 1:
            raise ValueError("counts must be >= 1")
        lo, hi = (np.asarray(b, dtype=np.float64) for b in self.placement_bounds)
        if lo.shape != (3,) or hi.shape != (3,) or not np.all(hi > lo):
            raise ValueError("placement bounds must span a non-degenerate box")
        dmin, dmax = self.distance_range
        if not 0.0 < dmin <= dmax:
            raise ValueError("distance range must satisfy 0 < min <= max")
        if self.eccentric_noise_sigma < 0 or self.roll_noise_sigma < 0:
            raise ValueError("noise sigmas must be >= 0")
        if self.image_width < 1 or self.image_height < 1 or not self.focal > 0:
            raise ValueError("image size and focal must be positive")
        if self.rng_seed < 0:
            raise ValueError("rng_seed must be >= 0")
        object.__setattr__(
            self,
            "placement_bounds",
            (tuple(float(v) for v in lo), tuple(float(v) for v in hi)),
        )
        object.__setattr__(self, "distance_range", (float(dmin), float(dmax)))

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(
            fx=self.focal,
            fy=self.focal,
            cx=self.image_width / 2.0,
            cy=self.image_height / 2.0,
            width=self.image_width,
            height=self.image_height,
        )


@dataclass(frozen=True)
class SceneObject:
    mesh_id: int
    pose_world: RigidTransform
    is_target: bool


@dataclass(frozen=True)
class SceneInstance:
    scene_id: int
    objects: tuple
    cameras: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "cameras", tuple(self.cameras))

    def center(self):
        return np.mean([o.pose_world.translation for o in self.objects], axis=0)


@dataclass(frozen=True)
class PoseStats:
    azimuth_hist: np.ndarray
    elevation_hist: np.ndarray
    distance_hist: np.ndarray
    visibility_hist: np.ndarray
    annotation_count: int

    def __post_init__(self):
        for name, hist, edges in (
            ("azimuth", self.azimuth_hist, AZIMUTH_EDGES),
            ("elevation", self.elevation_hist, ELEVATION_EDGES),
            ("distance", self.distance_hist, DISTANCE_EDGES),
            ("visibility", self.visibility_hist, VISIBILITY_EDGES),
        ):
            hist = np.asarray(hist, dtype=np.int64)
            if len(hist) != len(edges) - 1:
                raise ValueError("%s histogram has wrong bin count" % name)
            if hist.sum() != self.annotation_count:
                raise ValueError("%s histogram mass != annotation count" % name)
            hist.setflags(write=False)
            object.__setattr__(self, name + "_hist", hist)


def occluder_library():
    """Ten primitive distractor meshes at varied hand-held aspect ratios."""
    return [
        make_box(0.06, 0.06, 0.06, frame="metric"),
        make_box(0.12, 0.05, 0.03, frame="metric"),
        make_box(0.04, 0.04, 0.16, frame="metric"),
        make_cylinder(0.025, 0.12, segments=24, frame="metric"),
        make_cylinder(0.045, 0.05, segments=24, frame="metric"),
        make_cylinder(0.015, 0.20, segments=24, frame="metric"),
        make_icosphere(2, 0.035, frame="metric"),
        make_icosphere(2, 0.06, frame="metric"),
        make_ellipsoid(0.07, 0.04, 0.025, frame="metric"),
        make_ellipsoid(0.03, 0.05, 0.09, frame="metric"),
    ]


def _uniform_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def place_objects(meshes, cfg: SceneConfig, scene_id: int = 0) -> SceneInstance:
    """Sample non-interpenetrating object poses inside the bounds box.

    Positions are uniform in the box, orientations uniform on SO(3);
    candidates whose bounding sphere would penetrate an already-placed
    sphere by more than 10% of the smaller radius are rejected.

    :raises PlacementFailed: after 10k rejections (bounds too tight).
    """
    if not meshes:
        raise ValueError("mesh set must be non-empty")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.rng_seed, scene_id, 0]))
    lo, hi = (np.asarray(b) for b in cfg.placement_bounds)
    radii = [m.bounding_radius() for m in meshes]
    placed = []
    rejections = 0
    total = cfg.target_count + cfg.occluder_count
    for slot in range(total):
        mesh_id = int(rng.integers(len(meshes)))
        while True:
            pos = rng.uniform(lo, hi)
            rot = _uniform_rotation(rng)
            ok = all(
                np.linalg.norm(pos - o.pose_world.translation)
                >= radii[mesh_id] + radii[o.mesh_id]
                - ALLOWED_PENETRATION * min(radii[mesh_id], radii[o.mesh_id])
                for o in placed
            )
            if ok:
                break
            rejections += 1
            if rejections >= MAX_PLACEMENT_REJECTIONS:
                raise PlacementFailed(
                    "still %d objects to place after %d rejections"
                    % (total - slot, rejections)
                )
        placed.append(
            SceneObject(mesh_id, RigidTransform(rot, pos), slot < cfg.target_count)
        )
    return SceneInstance(scene_id, tuple(placed))


def _look_at(position, target, roll) -> RigidTransform:
    """Camera-from-world pose: +z toward target, then rolled about +z."""
    f = np.asarray(target, dtype=np.float64) - position
    norm = np.linalg.norm(f)
    f = f / norm if norm > 1e-12 else np.array([0.0, 0.0, 1.0])
    up = np.array([0.0, 0.0, 1.0])
    if abs(f @ up) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    x = np.cross(f, up)
    x /= np.linalg.norm(x)
    y = np.cross(f, x)
    r_cw = np.stack([x, y, f])
    base = RigidTransform(r_cw, -r_cw @ position)
    return compose(RigidTransform(rotation_about_axis([0, 0, 1], roll), np.zeros(3)), base)


def sample_cameras(scene: SceneInstance, cfg: SceneConfig):
    """Cameras on a noisy look-at shell around the objects' center.

    Distance uniform in distance_range, viewing direction uniform on the
    sphere (upper hemisphere when the ground plane is enabled), look-at
    target offset by Gaussian eccentric noise, then Gaussian roll about
    the optical axis.
    """
    if not scene.objects:
        raise ValueError("scene has no objects to look at")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.rng_seed, scene.scene_id, 1]))
    center = scene.center()
    cameras = []
    for _ in range(cfg.camera_count):
        while True:
            d = rng.normal(size=3)
            norm = np.linalg.norm(d)
            if norm < 1e-12:
                continue
            d /= norm
            if not cfg.ground_plane or d[2] > 0.05:
                break
        dist = rng.uniform(*cfg.distance_range)
        eccentric = rng.normal(size=3) * cfg.eccentric_noise_sigma
        roll = rng.normal() * cfg.roll_noise_sigma
        cameras.append(_look_at(center + d * dist, center + eccentric, roll))
    return cameras


def _dump_json(record, path):
    try:
        with open(path, "w") as fh:
            json.dump(record, fh, indent=2, sort_keys=True)
    except OSError as exc:
        raise IoFailure("cannot write %s: %s" % (path, exc)) from exc


def _camera_k(cfg: SceneConfig):
    k = cfg.intrinsics
    return [k.fx, 0.0, k.cx, 0.0, k.fy, k.cy, 0.0, 0.0, 1.0]


def _write_scene(meshes, cfg, scene_id, out_dir, plane, plane_pose):
    scene = place_objects(meshes, cfg, scene_id)
    scene = dataclasses.replace(scene, cameras=tuple(sample_cameras(scene, cfg)))
    k = cfg.intrinsics

    scene_name = "scene_%06d" % scene_id
    scene_dir = os.path.join(out_dir, scene_name)
    try:
        os.makedirs(os.path.join(scene_dir, "depth"), exist_ok=True)
        os.makedirs(os.path.join(scene_dir, "mask"), exist_ok=True)
    except OSError as exc:
        raise IoFailure("cannot create %s: %s" % (scene_dir, exc)) from exc

    world_items = [(meshes[o.mesh_id], o.pose_world) for o in scene.objects]
    if plane is not None:
        world_items.append((plane, plane_pose))

    scene_gt = {}
    scene_gt_info = {}
    scene_camera = {}
    for img_id, cam in enumerate(scene.cameras):
        items = [(mesh, compose(cam, pose)) for mesh, pose in world_items]
        scene_depth, index_map, solo = render_scene(items, k)
        try:
            write_depth_png(
                os.path.join(scene_dir, "depth", "%06d.png" % img_id), scene_depth
            )
        except OSError as exc:
            raise IoFailure("cannot write depth png: %s" % exc) from exc

        gt_rows = []
        info_rows = []
        for obj_i, obj in enumerate(scene.objects):
            solo_mask = solo[obj_i] > 0
            try:
                write_mask_png(
                    os.path.join(scene_dir, "mask", "%06d_%06d.png" % (img_id, obj_i)),
                    solo_mask,
                )
            except OSError as exc:
                raise IoFailure("cannot write mask png: %s" % exc) from exc
            pose_cam = chain_object_pose(invert(cam), obj.pose_world)
            amodal = int(solo_mask.sum())
            visible = int((index_map == obj_i).sum())
            gt_rows.append(
                {
                    "obj_id": obj.mesh_id + 1,
                    "cam_R_m2c": [float(v) for v in pose_cam.rotation.reshape(-1)],
                    "cam_t_m2c": [float(v) * 1000.0 for v in pose_cam.translation],
                    "is_target": bool(obj.is_target),
                }
            )
            info_rows.append(
                {
                    "px_count_all": amodal,
                    "px_count_visib": visible,
                    "visib_fract": visible / amodal if amodal else 0.0,
                }
            )
        scene_gt[str(img_id)] = gt_rows
        scene_gt_info[str(img_id)] = info_rows
        scene_camera[str(img_id)] = {"cam_K": _camera_k(cfg), "depth_scale": DEPTH_SCALE}

    _dump_json(scene_gt, os.path.join(scene_dir, "scene_gt.json"))
    _dump_json(scene_gt_info, os.path.join(scene_dir, "scene_gt_info.json"))
    _dump_json(scene_camera, os.path.join(scene_dir, "scene_camera.json"))
    return scene_name


def worker_count(default=1):
    """Worker cap from METRIC_ALIGN_THREADS; at least 1."""
    try:
        return max(1, int(os.environ.get("METRIC_ALIGN_THREADS", default)))
    except ValueError:
        return max(1, default)


def generate_dataset(meshes, cfg: SceneConfig, scene_count, output_dir):
    """Write scene_count scenes plus models and a manifest; returns the manifest.

    Layout per scene: depth/IIIIII.png (16-bit, 0.1 mm units),
    mask/IIIIII_OOOOOO.png (amodal solo masks), scene_gt.json,
    scene_gt_info.json, scene_camera.json. Scenes derive independent
    generators from (rng_seed, scene index), so regeneration is
    byte-identical and scene order does not matter.
    """
    if scene_count < 1:
        raise ValueError("scene_count must be >= 1")
    meshes = list(meshes)
    if not meshes:
        raise ValueError("mesh set must be non-empty")
    try:
        os.makedirs(os.path.join(output_dir, "models"), exist_ok=True)
    except OSError as exc:
        raise IoFailure("cannot create %s: %s" % (output_dir, exc)) from exc

    model_files = []
    for i, mesh in enumerate(meshes):
        rel = os.path.join("models", "obj_%06d.obj" % (i + 1))
        save_obj(mesh, os.path.join(output_dir, rel))
        model_files.append(rel)

    plane = None
    plane_pose = None
    if cfg.ground_plane:
        plane = make_plane(4.0, 4.0)
        # Keep the plane clear of every bounding sphere so it stays pure
        # background and never interpenetrates a sampled object.
        z = cfg.placement_bounds[0][2] - max(m.bounding_radius() for m in meshes)
        plane_pose = RigidTransform(np.eye(3), np.array([0.0, 0.0, z]))

    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            names = list(
                pool.map(
                    lambda i: _write_scene(meshes, cfg, i, output_dir, plane, plane_pose),
                    range(scene_count),
                )
            )
    else:
        names = [
            _write_scene(meshes, cfg, i, output_dir, plane, plane_pose)
            for i in range(scene_count)
        ]

    manifest = {
        "scene_count": scene_count,
        "scenes": names,
        "models": model_files,
        "config": dataclasses.asdict(cfg),
    }
    # Normalize through JSON so the returned value equals the re-loaded
    # manifest (tuples become lists).
    manifest = json.loads(json.dumps(manifest))
    _dump_json(manifest, os.path.join(output_dir, "dataset.json"))
    return manifest


def load_manifest(dataset_dir):
    path = os.path.join(dataset_dir, "dataset.json")
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise IoFailure("cannot read manifest %s: %s" % (path, exc)) from exc


def _load_scene_json(dataset_dir, scene_name, filename):
    path = os.path.join(dataset_dir, scene_name, filename)
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise IoFailure("cannot read %s: %s" % (path, exc)) from exc


def iter_annotations(dataset_dir, manifest=None):
    """Yield (scene, image id, object index, gt row, pose, info) per annotation."""
    manifest = manifest or load_manifest(dataset_dir)
    for scene_name in manifest["scenes"]:
        gt = _load_scene_json(dataset_dir, scene_name, "scene_gt.json")
        info = _load_scene_json(dataset_dir, scene_name, "scene_gt_info.json")
        for img_key in sorted(gt, key=int):
            for obj_i, row in enumerate(gt[img_key]):
                rot = np.asarray(row["cam_R_m2c"], dtype=np.float64).reshape(3, 3)
                t = np.asarray(row["cam_t_m2c"], dtype=np.float64) / 1000.0
                pose = RigidTransform(rot, t)
                yield scene_name, int(img_key), obj_i, row, pose, info[img_key][obj_i]


def dataset_stats(dataset_dir) -> PoseStats:
    """Pose-distribution histograms over every annotation in the dataset.

    Azimuth/elevation describe the camera direction in the object frame;
    distance is the camera-frame object-center z; visibility comes from
    the stored fractions. Values beyond an edge clip into the end bins
    so histogram mass always equals the annotation count.
    """
    azimuth, elevation, distance, visibility = [], [], [], []
    for _, _, _, _, pose, info in iter_annotations(dataset_dir):
        cam_in_obj = -pose.rotation.T @ pose.translation
        d = cam_in_obj / np.linalg.norm(cam_in_obj)
        azimuth.append(np.degrees(np.arctan2(d[1], d[0])))
        elevation.append(np.degrees(np.arcsin(np.clip(d[2], -1.0, 1.0))))
        distance.append(pose.translation[2])
        visibility.append(info["visib_fract"])

    def hist(values, edges):
        clipped = np.clip(np.asarray(values, dtype=np.float64), edges[0], edges[-1])
        counts, _ = np.histogram(clipped, bins=edges)
        return counts

    return PoseStats(
        azimuth_hist=hist(azimuth, AZIMUTH_EDGES),
        elevation_hist=hist(elevation, ELEVATION_EDGES),
        distance_hist=hist(distance, DISTANCE_EDGES),
        visibility_hist=hist(visibility, VISIBILITY_EDGES),
        annotation_count=len(azimuth),
    )
