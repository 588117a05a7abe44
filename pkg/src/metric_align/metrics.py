"""Pose-error metrics and recall aggregation.

ADD / ADD-S over model points, the BOP error functions (VSD, MSSD,
MSPD) with their standard threshold grids and Average Recall, Chamfer
distance for scale-recovery assessment, and object diameter. All
functions are pure and deterministic.
"""

import csv
import json
from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, cKDTree

from .errors import BehindCamera, EmptyModel, EmptyRender, IoFailure
from .geometry import CameraIntrinsics, RigidTransform, rotation_about_axis
from .mesh import TriangleMesh
from .raster import rasterize

VSD_OCCLUSION_DELTA = 0.015
MAX_EXACT_DIAMETER_VERTICES = 5000
METRIC_SAMPLE_COUNT = 2048
CONTINUOUS_SYMMETRY_STEPS = 64

REPORT_COLUMNS = (
    "scene",
    "image",
    "obj",
    "add",
    "adds",
    "vsd_recall",
    "mssd_recall",
    "mspd_recall",
    "ar",
    "chamfer",
)


@dataclass(frozen=True)
class SymmetrySet:
    """Object symmetry transforms; the identity is always a member."""

    transforms: tuple
    note: str = ""

    def __post_init__(self):
        object.__setattr__(self, "transforms", tuple(self.transforms))
        if not self.transforms:
            raise ValueError("symmetry set cannot be empty")
        has_identity = any(
            np.allclose(t.rotation, np.eye(3), atol=1e-12)
            and np.allclose(t.translation, 0.0, atol=1e-12)
            for t in self.transforms
        )
        if not has_identity:
            raise ValueError("symmetry set must contain the identity")

    @classmethod
    def identity_only(cls) -> "SymmetrySet":
        return cls((RigidTransform.identity(),))

    @classmethod
    def discretized_rotation(cls, axis, steps=CONTINUOUS_SYMMETRY_STEPS) -> "SymmetrySet":
        """Continuous rotational symmetry about an axis, discretized."""
        axis = np.asarray(axis, dtype=np.float64)
        transforms = [
            RigidTransform(rotation_about_axis(axis, 2.0 * np.pi * i / steps), np.zeros(3))
            for i in range(steps)
        ]
        return cls(tuple(transforms), note="axis %s x %d steps" % (axis.tolist(), steps))


@dataclass(frozen=True)
class MetricReport:
    add: float
    adds: float
    vsd_recall: float
    mssd_recall: float
    mspd_recall: float
    ar: float
    chamfer: float

    def __post_init__(self):
        mean = (self.vsd_recall + self.mssd_recall + self.mspd_recall) / 3.0
        if abs(self.ar - mean) > 1e-12:
            raise ValueError("ar must be the mean of the three recalls")


def _points(model_points):
    pts = np.asarray(model_points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyModel("metric needs at least one model point")
    return pts


def model_points_for_metrics(mesh: TriangleMesh, max_vertices=10_000):
    """Mesh vertices, or a bounded uniform surface resample for huge meshes."""
    if len(mesh.vertices) <= max_vertices:
        return mesh.vertices
    rng = np.random.default_rng(0)
    tri = mesh.vertices[mesh.faces]
    area = 0.5 * np.linalg.norm(
        np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1
    )
    face = rng.choice(len(tri), size=METRIC_SAMPLE_COUNT, p=area / area.sum())
    r1, r2 = rng.uniform(size=(2, METRIC_SAMPLE_COUNT))
    u = 1.0 - np.sqrt(r1)
    v = np.sqrt(r1) * (1.0 - r2)
    w = np.sqrt(r1) * r2
    t = tri[face]
    return u[:, None] * t[:, 0] + v[:, None] * t[:, 1] + w[:, None] * t[:, 2]


def add(model_points, t_gt: RigidTransform, t_est: RigidTransform) -> float:
    """Mean distance between matched model points under the two poses."""
    pts = _points(model_points)
    return float(np.linalg.norm(t_est.apply(pts) - t_gt.apply(pts), axis=1).mean())


def adds(model_points, t_gt: RigidTransform, t_est: RigidTransform) -> float:
    """Mean nearest-point distance; the symmetric-object variant of add."""
    pts = _points(model_points)
    gt = t_gt.apply(pts)
    est = t_est.apply(pts)
    d, _ = cKDTree(est).query(gt)
    return float(d.mean())


def add_recall(model_points, diameter_m, pairs, threshold_factor=0.1) -> float:
    """Fraction of pose pairs with add below threshold_factor * diameter."""
    if not diameter_m > 0:
        raise ValueError("diameter must be positive")
    if not pairs:
        return 0.0
    values = [add(model_points, gt, est) for gt, est in pairs]
    return float(np.mean(np.asarray(values) < threshold_factor * diameter_m))


def add_auc(model_points, pairs, max_threshold=0.1) -> float:
    """Normalized area under the add recall-vs-threshold curve on [0, T].

    The recall curve of a finite sample is a step function; the exact
    integral is mean(clip(1 - err/T, 0, 1)).
    """
    if not max_threshold > 0:
        raise ValueError("max_threshold must be positive")
    if not pairs:
        return 0.0
    errs = np.asarray([add(model_points, gt, est) for gt, est in pairs])
    return float(np.clip(1.0 - errs / max_threshold, 0.0, 1.0).mean())


def vsd_profile(
    mesh_metric: TriangleMesh,
    k: CameraIntrinsics,
    t_gt: RigidTransform,
    t_est: RigidTransform,
    obs_depth,
    taus,
    delta=VSD_OCCLUSION_DELTA,
):
    """vsd at several tau values sharing a single pair of renders."""
    depth_gt, mask_gt = rasterize(mesh_metric, k, t_gt)
    depth_est, mask_est = rasterize(mesh_metric, k, t_est)
    obs = np.asarray(obs_depth, dtype=np.float64)
    observed = obs > 0

    def visible(depth, mask):
        return mask & (~observed | (depth <= obs + delta))

    v_gt = visible(depth_gt, mask_gt)
    v_est = visible(depth_est, mask_est)
    union = int((v_gt | v_est).sum())
    if union == 0:
        return np.ones(len(taus))
    gap = np.abs(depth_gt - depth_est)[v_gt & v_est]
    return np.array([1.0 - int((gap < tau).sum()) / union for tau in taus])


def vsd(
    mesh_metric: TriangleMesh,
    k: CameraIntrinsics,
    t_gt: RigidTransform,
    t_est: RigidTransform,
    obs_depth,
    tau,
    delta=VSD_OCCLUSION_DELTA,
) -> float:
    """Visible-surface depth discrepancy in [0, 1].

    Visibility at each pose: rendered pixels not occluded by the observed
    scene (render within delta of, or in front of, the observed depth;
    unobserved pixels cannot prove occlusion and count as visible).
    Error = 1 - |{visible in both, depth gap < tau}| / |visible in either|.

    :raises EmptyRender: if either pose renders nothing.
    """
    return float(vsd_profile(mesh_metric, k, t_gt, t_est, obs_depth, [tau], delta)[0])


def mssd(
    mesh_metric: TriangleMesh,
    symmetries: SymmetrySet,
    t_gt: RigidTransform,
    t_est: RigidTransform,
) -> float:
    """Max surface distance, minimized over the object symmetries."""
    pts = _points(model_points_for_metrics(mesh_metric))
    est = t_est.apply(pts)
    best = np.inf
    for sym in symmetries.transforms:
        gt = t_gt.apply(sym.apply(pts))
        best = min(best, float(np.linalg.norm(est - gt, axis=1).max()))
    return best


def _project_checked(k, pts):
    if np.any(pts[:, 2] <= 0):
        raise BehindCamera("vertex projects with non-positive depth")
    uv = np.empty((len(pts), 2))
    uv[:, 0] = k.fx * pts[:, 0] / pts[:, 2] + k.cx
    uv[:, 1] = k.fy * pts[:, 1] / pts[:, 2] + k.cy
    return uv


def mspd(
    mesh_metric: TriangleMesh,
    symmetries: SymmetrySet,
    k: CameraIntrinsics,
    t_gt: RigidTransform,
    t_est: RigidTransform,
) -> float:
    """Max projection distance in pixels, minimized over symmetries.

    :raises BehindCamera: if any vertex lands at non-positive depth.
    """
    pts = _points(model_points_for_metrics(mesh_metric))
    est_px = _project_checked(k, t_est.apply(pts))
    best = np.inf
    for sym in symmetries.transforms:
        gt_px = _project_checked(k, t_gt.apply(sym.apply(pts)))
        best = min(best, float(np.linalg.norm(est_px - gt_px, axis=1).max()))
    return best


def vsd_tau_grid(diameter_m):
    """The BOP tau grid: 0.05d .. 0.5d in steps of 0.05d."""
    return 0.05 * diameter_m * np.arange(1, 11)


def bop_average_recall(vsd_errors, mssd_errors, mspd_errors, diameter_m, image_diagonal_px):
    """Recall of each BOP error over its threshold grid, plus their mean.

    :param vsd_errors: (n, 10) array, one column per tau in vsd_tau_grid.
    :param mssd_errors: (n,) array of meters.
    :param mspd_errors: (n,) array of pixels.
    :return: dict with vsd_recall, mssd_recall, mspd_recall, ar.
    """
    vsd_e = np.atleast_2d(np.asarray(vsd_errors, dtype=np.float64))
    if vsd_e.shape[1] != 10:
        raise ValueError("vsd_errors must have one column per tau (10)")
    theta = 0.05 * np.arange(1, 11)
    vsd_recall = float(np.mean(vsd_e[:, :, None] < theta[None, None, :]))

    mssd_e = np.asarray(mssd_errors, dtype=np.float64)
    mssd_thresholds = 0.05 * diameter_m * np.arange(1, 11)
    mssd_recall = float(np.mean(mssd_e[:, None] < mssd_thresholds[None, :]))

    r = image_diagonal_px / 640.0
    mspd_e = np.asarray(mspd_errors, dtype=np.float64)
    mspd_thresholds = 5.0 * r * np.arange(1, 11)
    mspd_recall = float(np.mean(mspd_e[:, None] < mspd_thresholds[None, :]))

    ar = (vsd_recall + mssd_recall + mspd_recall) / 3.0
    return {
        "vsd_recall": vsd_recall,
        "mssd_recall": mssd_recall,
        "mspd_recall": mspd_recall,
        "ar": ar,
    }


def chamfer(a, b) -> float:
    """Symmetric mean nearest-neighbor distance between two clouds."""
    pa = _points(a)
    pb = _points(b)
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


def diameter(mesh_or_points) -> float:
    """Largest pairwise vertex distance.

    Exact for small vertex counts; reduced to the convex hull first for
    large ones (the diameter is attained on the hull).
    """
    if isinstance(mesh_or_points, TriangleMesh):
        pts = mesh_or_points.vertices
    else:
        pts = np.asarray(mesh_or_points, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 2:
        raise EmptyModel("diameter needs at least two vertices")
    if len(pts) > MAX_EXACT_DIAMETER_VERTICES:
        pts = pts[ConvexHull(pts).vertices]
    best = 0.0
    # Pairwise in blocks to bound memory on the largest allowed inputs.
    for i in range(0, len(pts), 1024):
        block = pts[i : i + 1024]
        d = np.linalg.norm(block[:, None, :] - pts[None, :, :], axis=2)
        best = max(best, float(d.max()))
    return best


def _summary_row(rows):
    summary = {"scene": "summary", "image": "", "obj": ""}
    for col in REPORT_COLUMNS[3:]:
        summary[col] = float(np.mean([row[col] for row in rows])) if rows else 0.0
    return summary


def write_report_csv(rows, path):
    """One CSV row per (scene, image, obj) plus a trailing summary row."""
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
            writer.writeheader()
            for row in rows:
                writer.writerow({col: row[col] for col in REPORT_COLUMNS})
            writer.writerow(_summary_row(rows))
    except OSError as exc:
        raise IoFailure("cannot write report to %s: %s" % (path, exc)) from exc


def write_report_json(rows, path):
    """JSON mirror of the CSV report."""
    rec = {
        "columns": list(REPORT_COLUMNS),
        "rows": [{col: row[col] for col in REPORT_COLUMNS} for row in rows],
        "summary": _summary_row(rows),
    }
    try:
        with open(path, "w") as fh:
            json.dump(rec, fh, indent=2)
    except OSError as exc:
        raise IoFailure("cannot write report to %s: %s" % (path, exc)) from exc
