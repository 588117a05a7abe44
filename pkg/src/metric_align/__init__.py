"""Metric-scale one-shot pose alignment toolkit.

Coarse-to-fine alignment of a normalized mesh to a single RGB-D view
(joint 6D pose + scale), query-view pose estimation by
render-compare-select, BOP-style evaluation metrics, and a synthetic
scene generator.
"""

from .geometry import (
    CameraIntrinsics,
    Correspondence2D3D,
    PointCloud,
    RigidTransform,
    ScaledModelPose,
    apply_similarity,
    backproject,
    chain_object_pose,
    compose,
    estimate_scale,
    invert,
    project,
    relative_pose,
    so3_geodesic_distance,
)

__all__ = [
    "CameraIntrinsics",
    "Correspondence2D3D",
    "PointCloud",
    "RigidTransform",
    "ScaledModelPose",
    "apply_similarity",
    "backproject",
    "chain_object_pose",
    "compose",
    "estimate_scale",
    "invert",
    "project",
    "relative_pose",
    "so3_geodesic_distance",
]

__version__ = "0.1.0"
