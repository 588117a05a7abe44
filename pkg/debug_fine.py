import numpy as np
from scipy.spatial.transform import Rotation

from metric_align import fixtures
from metric_align.alignment import (
    FineConfig,
    fine_align,
    refine_step_icp,
    CoarseResult,
    _polish_hypothesis,
)
from metric_align.geometry import (
    RigidTransform,
    ScaledModelPose,
    rotation_about_axis,
    so3_geodesic_distance,
)
from metric_align.matching import MatcherConfig, match_view
from metric_align.raster import Observation, rasterize, render_templates, sample_viewpoints, template_radius

mesh = fixtures.fixture_mesh()
k = fixtures.fixture_intrinsics()
views = sample_viewpoints(42, template_radius(mesh, k, 0.6))
templates = render_templates(mesh, k, views)

scale = 0.31
d = scale * 2.0 * k.fx / (0.8 * k.height)
rot = Rotation.from_rotvec([0.2, -0.3, 0.15]).as_matrix()
gt_pose = RigidTransform(rot, np.array([0.01, -0.02, d]))
depth, mask = rasterize(mesh.scaled(scale), k, gt_pose)

cfg = MatcherConfig(max_matches=1200, rng_seed=0)
matcher = lambda t, o: match_view(t, o, cfg)

# perturbed start: 5 deg, 2 cm, x1.03 - inside the nominal basin
axis = np.array([0.3, -0.5, 0.8]); axis /= np.linalg.norm(axis)
start = ScaledModelPose(
    scale * 1.03,
    RigidTransform(
        rotation_about_axis(axis, np.radians(5.0)) @ rot,
        gt_pose.translation + np.array([0.012, -0.009, 0.013]),
    ),
)

def report(label, fine):
    rot_err = np.degrees(so3_geodesic_distance(fine.pose.pose, gt_pose))
    t_err = np.linalg.norm(fine.pose.pose.translation - gt_pose.translation)
    s_err = abs(fine.pose.scale - scale) / scale
    print("%s: conv=%s it=%d | %.3f deg %.2f mm scale %.4f"
          % (label, fine.converged, fine.iterations, rot_err, t_err * 1000, s_err))

for name, dq in (("float64", depth), ("0.1mm", np.round(depth * 1e4) / 1e4)):
    obs = Observation(depth=dq, mask=mask, intrinsics=k)
    coarse = CoarseResult(start, 0, [None] * 4)
    fine = fine_align(mesh, obs, coarse, refine_step_icp, matcher, templates,
                      FineConfig(max_iterations=30))
    report(name + " full   ", fine)
    fine = fine_align(mesh, obs, coarse, refine_step_icp, matcher, templates,
                      FineConfig(max_iterations=30, scale_updates=False))
    report(name + " rigid  ", fine)
    # rigid-only from the true scale
    coarse_ts = CoarseResult(ScaledModelPose(scale, start.pose), 0, [None] * 4)
    fine = fine_align(mesh, obs, coarse_ts, refine_step_icp, matcher, templates,
                      FineConfig(max_iterations=30, scale_updates=False))
    report(name + " rigid@s", fine)
