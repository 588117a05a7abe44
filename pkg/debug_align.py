import os
import shutil
import time

import numpy as np

from metric_align import fixtures
from metric_align.alignment import (
    FineConfig,
    coarse_align,
    fine_align,
    refine_step_icp,
)
from metric_align.geometry import RigidTransform, so3_geodesic_distance
from metric_align.matching import MatcherConfig, match_view
from metric_align.mesh import load_mesh
from metric_align.raster import render_templates, sample_viewpoints, template_radius

root = "/tmp/dbg_align"
shutil.rmtree(root, ignore_errors=True)
gt = fixtures.make_pipeline_fixture(root)

mesh = load_mesh(os.path.join(root, "mesh.obj"), frame="normalized")
obs = fixtures.load_observation(os.path.join(root, "anchor"))
k = obs.intrinsics

views = sample_viewpoints(42, template_radius(mesh, k, 0.6))
templates = render_templates(mesh, k, views)

cfg = MatcherConfig(max_matches=1200, rng_seed=0)
matcher = lambda t, o: match_view(t, o, cfg)

gt_pose = fixtures.pose_from_dict(gt["anchor_pose"])

t0 = time.time()
coarse = coarse_align(mesh, obs, templates, matcher)
print("coarse %.1fs: scale %.4f (gt %.4f, rel err %.3f)"
      % (time.time() - t0, coarse.pose.scale, gt["scale"],
         abs(coarse.pose.scale - gt["scale"]) / gt["scale"]))
rot = np.degrees(so3_geodesic_distance(coarse.pose.pose, gt_pose))
dt = np.linalg.norm(coarse.pose.pose.translation - gt_pose.translation)
print("coarse pose err: %.1f deg, %.1f mm" % (rot, dt * 1000))

t0 = time.time()
fine = fine_align(mesh, obs, coarse, refine_step_icp, matcher, templates,
                  FineConfig(max_iterations=30))
print("fine %.1fs: converged=%s iters=%d scale %.5f"
      % (time.time() - t0, fine.converged, fine.iterations, fine.pose.scale))
rot = np.degrees(so3_geodesic_distance(fine.pose.pose, gt_pose))
dt = np.linalg.norm(fine.pose.pose.translation - gt_pose.translation)
print("fine pose err: %.3f deg, %.2f mm, scale rel err %.5f"
      % (rot, dt * 1000, abs(fine.pose.scale - gt["scale"]) / gt["scale"]))
for i, step in enumerate(fine.trace):
    print(
        "  it %2d  |dr| %7.4f deg  |dt| %6.2f mm  ds %.5f  cons %.3f"
        % (
            i,
            np.degrees(np.linalg.norm(step.delta_rotation)),
            np.linalg.norm(step.delta_translation) * 1000,
            step.delta_scale,
            fine.iteration_scores[i],
        )
    )
