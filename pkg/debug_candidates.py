import os
import shutil

import numpy as np

from metric_align import fixtures
from metric_align.alignment import (
    CoarseConfig,
    _coarse_from_view,
    _depth_consistency,
    _sweep_templates,
)
from metric_align.errors import NoConsensus, TooFewCorrespondences, EmptyRender
from metric_align.geometry import RigidTransform, so3_geodesic_distance
from metric_align.matching import MatcherConfig, match_view
from metric_align.mesh import load_mesh
from metric_align.raster import rasterize, render_templates, sample_viewpoints, template_radius

root = "/tmp/dbg_cand"
shutil.rmtree(root, ignore_errors=True)
gt = fixtures.make_pipeline_fixture(root)

mesh = load_mesh(os.path.join(root, "mesh.obj"), frame="normalized")
obs = fixtures.load_observation(os.path.join(root, "anchor"))
k = obs.intrinsics
views = sample_viewpoints(42, template_radius(mesh, k, 0.6))
templates = render_templates(mesh, k, views)
cfgm = MatcherConfig(max_matches=1200, rng_seed=0)
matcher = lambda t, o: match_view(t, o, cfgm)
gt_pose = fixtures.pose_from_dict(gt["anchor_pose"])
cfg = CoarseConfig()

sets = _sweep_templates(templates, obs, matcher)
order = np.lexsort((np.arange(len(sets)), [-s.score for s in sets]))
print("gt template (closest view):", end=" ")
angs = [
    np.degrees(so3_geodesic_distance(
        RigidTransform(t.camera_from_object.rotation, np.zeros(3)),
        RigidTransform(gt_pose.rotation, np.zeros(3))))
    for t in templates
]
print("view %d at %.1f deg" % (int(np.argmin(angs)), min(angs)))

for i in order[:10]:
    i = int(i)
    m = sets[i]
    line = "view %2d score %4d gap %.1f deg:" % (i, m.score, angs[i])
    try:
        res = _coarse_from_view(obs, templates[i], m, cfg)
    except (TooFewCorrespondences, NoConsensus) as exc:
        print(line, "FAILED", type(exc).__name__)
        continue
    rot = np.degrees(so3_geodesic_distance(res.pose.pose, gt_pose))
    dt = np.linalg.norm(res.pose.pose.translation - gt_pose.translation)
    try:
        depth_r, mask_r = rasterize(mesh.scaled(res.pose.scale), k, res.pose.pose)
        s02 = _depth_consistency(depth_r, mask_r, obs, 0.02)
        s005 = _depth_consistency(depth_r, mask_r, obs, 0.005)
    except EmptyRender:
        s02 = s005 = -1
    print(line, "pose err %6.1f deg %6.1f mm scale %.4f | cons@20mm %.3f @5mm %.3f"
          % (rot, dt * 1000, res.pose.scale, s02, s005))
