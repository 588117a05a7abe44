import numpy as np
from scipy.spatial.transform import Rotation

from metric_align import fixtures
from metric_align.alignment import lift_template_pixels
from metric_align.geometry import RigidTransform, project
from metric_align.matching import MatcherConfig, match_view
from metric_align.raster import Observation, rasterize, render_templates, sample_viewpoints, template_radius

mesh = fixtures.fixture_mesh()
k = fixtures.fixture_intrinsics()
views = sample_viewpoints(42, template_radius(mesh, k, 0.6))
templates = render_templates(mesh, k, views)

scale = 0.31
d = scale * 2.0 * k.fx / (0.8 * k.height)
rot = Rotation.from_rotvec([0.2, -0.3, 0.15]).as_matrix()
pose = RigidTransform(rot, np.array([0.01, -0.02, d]))
depth, mask = rasterize(mesh.scaled(scale), k, pose)
obs = Observation(depth=np.round(depth * 10000.0) / 10000.0, mask=mask, intrinsics=k)
cfg = MatcherConfig(max_matches=1200, rng_seed=0)

for vi in (41, 38, 14, 37, 7):
    m = match_view(templates[vi], obs, cfg)
    if m.score == 0:
        print("view %2d: no pairs" % vi)
        continue
    mp, ok = lift_template_pixels(templates[vi], m.template_pixels, k)
    pred = project(k, pose.apply(scale * mp[ok]))
    err = np.linalg.norm(pred - m.observation_pixels[ok], axis=1)
    print("view %2d: pairs %3d lifted %3d | <4px %2d <8px %2d | median err %.1f px"
          % (vi, m.score, ok.sum(), (err < 4).sum(), (err < 8).sum(), np.median(err)))
