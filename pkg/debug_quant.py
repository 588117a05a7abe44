import numpy as np

from metric_align import fixtures
from metric_align.matching import MatcherConfig, match_view, _depth_keypoints
from metric_align.raster import Observation, rasterize, render_templates, sample_viewpoints, template_radius
from metric_align.geometry import RigidTransform
from metric_align.mesh import make_blob
from scipy.spatial.transform import Rotation

mesh = fixtures.fixture_mesh()
k = fixtures.fixture_intrinsics()
views = sample_viewpoints(42, template_radius(mesh, k, 0.6))
templates = render_templates(mesh, k, views)

scale = 0.31
d = scale * 2.0 * k.fx / (0.8 * k.height)
rot = Rotation.from_rotvec([0.2, -0.3, 0.15]).as_matrix()
pose = RigidTransform(rot, np.array([0.01, -0.02, d]))
depth, mask = rasterize(mesh.scaled(scale), k, pose)

cfg = MatcherConfig(max_matches=1200, rng_seed=0)
for name, dq in (
    ("float64 ", depth),
    ("0.1mm   ", np.round(depth * 10000.0) / 10000.0),
    ("1mm     ", np.round(depth * 1000.0) / 1000.0),
):
    obs = Observation(depth=dq, mask=mask, intrinsics=k)
    kp, _, _ = _depth_keypoints(obs.depth, np.asarray(obs.mask))
    scores = [match_view(t, obs, cfg).score for t in templates]
    top = np.argsort(scores)[::-1][:3]
    print("%s obs keypoints %4d | top views %s scores %s"
          % (name, len(kp), [int(i) for i in top], [scores[i] for i in top]))
