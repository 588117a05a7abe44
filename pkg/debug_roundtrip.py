import os
import shutil

import numpy as np

from metric_align import fixtures
from metric_align.geometry import RigidTransform, so3_geodesic_distance
from metric_align.mesh import load_mesh
from metric_align.raster import render_templates, sample_viewpoints, template_radius

root = "/tmp/dbg_rt"
shutil.rmtree(root, ignore_errors=True)
os.makedirs(root)

mesh = fixtures.fixture_mesh()
k = fixtures.fixture_intrinsics()

views = sample_viewpoints(8, template_radius(mesh, k, 0.6))
templates = render_templates(mesh, k, views)
fixtures.save_template_bundle(os.path.join(root, "tpl"), templates, k)
loaded, k2 = fixtures.load_template_bundle(os.path.join(root, "tpl"))
print("k equal:", k == k2, "count:", len(loaded))

for i, (a, b) in enumerate(zip(templates, loaded)):
    rot = so3_geodesic_distance(
        RigidTransform(a.camera_from_object.rotation, np.zeros(3)),
        RigidTransform(b.camera_from_object.rotation, np.zeros(3)),
    )
    dt = np.linalg.norm(a.camera_from_object.translation - b.camera_from_object.translation)
    dd = np.abs(a.depth - b.depth)
    mask_eq = np.array_equal(a.mask, b.mask)
    print(
        "view %d: rot %.2e  t %.2e  depth max|diff| %.2e (on mask %.2e)  mask_eq %s  scale %r"
        % (i, rot, dt, dd.max(), dd[a.mask].max() if a.mask.any() else 0.0,
           mask_eq, b.model_scale)
    )

# observation roundtrip
gt = fixtures.make_pipeline_fixture(os.path.join(root, "fix"))
obs = fixtures.load_observation(os.path.join(root, "fix", "anchor"))
d = obs.depth[obs.mask]
print("anchor obs: mask px %d, depth range [%.4f, %.4f], median %.4f"
      % (obs.mask.sum(), d.min(), d.max(), np.median(d)))
print("gt scale %.4f  expected z ~ %.4f" % (gt["scale"], gt["anchor_pose"]["translation"][2]))
