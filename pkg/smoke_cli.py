import json
import os
import shutil
import sys
import time

import numpy as np

from metric_align import cli, fixtures
from metric_align.geometry import (
    RigidTransform,
    relative_pose,
    so3_geodesic_distance,
)

root = "/tmp/smoke_cli"
shutil.rmtree(root, ignore_errors=True)
os.makedirs(root)

t0 = time.time()
fix = os.path.join(root, "fixture")
gt = fixtures.make_pipeline_fixture(fix)
print("fixture built in %.1fs" % (time.time() - t0))
print("fixture entries:", sorted(os.listdir(fix)))

mesh = os.path.join(fix, "mesh.obj")
anchor = os.path.join(fix, "anchor")
query = os.path.join(fix, "query")

tpl = os.path.join(root, "templates")
t0 = time.time()
rc = cli.main(["templates", "--mesh", mesh, "--out", tpl, "--count", "42", "--fill", "0.6"])
print("templates rc=%d %.1fs" % (rc, time.time() - t0))
assert rc == 0
assert os.path.exists(os.path.join(tpl, "run_config.json"))
assert os.path.exists(os.path.join(tpl, "templates.json"))

aln = os.path.join(root, "align")
t0 = time.time()
rc = cli.main(["align", "--mesh", mesh, "--anchor", anchor, "--templates", tpl, "--out", aln])
print("align rc=%d %.1fs" % (rc, time.time() - t0))
assert rc == 0
rec = json.load(open(os.path.join(aln, "alignment.json")))
print("  scale=%.6f (gt %.6f), converged=%s, iters=%d"
      % (rec["scale"], gt["scale"], rec["converged"], rec["iterations"]))

pose_dir = os.path.join(root, "pose")
t0 = time.time()
rc = cli.main(["pose", "--mesh", os.path.join(aln, "metric_mesh.obj"),
               "--query", query, "--out", pose_dir])
print("pose rc=%d %.1fs" % (rc, time.time() - t0))
assert rc == 0

rel_dir = os.path.join(root, "relpose")
rc = cli.main(["relpose",
               "--anchor-pose", os.path.join(aln, "alignment.json"),
               "--query-pose", os.path.join(pose_dir, "pose.json"),
               "--out", rel_dir])
print("relpose rc=%d" % rc)
assert rc == 0

rel = fixtures.load_pose(os.path.join(rel_dir, "relative_pose.json"))
gt_anchor = fixtures.pose_from_dict(gt["anchor_pose"])
gt_query = fixtures.pose_from_dict(gt["query_pose"])
gt_rel = relative_pose(gt_anchor, gt_query)
rot_err = np.degrees(so3_geodesic_distance(rel, gt_rel))
t_err = np.linalg.norm(rel.translation - gt_rel.translation)
print("relative pose error: %.4f deg, %.3f mm" % (rot_err, t_err * 1000))
assert rot_err < 1.0 and t_err < 0.005, (rot_err, t_err)

ev = os.path.join(root, "eval")
t0 = time.time()
rc = cli.main(["eval", "--dataset", os.path.join(fix, "dataset"),
               "--estimates", os.path.join(fix, "gt_estimates.csv"),
               "--out", ev])
print("eval rc=%d %.1fs" % (rc, time.time() - t0))
assert rc == 0
report = json.load(open(os.path.join(ev, "report.json")))
print("  eval rows=%d summary ar=%.4f" % (len(report["rows"]), report["summary"]["ar"]))
assert report["summary"]["ar"] == 1.0, report["summary"]

st = os.path.join(root, "stats")
rc = cli.main(["stats", "--dataset", os.path.join(fix, "dataset"), "--out", st])
print("stats rc=%d files=%s" % (rc, sorted(os.listdir(st))))
assert rc == 0

gen = os.path.join(root, "gen")
cfgf = os.path.join(root, "gen_cfg.json")
json.dump({"target_count": 1, "occluder_count": 1, "camera_count": 2,
           "image_width": 160, "image_height": 120, "focal_length": 140.0,
           "distance_range": [0.4, 0.9], "rng_seed": 5},
          open(cfgf, "w"))
t0 = time.time()
rc = cli.main(["gen", "--out", gen, "--scenes", "1", "--config", cfgf])
print("gen rc=%d %.1fs entries=%s" % (rc, time.time() - t0, sorted(os.listdir(gen))))
assert rc == 0

# exit-code checks
rc = cli.main(["align", "--mesh", "/nonexistent.obj", "--anchor", anchor,
               "--templates", tpl, "--out", os.path.join(root, "x1")])
print("missing mesh rc=%d" % rc)
assert rc == 2
bad_csv = os.path.join(root, "bad.csv")
open(bad_csv, "w").write("scene,image\nfoo,1\n")
rc = cli.main(["eval", "--dataset", os.path.join(fix, "dataset"),
               "--estimates", bad_csv, "--out", os.path.join(root, "x2")])
print("malformed estimates rc=%d" % rc)
assert rc == 5
rc = cli.main(["gen", "--out", os.path.join(root, "x3"), "--scenes", "1",
               "--config", cfgf, "--targets", "500"])
print("impossible packing rc=%d" % rc)
assert rc == 4

print("ALL SMOKE CHECKS PASSED")
