import itertools

import numpy as np
from scipy.spatial.transform import Rotation

from metric_align import fixtures, matching
from metric_align.matching import MatcherConfig, match_view, _depth_keypoints
from metric_align.raster import Observation, rasterize, render_templates, sample_viewpoints, template_radius
from metric_align.geometry import RigidTransform, so3_geodesic_distance, project
from metric_align.alignment import lift_template_pixels

mesh = fixtures.fixture_mesh()
k = fixtures.fixture_intrinsics()
views = sample_viewpoints(42, template_radius(mesh, k, 0.6))

scale = 0.31
d = scale * 2.0 * k.fx / (0.8 * k.height)
rot = Rotation.from_rotvec([0.2, -0.3, 0.15]).as_matrix()
pose = RigidTransform(rot, np.array([0.01, -0.02, d]))
depth, mask = rasterize(mesh.scaled(scale), k, pose)
depth_q = np.round(depth * 10000.0) / 10000.0
obs = Observation(depth=depth_q, mask=mask, intrinsics=k)
cfg = MatcherConfig(max_matches=1200, rng_seed=0)

for floor_mult, win_div in itertools.product((1.5, 1.25, 1.0), (2.0, 3.0)):
    matching._FLOOR_MULT = floor_mult
    matching._WIN_DIV = win_div
    # monkeypatch via source constants requires edit; instead inline redefine
    src = _depth_keypoints.__code__
    # simpler: temporarily patch module-level constants used in a param'd copy
    def kp(depthm, maskm, limit=600, fm=floor_mult, wd=win_div):
        from scipy import ndimage
        area = int(maskm.sum())
        if area == 0:
            return np.zeros((0, 2)), np.zeros(0), 0.0
        r_mask = np.sqrt(area / np.pi)
        r_patch = max(2.0, 0.22 * r_mask)
        interior = ndimage.distance_transform_edt(maskm) > np.sqrt(2.0) * r_patch + 2.0
        if not interior.any():
            return np.zeros((0, 2)), np.zeros(0), r_mask
        _, (iv, iu) = ndimage.distance_transform_edt(~maskm, return_indices=True)
        filled = depthm[iv, iu]
        pts_all, rad_all, mag_all = [], [], []
        for frac in (0.5, 1.0):
            radius = frac * r_patch
            sigma = max(1.0, radius / 4.0)
            resp = ndimage.gaussian_filter(filled, sigma)
            resp -= ndimage.gaussian_filter(filled, 2.0 * sigma)
            resp[~interior] = 0.0
            mag = np.abs(resp)
            window = max(5, int(radius / wd) | 1)
            peak = (resp == ndimage.maximum_filter(resp, size=window)) | (
                resp == ndimage.minimum_filter(resp, size=window))
            floor = max(fm * float(np.median(mag[interior])), 1e-7)
            peak &= mag > floor
            vs, us = np.nonzero(peak)
            if len(vs) == 0:
                continue
            pts_all.append(np.stack([us, vs], axis=1).astype(np.float64))
            rad_all.append(np.full(len(vs), radius))
            mag_all.append(mag[vs, us])
        if not pts_all:
            return np.zeros((0, 2)), np.zeros(0), r_mask
        pts = np.concatenate(pts_all)
        radii = np.concatenate(rad_all)
        mag = np.concatenate(mag_all)
        order = np.lexsort((radii, pts[:, 0], pts[:, 1], -mag))[:limit]
        return pts[order], radii[order], r_mask

    matching._depth_keypoints = kp
    templates = render_templates(mesh, k, views)
    okp, _, _ = kp(obs.depth, np.asarray(obs.mask))
    scores = []
    for t in templates:
        scores.append(match_view(t, obs, cfg).score)
    top = list(np.argsort(scores)[::-1][:4])
    # correctness of best near-GT view matches (view 41 is closest)
    m = match_view(templates[41], obs, cfg)
    good = 0
    if m.score:
        mp, ok = lift_template_pixels(templates[41], m.template_pixels, k)
        pred = project(k, pose.apply(scale * mp[ok]))
        err = np.linalg.norm(pred - m.observation_pixels[ok], axis=1)
        good = int((err < 4.0).sum())
    print("floor %.2f win/%.0f: obs kp %3d | top %s %s | view41 pairs %d correct %d"
          % (floor_mult, win_div, len(okp), [int(t) for t in top],
             [scores[t] for t in top], m.score, good))
