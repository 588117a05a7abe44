"""Correspondence providers between template renders and observations.

Two implementations of one contract: a ground-truth-driven oracle with
controllable noise and outlier injection, and a depth-patch matcher that
needs no learned weights. Both return pixel pairs (template -> observation)
and are deterministic given the config seed.
"""

import json
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import AllEmpty, IoFailure, NoCovisibleSurface
from .geometry import CameraIntrinsics, ScaledModelPose, invert, project
from .raster import Observation, TemplateView

MIN_USABLE_PAIRS = 6


@dataclass(frozen=True)
class MatcherConfig:
    pixel_noise_sigma: float = 0.0
    outlier_fraction: float = 0.0
    max_matches: int = 500
    rng_seed: int = 0
    ratio_test: float = 0.8

    def __post_init__(self):
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise ValueError("outlier_fraction must lie in [0, 1)")
        if self.max_matches < 4:
            raise ValueError("max_matches must be at least 4")
        if self.pixel_noise_sigma < 0:
            raise ValueError("pixel_noise_sigma must be non-negative")
        if not 0.0 < self.ratio_test <= 1.0:
            raise ValueError("ratio_test must lie in (0, 1]")


@dataclass(frozen=True)
class MatchSet:
    """Pixel correspondences from one template view to the observation.

    score is the pair count; empty sets are valid results.
    """

    view_index: int
    template_pixels: np.ndarray
    observation_pixels: np.ndarray

    def __post_init__(self):
        tp = np.asarray(self.template_pixels, dtype=np.float64).reshape(-1, 2)
        op = np.asarray(self.observation_pixels, dtype=np.float64).reshape(-1, 2)
        if len(tp) != len(op):
            raise ValueError("pixel arrays must pair up")
        tp.setflags(write=False)
        op.setflags(write=False)
        object.__setattr__(self, "template_pixels", tp)
        object.__setattr__(self, "observation_pixels", op)

    @property
    def score(self) -> int:
        return len(self.template_pixels)

    @property
    def pairs(self):
        return list(zip(self.template_pixels, self.observation_pixels))


def _lookup_depth(depth, pix):
    """Depth at the nearest pixel; 0 where the lookup leaves the image."""
    h, w = depth.shape
    ui = np.clip(np.rint(pix[:, 0]).astype(np.int64), 0, w - 1)
    vi = np.clip(np.rint(pix[:, 1]).astype(np.int64), 0, h - 1)
    return depth[vi, ui], ui, vi


def oracle_match(
    template: TemplateView,
    obs: Observation,
    gt_obs_pose: ScaledModelPose,
    cfg: MatcherConfig,
) -> MatchSet:
    """Ground-truth-driven matcher for controlled experiments.

    Samples template surface pixels whose lifted points are also visible
    in the observation (projected depth agrees with the observed depth),
    projects them with the true pose, then corrupts: Gaussian pixel noise
    of sigma, and a Bernoulli outlier_fraction of pairs teleported to
    uniform random observation-mask pixels.

    :raises NoCovisibleSurface: if no template surface point is visible
        in the observation.
    """
    k = obs.intrinsics
    rng = np.random.default_rng(cfg.rng_seed)
    vs, us = np.nonzero(template.mask)
    depths = template.depth[vs, us]
    cam_pts = np.stack(
        [
            depths * (us - k.cx) / k.fx,
            depths * (vs - k.cy) / k.fy,
            depths,
        ],
        axis=1,
    )
    model_pts = invert(template.camera_from_object).apply(cam_pts) / template.model_scale

    obs_cam = gt_obs_pose.apply(model_pts)
    in_front = obs_cam[:, 2] > 1e-6
    proj = np.full((len(obs_cam), 2), -1.0)
    proj[in_front] = project(k, obs_cam[in_front])
    inside = (
        in_front
        & (proj[:, 0] >= 0)
        & (proj[:, 0] <= k.width - 1)
        & (proj[:, 1] >= 0)
        & (proj[:, 1] <= k.height - 1)
    )
    seen, ui, vi = _lookup_depth(obs.depth, proj)
    tol = np.maximum(0.01 * obs_cam[:, 2], 0.005)
    covis = inside & obs.mask[vi, ui] & (np.abs(seen - obs_cam[:, 2]) < tol)
    idx = np.nonzero(covis)[0]
    if len(idx) == 0:
        raise NoCovisibleSurface("template and observation share no visible surface")
    if len(idx) > cfg.max_matches:
        idx = idx[np.sort(rng.choice(len(idx), size=cfg.max_matches, replace=False))]

    t_pix = np.stack([us[idx], vs[idx]], axis=1).astype(np.float64)
    o_pix = proj[idx]
    if cfg.pixel_noise_sigma > 0:
        o_pix = o_pix + rng.normal(0.0, cfg.pixel_noise_sigma, size=o_pix.shape)
    if cfg.outlier_fraction > 0:
        bad = rng.random(len(o_pix)) < cfg.outlier_fraction
        if bad.any():
            mv, mu = np.nonzero(obs.mask)
            pick = rng.integers(0, len(mu), size=int(bad.sum()))
            o_pix[bad, 0] = mu[pick]
            o_pix[bad, 1] = mv[pick]
    o_pix[:, 0] = np.clip(o_pix[:, 0], 0, k.width - 1)
    o_pix[:, 1] = np.clip(o_pix[:, 1], 0, k.height - 1)
    return MatchSet(view_index=0, template_pixels=t_pix, observation_pixels=o_pix)


_PATCH_GRID = 7
_PATCH_RADIUS_FRACTION = 0.22
_MAX_KEYPOINTS = 600
_DETECTION_SCALES = (0.5, 1.0)


def _filled_depth(depth, mask):
    """Depth with the background replaced by the nearest surface value,
    so smoothing filters never mix the object with the depth cliff."""
    _, (iv, iu) = ndimage.distance_transform_edt(~mask, return_indices=True)
    return depth[iv, iu]


def _depth_keypoints(depth, mask, limit=_MAX_KEYPOINTS, filled=None):
    """Interior difference-of-Gaussians extrema of the depth map.

    Bumps and dents respond with opposite signs at their centers, which
    stay put under viewpoint change where gradient ridges drift, and the
    band-pass smoothing suppresses sensor quantization steps. Detection
    runs at two scales tied to the mask radius; each keypoint carries
    the patch radius of its scale.

    :return: (n, 2) pixel coordinates, (n,) patch radius in px, mask
        equivalent radius; empty arrays when the surface is featureless.
    """
    area = int(mask.sum())
    if area == 0:
        return np.zeros((0, 2)), np.zeros(0), 0.0
    r_mask = np.sqrt(area / np.pi)
    r_patch = max(2.0, _PATCH_RADIUS_FRACTION * r_mask)
    # Erode by the patch half-diagonal so every descriptor sample of a
    # surviving keypoint lands inside the mask.
    interior = ndimage.distance_transform_edt(mask) > np.sqrt(2.0) * r_patch + 2.0
    if not interior.any():
        return np.zeros((0, 2)), np.zeros(0), r_mask

    if filled is None:
        filled = _filled_depth(depth, mask)
    pts_all, rad_all, mag_all = [], [], []
    for frac in _DETECTION_SCALES:
        radius = frac * r_patch
        sigma = max(1.0, radius / 4.0)
        resp = ndimage.gaussian_filter(filled, sigma)
        resp -= ndimage.gaussian_filter(filled, 2.0 * sigma)
        resp[~interior] = 0.0
        mag = np.abs(resp)
        window = max(5, int(radius / 3.0) | 1)
        peak = (resp == ndimage.maximum_filter(resp, size=window)) | (
            resp == ndimage.minimum_filter(resp, size=window)
        )
        floor = max(1.25 * float(np.median(mag[interior])), 1e-7)
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


def _patch_orientations(filled, pts, radii):
    """Local reference angle per keypoint: the direction of the
    large-scale depth gradient, which rotates with the image and so
    cancels in-plane rotation between views."""
    theta = np.zeros(len(pts))
    coords = np.stack([pts[:, 1], pts[:, 0]])
    for radius in np.unique(radii):
        smooth = ndimage.gaussian_filter(filled, max(1.0, radius / 2.0))
        gy, gx = np.gradient(smooth)
        sel = radii == radius
        gxs = ndimage.map_coordinates(gx, coords[:, sel], order=1, mode="nearest")
        gys = ndimage.map_coordinates(gy, coords[:, sel], order=1, mode="nearest")
        theta[sel] = np.arctan2(gys, gxs)
    return theta


def _describe(depth, mask, pts, radii, focal, filled=None):
    """Scale- and rotation-normalized local depth patches.

    Each patch is bilinearly sampled on a grid of the keypoint's radius
    aligned to the local reference angle, center-depth subtracted, and
    divided by the patch's metric extent, so the descriptor survives
    changes of distance, object scale, and in-plane rotation.
    """
    n = len(pts)
    g = _PATCH_GRID
    lin = np.linspace(-1.0, 1.0, g)
    gx, gy = np.meshgrid(lin, lin)
    offsets = np.stack([gx.ravel(), gy.ravel()], axis=1)

    if filled is None:
        filled = _filled_depth(depth, mask)
    theta = _patch_orientations(filled, pts, radii)
    cos, sin = np.cos(theta)[:, None], np.sin(theta)[:, None]
    off_x = cos * offsets[None, :, 0] - sin * offsets[None, :, 1]
    off_y = sin * offsets[None, :, 0] + cos * offsets[None, :, 1]
    coords_x = pts[:, 0:1] + radii[:, None] * off_x
    coords_y = pts[:, 1:2] + radii[:, None] * off_y
    flat = np.stack([coords_y.ravel(), coords_x.ravel()])
    d = ndimage.map_coordinates(depth, flat, order=1, mode="constant").reshape(n, g * g)
    valid = ndimage.map_coordinates(mask.astype(np.float64), flat, order=1, mode="constant")
    valid = valid.reshape(n, g * g) > 0.999

    center = _lookup_depth(depth, pts)[0]
    keep = valid.all(axis=1) & (center > 0)
    metric_radius = radii * center / focal
    desc = (d - center[:, None]) / np.where(metric_radius > 0, metric_radius, 1.0)[:, None]
    return desc[keep], keep


_FEATURE_CACHE_SLOTS = 96
_feature_cache = OrderedDict()


def _array_key(a):
    a = np.asarray(a)
    probe = np.asarray(a[:: max(a.shape[0] // 12, 1), :: max(a.shape[1] // 12, 1)])
    return (id(a), a.shape, float(probe.astype(np.float64).sum()))


def _compute_features(depth, mask, focal):
    """Keypoints and descriptors, computed on the mask bounding box.

    The pad keeps every smoothing support that an interior keypoint can
    feel inside the crop, so results match full-frame extraction.
    """
    mask = np.asarray(mask)
    vs, us = np.nonzero(mask)
    if len(vs) == 0:
        return np.zeros((0, 2)), np.zeros((0, _PATCH_GRID * _PATCH_GRID))
    r_patch = max(2.0, _PATCH_RADIUS_FRACTION * np.sqrt(len(vs) / np.pi))
    pad = int(2.0 * r_patch) + 2
    v0, v1 = max(int(vs.min()) - pad, 0), min(int(vs.max()) + pad + 1, mask.shape[0])
    u0, u1 = max(int(us.min()) - pad, 0), min(int(us.max()) + pad + 1, mask.shape[1])
    dc, mc = depth[v0:v1, u0:u1], mask[v0:v1, u0:u1]
    filled = _filled_depth(dc, mc)
    pts, radii, _ = _depth_keypoints(dc, mc, filled=filled)
    if len(pts) == 0:
        return np.zeros((0, 2)), np.zeros((0, _PATCH_GRID * _PATCH_GRID))
    desc, keep = _describe(dc, mc, pts, radii, focal, filled=filled)
    return pts[keep] + np.array([u0, v0], dtype=np.float64), desc


def _cached_features(depth, mask, focal):
    key = (_array_key(depth), _array_key(mask), float(focal))
    hit = _feature_cache.get(key)
    if hit is not None:
        _feature_cache.move_to_end(key)
        return hit
    val = _compute_features(depth, mask, focal)
    _feature_cache[key] = val
    if len(_feature_cache) > _FEATURE_CACHE_SLOTS:
        _feature_cache.popitem(last=False)
    return val


def depth_patch_match(template: TemplateView, obs: Observation, cfg: MatcherConfig) -> MatchSet:
    """Learned-free reference matcher over normalized depth patches.

    Keypoints are difference-of-Gaussians depth extrema; descriptors are
    matched by L2 distance under a ratio test and mutual-nearest check.
    Deterministic for identical inputs. Features per (depth, mask) array
    pair are cached, so sweeping many templates against one observation
    only pays the pairing cost per view.
    """
    k = obs.intrinsics
    t_pts, t_desc = _cached_features(template.depth, template.mask, k.fx)
    o_pts, o_desc = _cached_features(obs.depth, obs.mask, k.fx)
    empty = MatchSet(0, np.zeros((0, 2)), np.zeros((0, 2)))
    if len(t_pts) == 0 or len(o_pts) == 0:
        return empty

    d2 = (
        np.sum(t_desc**2, axis=1)[:, None]
        + np.sum(o_desc**2, axis=1)[None, :]
        - 2.0 * t_desc @ o_desc.T
    )
    np.maximum(d2, 0.0, out=d2)
    fwd = np.argmin(d2, axis=1)
    bwd = np.argmin(d2, axis=0)
    rows = np.arange(len(t_pts))
    mutual = bwd[fwd] == rows
    best = d2[rows, fwd]
    if d2.shape[1] >= 2:
        two = np.partition(d2, 1, axis=1)[:, 1]
        ratio_ok = np.sqrt(best) <= cfg.ratio_test * np.sqrt(two)
    else:
        ratio_ok = np.ones(len(t_pts), dtype=bool)
    sel = np.nonzero(mutual & ratio_ok)[0]
    if len(sel) == 0:
        return empty
    order = sel[np.lexsort((sel, best[sel]))][: cfg.max_matches]
    return MatchSet(
        view_index=0,
        template_pixels=t_pts[order],
        observation_pixels=o_pts[fwd[order]],
    )


def match_view(template: TemplateView, obs: Observation, cfg: MatcherConfig) -> MatchSet:
    """Default implementation of the matcher contract (depth patches)."""
    return depth_patch_match(template, obs, cfg)


def select_best_view(matches) -> MatchSet:
    """The MatchSet with the most pairs; ties break to the lowest
    view_index.

    :raises AllEmpty: if every set is empty.
    """
    if not matches:
        raise ValueError("need at least one MatchSet")
    best = max(matches, key=lambda m: (m.score, -m.view_index))
    if best.score == 0:
        raise AllEmpty("no template view produced any match")
    return best


def dump_matches(matches, path):
    """Write MatchSets as JSON lines {view, tu, tv, ou, ov}."""
    if isinstance(matches, MatchSet):
        matches = [matches]
    try:
        with open(path, "w") as fh:
            for m in matches:
                for (tu, tv), (ou, ov) in zip(m.template_pixels, m.observation_pixels):
                    fh.write(
                        json.dumps(
                            {"view": m.view_index, "tu": tu, "tv": tv, "ou": ou, "ov": ov}
                        )
                        + "\n"
                    )
    except OSError as exc:
        raise IoFailure("cannot write matches to %s: %s" % (path, exc)) from exc


def load_matches(path):
    """Inverse of dump_matches; groups lines back into MatchSets."""
    groups = {}
    try:
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                groups.setdefault(int(rec["view"]), []).append(
                    (rec["tu"], rec["tv"], rec["ou"], rec["ov"])
                )
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise IoFailure("cannot read matches from %s: %s" % (path, exc)) from exc
    out = []
    for view in sorted(groups):
        arr = np.array(groups[view], dtype=np.float64).reshape(-1, 4)
        out.append(MatchSet(view, arr[:, :2], arr[:, 2:]))
    return out
