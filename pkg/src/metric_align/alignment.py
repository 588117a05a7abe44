"""Coarse-to-fine metric alignment of a normalized model to one RGB-D view.

Coarse stage: match the best template view, lift matched template pixels
to model-frame 3D, solve PnP (pose up to scale), then recover metric
scale in closed form from lifted observation depth. Fine stage:
alternate one incremental rigid update (point-to-plane ICP on rendered
vs observed depth) with a multiplicative scale re-fit; the running scale
is the product of the per-iteration factors. Query poses for a metric
model come from render-compare-select over a small hypothesis pool.
"""

import json
from dataclasses import dataclass, field, replace

import cv2
import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    AllEmpty,
    EmptyRender,
    InsufficientOverlap,
    IoFailure,
    NoConsensus,
    NoCovisibleSurface,
    NoHypothesis,
    NonPositiveScale,
    TooFewCorrespondences,
)
from .geometry import (
    CameraIntrinsics,
    Correspondence2D3D,
    RigidTransform,
    ScaledModelPose,
    backproject,
    estimate_scale,
    invert,
    rotvec_to_matrix,
)
from .matching import MIN_USABLE_PAIRS, MatchSet, select_best_view
from .mesh import TriangleMesh
from .raster import Observation, TemplateView, rasterize


@dataclass(frozen=True)
class PnpConfig:
    reproj_threshold: float = 3.0
    max_iterations: int = 500
    confidence: float = 0.999
    min_inliers: int = 6
    rng_seed: int = 0


@dataclass(frozen=True)
class CoarseConfig:
    pnp: PnpConfig = PnpConfig()
    min_pairs: int = MIN_USABLE_PAIRS
    candidate_views: int = 5
    tau: float = 0.02
    accept_consistency: float = 0.5
    fallback_steps: int = 5


@dataclass(frozen=True)
class RefineConfig:
    min_overlap: int = 100
    max_points: int = 4000
    trim_multiplier: float = 6.0
    gate_floor_scale: float = 0.02
    normal_dot_min: float = 0.866
    damping_scale: float = 0.5
    damping_min: float = 0.002
    damping_max: float = 0.05
    estimate_scale: bool = True
    max_log_scale_step: float = 0.1


@dataclass(frozen=True)
class FineConfig:
    max_iterations: int = 10
    rot_tol_deg: float = 0.05
    trans_tol_m: float = 5e-4
    scale_tol: float = 1e-3
    reselect_interval: int = 3
    scale_updates: bool = True
    min_pairs: int = MIN_USABLE_PAIRS


@dataclass(frozen=True)
class QueryConfig:
    hypothesis_count: int = 5
    tau: float = 0.02
    refine_iterations: int = 10
    min_pairs: int = MIN_USABLE_PAIRS
    pnp: PnpConfig = PnpConfig()


@dataclass(frozen=True)
class CoarseResult:
    pose: ScaledModelPose
    selected_view: int
    inlier_pairs: tuple

    def __post_init__(self):
        object.__setattr__(self, "inlier_pairs", tuple(self.inlier_pairs))
        if len(self.inlier_pairs) < 4:
            raise ValueError("coarse alignment needs at least 4 inliers")


@dataclass(frozen=True)
class RefineStep:
    delta_rotation: np.ndarray
    delta_translation: np.ndarray
    delta_scale: float = 1.0

    def __post_init__(self):
        dr = np.asarray(self.delta_rotation, dtype=np.float64).reshape(3)
        dt = np.asarray(self.delta_translation, dtype=np.float64).reshape(3)
        if np.linalg.norm(dr) > np.pi + 1e-12:
            raise ValueError("rotation step exceeds pi")
        if not self.delta_scale > 0:
            raise ValueError("delta_scale must be positive")
        dr.setflags(write=False)
        dt.setflags(write=False)
        object.__setattr__(self, "delta_rotation", dr)
        object.__setattr__(self, "delta_translation", dt)


@dataclass(frozen=True)
class AlignmentResult:
    pose: ScaledModelPose
    cumulative_scale: float
    iterations: int
    converged: bool
    trace: tuple
    iteration_scores: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "trace", tuple(self.trace))
        object.__setattr__(self, "iteration_scores", tuple(self.iteration_scores))
        if self.iterations != len(self.trace):
            raise ValueError("trace length must equal iteration count")


@dataclass(frozen=True)
class HypothesisScore:
    hypothesis: RigidTransform
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError("score must lie in [0, 1]")


def lift_template_pixels(template: TemplateView, pixels, k: CameraIntrinsics):
    """Template pixels -> model-frame 3D points (normalized units).

    :return: (points, valid) where valid flags pixels that carried depth.
    """
    px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    ui = np.clip(np.rint(px[:, 0]).astype(np.int64), 0, k.width - 1)
    vi = np.clip(np.rint(px[:, 1]).astype(np.int64), 0, k.height - 1)
    d = template.depth[vi, ui]
    valid = d > 0
    pts = np.zeros((len(px), 3))
    if valid.any():
        cam = backproject(k, px[valid], d[valid])
        pts[valid] = invert(template.camera_from_object).apply(cam) / template.model_scale
    return pts, valid


def lift_observation_pixels(obs: Observation, pixels):
    """Observation pixels -> camera-frame 3D points via the depth map.

    Depth is interpolated bilinearly where the whole 2x2 neighborhood is
    masked and depth-continuous (sub-pixel accuracy matters for the
    closed-form scale), with nearest-pixel fallback elsewhere.

    :return: (points, valid, smooth); valid requires the rounded pixel to
        carry masked depth, smooth flags pixels that interpolated cleanly
        (lookups on grazing or occlusion-edge surfaces are unreliable).
    """
    k = obs.intrinsics
    px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    ui = np.clip(np.rint(px[:, 0]).astype(np.int64), 0, k.width - 1)
    vi = np.clip(np.rint(px[:, 1]).astype(np.int64), 0, k.height - 1)
    valid = obs.mask[vi, ui] & (obs.depth[vi, ui] > 0)
    d = obs.depth[vi, ui]

    u0 = np.clip(np.floor(px[:, 0]).astype(np.int64), 0, k.width - 2)
    v0 = np.clip(np.floor(px[:, 1]).astype(np.int64), 0, k.height - 2)
    fu = np.clip(px[:, 0] - u0, 0.0, 1.0)
    fv = np.clip(px[:, 1] - v0, 0.0, 1.0)
    m = obs.mask
    dd = obs.depth
    stack = np.stack(
        [dd[v0, u0], dd[v0, u0 + 1], dd[v0 + 1, u0], dd[v0 + 1, u0 + 1]]
    )
    # Interpolating across a self-occlusion edge would blend unrelated
    # surfaces, so require the 2x2 cell to be masked and depth-continuous.
    corners_ok = (
        m[v0, u0]
        & m[v0, u0 + 1]
        & m[v0 + 1, u0]
        & m[v0 + 1, u0 + 1]
        & (stack.max(axis=0) - stack.min(axis=0) < 0.01 * stack.min(axis=0))
    )
    d_bil = (
        (1 - fu) * (1 - fv) * stack[0]
        + fu * (1 - fv) * stack[1]
        + (1 - fu) * fv * stack[2]
        + fu * fv * stack[3]
    )
    d = np.where(corners_ok, d_bil, d)

    pts = np.zeros((len(px), 3))
    if valid.any():
        pts[valid] = backproject(k, px[valid], d[valid])
    return pts, valid, corners_ok & valid


def _reproj_errors(rotation, tvec, obj, img, k):
    cam = obj @ rotation.T + tvec
    err = np.full(len(obj), np.inf)
    front = cam[:, 2] > 1e-9
    if front.any():
        z = cam[front, 2]
        du = k.fx * cam[front, 0] / z + k.cx - img[front, 0]
        dv = k.fy * cam[front, 1] / z + k.cy - img[front, 1]
        err[front] = np.hypot(du, dv)
    return err


def pnp_ransac(corrs, k: CameraIntrinsics, cfg: PnpConfig = PnpConfig()):
    """Seeded RANSAC around an EPnP minimal solver, then LM refinement.

    :param corrs: Correspondence2D3D list (observation pixel, model point).
    :return: (camera-from-model RigidTransform, inlier index array).
    :raises TooFewCorrespondences: with fewer than 4 pairs.
    :raises NoConsensus: if the best support stays below min_inliers.
    """
    n = len(corrs)
    if n < 4:
        raise TooFewCorrespondences("PnP needs at least 4 correspondences, got %d" % n)
    obj = np.ascontiguousarray([c.point for c in corrs], dtype=np.float64)
    img = np.ascontiguousarray([c.pixel for c in corrs], dtype=np.float64)
    kmat = k.matrix()
    rng = np.random.default_rng(cfg.rng_seed)
    floor = max(4, cfg.min_inliers)

    best_count = 0
    best_rt = None
    limit = cfg.max_iterations
    it = 0
    while it < limit:
        it += 1
        sample = rng.choice(n, size=4, replace=False)
        try:
            ok, rvec, tvec = cv2.solvePnP(
                obj[sample], img[sample], kmat, None, flags=cv2.SOLVEPNP_EPNP
            )
        except cv2.error:
            continue
        if not ok or not np.all(np.isfinite(rvec)) or not np.all(np.isfinite(tvec)):
            continue
        rot = cv2.Rodrigues(rvec)[0]
        err = _reproj_errors(rot, tvec.ravel(), obj, img, k)
        count = int(np.sum(err < cfg.reproj_threshold))
        if count > best_count:
            best_count = count
            best_rt = (rvec.copy(), tvec.copy())
            w = count / n
            if w >= 1.0:
                break
            # Standard adaptive stop: enough draws that an all-inlier
            # 4-sample was seen with the configured confidence.
            needed = np.log(1.0 - cfg.confidence) / np.log(1.0 - w**4)
            limit = min(limit, it + int(np.ceil(needed)))
    if best_count < floor:
        raise NoConsensus("best support %d below %d" % (best_count, floor))

    rvec, tvec = best_rt
    for _ in range(2):
        rot = cv2.Rodrigues(rvec)[0]
        err = _reproj_errors(rot, tvec.ravel(), obj, img, k)
        inl = np.nonzero(err < cfg.reproj_threshold)[0]
        if len(inl) < floor:
            raise NoConsensus("inlier set collapsed during refinement")
        rvec, tvec = cv2.solvePnPRefineLM(obj[inl], img[inl], kmat, None, rvec, tvec)
    rot = cv2.Rodrigues(rvec)[0]
    err = _reproj_errors(rot, tvec.ravel(), obj, img, k)
    inl = np.nonzero(err < cfg.reproj_threshold)[0]
    if len(inl) < floor:
        raise NoConsensus("inlier set collapsed during refinement")
    return RigidTransform(rot, tvec.ravel()), inl


def _sweep_templates(templates, obs, matcher):
    """Match every template; failures count as empty sets."""
    sets = []
    for i, t in enumerate(templates):
        try:
            m = matcher(t, obs)
        except NoCovisibleSurface:
            m = MatchSet(i, np.zeros((0, 2)), np.zeros((0, 2)))
        else:
            m = replace(m, view_index=i)
        sets.append(m)
    return sets


def _coarse_from_view(obs: Observation, template, match, cfg: CoarseConfig):
    """PnP plus closed-form scale for one matched view."""
    k = obs.intrinsics
    model_pts, ok = lift_template_pixels(template, match.template_pixels, k)
    obs_px = match.observation_pixels[ok]
    model_pts = model_pts[ok]
    if len(model_pts) < cfg.min_pairs:
        raise TooFewCorrespondences("too few template pixels carried depth")

    corrs = [Correspondence2D3D(p, x) for p, x in zip(obs_px, model_pts)]
    pose_n, inl = pnp_ransac(corrs, k, cfg.pnp)

    posed = pose_n.apply(model_pts[inl])
    observed, valid, smooth = lift_observation_pixels(obs, obs_px[inl])
    # Grazing and occlusion-edge pixels lift with millimetre-scale error;
    # prefer the depth-smooth subset for the scale fit when it is large
    # enough to be representative.
    if smooth.sum() >= max(cfg.min_pairs, valid.sum() // 4):
        valid = smooth
    if valid.sum() < 1:
        raise TooFewCorrespondences("no inlier pixel carries observed depth")
    posed, observed = posed[valid], observed[valid]
    # Self-occluded pairs pass the 2D reprojection check but lift onto a
    # nearer surface; trim per-pair scale ratios around the median before
    # the closed-form fit.
    ratio = np.sum(posed * observed, axis=1) / np.sum(posed * posed, axis=1)
    keep = np.ones(len(ratio), dtype=bool)
    for mult in (6.0, 4.0):
        med = float(np.median(ratio[keep]))
        mad = float(np.median(np.abs(ratio[keep] - med)))
        keep &= np.abs(ratio - med) <= max(mult * mad, 2e-3 * abs(med))
    alpha = estimate_scale(posed[keep], observed[keep])
    pose = ScaledModelPose(
        alpha, RigidTransform(pose_n.rotation, alpha * pose_n.translation)
    )
    return CoarseResult(pose, match.view_index, [corrs[j] for j in inl])


def _view_correspondences(obs: Observation, template, match):
    """The raw lifted pairs backing one matched view."""
    model_pts, ok = lift_template_pixels(template, match.template_pixels, obs.intrinsics)
    return [
        Correspondence2D3D(p, x)
        for p, x in zip(match.observation_pixels[ok], model_pts[ok])
    ]


def _template_hypothesis(mesh_normalized, obs: Observation, template):
    """Similarity pose from one template without correspondences.

    Rotation is the template's own; scale comes from the mask-area
    ratio and translation from the observed mask centroid ray, both in
    closed form. Solving r_o (z_med + s delta) / (r_t d_t) = s for s
    accounts for the surface median sitting delta in front of the model
    center. Returns None when the geometry degenerates.
    """
    k = obs.intrinsics
    vs, us = np.nonzero(np.asarray(obs.mask))
    if len(us) == 0:
        return None
    z_med = float(np.median(obs.depth[vs, us]))
    r_obs = np.sqrt(len(us) / np.pi)
    tmask = np.asarray(template.mask)
    area_t = int(tmask.sum())
    if area_t == 0 or z_med <= 0:
        return None
    r_tpl = np.sqrt(area_t / np.pi)
    d_tpl = float(np.linalg.norm(template.camera_from_object.translation))
    delta = d_tpl - float(np.median(template.depth[tmask]))
    denom = r_tpl * d_tpl - r_obs * delta
    if denom <= 1e-9:
        return None
    s = r_obs * z_med / denom
    if not s > 0:
        return None
    z_center = z_med + s * delta
    ray = np.array(
        [(us.mean() - k.cx) / k.fx, (vs.mean() - k.cy) / k.fy, 1.0]
    )
    return ScaledModelPose(
        s, RigidTransform(template.camera_from_object.rotation, z_center * ray)
    )


def _polish_hypothesis(mesh_normalized, obs, hyp: ScaledModelPose, steps):
    """A few similarity refiner steps to settle a closed-form guess."""
    cur = hyp
    for _ in range(steps):
        try:
            step = refine_step_icp(mesh_normalized, obs, cur)
        except (EmptyRender, InsufficientOverlap):
            return cur
        cur = ScaledModelPose(
            cur.scale * step.delta_scale,
            RigidTransform(
                rotvec_to_matrix(step.delta_rotation) @ cur.pose.rotation,
                cur.pose.translation + step.delta_translation,
            ),
        )
    return cur


def _consistency_of(mesh_normalized, obs, pose: ScaledModelPose, tau):
    try:
        depth_r, mask_r = rasterize(
            mesh_normalized.scaled(pose.scale), obs.intrinsics, pose.pose
        )
    except EmptyRender:
        return -1.0
    return _depth_consistency(depth_r, mask_r, obs, tau)


def coarse_align(
    mesh_normalized: TriangleMesh,
    obs: Observation,
    templates,
    matcher,
    cfg: CoarseConfig = CoarseConfig(),
) -> CoarseResult:
    """One-shot similarity estimate from the best-matched views.

    The top-scoring views each get a PnP pose (translation in normalized
    model units) and a closed-form scale alpha against lifted observation
    depth; alpha both sizes the model and converts the translation to
    meters. The candidate similarity poses are re-rendered and ranked by
    depth consistency, since match score alone mis-ranks self-similar
    views. If no candidate renders consistently enough - sparse depth
    matches carry no texture and can fail as a group on smooth objects -
    each candidate view also contributes a correspondence-free
    hypothesis (template rotation, mask-area scale, centroid ray
    translation) that is polished by a few rigid refiner steps before
    joining the same ranking.

    :param matcher: callable (template, observation) -> MatchSet.
    """
    sets = _sweep_templates(templates, obs, matcher)
    best = select_best_view(sets)
    if best.score < cfg.min_pairs:
        raise TooFewCorrespondences(
            "best view has %d pairs, need %d" % (best.score, cfg.min_pairs)
        )
    order = np.lexsort((np.arange(len(sets)), [-s.score for s in sets]))
    candidates = [
        int(i)
        for i in order[: max(cfg.candidate_views, 1)]
        if sets[i].score >= cfg.min_pairs
    ]

    scored = []
    first_error = None
    for i in candidates:
        try:
            result = _coarse_from_view(obs, templates[i], sets[i], cfg)
        except (TooFewCorrespondences, NoConsensus) as exc:
            if first_error is None:
                first_error = exc
            continue
        scored.append((_consistency_of(mesh_normalized, obs, result.pose, cfg.tau), result))

    if not scored or max(s for s, _ in scored) < cfg.accept_consistency:
        for i in candidates:
            hyp = _template_hypothesis(mesh_normalized, obs, templates[i])
            if hyp is None:
                continue
            corrs = _view_correspondences(obs, templates[i], sets[i])
            if len(corrs) < 4:
                continue
            polished = _polish_hypothesis(mesh_normalized, obs, hyp, cfg.fallback_steps)
            scored.append(
                (
                    _consistency_of(mesh_normalized, obs, polished, cfg.tau),
                    CoarseResult(polished, i, corrs),
                )
            )

    usable = [(s, r) for s, r in scored if s >= 0.0]
    if not usable:
        if first_error is not None:
            raise first_error
        raise TooFewCorrespondences("no candidate view produced a pose")
    return max(usable, key=lambda x: x[0])[1]


def _depth_normals(depth, mask, k):
    """Per-pixel unit normals of a masked depth map, camera frame.

    Derived from image-space derivatives of the back-projected point
    map; pixels whose 4-neighborhood leaves the mask are invalid.
    """
    d = depth
    m = mask
    vv, uu = np.mgrid[0 : k.height, 0 : k.width]
    p = np.empty((k.height, k.width, 3))
    p[..., 0] = (uu - k.cx) * d / k.fx
    p[..., 1] = (vv - k.cy) * d / k.fy
    p[..., 2] = d
    du = np.gradient(p, axis=1)
    dv = np.gradient(p, axis=0)
    normal = np.cross(du, dv)
    norm = np.linalg.norm(normal, axis=2)
    interior = m.copy()
    interior[1:] &= m[:-1]
    interior[:-1] &= m[1:]
    interior[:, 1:] &= m[:, :-1]
    interior[:, :-1] &= m[:, 1:]
    valid = interior & (norm > 1e-12)
    normal = np.where(valid[..., None], normal / np.maximum(norm, 1e-12)[..., None], 0.0)
    return normal, valid


def _observed_normals(obs: Observation):
    return _depth_normals(obs.depth, obs.mask, obs.intrinsics)


def refine_step_icp(
    mesh: TriangleMesh,
    obs: Observation,
    current: ScaledModelPose,
    cfg: RefineConfig = RefineConfig(),
) -> RefineStep:
    """One point-to-plane Gauss-Newton step on rendered vs observed depth.

    Rendered surface points are associated to their nearest observed
    points; pairs beyond a robust distance gate or with incompatible
    normals are treated as occlusion or wrong-patch mismatches and
    dropped. The normal equations are damped in proportion to the median
    residual, so far-from-convergence steps stay conservative while the
    endgame is barely damped. With estimate_scale a seventh column
    measures the residual against radial growth about the model origin,
    so the step is a similarity update; a rigid pose at the wrong scale
    is a genuine local minimum of the six-column cost, and only this
    column lets the solver trade the compensating tilt back for size.

    :raises EmptyRender: if the current pose renders nothing.
    :raises InsufficientOverlap: fewer than min_overlap paired pixels, or
        the gates starve the fit.
    """
    k = obs.intrinsics
    depth_r, mask_r = rasterize(mesh.scaled(current.scale), k, current.pose)
    paired = mask_r & obs.mask
    if int(paired.sum()) < cfg.min_overlap:
        raise InsufficientOverlap(
            "only %d paired pixels, need %d" % (int(paired.sum()), cfg.min_overlap)
        )

    normals, n_valid = _observed_normals(obs)
    vs, us = np.nonzero(obs.mask & n_valid)
    p_all = backproject(k, np.stack([us, vs], axis=1).astype(np.float64), obs.depth[vs, us])
    n_all = normals[vs, us]

    rnormals, r_valid = _depth_normals(depth_r, mask_r, k)
    vs, us = np.nonzero(mask_r & r_valid)
    if len(us) == 0 or len(p_all) == 0:
        raise InsufficientOverlap("no surface interior on one side")
    q = backproject(k, np.stack([us, vs], axis=1).astype(np.float64), depth_r[vs, us])
    nq = rnormals[vs, us]
    if len(q) > cfg.max_points:
        stride = int(np.ceil(len(q) / cfg.max_points))
        q, nq = q[::stride], nq[::stride]

    dist, idx = cKDTree(p_all).query(q)
    med = float(np.median(dist))
    r_obj = mesh.bounding_radius() * current.scale
    gate = max(cfg.trim_multiplier * med, cfg.gate_floor_scale * r_obj)
    keep = (dist <= gate) & (np.sum(nq * n_all[idx], axis=1) > cfg.normal_dot_min)
    if int(keep.sum()) < MIN_USABLE_PAIRS:
        raise InsufficientOverlap("gates left %d pairs" % int(keep.sum()))
    q, p, n = q[keep], p_all[idx[keep]], n_all[idx[keep]]

    # Linearize the rotation about the model origin, not the camera: at
    # range z >> object radius the camera-origin lever arm couples omega
    # and dt so strongly that one GN step overshoots by meters. Columns
    # are scaled by the object radius so rotation, translation, and
    # scale are damped on comparable footings.
    c = current.pose.translation
    cols = 7 if cfg.estimate_scale else 6
    a = np.empty((len(q), cols))
    a[:, :3] = np.cross((q - c) / r_obj, n)
    a[:, 3:6] = n
    if cfg.estimate_scale:
        a[:, 6] = np.sum(n * (q - c), axis=1) / r_obj
    b = np.sum(n * (p - q), axis=1)
    ata = a.T @ a
    atb = a.T @ b
    lam = float(np.clip(cfg.damping_scale * med / r_obj, cfg.damping_min, cfg.damping_max))
    x = np.linalg.solve(ata + lam * np.trace(ata) / cols * np.eye(cols), atb)
    omega = x[:3] / r_obj
    ang = np.linalg.norm(omega)
    if ang > np.pi:
        omega = omega * (np.pi / ang)
    ds = 1.0
    if cfg.estimate_scale:
        ds = float(
            np.exp(np.clip(x[6] / r_obj, -cfg.max_log_scale_step, cfg.max_log_scale_step))
        )
    # A rotation about c composed with a shift tau maps the pose to
    # (exp(w) R, exp(w)(t - c) + c + tau); with c equal to the current
    # translation, the update convention R+ = dR R, t+ = t + dt holds
    # with dt = tau directly.
    return RefineStep(delta_rotation=omega, delta_translation=x[3:6], delta_scale=ds)


def _depth_consistency(depth_r, mask_r, obs, tau):
    inter = mask_r & obs.mask
    union = int((mask_r | obs.mask).sum())
    if union == 0:
        return 0.0
    good = int((np.abs(depth_r - obs.depth)[inter] < tau).sum())
    return good / union


def _scale_pairs_from_render(template, obs, matcher, k):
    """Match a current-pose render against the observation and return
    paired camera-frame points (rendered surface, observed surface)."""
    m = matcher(template, obs)
    if m.score == 0:
        return None
    ui = np.clip(np.rint(m.template_pixels[:, 0]).astype(np.int64), 0, k.width - 1)
    vi = np.clip(np.rint(m.template_pixels[:, 1]).astype(np.int64), 0, k.height - 1)
    d = template.depth[vi, ui]
    observed, valid, smooth = lift_observation_pixels(obs, m.observation_pixels)
    if smooth.sum() >= max(MIN_USABLE_PAIRS, valid.sum() // 4):
        valid = smooth
    valid = valid & (d > 0)
    if valid.sum() < 1:
        return None
    rendered = backproject(k, m.template_pixels[valid], d[valid])
    return rendered, observed[valid], m.score


def fine_align(
    mesh_normalized: TriangleMesh,
    obs: Observation,
    coarse: CoarseResult,
    refiner,
    matcher,
    templates,
    cfg: FineConfig = FineConfig(),
) -> AlignmentResult:
    """Iterate incremental similarity refinement to a fixed point.

    Per iteration the refiner proposes (dR, dt, ds), applied as
    R+ = dR R, t+ = t + dt, s+ = s*ds; the running product of the scale
    factors is what sizes the model. Rigid refiners that report ds = 1
    exactly get a fallback scale fit: the pose is re-rendered, matched
    against the observation, and ds re-fitted from centroid-referenced
    point clouds. When that render matching starves, every
    reselect_interval iterations the original template set is swept as
    a pair source of last resort; render pairs are preferred because
    matching a near-converged render is far more precise than matching
    across a template view gap. A rejected or failed scale step records
    ds = 1 and iteration continues; with scale_updates disabled every
    recorded ds is exactly 1.

    :param refiner: callable (mesh, obs, current: ScaledModelPose) -> RefineStep.
    :param matcher: callable (template, observation) -> MatchSet.
    """
    k = obs.intrinsics
    pose = coarse.pose
    cumulative = coarse.pose.scale
    trace = []
    scores = []
    converged = False

    for it in range(cfg.max_iterations):
        step = refiner(mesh_normalized, obs, pose)
        rot = rotvec_to_matrix(step.delta_rotation) @ pose.pose.rotation
        t = pose.pose.translation + step.delta_translation

        ds = float(step.delta_scale) if cfg.scale_updates else 1.0
        score = 0.0
        try:
            depth_r, mask_r = rasterize(
                mesh_normalized.scaled(pose.scale * ds), k, RigidTransform(rot, t)
            )
            score = _depth_consistency(depth_r, mask_r, obs, tau=0.02)
            if cfg.scale_updates and ds == 1.0:
                render_view = TemplateView(
                    camera_from_object=RigidTransform(rot, t),
                    depth=depth_r,
                    mask=mask_r,
                    model_scale=pose.scale,
                )
                pairs = _scale_pairs_from_render(render_view, obs, matcher, k)
                starved = pairs is None or pairs[2] < cfg.min_pairs
                if (
                    starved
                    and cfg.reselect_interval > 0
                    and (it + 1) % cfg.reselect_interval == 0
                ):
                    swept = _sweep_templates(templates, obs, matcher)
                    best = max(swept, key=lambda m: (m.score, -m.view_index))
                    if best.score > (pairs[2] if pairs else 0):
                        model_pts, ok = lift_template_pixels(
                            templates[best.view_index], best.template_pixels, k
                        )
                        observed, ov, osm = lift_observation_pixels(
                            obs, best.observation_pixels
                        )
                        if osm.sum() >= max(cfg.min_pairs, ov.sum() // 4):
                            ov = osm
                        both = ok & ov
                        if both.sum() >= cfg.min_pairs:
                            cur = ScaledModelPose(pose.scale, RigidTransform(rot, t))
                            pairs = (cur.apply(model_pts[both]), observed[both], int(both.sum()))
                if pairs is not None and pairs[2] >= cfg.min_pairs:
                    # Fit the factor on centroid-referenced clouds: the
                    # ratio is then invariant to translation error in the
                    # current estimate, so scale converges independently
                    # of the rigid refiner.
                    ds = estimate_scale(
                        pairs[0] - pairs[0].mean(axis=0),
                        pairs[1] - pairs[1].mean(axis=0),
                    )
        except (EmptyRender, NoCovisibleSurface, NonPositiveScale):
            ds = 1.0

        pose = ScaledModelPose(pose.scale * ds, RigidTransform(rot, t))
        cumulative *= ds
        trace.append(
            RefineStep(step.delta_rotation, step.delta_translation, delta_scale=ds)
        )
        scores.append(score)
        if (
            np.linalg.norm(step.delta_rotation) < np.radians(cfg.rot_tol_deg)
            and np.linalg.norm(step.delta_translation) < cfg.trans_tol_m
            and abs(ds - 1.0) < cfg.scale_tol
        ):
            converged = True
            break

    return AlignmentResult(
        pose=pose,
        cumulative_scale=cumulative,
        iterations=len(trace),
        converged=converged,
        trace=trace,
        iteration_scores=scores,
    )


def score_hypothesis(
    mesh_metric: TriangleMesh,
    obs: Observation,
    hypothesis: RigidTransform,
    tau: float = 0.02,
) -> HypothesisScore:
    """Depth-consistency score: fraction of the rendered/observed union
    where both masks overlap and depths agree within tau.

    :raises EmptyRender: if the hypothesis renders nothing.
    """
    depth_r, mask_r = rasterize(mesh_metric, obs.intrinsics, hypothesis)
    return HypothesisScore(hypothesis, _depth_consistency(depth_r, mask_r, obs, tau))


def estimate_query_pose(
    mesh_metric: TriangleMesh,
    query: Observation,
    templates_metric,
    matcher,
    refiner,
    cfg: QueryConfig = QueryConfig(),
) -> RigidTransform:
    """Query-view pose of a metric model by render-compare-select.

    Hypotheses: the PnP pose from the best-matched view (scale locked to
    1: the model is already metric), plus the top best-matched template
    orientations re-centered on the observed point-cloud centroid. Each
    is refined with the refiner and the depth-consistency argmax wins.

    :raises NoHypothesis: if no hypothesis can be generated or scored.
    """
    k = query.intrinsics
    sets = _sweep_templates(templates_metric, query, matcher)
    hypotheses = []

    try:
        best = select_best_view(sets)
        if best.score >= cfg.min_pairs:
            model_pts, ok = lift_template_pixels(
                templates_metric[best.view_index], best.template_pixels, k
            )
            corrs = [
                Correspondence2D3D(p, x)
                for p, x in zip(best.observation_pixels[ok], model_pts[ok])
            ]
            if len(corrs) >= 4:
                pose_pnp, _ = pnp_ransac(corrs, k, cfg.pnp)
                hypotheses.append(pose_pnp)
    except (AllEmpty, TooFewCorrespondences, NoConsensus):
        pass

    vs, us = np.nonzero(query.mask)
    if len(us):
        cloud = backproject(k, np.stack([us, vs], 1).astype(np.float64), query.depth[vs, us])
        centroid = cloud.mean(axis=0)
        order = np.lexsort((np.arange(len(sets)), [-s.score for s in sets]))
        for idx in order[: cfg.hypothesis_count]:
            if sets[idx].score == 0:
                break
            hypotheses.append(
                RigidTransform(
                    templates_metric[idx].camera_from_object.rotation, centroid
                )
            )
    if not hypotheses:
        raise NoHypothesis("no usable hypothesis source")

    scored = []
    for h in hypotheses:
        cur = ScaledModelPose(1.0, h)
        try:
            for _ in range(cfg.refine_iterations):
                step = refiner(mesh_metric, query, cur)
                cur = ScaledModelPose(
                    1.0,
                    RigidTransform(
                        rotvec_to_matrix(step.delta_rotation) @ cur.pose.rotation,
                        cur.pose.translation + step.delta_translation,
                    ),
                )
                if (
                    np.linalg.norm(step.delta_rotation) < np.radians(0.05)
                    and np.linalg.norm(step.delta_translation) < 5e-4
                ):
                    break
            scored.append(score_hypothesis(mesh_metric, query, cur.pose, cfg.tau))
        except (EmptyRender, InsufficientOverlap):
            continue
    if not scored:
        raise NoHypothesis("every hypothesis failed refinement or scoring")
    best_i = int(np.argmax([h.score for h in scored]))
    return scored[best_i].hypothesis


def dump_trace(result: AlignmentResult, path):
    """Write the per-iteration refinement trace as JSON."""
    rec = {
        "converged": result.converged,
        "iterations": result.iterations,
        "cumulative_scale": result.cumulative_scale,
        "final_scale": result.pose.scale,
        "trace": [
            {
                "delta_rot_deg": float(np.degrees(np.linalg.norm(s.delta_rotation))),
                "delta_t_m": float(np.linalg.norm(s.delta_translation)),
                "delta_s": s.delta_scale,
                "score": score,
            }
            for s, score in zip(result.trace, result.iteration_scores)
        ],
    }
    try:
        with open(path, "w") as fh:
            json.dump(rec, fh, indent=2)
    except OSError as exc:
        raise IoFailure("cannot write trace to %s: %s" % (path, exc)) from exc
