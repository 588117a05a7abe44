"""Software z-buffer rasterizer, spherical viewpoint sampling, template
rendering, and visibility computation.

Depth means distance along the camera z-axis (not ray length). Pixels
are sampled at their centers (integer coordinates); coverage follows the
top-left fill rule so shared edges are hit exactly once. Backface
culling is disabled since meshes are not guaranteed watertight. The
rasterizer is deterministic: identical inputs give bit-identical
buffers.
"""

from dataclasses import dataclass

import numpy as np

from .errors import EmptyRender
from .geometry import CameraIntrinsics, RigidTransform, look_at
from .mesh import TriangleMesh

_NEAR = 1e-6


@dataclass(frozen=True)
class TemplateView:
    """A depth/mask render of the model from one sampled viewpoint.

    model_scale records the uniform scale applied to the model before
    rendering (1.0 for plain template sets; the fine-alignment loop
    re-renders at the current scale estimate).
    """

    camera_from_object: RigidTransform
    depth: np.ndarray
    mask: np.ndarray
    model_scale: float = 1.0


@dataclass(frozen=True)
class Observation:
    """A registered depth frame with a target segmentation mask.

    Mask pixels without valid depth are dropped on construction (hole
    filtering), so masked pixels always carry depth > 0.
    """

    depth: np.ndarray
    mask: np.ndarray
    intrinsics: CameraIntrinsics
    color: np.ndarray = None

    def __post_init__(self):
        depth = np.asarray(self.depth, dtype=np.float64)
        mask = np.asarray(self.mask, dtype=bool)
        if depth.shape != mask.shape:
            raise ValueError("depth and mask dimensions differ")
        if depth.shape != (self.intrinsics.height, self.intrinsics.width):
            raise ValueError("depth dimensions do not match intrinsics")
        if np.any(~np.isfinite(depth)) or np.any(depth < 0):
            raise ValueError("depth must be finite and >= 0")
        mask = mask & (depth > 0)
        depth.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "mask", mask)


def _clip_polygon_near(tri, near):
    """Sutherland-Hodgman clip of one camera-space triangle against
    z = near; returns a list of triangles (fan of the clipped polygon)."""
    out = []
    n = len(tri)
    res = []
    for i in range(n):
        a, b = tri[i], tri[(i + 1) % n]
        a_in, b_in = a[2] > near, b[2] > near
        if a_in:
            res.append(a)
        if a_in != b_in:
            t = (near - a[2]) / (b[2] - a[2])
            res.append(a + t * (b - a))
    for j in range(1, len(res) - 1):
        out.append([res[0], res[j], res[j + 1]])
    return out


def _edge(ax, ay, bx, by, px, py):
    # Signed edge function; > 0 on the interior side for our winding.
    return (py - ay) * (bx - ax) - (px - ax) * (by - ay)


def _top_left(ax, ay, bx, by):
    # Directed edge a->b counts its boundary pixels when it goes up
    # (left edge) or points right horizontally (top edge).
    return (by < ay) | ((by == ay) & (bx > ax))


def _raster_triangles(tris, k: CameraIntrinsics, zbuf):
    """Scatter min-z of the given camera-space triangles into zbuf."""
    h, w = zbuf.shape
    z = tris[:, :, 2]
    u = k.fx * tris[:, :, 0] / z + k.cx
    v = k.fy * tris[:, :, 1] / z + k.cy

    # Normalize winding so the edge functions are >= 0 inside.
    area2 = _edge(u[:, 0], v[:, 0], u[:, 1], v[:, 1], u[:, 2], v[:, 2])
    flip = area2 < 0
    u[flip, 1], u[flip, 2] = u[flip, 2], u[flip, 1]
    v[flip, 1], v[flip, 2] = v[flip, 2], v[flip, 1]
    z[flip, 1], z[flip, 2] = z[flip, 2], z[flip, 1]

    umin, umax = u.min(axis=1), u.max(axis=1)
    vmin, vmax = v.min(axis=1), v.max(axis=1)
    # The depth denominator equals the barycentric sum == 2*area, so
    # sub-1e-6 px^2 slivers are all cancellation noise (and cover a
    # pixel center with probability ~ their area); drop them.
    keep = (np.abs(area2) > 1e-6) & (umin < w) & (umax >= 0) & (vmin < h) & (vmax >= 0)
    if not np.any(keep):
        return
    u, v, z = u[keep], v[keep], z[keep]
    x0 = np.clip(np.ceil(umin[keep]), 0, w - 1).astype(np.int32)
    x1 = np.clip(np.floor(umax[keep]), 0, w - 1).astype(np.int32)
    y0 = np.clip(np.ceil(vmin[keep]), 0, h - 1).astype(np.int32)
    y1 = np.clip(np.floor(vmax[keep]), 0, h - 1).astype(np.int32)
    nx = x1 - x0 + 1
    ny = y1 - y0 + 1
    ok = (nx > 0) & (ny > 0)
    if not np.any(ok):
        return
    u, v, z = u[ok], v[ok], z[ok]
    x0, x1, y0, nx, ny = x0[ok], x1[ok], y0[ok], nx[ok], ny[ok]

    # Edge j runs p -> q opposite vertex j; the edge function anchored at
    # p is w_j(x, y) = ea_j*(x - pu_j) + eb_j*(y - pv_j), >= 0 inside.
    pq = ((1, 2), (2, 0), (0, 1))
    ea = [np.ascontiguousarray(v[:, p] - v[:, q]) for p, q in pq]
    eb = [np.ascontiguousarray(u[:, q] - u[:, p]) for p, q in pq]
    pu = [np.ascontiguousarray(u[:, p]) for p, _ in pq]
    pv = [np.ascontiguousarray(v[:, p]) for p, _ in pq]
    qu = [np.ascontiguousarray(u[:, q]) for _, q in pq]
    qv = [np.ascontiguousarray(v[:, q]) for _, q in pq]
    tl = [_top_left(u[:, p], v[:, p], u[:, q], v[:, q]) for p, q in pq]
    iz = 1.0 / z
    # 1/z and the barycentric sum are both linear across a scanline;
    # their x-slopes per triangle:
    s_den = (ea[0] + ea[1]) + ea[2]
    s_num = ea[0] * iz[:, 0] + ea[1] * iz[:, 1] + ea[2] * iz[:, 2]

    # One entry per (triangle, scanline) pair.
    row_tri = np.repeat(np.arange(len(ny), dtype=np.int32), ny)
    row_first = np.cumsum(ny, dtype=np.int64) - ny
    rtotal = int(ny.sum())
    row_y = y0[row_tri] + (np.arange(rtotal, dtype=np.int64) - row_first[row_tri]).astype(np.int32)
    yf = row_y.astype(np.float64)

    # Solve each edge for the covered x-interval on its scanline. Ties
    # (pixel center exactly on the edge) follow the top-left rule, so
    # constructed geometry with exact boundary arithmetic still covers
    # shared edges exactly once. The crossing is anchored at the
    # lexicographically smaller endpoint and uses the flip-invariant
    # ratio eb/ea, so both triangles of a shared edge compute the same
    # xc bits and the scanline partitions with no seam crack.
    lo = np.full(rtotal, -np.inf)
    hi = np.full(rtotal, np.inf)
    alive = np.ones(rtotal, dtype=bool)
    gs = []
    for j in range(3):
        eag = ea[j][row_tri]
        g = eb[j][row_tri] * (yf - pv[j][row_tri])
        gs.append(g)
        puj, pvj = pu[j][row_tri], pv[j][row_tri]
        quj, qvj = qu[j][row_tri], qv[j][row_tri]
        swap = (qvj < pvj) | ((qvj == pvj) & (quj < puj))
        au = np.where(swap, quj, puj)
        av = np.where(swap, qvj, pvj)
        with np.errstate(divide="ignore", invalid="ignore"):
            xc = au - (yf - av) * (eb[j][row_tri] / eag)
        tlg = tl[j][row_tri]
        bl = np.ceil(xc)
        bl += (bl == xc) & ~tlg
        bu = np.floor(xc)
        bu -= (bu == xc) & ~tlg
        lo = np.where(eag > 0, np.maximum(lo, bl), lo)
        hi = np.where(eag < 0, np.minimum(hi, bu), hi)
        alive &= (eag != 0) | (g > 0) | ((g == 0) & tlg)
    lo = np.clip(lo, x0[row_tri], x1[row_tri] + 1.0)
    hi = np.clip(hi, x0[row_tri] - 1.0, x1[row_tri])
    counts = np.where(alive, hi - lo + 1.0, 0.0).astype(np.int32)
    counts[counts < 0] = 0
    live = np.nonzero(counts)[0]
    if not len(live):
        return
    row_tri, row_y, yf, lo = row_tri[live], row_y[live], yf[live], lo[live]
    counts = counts[live]

    # Depth numerator/denominator at each row's first covered pixel.
    # Both share their evaluation structure, so constant-z triangles at
    # dyadic depths reproduce their depth exactly (num == den * 1/z).
    den0 = np.zeros(len(live))
    num0 = np.zeros(len(live))
    for j in range(3):
        wj = ea[j][row_tri] * (lo - pu[j][row_tri]) + gs[j][live]
        den0 += wj
        num0 += wj * iz[row_tri, j]
    sd = s_den[row_tri]
    sn = s_num[row_tri]
    base = row_y * np.int32(w) + lo.astype(np.int32)

    # Expand rows to pixels; `within` is the pixel's offset from its
    # row's first covered column.
    total = int(counts.sum(dtype=np.int64))
    if total == 0:
        return
    pix_row = np.repeat(np.arange(len(counts), dtype=np.int32), counts)
    pix_first = np.cumsum(counts, dtype=np.int64) - counts
    within = (np.arange(total, dtype=np.int64) - pix_first[pix_row]).astype(np.float64)
    depth = (den0[pix_row] + within * sd[pix_row]) / (num0[pix_row] + within * sn[pix_row])
    flat = base[pix_row] + within.astype(np.int32)
    np.minimum.at(zbuf.ravel(), flat, depth)


def rasterize(mesh: TriangleMesh, k: CameraIntrinsics, camera_from_object: RigidTransform):
    """Render the mesh to a depth map and coverage mask.

    :return: (depth, mask) arrays of shape (height, width); depth is
        meters along the camera z-axis, 0 where nothing rendered.
    :raises EmptyRender: if no triangle covers any pixel in front of the
        camera.
    """
    v_cam = camera_from_object.apply(mesh.vertices)
    tris = v_cam[mesh.faces]
    front_count = (tris[:, :, 2] > _NEAR).sum(axis=1)
    full = tris[front_count == 3]
    crossing = tris[(front_count > 0) & (front_count < 3)]
    parts = [full]
    if len(crossing):
        clipped = []
        for tri in crossing:
            clipped.extend(_clip_polygon_near(tri, _NEAR))
        if clipped:
            parts.append(np.array(clipped))
    tris = np.concatenate(parts) if len(parts) > 1 else parts[0]
    zbuf = np.full((k.height, k.width), np.inf)
    if len(tris):
        _raster_triangles(tris, k, zbuf)
    mask = np.isfinite(zbuf)
    if not mask.any():
        raise EmptyRender("mesh covers no pixel in front of the camera")
    depth = np.where(mask, zbuf, 0.0)
    return depth, mask


def render_mask(mesh, k, camera_from_object):
    """Mask channel of rasterize; an all-zero mask (instead of an
    EmptyRender error) flags an object outside the view."""
    try:
        return rasterize(mesh, k, camera_from_object)[1]
    except EmptyRender:
        return np.zeros((k.height, k.width), dtype=bool)


def sample_viewpoints(n: int, radius: float, mode: str = "fibonacci"):
    """Camera poses on a sphere of the given radius looking at the origin.

    Fibonacci-lattice directions give near-uniform coverage; the
    octahedral mode (n = 6 only) returns the axis-aligned views. The
    up-vector convention is world +z with a +y fallback, so roll is
    deterministic.

    :return: list of camera_from_object RigidTransform; each places the
        origin on the camera +z axis at distance radius.
    """
    if n < 4:
        raise ValueError("need at least 4 viewpoints")
    if radius <= 0:
        raise ValueError("radius must be positive")
    if mode == "octahedral":
        if n != 6:
            raise ValueError("octahedral mode requires n = 6")
        dirs = np.array(
            [
                [1, 0, 0], [-1, 0, 0],
                [0, 1, 0], [0, -1, 0],
                [0, 0, 1], [0, 0, -1],
            ],
            dtype=np.float64,
        )
    elif mode == "fibonacci":
        i = np.arange(n)
        zc = 1.0 - 2.0 * (i + 0.5) / n
        rho = np.sqrt(1.0 - zc**2)
        golden = np.pi * (3.0 - np.sqrt(5.0))
        theta = golden * i
        dirs = np.stack([rho * np.cos(theta), rho * np.sin(theta), zc], axis=1)
    else:
        raise ValueError("unknown viewpoint mode %r" % mode)
    return [look_at(radius * d, np.zeros(3)) for d in dirs]


def template_radius(mesh: TriangleMesh, k: CameraIntrinsics, fill_fraction: float = 0.6) -> float:
    """Camera distance at which the projected bounding sphere spans the
    given fraction of the smaller image dimension."""
    if not 0 < fill_fraction < 0.9:
        raise ValueError("fill_fraction must be in (0, 0.9)")
    r = mesh.bounding_radius()
    return 2.0 * max(k.fx, k.fy) * r / (fill_fraction * min(k.width, k.height))


def render_templates(mesh: TriangleMesh, k: CameraIntrinsics, views) -> list:
    """Render one TemplateView per pose; masks stay interior to the frame
    by construction when views come from template_radius sizing."""
    out = []
    for pose in views:
        depth, mask = rasterize(mesh, k, pose)
        if mask_touches_border(mask):
            raise ValueError("template mask touches the image border; increase the view radius")
        out.append(TemplateView(camera_from_object=pose, depth=depth, mask=mask))
    return out


def mask_touches_border(mask) -> bool:
    return bool(mask[0, :].any() or mask[-1, :].any() or mask[:, 0].any() or mask[:, -1].any())


def render_scene(items, k: CameraIntrinsics):
    """Render a list of (mesh, camera_from_object) into a common z-buffer.

    :return: (scene_depth, index_map, solo_depths) where index_map holds
        the index of the nearest object per pixel (-1 where empty) and
        solo_depths are the individual renders (0 where uncovered).
    """
    solo = []
    nearest = np.full((k.height, k.width), np.inf)
    index_map = np.full((k.height, k.width), -1, dtype=np.int32)
    for i, (mesh, pose) in enumerate(items):
        try:
            depth, mask = rasterize(mesh, k, pose)
        except EmptyRender:
            solo.append(np.zeros((k.height, k.width)))
            continue
        solo.append(depth)
        closer = mask & (depth < nearest)
        nearest[closer] = depth[closer]
        index_map[closer] = i
    scene_depth = np.where(np.isfinite(nearest), nearest, 0.0)
    return scene_depth, index_map, solo


def visibility_fraction(scene_meshes, target_index: int, k: CameraIntrinsics, camera_from_world: RigidTransform) -> float:
    """Visible fraction of the target: pixels where it is the nearest
    surface over pixels it would cover rendered alone; 0 if it renders
    empty alone.

    :param scene_meshes: list of (TriangleMesh, world pose) pairs; world
        poses map object coordinates to the world frame.
    """
    from .geometry import compose

    items = [(m, compose(camera_from_world, world_pose)) for m, world_pose in scene_meshes]
    _, index_map, solo = render_scene(items, k)
    alone_count = int(np.count_nonzero(solo[target_index]))
    if alone_count == 0:
        return 0.0
    visible = int(np.count_nonzero(index_map == target_index))
    return visible / alone_count
