"""Rigid and similarity transform algebra, pinhole camera model, and the
closed-form metric scale estimator.

Conventions: rotations are 3x3 matrices acting on column vectors,
translations are meters, camera frames use x-right / y-down / z-forward.
A pixel (u, v) addresses column u, row v, with the pixel center at
integer coordinates.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInput, NonPositiveDepth, NonPositiveScale

_SO3_TOL = 1e-9


def _as_array(x, shape, name):
    a = np.asarray(x, dtype=np.float64)
    if a.shape != shape:
        raise ValueError("%s must have shape %s, got %s" % (name, shape, a.shape))
    if not np.all(np.isfinite(a)):
        raise ValueError("%s contains non-finite values" % name)
    return a


def _orthonormalize(r):
    # Polar decomposition: nearest rotation in Frobenius norm.
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0:
        raise ValueError("matrix is a reflection, not a rotation")
    return out


@dataclass(frozen=True)
class RigidTransform:
    """An SE(3) element. Maps points as x -> rotation @ x + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = _orthonormalize(_as_array(self.rotation, (3, 3), "rotation"))
        t = _as_array(self.translation, (3,), "translation").copy()
        if np.max(np.abs(r.T @ r - np.eye(3))) > _SO3_TOL:
            raise ValueError("rotation failed orthonormality check")
        if abs(np.linalg.det(r) - 1.0) > _SO3_TOL:
            raise ValueError("rotation determinant is not +1")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m):
        m = _as_array(m, (4, 4), "matrix")
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points):
        """Transform one (3,) point or an (N, 3) array of points."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation


@dataclass(frozen=True)
class ScaledModelPose:
    """Similarity alignment of a normalized model: x -> R @ (s * x) + t.

    scale is meters per normalized model unit; the scaling is applied
    about the model origin (meshes are centered on load).
    """

    scale: float
    pose: RigidTransform

    def __post_init__(self):
        if not np.isfinite(self.scale) or self.scale <= 0:
            raise NonPositiveScale("scale must be > 0, got %r" % (self.scale,))
        object.__setattr__(self, "scale", float(self.scale))

    def apply(self, points):
        """Map normalized model-frame points into the camera frame."""
        return self.pose.apply(self.scale * np.asarray(points, dtype=np.float64))


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics with image size; focal lengths and principal
    point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image bounds")

    def matrix(self):
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


@dataclass(frozen=True)
class PointCloud:
    """Points tagged with the frame they live in: object, camera or world."""

    points: np.ndarray
    frame: str = "camera"

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != 3:
            raise ValueError("points must be (N, 3), got %s" % (p.shape,))
        if not np.all(np.isfinite(p)):
            raise ValueError("points contain non-finite values")
        if self.frame not in ("object", "camera", "world"):
            raise ValueError("unknown frame %r" % (self.frame,))
        p.setflags(write=False)
        object.__setattr__(self, "points", p)

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True)
class Correspondence2D3D:
    """A 2D pixel in some image paired with a 3D model-frame point."""

    pixel: np.ndarray
    point: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pixel", _as_array(self.pixel, (2,), "pixel"))
        object.__setattr__(self, "point", _as_array(self.point, (3,), "point"))


def _points_of(x):
    if isinstance(x, PointCloud):
        return x.points
    return np.asarray(x, dtype=np.float64)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Composition applying b first, then a: result(x) = a(b(x))."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(t: RigidTransform) -> RigidTransform:
    """Inverse transform (R^T, -R^T t)."""
    rt = t.rotation.T
    return RigidTransform(rt, -rt @ t.translation)


def relative_pose(t_anchor: RigidTransform, t_query: RigidTransform) -> RigidTransform:
    """Anchor-camera-to-query-camera transform: t_query after inv(t_anchor).

    For object poses t_anchor, t_query of one static object seen from two
    cameras, the result maps anchor-frame points of the object onto the
    query-frame points of the same object.
    """
    return compose(t_query, invert(t_anchor))


def chain_object_pose(t_cam_world: RigidTransform, t_obj_world: RigidTransform) -> RigidTransform:
    """Object pose in the camera frame from world-frame poses.

    :param t_cam_world: camera pose in the world frame (camera-to-world).
    :param t_obj_world: object pose in the world frame (object-to-world).
    :return: object-to-camera transform inv(t_cam_world) o t_obj_world.
    """
    return compose(invert(t_cam_world), t_obj_world)


def project(k: CameraIntrinsics, p):
    """Project camera-frame points to pixel coordinates.

    :param p: (3,) point or (N, 3) array, camera frame, meters.
    :return: (2,) or (N, 2) pixel coordinates; may lie outside the image.
    :raises NonPositiveDepth: if any point has z <= 0.
    """
    pts = np.asarray(p, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    z = pts[:, 2]
    if np.any(z <= 0):
        raise NonPositiveDepth("cannot project point with z <= 0")
    uv = np.empty((pts.shape[0], 2))
    uv[:, 0] = k.fx * pts[:, 0] / z + k.cx
    uv[:, 1] = k.fy * pts[:, 1] / z + k.cy
    return uv[0] if single else uv


def backproject(k: CameraIntrinsics, pixel, depth):
    """Lift pixels with depth to camera-frame 3D points.

    Standard pinhole lift P = depth * K^-1 [u, v, 1]^T.

    :param pixel: (2,) pixel or (N, 2) array.
    :param depth: scalar or (N,) depth along the camera z-axis, meters.
    :raises NonPositiveDepth: if any depth <= 0.
    """
    px = np.asarray(pixel, dtype=np.float64)
    single = px.ndim == 1
    px = np.atleast_2d(px)
    d = np.broadcast_to(np.asarray(depth, dtype=np.float64), (px.shape[0],))
    if np.any(d <= 0):
        raise NonPositiveDepth("cannot backproject depth <= 0")
    out = np.empty((px.shape[0], 3))
    out[:, 0] = d * (px[:, 0] - k.cx) / k.fx
    out[:, 1] = d * (px[:, 1] - k.cy) / k.fy
    out[:, 2] = d
    return out[0] if single else out


def estimate_scale(model_points_cam, observed_points_cam) -> float:
    """Closed-form scale aligning model points onto observed points.

    Minimizes L2(alpha) = sum_i ||alpha * Phat_i - P_i||^2, which has the
    unique minimizer alpha* = sum_i <Phat_i, P_i> / sum_i ||Phat_i||^2.

    :param model_points_cam: Phat_i, camera-frame points of the posed model.
    :param observed_points_cam: P_i, camera-frame points lifted from the
        observation, paired index-wise with the model points.
    :return: the positive minimizer alpha*.
    :raises DegenerateInput: if all model points are at the origin.
    :raises NonPositiveScale: if the minimizer is <= 0.
    """
    phat = _points_of(model_points_cam)
    p = _points_of(observed_points_cam)
    if phat.shape != p.shape or phat.ndim != 2 or phat.shape[1] != 3 or phat.shape[0] < 1:
        raise ValueError("point sets must be equal-length (N, 3) with N >= 1")
    denom = float(np.sum(phat * phat))
    if denom == 0.0:
        raise DegenerateInput("all model points at the origin; scale undefined")
    alpha = float(np.sum(phat * p)) / denom
    if alpha <= 0:
        raise NonPositiveScale("closed-form scale %g is not positive" % alpha)
    return alpha


def so3_geodesic_distance(a: RigidTransform, b: RigidTransform) -> float:
    """Geodesic angle in radians between the two rotations."""
    c = (np.trace(a.rotation @ b.rotation.T) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def apply_similarity(sp: ScaledModelPose, p):
    """Map model-frame points to camera frame: R @ (s * p) + t."""
    pts = np.asarray(p, dtype=np.float64)
    return sp.pose.apply(sp.scale * pts)


# -- rotation helpers (axis-angle at refiner boundaries, matrices inside) --


def rotvec_to_matrix(rotvec):
    """Rodrigues formula; safe at small angles."""
    r = np.asarray(rotvec, dtype=np.float64)
    theta = np.linalg.norm(r)
    if theta < 1e-12:
        k = np.array(
            [[0.0, -r[2], r[1]], [r[2], 0.0, -r[0]], [-r[1], r[0], 0.0]]
        )
        return np.eye(3) + k  # first-order term only below 1e-12 rad
    axis = r / theta
    k = np.array(
        [[0.0, -axis[2], axis[1]], [axis[2], 0.0, -axis[0]], [-axis[1], axis[0], 0.0]]
    )
    return np.eye(3) + np.sin(theta) * k + (1.0 - np.cos(theta)) * (k @ k)


def matrix_to_rotvec(r):
    """Inverse Rodrigues: axis-angle vector of a rotation matrix."""
    r = np.asarray(r, dtype=np.float64)
    cos_theta = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta < 1e-12:
        # Near identity the off-diagonal differences are 2*axis*theta.
        return 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if theta > np.pi - 1e-6:
        # Near pi use the symmetric part: R ~ 2*aa^T - I. Anchor the sign
        # on the largest diagonal entry, then align with the (tiny but
        # definite) antisymmetric part when it is nonzero.
        i = int(np.argmax(np.diag(r)))
        ai = np.sqrt(max((r[i, i] + 1.0) / 2.0, 1e-12))
        axis = np.empty(3)
        axis[i] = ai
        for j in range(3):
            if j != i:
                axis[j] = (r[i, j] + r[j, i]) / (4.0 * ai)
        axis = axis / np.linalg.norm(axis)
        v = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
        if np.dot(axis, v) < 0:
            axis = -axis
        return axis * theta
    v = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return v / (2.0 * np.sin(theta)) * theta


def rotation_about_axis(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return rotvec_to_matrix(axis * angle)


def random_rotation(rng):
    """Uniform random rotation from three Gaussian columns (QR sign-fixed)."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 2] = -q[:, 2]
    return q


def look_at(eye, target, up=None) -> RigidTransform:
    """Camera-from-world pose looking from eye toward target.

    The camera z-axis points from eye to target; the image y-axis is
    aligned with the projection of -up (v grows downward). Default up is
    world +z, with +y fallback when the view direction is parallel to it.
    """
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - eye
    n = np.linalg.norm(fwd)
    if n == 0:
        raise ValueError("eye and target coincide")
    fwd = fwd / n
    if up is None:
        up = np.array([0.0, 0.0, 1.0])
        if abs(np.dot(fwd, up)) > 1.0 - 1e-9:
            up = np.array([0.0, 1.0, 0.0])
    else:
        up = np.asarray(up, dtype=np.float64)
        if abs(np.dot(fwd, up / np.linalg.norm(up))) > 1.0 - 1e-9:
            raise ValueError("up vector parallel to view direction")
    right = np.cross(fwd, up)
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    r_world_from_cam = np.stack([right, down, fwd], axis=1)
    r = r_world_from_cam.T
    return RigidTransform(r, -r @ eye)
