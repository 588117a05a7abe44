"""Triangle meshes: value type, OBJ/PLY loading, standardization, and
primitive factories used by tests and the synthetic scene generator.

Loaded meshes are cleaned (degenerate faces dropped), re-centered on the
bounding-box center, and, for the normalized frame, scaled to the unit
bounding sphere.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import EmptyModel, IoFailure

_FRAMES = ("normalized", "metric")


@dataclass(frozen=True)
class TriangleMesh:
    """Vertices (V, 3) float64 and faces (F, 3) int32, object-centric."""

    vertices: np.ndarray
    faces: np.ndarray
    frame: str = "normalized"

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64))
        f = np.ascontiguousarray(np.asarray(self.faces, dtype=np.int32))
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError("vertices must be (V, 3), got %s" % (v.shape,))
        if f.ndim != 2 or f.shape[1] != 3:
            raise ValueError("faces must be (F, 3), got %s" % (f.shape,))
        if v.shape[0] == 0:
            raise EmptyModel("mesh has no vertices")
        if f.size and (f.min() < 0 or f.max() >= v.shape[0]):
            raise ValueError("face index out of range")
        if self.frame not in _FRAMES:
            raise ValueError("frame must be one of %s" % (_FRAMES,))
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    def bounding_radius(self) -> float:
        """Radius of the origin-centered bounding sphere."""
        return float(np.sqrt(np.max(np.sum(self.vertices**2, axis=1))))

    def diameter(self) -> float:
        """Max pairwise vertex distance (exact below 5000 vertices,
        convex hull beyond)."""
        return bounding_diameter(self.vertices)

    def scaled(self, s: float, frame: str = "metric") -> "TriangleMesh":
        """Uniformly scaled copy about the model origin."""
        if s <= 0:
            raise ValueError("scale must be positive")
        return TriangleMesh(self.vertices * float(s), self.faces, frame=frame)


def bounding_diameter(points) -> float:
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[0] < 2:
        raise EmptyModel("need at least 2 points for a diameter")
    if pts.shape[0] > 5000:
        from scipy.spatial import ConvexHull

        pts = pts[ConvexHull(pts).vertices]
    d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=2)
    return float(np.sqrt(d2.max()))


def remove_degenerate_faces(vertices, faces):
    """Drop faces with repeated indices or (numerically) zero area."""
    f = np.asarray(faces, dtype=np.int32).reshape(-1, 3)
    if f.size == 0:
        return f
    distinct = (f[:, 0] != f[:, 1]) & (f[:, 1] != f[:, 2]) & (f[:, 0] != f[:, 2])
    f = f[distinct]
    v = np.asarray(vertices, dtype=np.float64)
    e1 = v[f[:, 1]] - v[f[:, 0]]
    e2 = v[f[:, 2]] - v[f[:, 0]]
    area2 = np.linalg.norm(np.cross(e1, e2), axis=1)
    scale = max(float(np.ptp(v)) if v.size else 1.0, 1e-30)
    return f[area2 > 1e-14 * scale * scale]


def standardize(mesh: TriangleMesh, frame=None) -> TriangleMesh:
    """Center on the bounding-box center; normalized meshes are scaled to
    the unit bounding sphere."""
    frame = frame or mesh.frame
    v = mesh.vertices
    center = (v.min(axis=0) + v.max(axis=0)) / 2.0
    v = v - center
    if frame == "normalized":
        r = np.sqrt(np.max(np.sum(v**2, axis=1)))
        if r == 0:
            raise EmptyModel("mesh collapses to a point")
        v = v / r
    faces = remove_degenerate_faces(v, mesh.faces)
    return TriangleMesh(v, faces, frame=frame)


# -- file I/O --


def load_mesh(path, frame: str = "normalized") -> TriangleMesh:
    """Load an ASCII OBJ or binary little-endian PLY and standardize it.

    :param frame: "normalized" rescales to the unit bounding sphere,
        "metric" keeps sizes and only re-centers.
    """
    path = str(path)
    try:
        if path.lower().endswith(".obj"):
            v, f = _read_obj(path)
        elif path.lower().endswith(".ply"):
            v, f = _read_ply(path)
        else:
            raise IoFailure("unsupported mesh extension: %s" % path)
    except (OSError, ValueError, struct.error) as exc:
        raise IoFailure("failed to load mesh %s: %s" % (path, exc)) from exc
    if len(v) == 0:
        raise EmptyModel("mesh %s has no vertices" % path)
    return standardize(TriangleMesh(np.array(v), np.array(f, dtype=np.int32).reshape(-1, 3), frame=frame), frame)


def _read_obj(path):
    verts, faces = [], []
    with open(path, "r") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(parts[1]), float(parts[2]), float(parts[3])])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                for j in range(1, len(idx) - 1):  # fan triangulation
                    faces.append([idx[0], idx[j], idx[j + 1]])
    return verts, faces


def save_obj(mesh: TriangleMesh, path):
    """Write an ASCII OBJ (v/f records, 1-based indices)."""
    try:
        with open(path, "w") as fh:
            for v in mesh.vertices:
                fh.write("v %.17g %.17g %.17g\n" % (v[0], v[1], v[2]))
            for f in mesh.faces:
                fh.write("f %d %d %d\n" % (f[0] + 1, f[1] + 1, f[2] + 1))
    except OSError as exc:
        raise IoFailure("failed to write mesh %s: %s" % (path, exc)) from exc


def _read_ply(path):
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise ValueError("not a PLY file")
        fmt = None
        elements = []  # (name, count, [(prop_type, prop_name) or ('list', count_t, item_t, name)])
        while True:
            line = fh.readline()
            if not line:
                raise ValueError("unterminated PLY header")
            tokens = line.strip().decode("ascii", "replace").split()
            if not tokens or tokens[0] == "comment":
                continue
            if tokens[0] == "format":
                fmt = tokens[1]
            elif tokens[0] == "element":
                elements.append((tokens[1], int(tokens[2]), []))
            elif tokens[0] == "property":
                if tokens[1] == "list":
                    elements[-1][2].append(("list", tokens[2], tokens[3], tokens[4]))
                else:
                    elements[-1][2].append((tokens[1], tokens[2]))
            elif tokens[0] == "end_header":
                break
        if fmt != "binary_little_endian":
            raise ValueError("only binary little-endian PLY is supported")
        scalar = {
            "char": "b", "int8": "b", "uchar": "B", "uint8": "B",
            "short": "h", "int16": "h", "ushort": "H", "uint16": "H",
            "int": "i", "int32": "i", "uint": "I", "uint32": "I",
            "float": "f", "float32": "f", "double": "d", "float64": "d",
        }
        verts = None
        faces = []
        for name, count, props in elements:
            if name == "vertex":
                if any(p[0] == "list" for p in props):
                    raise ValueError("list property on vertex element")
                fmt_str = "<" + "".join(scalar[p[0]] for p in props)
                names = [p[1] for p in props]
                stride = struct.calcsize(fmt_str)
                raw = fh.read(stride * count)
                if len(raw) != stride * count:
                    raise ValueError("truncated vertex data")
                dt = np.dtype([(names[i], "<" + scalar[props[i][0]]) for i in range(len(props))])
                arr = np.frombuffer(raw, dtype=dt)
                verts = np.stack(
                    [arr["x"].astype(np.float64), arr["y"].astype(np.float64), arr["z"].astype(np.float64)],
                    axis=1,
                )
            elif name == "face":
                if len(props) != 1 or props[0][0] != "list":
                    raise ValueError("face element must be a single list property")
                _, count_t, item_t, _ = props[0]
                cfmt, ifmt = "<" + scalar[count_t], "<" + scalar[item_t]
                csz, isz = struct.calcsize(cfmt), struct.calcsize(ifmt)
                for _ in range(count):
                    (n,) = struct.unpack(cfmt, fh.read(csz))
                    idx = struct.unpack("<%d%s" % (n, scalar[item_t]), fh.read(isz * n))
                    for j in range(1, n - 1):
                        faces.append([idx[0], idx[j], idx[j + 1]])
            else:
                # skip unknown fixed-size elements
                if any(p[0] == "list" for p in props):
                    raise ValueError("cannot skip element %r with list property" % name)
                stride = struct.calcsize("<" + "".join(scalar[p[0]] for p in props))
                fh.seek(stride * count, 1)
        if verts is None:
            raise ValueError("PLY has no vertex element")
        return verts, faces


# -- primitive factories --


def make_box(ex=1.0, ey=1.0, ez=1.0, frame="normalized") -> TriangleMesh:
    """Axis-aligned box with full extents (ex, ey, ez), centered."""
    hx, hy, hz = ex / 2.0, ey / 2.0, ez / 2.0
    v = np.array(
        [
            [-hx, -hy, -hz], [hx, -hy, -hz], [hx, hy, -hz], [-hx, hy, -hz],
            [-hx, -hy, hz], [hx, -hy, hz], [hx, hy, hz], [-hx, hy, hz],
        ]
    )
    f = np.array(
        [
            [0, 2, 1], [0, 3, 2],  # bottom (z = -hz)
            [4, 5, 6], [4, 6, 7],  # top
            [0, 1, 5], [0, 5, 4],  # y = -hy
            [2, 3, 7], [2, 7, 6],  # y = +hy
            [1, 2, 6], [1, 6, 5],  # x = +hx
            [3, 0, 4], [3, 4, 7],  # x = -hx
        ],
        dtype=np.int32,
    )
    return TriangleMesh(v, f, frame=frame)


def make_icosphere(subdivisions=2, radius=1.0, frame="normalized") -> TriangleMesh:
    """Icosahedron subdivided and projected onto the sphere."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    v = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=np.float64,
    )
    f = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    v = v / np.linalg.norm(v, axis=1, keepdims=True)
    verts = [tuple(p) for p in v]
    index = {p: i for i, p in enumerate(verts)}

    def midpoint(a, b):
        m = (np.array(verts[a]) + np.array(verts[b])) / 2.0
        m = tuple(m / np.linalg.norm(m))
        if m not in index:
            index[m] = len(verts)
            verts.append(m)
        return index[m]

    for _ in range(subdivisions):
        nf = []
        for a, b, c in f:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        f = nf
    return TriangleMesh(np.array(verts) * radius, np.array(f, dtype=np.int32), frame=frame)


def make_ellipsoid(rx, ry, rz, subdivisions=2, frame="normalized") -> TriangleMesh:
    s = make_icosphere(subdivisions, 1.0, frame)
    return TriangleMesh(s.vertices * [rx, ry, rz], s.faces, frame=frame)


def make_cylinder(radius=0.5, height=1.0, segments=32, frame="normalized") -> TriangleMesh:
    ang = 2.0 * np.pi * np.arange(segments) / segments
    ring = np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
    bot = np.concatenate([ring, np.full((segments, 1), -height / 2.0)], axis=1)
    top = np.concatenate([ring, np.full((segments, 1), height / 2.0)], axis=1)
    v = np.concatenate([bot, top, [[0, 0, -height / 2.0], [0, 0, height / 2.0]]])
    cb, ct = 2 * segments, 2 * segments + 1
    faces = []
    for i in range(segments):
        j = (i + 1) % segments
        faces += [[i, j, segments + i], [j, segments + j, segments + i]]
        faces += [[cb, j, i], [ct, segments + i, segments + j]]
    return TriangleMesh(v, np.array(faces, dtype=np.int32), frame=frame)


def make_plane(size_x=2.0, size_y=2.0, frame="metric") -> TriangleMesh:
    hx, hy = size_x / 2.0, size_y / 2.0
    v = np.array([[-hx, -hy, 0.0], [hx, -hy, 0.0], [hx, hy, 0.0], [-hx, hy, 0.0]])
    f = np.array([[0, 1, 2], [0, 2, 3]], dtype=np.int32)
    return TriangleMesh(v, f, frame=frame)


def make_blob(seed=0, subdivisions=3, lobes=6, amplitude=0.18, frame="normalized") -> TriangleMesh:
    """Smooth asymmetric test object: a sphere with random radial lobes.

    Deterministic for a given seed; asymmetric so pose recovery has a
    unique answer, smooth so depth normals behave.
    """
    rng = np.random.default_rng(seed)
    base = make_icosphere(subdivisions, 1.0, frame)
    dirs = rng.normal(size=(lobes, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    amps = rng.uniform(0.3, 1.0, size=lobes) * amplitude
    sharp = rng.uniform(2.0, 6.0, size=lobes)
    n = base.vertices / np.linalg.norm(base.vertices, axis=1, keepdims=True)
    r = np.ones(len(n))
    for d, a, k in zip(dirs, amps, sharp):
        r += a * np.exp(k * (n @ d - 1.0))
    return standardize(TriangleMesh(n * r[:, None], base.faces, frame=frame), frame)
