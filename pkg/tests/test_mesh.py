"""Mesh loading, cleaning, standardization, and primitive factories."""

import struct

import numpy as np
import pytest

from metric_align.errors import EmptyModel, IoFailure
from metric_align.mesh import (
    TriangleMesh,
    bounding_diameter,
    load_mesh,
    make_blob,
    make_box,
    make_cylinder,
    make_ellipsoid,
    make_icosphere,
    make_plane,
    remove_degenerate_faces,
    save_obj,
    standardize,
)


class TestTriangleMesh:
    def test_validation(self):
        with pytest.raises(ValueError):
            TriangleMesh(np.zeros((3, 3)), np.array([[0, 1, 5]]))
        with pytest.raises(EmptyModel):
            TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int32))
        with pytest.raises(ValueError):
            TriangleMesh(np.zeros((3, 3)), np.zeros((3, 3)), frame="banana")

    def test_bounding_radius(self):
        m = make_box(2.0, 2.0, 2.0)
        assert m.bounding_radius() == pytest.approx(np.sqrt(3.0))

    def test_scaled(self):
        m = make_box(1.0, 1.0, 1.0).scaled(3.0)
        assert m.frame == "metric"
        assert m.bounding_radius() == pytest.approx(3.0 * np.sqrt(3.0) / 2.0)


class TestDiameter:
    def test_unit_cube(self):
        assert make_box(1, 1, 1).diameter() == pytest.approx(np.sqrt(3.0))

    def test_two_points(self):
        assert bounding_diameter([[0, 0, 0], [0, 0, 2.0]]) == pytest.approx(2.0)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(21)
        pts = rng.normal(size=(300, 3))
        best = 0.0
        for i in range(len(pts)):  # O(n^2) oracle
            d = np.linalg.norm(pts - pts[i], axis=1).max()
            best = max(best, d)
        assert bounding_diameter(pts) == pytest.approx(best, rel=1e-12)

    def test_hull_path_matches_exact(self):
        rng = np.random.default_rng(22)
        pts = rng.normal(size=(6000, 3))
        via_hull = bounding_diameter(pts)
        sub = pts[::2]  # 3000 points: exact path
        assert via_hull >= bounding_diameter(sub) - 1e-12
        # hull of all points must dominate any subset diameter and equal
        # the brute force on a decimated check set
        d2 = np.sum((pts[::40][:, None] - pts[::40][None]) ** 2, axis=2)
        assert via_hull >= np.sqrt(d2.max()) - 1e-12


class TestCleaning:
    def test_degenerate_faces_removed(self):
        v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [2, 0, 0]], dtype=float)
        f = np.array(
            [[0, 1, 2], [0, 0, 1], [0, 1, 3]]  # ok, repeated index, collinear
        )
        kept = remove_degenerate_faces(v, f)
        np.testing.assert_array_equal(kept, [[0, 1, 2]])

    def test_standardize_normalized(self):
        m = TriangleMesh(
            np.array([[10.0, 0, 0], [14.0, 0, 0], [12.0, 3.0, 0], [12.0, 0, 1.0]]),
            np.array([[0, 1, 2], [0, 1, 3]]),
        )
        s = standardize(m, "normalized")
        lo, hi = s.vertices.min(axis=0), s.vertices.max(axis=0)
        np.testing.assert_allclose(lo + hi, 0.0, atol=1e-12)  # bbox centered
        assert s.bounding_radius() == pytest.approx(1.0)

    def test_standardize_metric_keeps_size(self):
        m = make_box(0.3, 0.2, 0.1, frame="metric")
        shifted = TriangleMesh(m.vertices + [5.0, 0, 0], m.faces, frame="metric")
        s = standardize(shifted)
        np.testing.assert_allclose(s.vertices, m.vertices, atol=1e-12)


class TestObjIo:
    def test_roundtrip(self, tmp_path):
        m = make_blob(seed=3)
        p = tmp_path / "blob.obj"
        save_obj(m, p)
        back = load_mesh(p, frame="normalized")
        # load_mesh standardizes; blob is already standardized
        np.testing.assert_allclose(back.vertices, m.vertices, atol=1e-9)
        np.testing.assert_array_equal(back.faces, m.faces)

    def test_quad_fan_triangulation(self, tmp_path):
        p = tmp_path / "quad.obj"
        p.write_text(
            "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nv 0 0 1\n"
            "f 1 2 3 4\n"
            "f 1/1 2/2 5/3\n"  # v/vt references
        )
        m = load_mesh(p)
        assert len(m.faces) == 3  # quad split into 2 + 1 triangle

    def test_negative_indices(self, tmp_path):
        p = tmp_path / "neg.obj"
        p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf -3 -2 -1\n")
        m = load_mesh(p)
        np.testing.assert_array_equal(m.faces, [[0, 1, 2]])

    def test_missing_file(self, tmp_path):
        with pytest.raises(IoFailure):
            load_mesh(tmp_path / "nope.obj")


class TestPlyIo:
    @staticmethod
    def _write_ply(path, verts, faces, extra_vertex_prop=False):
        props = b"property float x\nproperty float y\nproperty float z\n"
        if extra_vertex_prop:
            props += b"property float quality\n"
        header = (
            b"ply\nformat binary_little_endian 1.0\ncomment test mesh\n"
            b"element vertex %d\n%s"
            b"element face %d\nproperty list uchar int vertex_indices\nend_header\n"
            % (len(verts), props, len(faces))
        )
        with open(path, "wb") as fh:
            fh.write(header)
            for v in verts:
                row = list(v) + ([0.5] if extra_vertex_prop else [])
                fh.write(struct.pack("<%df" % len(row), *row))
            for f in faces:
                fh.write(struct.pack("<B%di" % len(f), len(f), *f))

    def test_binary_ply_roundtrip(self, tmp_path):
        src = make_icosphere(1)
        p = tmp_path / "ico.ply"
        self._write_ply(p, src.vertices.astype(np.float32), src.faces.tolist())
        m = load_mesh(p)
        assert len(m.faces) == len(src.faces)
        # float32 quantization plus re-standardization
        np.testing.assert_allclose(m.vertices, src.vertices, atol=1e-6)

    def test_ply_quad_and_extra_props(self, tmp_path):
        verts = [(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0)]
        p = tmp_path / "quad.ply"
        self._write_ply(p, verts, [[0, 1, 2, 3]], extra_vertex_prop=True)
        m = load_mesh(p, frame="metric")
        assert len(m.faces) == 2

    def test_ascii_ply_rejected(self, tmp_path):
        p = tmp_path / "a.ply"
        p.write_bytes(b"ply\nformat ascii 1.0\nelement vertex 0\nend_header\n")
        with pytest.raises(IoFailure):
            load_mesh(p)


class TestPrimitives:
    def test_box_topology(self):
        m = make_box(1, 2, 3)
        assert m.vertices.shape == (8, 3)
        assert m.faces.shape == (12, 3)

    def test_icosphere_on_sphere(self):
        m = make_icosphere(2, radius=0.7)
        np.testing.assert_allclose(np.linalg.norm(m.vertices, axis=1), 0.7, atol=1e-12)

    def test_ellipsoid_extents(self):
        m = make_ellipsoid(0.1, 0.2, 0.3, subdivisions=3)
        np.testing.assert_allclose(np.abs(m.vertices).max(axis=0), [0.1, 0.2, 0.3], rtol=1e-3)

    def test_cylinder_closed(self):
        m = make_cylinder(0.5, 1.0, segments=16)
        # Each directed edge must appear exactly once (closed 2-manifold).
        edges = {}
        for a, b, c in m.faces:
            for e in ((a, b), (b, c), (c, a)):
                assert e not in edges
                edges[e] = True
        for a, b in list(edges):
            assert (b, a) in edges

    def test_plane_flat(self):
        m = make_plane(2.0, 1.0)
        np.testing.assert_array_equal(m.vertices[:, 2], 0.0)

    def test_blob_deterministic_and_standardized(self):
        a = make_blob(seed=7)
        b = make_blob(seed=7)
        np.testing.assert_array_equal(a.vertices, b.vertices)
        assert a.bounding_radius() == pytest.approx(1.0)
        c = make_blob(seed=8)
        assert not np.allclose(a.vertices, c.vertices)
