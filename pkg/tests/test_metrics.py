"""Metric correctness against brute-force oracles and closed forms."""

import csv
import json

import numpy as np
import pytest

from metric_align.errors import BehindCamera, EmptyModel, EmptyRender, IoFailure
from metric_align.geometry import (
    CameraIntrinsics,
    RigidTransform,
    compose,
    rotation_about_axis,
    rotvec_to_matrix,
)
from metric_align.mesh import make_blob, make_box, make_icosphere, make_plane
from metric_align.metrics import (
    REPORT_COLUMNS,
    MetricReport,
    SymmetrySet,
    add,
    add_auc,
    add_recall,
    adds,
    bop_average_recall,
    chamfer,
    diameter,
    model_points_for_metrics,
    mspd,
    mssd,
    vsd,
    vsd_tau_grid,
    write_report_csv,
    write_report_json,
)
from metric_align.raster import rasterize

K = CameraIntrinsics(fx=600.0, fy=600.0, cx=320.0, cy=240.0, width=640, height=480)


def random_rigid(rng, t_scale=1.0):
    return RigidTransform(
        rotvec_to_matrix(rng.normal(size=3)), rng.normal(size=3) * t_scale
    )


def translation(x, y, z):
    return RigidTransform(np.eye(3), np.array([x, y, z], dtype=np.float64))


class TestAdd:
    def test_pure_translation_is_exact(self):
        rng = np.random.default_rng(0)
        pts = rng.normal(size=(200, 3))
        err = add(pts, translation(0, 0, 1), translation(0.01, 0, 1))
        assert abs(err - 0.01) < 1e-12

    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            pts = rng.normal(size=(60, 3))
            gt, est = random_rigid(rng), random_rigid(rng)
            oracle = np.mean(
                [np.linalg.norm(est.apply(p) - gt.apply(p)) for p in pts]
            )
            assert abs(add(pts, gt, est) - oracle) < 1e-12

    def test_invariant_under_left_composition(self):
        rng = np.random.default_rng(2)
        pts = rng.normal(size=(100, 3))
        gt, est, frame_change = (random_rigid(rng) for _ in range(3))
        direct = add(pts, gt, est)
        moved = add(pts, compose(frame_change, gt), compose(frame_change, est))
        assert abs(direct - moved) < 1e-9

    def test_empty_model_raises(self):
        with pytest.raises(EmptyModel):
            add(np.zeros((0, 3)), translation(0, 0, 1), translation(0, 0, 1))


class TestAdds:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            pts = rng.normal(size=(50, 3))
            gt, est = random_rigid(rng), random_rigid(rng)
            gt_pts, est_pts = gt.apply(pts), est.apply(pts)
            oracle = np.mean(
                [min(np.linalg.norm(e - g) for e in est_pts) for g in gt_pts]
            )
            assert abs(adds(pts, gt, est) - oracle) < 1e-12

    def test_never_exceeds_add(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            pts = rng.normal(size=(40, 3))
            gt, est = random_rigid(rng), random_rigid(rng)
            assert adds(pts, gt, est) <= add(pts, gt, est) + 1e-12

    def test_zero_for_identical_poses(self):
        rng = np.random.default_rng(5)
        pts = rng.normal(size=(30, 3))
        pose = random_rigid(rng)
        assert adds(pts, pose, pose) == 0.0


class TestRecallAndAuc:
    def test_recall_counts_pairs_under_threshold(self):
        rng = np.random.default_rng(6)
        pts = rng.normal(size=(50, 3))
        gt = translation(0, 0, 1)
        pairs = [(gt, translation(e, 0, 1)) for e in (0.005, 0.02, 0.5)]
        recall = add_recall(pts, 1.0, pairs, threshold_factor=0.1)
        assert abs(recall - 2.0 / 3.0) < 1e-12

    def test_auc_matches_hand_computed_step_area(self):
        # Errors 0.02/0.04/0.06/0.2 against T=0.1: the exact area under
        # the step recall curve is mean(0.8, 0.6, 0.4, 0.0) = 0.45.
        rng = np.random.default_rng(7)
        pts = rng.normal(size=(50, 3))
        gt = translation(0, 0, 1)
        pairs = [(gt, translation(e, 0, 1)) for e in (0.02, 0.04, 0.06, 0.2)]
        assert abs(add_auc(pts, pairs, max_threshold=0.1) - 0.45) < 1e-12

    def test_empty_pair_lists(self):
        pts = np.eye(3)
        assert add_recall(pts, 1.0, []) == 0.0
        assert add_auc(pts, []) == 0.0

    def test_bad_parameters_raise(self):
        pts = np.eye(3)
        with pytest.raises(ValueError):
            add_recall(pts, 0.0, [])
        with pytest.raises(ValueError):
            add_auc(pts, [], max_threshold=0.0)


class TestVsd:
    def test_zero_at_ground_truth(self):
        mesh = make_box(0.2, 0.2, 0.1, frame="metric")
        pose = RigidTransform(
            rotvec_to_matrix([0.4, -0.3, 0.2]), np.array([0.0, 0.0, 0.8])
        )
        depth, _ = rasterize(mesh, K, pose)
        assert vsd(mesh, K, pose, pose, depth, tau=0.02) == 0.0

    def test_small_depth_shift_within_tau(self):
        plane = make_plane(4.0, 4.0)
        gt = translation(0, 0, 1.0)
        depth, mask = rasterize(plane, K, gt)
        assert mask.all()
        est = translation(0, 0, 1.0 + 0.01)
        assert vsd(plane, K, gt, est, depth, tau=0.02) == 0.0

    def test_large_depth_shift_beyond_occlusion_band(self):
        plane = make_plane(4.0, 4.0)
        gt = translation(0, 0, 1.0)
        depth, _ = rasterize(plane, K, gt)
        est = translation(0, 0, 1.0 + 0.04)
        assert vsd(plane, K, gt, est, depth, tau=0.02) == 1.0

    def test_one_for_disjoint_visible_surfaces(self):
        mesh = make_box(0.2, 0.2, 0.1, frame="metric")
        gt = translation(-0.3, 0, 1.0)
        est = translation(0.3, 0, 1.0)
        depth, _ = rasterize(mesh, K, gt)
        assert vsd(mesh, K, gt, est, depth, tau=0.02) == 1.0

    def test_intermediate_shift_lands_between(self):
        mesh = make_box(0.2, 0.2, 0.1, frame="metric")
        gt = translation(0, 0, 0.9)
        est = translation(0.05, 0, 0.9)
        depth, _ = rasterize(mesh, K, gt)
        err = vsd(mesh, K, gt, est, depth, tau=0.02)
        assert 0.0 < err < 1.0

    def test_empty_render_raises(self):
        mesh = make_box(0.2, 0.2, 0.1, frame="metric")
        gt = translation(0, 0, 1.0)
        depth, _ = rasterize(mesh, K, gt)
        with pytest.raises(EmptyRender):
            vsd(mesh, K, gt, translation(0, 0, -1.0), depth, tau=0.02)

    def test_tau_grid_is_bop_ladder(self):
        taus = vsd_tau_grid(0.2)
        assert len(taus) == 10
        assert np.allclose(taus, 0.2 * 0.05 * np.arange(1, 11), atol=1e-15)


class TestMssdMspd:
    def _square_symmetries(self):
        return SymmetrySet(
            tuple(
                RigidTransform(
                    rotation_about_axis([0, 0, 1], np.pi / 2.0 * i), np.zeros(3)
                )
                for i in range(4)
            )
        )

    def test_symmetry_absorbs_quarter_turn(self):
        mesh = make_box(0.2, 0.2, 0.1, frame="metric")
        syms = self._square_symmetries()
        gt = RigidTransform(
            rotvec_to_matrix([0.3, -0.2, 0.5]), np.array([0.05, -0.02, 0.9])
        )
        quarter = RigidTransform(rotation_about_axis([0, 0, 1], np.pi / 2.0), np.zeros(3))
        est = compose(gt, quarter)
        assert mssd(mesh, syms, gt, est) < 1e-12
        assert mspd(mesh, syms, K, gt, est) < 1e-9

    def test_identity_only_set_keeps_the_error(self):
        mesh = make_box(0.2, 0.2, 0.1, frame="metric")
        gt = RigidTransform(
            rotvec_to_matrix([0.3, -0.2, 0.5]), np.array([0.05, -0.02, 0.9])
        )
        quarter = RigidTransform(rotation_about_axis([0, 0, 1], np.pi / 2.0), np.zeros(3))
        est = compose(gt, quarter)
        plain = mssd(mesh, SymmetrySet.identity_only(), gt, est)
        assert plain > 0.1
        assert mssd(mesh, self._square_symmetries(), gt, est) <= plain

    def test_mssd_matches_brute_force(self):
        rng = np.random.default_rng(8)
        mesh = make_blob(seed=1, frame="metric")
        pts = model_points_for_metrics(mesh)
        for _ in range(5):
            syms = SymmetrySet(
                (RigidTransform.identity(), random_rigid(rng, t_scale=0.0))
            )
            gt = random_rigid(rng, t_scale=0.1)
            est = random_rigid(rng, t_scale=0.1)
            oracle = min(
                max(
                    np.linalg.norm(est.apply(p) - gt.apply(s.apply(p)))
                    for p in pts
                )
                for s in syms.transforms
            )
            assert abs(mssd(mesh, syms, gt, est) - oracle) < 1e-12

    def test_mspd_matches_brute_force(self):
        rng = np.random.default_rng(9)
        mesh = make_blob(seed=2).scaled(0.1)
        pts = model_points_for_metrics(mesh)

        def project_px(pose):
            cam = pose.apply(pts)
            return np.stack(
                [
                    K.fx * cam[:, 0] / cam[:, 2] + K.cx,
                    K.fy * cam[:, 1] / cam[:, 2] + K.cy,
                ],
                axis=1,
            )

        for _ in range(5):
            syms = SymmetrySet(
                (RigidTransform.identity(), random_rigid(rng, t_scale=0.0))
            )
            gt = RigidTransform(rotvec_to_matrix(rng.normal(size=3)), [0.02, 0.01, 1.1])
            est = RigidTransform(rotvec_to_matrix(rng.normal(size=3)), [-0.01, 0.03, 0.9])
            est_px = project_px(est)
            oracle = min(
                np.linalg.norm(est_px - project_px(compose(gt, s)), axis=1).max()
                for s in syms.transforms
            )
            assert abs(mspd(mesh, syms, K, gt, est) - oracle) < 1e-9

    def test_mspd_behind_camera_raises(self):
        mesh = make_box(0.2, 0.2, 0.1, frame="metric")
        gt = translation(0, 0, 1.0)
        with pytest.raises(BehindCamera):
            mspd(mesh, SymmetrySet.identity_only(), K, gt, translation(0, 0, -1.0))


class TestBopAverageRecall:
    def test_perfect_errors_give_full_recall(self):
        out = bop_average_recall(
            np.zeros((7, 10)), np.zeros(7), np.zeros(7), 0.2, 800.0
        )
        assert out == {
            "vsd_recall": 1.0,
            "mssd_recall": 1.0,
            "mspd_recall": 1.0,
            "ar": 1.0,
        }

    def test_infinite_errors_give_zero(self):
        out = bop_average_recall(
            np.full((3, 10), np.inf), np.full(3, np.inf), np.full(3, np.inf), 0.2, 800.0
        )
        assert out["ar"] == 0.0

    def test_hand_computed_grid_fractions(self):
        # d=1: mssd 0.12 passes thresholds 0.15..0.5 -> 0.8.
        # diag=800 -> r=1.25: mspd 20 passes 25..62.5 -> 0.7.
        # vsd 0.23 passes theta 0.25..0.5 -> 0.6. ar = 0.7.
        out = bop_average_recall(
            np.full((1, 10), 0.23), [0.12], [20.0], 1.0, 800.0
        )
        assert abs(out["mssd_recall"] - 0.8) < 1e-12
        assert abs(out["mspd_recall"] - 0.7) < 1e-12
        assert abs(out["vsd_recall"] - 0.6) < 1e-12
        assert abs(out["ar"] - 0.7) < 1e-12
        mean = (out["vsd_recall"] + out["mssd_recall"] + out["mspd_recall"]) / 3.0
        assert out["ar"] == mean

    def test_vsd_column_count_validated(self):
        with pytest.raises(ValueError):
            bop_average_recall(np.zeros((2, 9)), np.zeros(2), np.zeros(2), 0.2, 800.0)


class TestChamferDiameter:
    def test_chamfer_matches_brute_force(self):
        rng = np.random.default_rng(10)
        for _ in range(10):
            a = rng.normal(size=(40, 3))
            b = rng.normal(size=(55, 3))
            fwd = np.mean([min(np.linalg.norm(p - q) for q in b) for p in a])
            bwd = np.mean([min(np.linalg.norm(q - p) for p in a) for q in b])
            assert abs(chamfer(a, b) - 0.5 * (fwd + bwd)) < 1e-12

    def test_chamfer_symmetric_and_zero_on_self(self):
        rng = np.random.default_rng(11)
        a = rng.normal(size=(30, 3))
        b = rng.normal(size=(20, 3))
        assert chamfer(a, b) == chamfer(b, a)
        assert chamfer(a, a) == 0.0

    def test_unit_cube_diameter_is_sqrt3(self):
        assert abs(diameter(make_box(1.0, 1.0, 1.0)) - np.sqrt(3.0)) < 1e-12

    def test_matches_brute_force_on_clouds(self):
        rng = np.random.default_rng(12)
        for _ in range(10):
            pts = rng.normal(size=(80, 3))
            oracle = max(
                np.linalg.norm(p - q) for p in pts for q in pts
            )
            assert abs(diameter(pts) - oracle) < 1e-12

    def test_hull_reduction_on_large_cloud(self):
        # Bulk cloud inside radius 2 (pairwise < 4), plus two antipodal
        # anchors that realize the known diameter of 6 exactly.
        rng = np.random.default_rng(13)
        dirs = rng.normal(size=(6000, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        pts = dirs * rng.uniform(0.0, 2.0, size=(6000, 1))
        pts = np.concatenate([pts, [[3.0, 0.0, 0.0], [-3.0, 0.0, 0.0]]])
        assert abs(diameter(pts) - 6.0) < 1e-12

    def test_degenerate_input_raises(self):
        with pytest.raises(EmptyModel):
            diameter(np.array([[0.0, 0.0, 0.0]]))


class TestModelPoints:
    def test_small_mesh_uses_vertices(self):
        mesh = make_blob(seed=0)
        assert model_points_for_metrics(mesh) is mesh.vertices

    def test_large_mesh_resampled_on_surface(self):
        mesh = make_icosphere(subdivisions=5)
        assert len(mesh.vertices) > 10_000
        pts = model_points_for_metrics(mesh)
        assert pts.shape == (2048, 3)
        radii = np.linalg.norm(pts, axis=1)
        assert radii.min() > 0.99 and radii.max() <= 1.0 + 1e-12
        again = model_points_for_metrics(mesh)
        assert np.array_equal(pts, again)


class TestSymmetrySetAndReport:
    def test_identity_must_be_present(self):
        quarter = RigidTransform(rotation_about_axis([0, 0, 1], np.pi / 2), np.zeros(3))
        with pytest.raises(ValueError):
            SymmetrySet((quarter,))
        with pytest.raises(ValueError):
            SymmetrySet(())

    def test_discretized_rotation_layout(self):
        syms = SymmetrySet.discretized_rotation([0, 0, 1], steps=64)
        assert len(syms.transforms) == 64
        assert np.allclose(syms.transforms[0].rotation, np.eye(3), atol=1e-15)
        assert "64" in syms.note

    def test_report_requires_consistent_ar(self):
        MetricReport(0.01, 0.008, 0.6, 0.8, 0.7, 0.7, 0.002)
        with pytest.raises(ValueError):
            MetricReport(0.01, 0.008, 0.6, 0.8, 0.7, 0.71, 0.002)


def _rows():
    return [
        {
            "scene": "000000",
            "image": "000000",
            "obj": "1",
            "add": 0.01,
            "adds": 0.008,
            "vsd_recall": 0.6,
            "mssd_recall": 0.8,
            "mspd_recall": 0.7,
            "ar": 0.7,
            "chamfer": 0.002,
        },
        {
            "scene": "000000",
            "image": "000001",
            "obj": "1",
            "add": 0.03,
            "adds": 0.02,
            "vsd_recall": 0.4,
            "mssd_recall": 0.6,
            "mspd_recall": 0.5,
            "ar": 0.5,
            "chamfer": 0.004,
        },
    ]


class TestReportWriters:
    def test_csv_column_order_and_summary(self, tmp_path):
        path = tmp_path / "report.csv"
        write_report_csv(_rows(), path)
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == list(REPORT_COLUMNS)
        assert len(rows) == 4
        assert rows[3][0] == "summary"
        assert abs(float(rows[3][3]) - 0.02) < 1e-12
        assert abs(float(rows[3][8]) - 0.6) < 1e-12

    def test_json_mirrors_csv(self, tmp_path):
        path = tmp_path / "report.json"
        write_report_json(_rows(), path)
        with open(path) as fh:
            rec = json.load(fh)
        assert rec["columns"] == list(REPORT_COLUMNS)
        assert len(rec["rows"]) == 2
        assert rec["rows"][1]["ar"] == 0.5
        assert abs(rec["summary"]["chamfer"] - 0.003) < 1e-12

    def test_unwritable_path_raises(self, tmp_path):
        with pytest.raises(IoFailure):
            write_report_csv(_rows(), tmp_path / "missing" / "report.csv")
        with pytest.raises(IoFailure):
            write_report_json(_rows(), tmp_path / "missing" / "report.json")
