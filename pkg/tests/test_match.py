import numpy as np
import pytest

from metric_align.errors import AllEmpty, IoFailure, NoCovisibleSurface
from metric_align.geometry import (
    CameraIntrinsics,
    RigidTransform,
    ScaledModelPose,
    backproject,
    invert,
    look_at,
    project,
)
from metric_align.matching import (
    MatcherConfig,
    MatchSet,
    depth_patch_match,
    dump_matches,
    load_matches,
    match_view,
    oracle_match,
    select_best_view,
)
from metric_align.mesh import make_blob, make_box, make_icosphere, make_plane
from metric_align.raster import (
    Observation,
    TemplateView,
    rasterize,
    render_templates,
    sample_viewpoints,
    template_radius,
)

K = CameraIntrinsics(fx=300.0, fy=300.0, cx=160.0, cy=120.0, width=320, height=240)


def observe(mesh, pose, scale=1.0):
    """Render a ground-truth observation of the mesh at a similarity pose."""
    depth, mask = rasterize(mesh.scaled(scale) if scale != 1.0 else mesh, K, pose)
    return Observation(depth=depth, mask=mask, intrinsics=K), ScaledModelPose(scale, pose)


@pytest.fixture(scope="module")
def blob():
    return make_blob(seed=3)


@pytest.fixture(scope="module")
def blob_templates(blob):
    r = template_radius(blob, K, 0.6)
    return render_templates(blob, K, sample_viewpoints(42, r))


def lift_template(template, pixels, k):
    """Template pixels -> normalized model frame."""
    d = template.depth[
        np.rint(pixels[:, 1]).astype(int), np.rint(pixels[:, 0]).astype(int)
    ]
    cam = backproject(k, pixels, d)
    return invert(template.camera_from_object).apply(cam) / template.model_scale


class TestOracle:
    def test_same_view_identity_pairs(self, blob_templates):
        t = blob_templates[0]
        obs = Observation(depth=t.depth, mask=t.mask, intrinsics=K)
        m = oracle_match(t, obs, ScaledModelPose(1.0, t.camera_from_object),
                         MatcherConfig(max_matches=400))
        assert m.score == 400
        assert np.allclose(m.template_pixels, m.observation_pixels, atol=1e-6)

    def test_soundness_under_gt_similarity(self, blob, blob_templates):
        t = blob_templates[0]
        gt_pose = look_at(np.array([0.5, 0.3, 2.4]), np.zeros(3))
        obs, gt = observe(blob, gt_pose, scale=1.3)
        m = oracle_match(t, obs, gt, MatcherConfig(max_matches=800))
        assert m.score >= 200

        model_pts = lift_template(t, m.template_pixels, K)
        expected_cam = gt.apply(model_pts)
        # Observation side: lift the matched pixel at its looked-up depth.
        ui = np.clip(np.rint(m.observation_pixels[:, 0]).astype(int), 0, K.width - 1)
        vi = np.clip(np.rint(m.observation_pixels[:, 1]).astype(int), 0, K.height - 1)
        got_cam = backproject(K, m.observation_pixels, obs.depth[vi, ui])
        err = np.linalg.norm(expected_cam - got_cam, axis=1)
        # Residual is the depth-lookup error at the rounded pixel, bounded
        # by the covisibility tolerance max(1% z, 5 mm) times ray obliquity.
        assert np.median(err) < 0.005
        assert err.max() < 0.04

    def test_pairs_within_image_bounds(self, blob, blob_templates):
        t = blob_templates[4]
        obs, gt = observe(blob, look_at(np.array([0.2, -0.4, 2.2]), np.zeros(3)))
        m = oracle_match(t, obs, gt,
                         MatcherConfig(pixel_noise_sigma=25.0, max_matches=2000, rng_seed=5))
        assert np.all(m.observation_pixels[:, 0] >= 0)
        assert np.all(m.observation_pixels[:, 0] <= K.width - 1)
        assert np.all(m.observation_pixels[:, 1] >= 0)
        assert np.all(m.observation_pixels[:, 1] <= K.height - 1)

    def test_inlier_ratio_matches_outlier_fraction(self, blob, blob_templates):
        t = blob_templates[0]
        gt_pose = look_at(np.array([0.3, 0.2, 2.5]), np.zeros(3))
        obs, gt = observe(blob, gt_pose)
        sigma = 1.0
        cfg = MatcherConfig(pixel_noise_sigma=sigma, outlier_fraction=0.3,
                            max_matches=1000, rng_seed=11)
        m = oracle_match(t, obs, gt, cfg)
        assert m.score == 1000

        model_pts = lift_template(t, m.template_pixels, K)
        true_pix = project(K, gt.apply(model_pts))
        err = np.linalg.norm(m.observation_pixels - true_pix, axis=1)
        ratio = float(np.mean(err < max(6.0 * sigma, 3.0)))
        # Binomial 3-sigma band around 0.7 for n=1000, plus a little slack
        # for outliers that land near the true pixel by chance.
        assert abs(ratio - 0.7) < 0.05

    def test_opposite_hemisphere_raises(self):
        sphere = make_icosphere(3)
        r = template_radius(sphere, K, 0.6)
        front = render_templates(sphere, K, [look_at(np.array([0, 0, r]), np.zeros(3))])[0]
        back_pose = look_at(np.array([0.0, 0.0, -r]), np.zeros(3))
        obs, gt = observe(sphere, back_pose)
        with pytest.raises(NoCovisibleSurface):
            oracle_match(front, obs, gt, MatcherConfig())

    def test_subsample_respects_cap(self, blob, blob_templates):
        t = blob_templates[0]
        obs, gt = observe(blob, t.camera_from_object)
        m = oracle_match(t, obs, gt, MatcherConfig(max_matches=8))
        assert m.score == 8

    def test_deterministic(self, blob, blob_templates):
        t = blob_templates[2]
        obs, gt = observe(blob, look_at(np.array([0.4, 0.1, 2.3]), np.zeros(3)))
        cfg = MatcherConfig(pixel_noise_sigma=0.7, outlier_fraction=0.2,
                            max_matches=300, rng_seed=42)
        a = oracle_match(t, obs, gt, cfg)
        b = oracle_match(t, obs, gt, cfg)
        assert np.array_equal(a.template_pixels, b.template_pixels)
        assert np.array_equal(a.observation_pixels, b.observation_pixels)


class TestBestView:
    @staticmethod
    def _fake(view, n):
        px = np.tile(np.array([[10.0, 10.0]]), (n, 1))
        return MatchSet(view, px, px)

    def test_tie_breaks_to_lowest_index(self):
        sets = [self._fake(0, 3), self._fake(1, 9), self._fake(2, 9), self._fake(3, 1)]
        best = select_best_view(sets)
        assert best is sets[1]

    def test_single_nonempty(self):
        sets = [self._fake(0, 0), self._fake(5, 2)]
        assert select_best_view(sets) is sets[1]

    def test_all_empty_raises(self):
        with pytest.raises(AllEmpty):
            select_best_view([self._fake(0, 0), self._fake(1, 0)])
        with pytest.raises(ValueError):
            select_best_view([])

    def test_best_view_near_gt_direction(self, blob, blob_templates):
        gt_dir = np.array([0.55, -0.4, 0.65])
        gt_dir /= np.linalg.norm(gt_dir)
        r = template_radius(blob, K, 0.6)
        obs, gt = observe(blob, look_at(1.1 * r * gt_dir, np.zeros(3)))

        cfg = MatcherConfig(max_matches=5000)
        sets = []
        for i, t in enumerate(blob_templates):
            try:
                m = oracle_match(t, obs, gt, cfg)
            except NoCovisibleSurface:
                m = MatchSet(i, np.zeros((0, 2)), np.zeros((0, 2)))
            else:
                m = MatchSet(i, m.template_pixels, m.observation_pixels)
            sets.append(m)
        best = select_best_view(sets)
        cam_dir = invert(blob_templates[best.view_index].camera_from_object).translation
        cam_dir = cam_dir / np.linalg.norm(cam_dir)
        assert np.degrees(np.arccos(np.clip(cam_dir @ gt_dir, -1, 1))) < 45.0


class TestDepthPatch:
    def test_self_match_is_identity(self, blob_templates):
        t = blob_templates[1]
        obs = Observation(depth=t.depth, mask=t.mask, intrinsics=K)
        m = depth_patch_match(t, obs, MatcherConfig())
        assert m.score >= 10
        assert np.array_equal(m.template_pixels, m.observation_pixels)

    def test_featureless_plane_empty(self):
        plane = make_plane(2.0, 2.0)
        depth, mask = rasterize(plane, K, RigidTransform(np.eye(3), [0.0, 0.0, 2.0]))
        t = TemplateView(RigidTransform(np.eye(3), [0.0, 0.0, 2.0]), depth, mask)
        obs = Observation(depth=depth, mask=mask, intrinsics=K)
        m = depth_patch_match(t, obs, MatcherConfig())
        assert m.score == 0

    def test_scaled_object_reprojects(self, blob, blob_templates):
        t = blob_templates[1]
        pose = t.camera_from_object
        obs, gt = observe(blob, pose, scale=1.1)
        m = depth_patch_match(t, obs, MatcherConfig())
        assert m.score >= 8

        model_pts = lift_template(t, m.template_pixels, K)
        pred = project(K, gt.apply(model_pts))
        err = np.linalg.norm(pred - m.observation_pixels, axis=1)
        assert np.mean(err < 3.0) >= 0.5

    def test_cross_object_scores_low(self, blob_templates):
        t = blob_templates[1]
        box = make_box()
        pose = look_at(np.array([1.4, 1.1, 1.9]), np.zeros(3))
        depth, mask = rasterize(box, K, pose)
        obs = Observation(depth=depth, mask=mask, intrinsics=K)
        cross = depth_patch_match(t, obs, MatcherConfig())

        self_obs = Observation(depth=t.depth, mask=t.mask, intrinsics=K)
        self_score = depth_patch_match(t, self_obs, MatcherConfig()).score
        assert cross.score < 6
        assert cross.score < self_score / 2

    def test_match_view_binding_and_determinism(self, blob, blob_templates):
        t = blob_templates[3]
        obs, _ = observe(blob, blob_templates[3].camera_from_object, scale=1.05)
        a = match_view(t, obs, MatcherConfig())
        b = depth_patch_match(t, obs, MatcherConfig())
        assert np.array_equal(a.template_pixels, b.template_pixels)
        assert np.array_equal(a.observation_pixels, b.observation_pixels)


class TestMatchSet:
    def test_score_counts_pairs(self):
        m = MatchSet(2, np.zeros((5, 2)), np.ones((5, 2)))
        assert m.score == 5
        assert len(m.pairs) == 5

    def test_mismatched_lengths_rejected(self):
        with pytest.raises(ValueError):
            MatchSet(0, np.zeros((4, 2)), np.zeros((3, 2)))

    def test_arrays_frozen(self):
        m = MatchSet(0, np.zeros((2, 2)), np.zeros((2, 2)))
        with pytest.raises(ValueError):
            m.template_pixels[0, 0] = 1.0

    def test_config_validation(self):
        with pytest.raises(ValueError):
            MatcherConfig(outlier_fraction=1.0)
        with pytest.raises(ValueError):
            MatcherConfig(max_matches=3)
        with pytest.raises(ValueError):
            MatcherConfig(pixel_noise_sigma=-0.1)
        with pytest.raises(ValueError):
            MatcherConfig(ratio_test=0.0)


class TestJsonl:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        sets = [
            MatchSet(0, rng.uniform(0, 100, (4, 2)), rng.uniform(0, 100, (4, 2))),
            MatchSet(3, rng.uniform(0, 100, (2, 2)), rng.uniform(0, 100, (2, 2))),
        ]
        path = tmp_path / "matches.jsonl"
        dump_matches(sets, path)
        back = load_matches(path)
        assert [m.view_index for m in back] == [0, 3]
        for orig, rt in zip(sets, back):
            assert np.allclose(orig.template_pixels, rt.template_pixels)
            assert np.allclose(orig.observation_pixels, rt.observation_pixels)

    def test_single_set_accepted(self, tmp_path):
        m = MatchSet(1, np.zeros((3, 2)), np.ones((3, 2)))
        path = tmp_path / "one.jsonl"
        dump_matches(m, path)
        assert load_matches(path)[0].score == 3

    def test_io_failures(self, tmp_path):
        with pytest.raises(IoFailure):
            dump_matches([], "/nonexistent-dir/matches.jsonl")
        with pytest.raises(IoFailure):
            load_matches(tmp_path / "missing.jsonl")
        bad = tmp_path / "bad.jsonl"
        bad.write_text("{not json\n")
        with pytest.raises(IoFailure):
            load_matches(bad)
