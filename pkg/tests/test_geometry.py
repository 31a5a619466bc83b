import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gtforge.errors import (
    CoincidentCenters,
    NonPositiveHeight,
    PointBehindCamera,
    RayParallelToGround,
    SizeMismatch,
)
from gtforge.geometry import (
    FootprintPolygon,
    OrientedCamera,
    base_height_ratio,
    footprint,
    load_camera,
    overlap_fraction,
    project,
    project_rectified,
    rectify_pair,
    resample_rectified,
    save_camera,
)
from gtforge.synth import NADIR_ROTATION

from conftest import make_nadir, perturbed_rotation


def identity_cam(focal=1000.0, pp=(500.0, 500.0), size=(1000, 1000), center=(0, 0, 0)):
    return OrientedCamera(focal, pp, size, np.eye(3), np.asarray(center, dtype=float))


class TestProject:
    def test_optical_axis_maps_to_principal_point(self):
        p = project((0.0, 0.0, 10.0), identity_cam())
        assert (p.x, p.y) == (500.0, 500.0)
        assert p.depth == 10.0

    def test_unit_offset(self):
        # x = f*X/Z + cx = 1000*1/10 + 500
        p = project((1.0, 0.0, 10.0), identity_cam())
        assert (p.x, p.y) == (600.0, 500.0)

    def test_zero_depth_rejected(self):
        with pytest.raises(PointBehindCamera):
            project((0.0, 0.0, 0.0), identity_cam())

    def test_negative_depth_rejected(self):
        with pytest.raises(PointBehindCamera):
            project((0.0, 0.0, -5.0), identity_cam())


class TestCameraInvariants:
    def test_rejects_non_orthonormal_rotation(self):
        bad = np.eye(3)
        bad[0, 0] = 1.001
        with pytest.raises(ValueError):
            OrientedCamera(1000.0, (10.0, 10.0), (20, 20), bad, np.zeros(3))

    def test_rejects_reflection(self):
        with pytest.raises(ValueError):
            OrientedCamera(1000.0, (10.0, 10.0), (20, 20), np.diag([1.0, 1.0, -1.0]), np.zeros(3))

    def test_rejects_nonpositive_focal(self):
        with pytest.raises(ValueError):
            OrientedCamera(0.0, (10.0, 10.0), (20, 20), np.eye(3), np.zeros(3))

    def test_rejects_principal_point_outside(self):
        with pytest.raises(ValueError):
            OrientedCamera(1000.0, (25.0, 10.0), (20, 20), np.eye(3), np.zeros(3))


class TestRectify:
    def test_fronto_parallel_pair_is_already_rectified(self):
        left = identity_cam(center=(0, 0, 0))
        right = identity_cam(center=(1, 0, 0))
        geom = rectify_pair(left, right)
        assert np.allclose(geom.rect_rotation_left, np.eye(3), atol=1e-12)
        assert np.allclose(geom.rect_rotation_right, np.eye(3), atol=1e-12)
        assert geom.baseline_b == 1.0

    def test_row_alignment_for_random_pairs(self):
        rng = np.random.default_rng(42)
        worst = 0.0
        for _ in range(20):
            rl = perturbed_rotation(NADIR_ROTATION, rng)
            rr = perturbed_rotation(NADIR_ROTATION, rng)
            cl = np.array([0.0, 0.0, 1000.0]) + rng.normal(0, 5, 3)
            cr = cl + np.array([rng.uniform(50, 300), rng.uniform(-20, 20), rng.uniform(-10, 10)])
            geom = rectify_pair(
                OrientedCamera(1000.0, (640.0, 480.0), (1280, 960), rl, cl),
                OrientedCamera(1050.0, (645.0, 475.0), (1280, 960), rr, cr),
            )
            pts = rng.uniform([-300, -300, 0], [600, 300, 60], (100, 3))
            for p in pts:
                r = project_rectified(p, geom)
                worst = max(worst, abs(r.y_left - r.y_right))
        assert worst < 1e-6

    def test_coincident_centers_rejected(self):
        cam = identity_cam()
        with pytest.raises(CoincidentCenters):
            rectify_pair(cam, identity_cam())

    def test_rotations_stay_orthonormal(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            rl = perturbed_rotation(NADIR_ROTATION, rng)
            rr = perturbed_rotation(NADIR_ROTATION, rng)
            geom = rectify_pair(
                OrientedCamera(1000.0, (500.0, 500.0), (1000, 1000), rl, np.array([0.0, 0.0, 800.0])),
                OrientedCamera(1000.0, (500.0, 500.0), (1000, 1000), rr, np.array([120.0, 5.0, 805.0])),
            )
            for R in (geom.left.rotation, geom.rect_rotation_left, geom.rect_rotation_right):
                assert np.abs(R.T @ R - np.eye(3)).max() < 1e-9


class TestProjectRectified:
    def test_disparity_equals_bf_over_z(self):
        # b=1, f=1000, z=100 -> d = 10
        geom = rectify_pair(identity_cam(center=(0, 0, 0)), identity_cam(center=(1, 0, 0)))
        r = project_rectified((0.3, -0.2, 100.0), geom)
        assert abs(r.disparity - 10.0) < 1e-6
        assert abs(r.y_left - r.y_right) < 1e-9

    def test_disparity_vanishes_at_infinity(self):
        geom = rectify_pair(identity_cam(center=(0, 0, 0)), identity_cam(center=(1, 0, 0)))
        r = project_rectified((0.0, 0.0, 1e9), geom)
        assert r.disparity < 1e-5

    def test_point_behind_camera(self):
        geom = rectify_pair(identity_cam(center=(0, 0, 0)), identity_cam(center=(1, 0, 0)))
        with pytest.raises(PointBehindCamera):
            project_rectified((0.0, 0.0, -10.0), geom)

    def test_eq2_consistency_random_points(self):
        rng = np.random.default_rng(9)
        left = make_nadir((0, 0, 1000))
        right = make_nadir((150, 0, 1000))
        geom = rectify_pair(left, right)
        pts = rng.uniform([-200, -200, 0], [350, 200, 80], (200, 3))
        for p in pts:
            r = project_rectified(p, geom)
            assert abs(r.disparity - geom.baseline_b * geom.focal / r.depth) < 1e-6


class TestBaseHeightRatio:
    def test_hand_division(self):
        geom = rectify_pair(make_nadir((0, 0, 1000)), make_nadir((500, 0, 1000)))
        assert base_height_ratio(geom, 0.0) == pytest.approx(0.5)

    def test_unit_ratio(self):
        geom = rectify_pair(make_nadir((0, 0, 1000)), make_nadir((1000, 0, 1000)))
        assert base_height_ratio(geom, 0.0) == pytest.approx(1.0)

    def test_cameras_below_ground(self):
        geom = rectify_pair(make_nadir((0, 0, 1000)), make_nadir((500, 0, 1000)))
        with pytest.raises(NonPositiveHeight):
            base_height_ratio(geom, 2000.0)


class TestFootprint:
    def test_nadir_square(self):
        fp = footprint(make_nadir((0, 0, 1000)), 0.0)
        assert fp.area == pytest.approx(1000.0 * 1000.0)
        assert np.allclose(np.sort(fp.vertices, axis=0)[[0, -1]], [[-500, -500], [500, 500]])

    def test_area_scales_linearly_with_altitude(self):
        a1 = footprint(make_nadir((0, 0, 1000)), 0.0).area
        a2 = footprint(make_nadir((0, 0, 2000)), 0.0).area
        assert a2 == pytest.approx(4 * a1)  # side scales linearly, area quadratically
        side2 = footprint(make_nadir((0, 0, 2000)), 0.0).vertices[:, 0].max()
        assert side2 == pytest.approx(1000.0)

    def test_counter_clockwise(self):
        fp = footprint(make_nadir((12, 34, 777)), 0.0)
        v = fp.vertices
        area2 = np.sum(v[:, 0] * np.roll(v[:, 1], -1) - np.roll(v[:, 0], -1) * v[:, 1])
        assert area2 > 0

    def test_horizontal_camera_rejected(self):
        horizontal = OrientedCamera(
            1000.0, (500.0, 500.0), (1000, 1000), np.eye(3), np.array([0.0, 0.0, 100.0])
        )
        with pytest.raises(RayParallelToGround):
            footprint(horizontal, 0.0)


def square(x0, y0, side):
    return FootprintPolygon(np.array([
        [x0, y0], [x0 + side, y0], [x0 + side, y0 + side], [x0, y0 + side]
    ], dtype=float))


class TestOverlap:
    def test_identical(self):
        assert overlap_fraction(square(0, 0, 1), square(0, 0, 1)) == 1.0

    def test_disjoint(self):
        assert overlap_fraction(square(0, 0, 1), square(5, 5, 1)) == 0.0

    def test_half_shift(self):
        assert overlap_fraction(square(0, 0, 1), square(0.5, 0, 1)) == pytest.approx(0.5)

    def test_denominator_is_first_polygon(self):
        big = square(0, 0, 2)
        small = square(0, 0, 1)
        assert overlap_fraction(big, small) == pytest.approx(0.25)
        assert overlap_fraction(small, big) == pytest.approx(1.0)

    @given(
        st.floats(-3, 3), st.floats(-3, 3),
        st.floats(0.1, 4), st.floats(0.1, 4),
    )
    @settings(max_examples=200, deadline=None)
    def test_fraction_always_in_unit_interval(self, dx, dy, s1, s2):
        f = overlap_fraction(square(0, 0, s1), square(dx, dy, s2))
        assert 0.0 <= f <= 1.0


class TestResample:
    def test_identity_rectification_is_bit_exact(self):
        rng = np.random.default_rng(5)
        img = rng.integers(0, 256, (40, 40), dtype=np.uint8)
        left = make_nadir((0, 0, 500), focal=100.0, size=(40, 40))
        right = make_nadir((30, 0, 500), focal=100.0, size=(40, 40))
        geom = rectify_pair(left, right)
        out, valid = resample_rectified(img, left, geom, "left")
        assert np.array_equal(out, img)
        assert valid.all()

    def test_quarter_turn_moves_impulse(self):
        # camera rolled 90 degrees about its optical axis; rectification
        # unrolls it. The rect->source map is q = rect_rot.T @ [du, dv, 1]
        # = [dv, -du, 1], so rect pixel (5, 7) samples source (7, 5).
        roll = np.array([[0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        rolled = roll @ NADIR_ROTATION
        left = OrientedCamera(100.0, (5.0, 5.0), (11, 11), rolled, np.array([0.0, 0.0, 500.0]))
        right = OrientedCamera(100.0, (5.0, 5.0), (11, 11), rolled, np.array([8.0, 0.0, 500.0]))
        geom = rectify_pair(left, right)
        img = np.zeros((11, 11), dtype=np.uint8)
        img[5, 7] = 255  # source pixel (u=7, v=5)
        out, _ = resample_rectified(img, left, geom, "left")
        hits = np.argwhere(out == 255)
        assert len(hits) == 1
        assert tuple(hits[0]) == (7, 5)  # rect pixel u=5, v=7

    def test_size_mismatch(self):
        left = make_nadir((0, 0, 500), focal=100.0, size=(40, 40))
        right = make_nadir((30, 0, 500), focal=100.0, size=(40, 40))
        geom = rectify_pair(left, right)
        with pytest.raises(SizeMismatch):
            resample_rectified(np.zeros((10, 10)), left, geom, "left")


class TestPoseFiles:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(11)
        cam = OrientedCamera(
            1234.5, (600.25, 400.75), (1200, 800),
            perturbed_rotation(NADIR_ROTATION, rng),
            np.array([1.25, -7.5, 1000.125]),
        )
        path = tmp_path / "cam.yaml"
        save_camera(cam, path)
        back = load_camera(path)
        assert back.focal == cam.focal
        assert back.principal_point == cam.principal_point
        assert back.image_size == cam.image_size
        assert np.array_equal(back.rotation, cam.rotation)
        assert np.array_equal(back.center, cam.center)
