import numpy as np
import pytest

from fusionlab.core.errors import GeometryError
from fusionlab.core.geometry import (EPS_DEPTH, backproject, frustum_contains, frustum_mask,
                                     project_box3d, project_point, project_points)
from fusionlab.core.types import Box2D, Box3D, CameraModel

from conftest import axis_camera, random_rotation


class TestCameraModel:
    def test_rejects_non_orthonormal_rotation(self):
        R = np.eye(3)
        R[0, 1] = 1e-6
        with pytest.raises(GeometryError):
            axis_camera(R=R)

    def test_rejects_reflection(self):
        with pytest.raises(GeometryError):
            axis_camera(R=np.diag([1.0, 1.0, -1.0]))

    def test_rejects_lower_triangular_intrinsics(self):
        K = np.array([[100.0, 0.0, 100.0], [1.0, 100.0, 100.0], [0.0, 0.0, 1.0]])
        with pytest.raises(GeometryError):
            CameraModel(K=K, R=np.eye(3), t=np.zeros(3), image_size=(200, 200))

    def test_dict_round_trip(self):
        cam = axis_camera(R=random_rotation(np.random.default_rng(3)), t=[0.5, -1.0, 2.0])
        assert CameraModel.from_dict(cam.to_dict()) == cam


class TestProjectPoint:
    def test_optical_axis_hits_principal_point(self, camera):
        uv, depth = project_point(camera, [0.0, 0.0, 7.0])
        np.testing.assert_array_equal(uv, [100.0, 100.0])
        assert depth == 7.0

    def test_behind_camera_is_absent(self, camera):
        assert project_point(camera, [0.0, 0.0, -1.0]) is None

    def test_hand_computed_pixel(self, camera):
        uv, depth = project_point(camera, [1.0, 2.0, 10.0])
        np.testing.assert_allclose(uv, [110.0, 120.0])
        assert depth == pytest.approx(10.0)

    def test_closer_than_eps_is_behind(self, camera):
        assert project_point(camera, [0.0, 0.0, EPS_DEPTH / 2]) is None

    def test_max_edge_is_outside(self, camera):
        # u = 100 + 100 * x / 1 = 200 exactly
        assert project_point(camera, [1.0, 0.0, 1.0]) is None
        assert project_point(camera, [-1.0, -1.0, 1.0]) is not None

    def test_scale_consistency(self, camera):
        rng = np.random.default_rng(0)
        for _ in range(100):
            p = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(2, 20)])
            a = project_point(camera, p)
            b = project_point(camera, p * [2.0, 1.0, 2.0])
            if a is not None and b is not None:
                assert a[0][0] == pytest.approx(b[0][0], abs=1e-9)

    def test_vectorized_matches_scalar(self, camera):
        rng = np.random.default_rng(1)
        pts = rng.uniform(-5, 5, size=(200, 3))
        uv, depth, valid = project_points(camera, pts)
        for p, u, ok in zip(pts, uv, valid):
            single = project_point(camera, p)
            assert (single is not None) == ok
            if ok:
                np.testing.assert_array_equal(single[0], u)


class TestFrustum:
    box = Box2D(80.0, 80.0, 120.0, 120.0)

    def test_center_point_inside(self, camera):
        assert frustum_contains(camera, self.box, (1.0, 50.0), [0.0, 0.0, 20.0])

    def test_one_pixel_outside(self, camera):
        # u = 121 at z = 10
        assert not frustum_contains(camera, self.box, (1.0, 50.0), [2.1, 0.0, 10.0])

    def test_behind_camera(self, camera):
        assert not frustum_contains(camera, self.box, (1.0, 50.0), [0.0, 0.0, -20.0])

    def test_outside_depth_range(self, camera):
        assert not frustum_contains(camera, self.box, (1.0, 10.0), [0.0, 0.0, 20.0])

    def test_box_edge_is_not_strictly_inside(self, camera):
        # u = 120 at z = 10
        assert not frustum_contains(camera, self.box, (1.0, 50.0), [2.0, 0.0, 10.0])

    def test_rejects_empty_depth_range(self, camera):
        with pytest.raises(GeometryError):
            frustum_mask(camera, self.box, (5.0, 5.0), np.zeros((1, 3)))

    def test_point_box_projects_inside(self, camera):
        rng = np.random.default_rng(2)
        for _ in range(200):
            p = rng.uniform([-2, -2, 2], [2, 2, 30])
            if frustum_contains(camera, self.box, (1.0, 50.0), p):
                hull = project_box3d(camera, Box3D(center=p, size=[1e-4] * 3))
                assert hull is not None
                assert self.box.x_min - 0.01 <= hull.x_min and hull.x_max <= self.box.x_max + 0.01
                assert self.box.y_min - 0.01 <= hull.y_min and hull.y_max <= self.box.y_max + 0.01


class TestProjectBox3D:
    def test_unit_cube_is_symmetric(self, camera):
        hull = project_box3d(camera, Box3D(center=[0.0, 0.0, 10.0], size=[1.0, 1.0, 1.0]))
        assert hull.center == pytest.approx([100.0, 100.0])
        assert hull.x_max == pytest.approx(100.0 + 100.0 * 0.5 / 9.5)

    def test_entirely_behind_is_absent(self, camera):
        assert project_box3d(camera, Box3D(center=[0.0, 0.0, -10.0], size=[1.0, 1.0, 1.0])) is None

    def test_yaw_pi_gives_same_hull(self, camera):
        a = project_box3d(camera, Box3D(center=[1.0, 0.5, 12.0], size=[4.0, 2.0, 1.5], yaw=0.0))
        b = project_box3d(camera, Box3D(center=[1.0, 0.5, 12.0], size=[4.0, 2.0, 1.5], yaw=np.pi))
        assert (b.x_min, b.y_min, b.x_max, b.y_max) == pytest.approx((a.x_min, a.y_min, a.x_max, a.y_max))

    def test_score_and_class_copied(self, camera):
        hull = project_box3d(camera, Box3D(center=[0.0, 0.0, 10.0], size=[1, 1, 1], score=0.4, class_id=2))
        assert (hull.score, hull.class_id) == (0.4, 2)

    def test_straddling_box_is_clipped_to_image(self, camera):
        hull = project_box3d(camera, Box3D(center=[0.0, 0.0, 0.5], size=[1.0, 1.0, 2.0]))
        assert hull is not None
        assert 0.0 <= hull.x_min < hull.x_max <= 200.0
        assert 0.0 <= hull.y_min < hull.y_max <= 200.0


class TestBackproject:
    def test_principal_point(self, camera):
        np.testing.assert_allclose(backproject(camera, [100.0, 100.0], 5.0), [0.0, 0.0, 5.0])

    def test_inverts_hand_example(self, camera):
        np.testing.assert_allclose(backproject(camera, [110.0, 120.0], 10.0), [1.0, 2.0, 10.0])

    @pytest.mark.parametrize("depth", [0.0, -1.0])
    def test_rejects_non_positive_depth(self, camera, depth):
        with pytest.raises(GeometryError):
            backproject(camera, [100.0, 100.0], depth)

    def test_round_trip_random_cameras(self):
        rng = np.random.default_rng(4)
        for _ in range(1000):
            cam = axis_camera(f=rng.uniform(50, 500), w=320, h=240,
                              R=random_rotation(rng), t=rng.normal(size=3))
            pixel = rng.uniform([0, 0], [320, 240])
            depth = rng.uniform(0.5, 80.0)
            uv, d = project_point(cam, backproject(cam, pixel, depth))
            np.testing.assert_allclose(uv, pixel, atol=1e-6)
            assert d == pytest.approx(depth, abs=1e-6)
