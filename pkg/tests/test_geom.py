import numpy as np
import pytest

from binroad import geom


def simple_cam(fx=50.0, fy=50.0, cx=32.0, cy=32.0):
    return geom.CalibratedCamera(fx, fy, cx, cy, np.eye(3), np.zeros(3))


def translation_pose(t):
    m = np.eye(4)
    m[:3, 3] = t
    return m


def rotz(angle):
    c, s = np.cos(angle), np.sin(angle)
    m = np.eye(4)
    m[:2, :2] = [[c, -s], [s, c]]
    return m


class TestAccumulate:
    def test_identity_poses_duplicate_frame_doubles_count(self):
        rng = np.random.default_rng(0)
        cloud = geom.PointCloud(rng.standard_normal((10, 3)), rng.random(10))
        out = geom.accumulate([cloud, cloud], [np.eye(4), np.eye(4)])
        assert len(out) == 20

    def test_single_frame_translation(self):
        cloud = geom.PointCloud(np.zeros((3, 3)), np.zeros(3))
        t = np.array([1.0, -2.0, 3.0])
        # frame pose translated relative to the first pose's frame
        out = geom.accumulate(
            [geom.PointCloud(np.zeros((1, 3)), np.zeros(1)), cloud],
            [np.eye(4), translation_pose(t)],
        )
        assert np.allclose(out.xyz[1:], t)

    def test_round_trip_through_known_relative_pose(self):
        rng = np.random.default_rng(1)
        pts = rng.standard_normal((50, 3)) * 5
        rel = rotz(0.7) @ translation_pose([2.0, 0.5, -1.0])
        # place frame-1 points so that accumulate maps them back onto pts
        frame1 = geom.PointCloud(geom.apply_rigid(pts, np.linalg.inv(rel)), np.zeros(50))
        out = geom.accumulate(
            [geom.PointCloud(pts, np.zeros(50)), frame1], [np.eye(4), rel]
        )
        assert np.abs(out.xyz[50:] - pts).max() < 1e-9

    def test_length_mismatch_rejected(self):
        cloud = geom.PointCloud(np.zeros((1, 3)), np.zeros(1))
        with pytest.raises(ValueError, match="frames"):
            geom.accumulate([cloud], [np.eye(4), np.eye(4)])

    def test_labels_carried_through(self):
        c = geom.PointCloud(np.zeros((2, 3)), np.zeros(2), labels=[1, 0])
        out = geom.accumulate([c, c], [np.eye(4), np.eye(4)])
        assert out.labels.tolist() == [1, 0, 1, 0]


class TestProjection:
    def test_optical_axis_point_hits_principal_pixel(self):
        cam = simple_cam()
        cloud = geom.PointCloud(np.array([[0.0, 0.0, 5.0]]), np.array([0.7]))
        rast = geom.project_rasterize(cloud, cam, 64, 64)
        assert rast.channels[0, 32, 32] == 5.0
        assert rast.channels[1, 32, 32] == pytest.approx(0.7)
        assert rast.void_mask[32, 32] == 1
        assert rast.void_mask.sum() == 1

    def test_zbuffer_keeps_nearest(self):
        cam = simple_cam()
        xyz = np.array([[0.0, 0.0, 7.0], [0.0, 0.0, 3.0]])
        rast = geom.project_rasterize(geom.PointCloud(xyz, np.array([0.1, 0.9])), cam, 64, 64)
        assert rast.channels[0, 32, 32] == 3.0
        assert rast.channels[1, 32, 32] == pytest.approx(0.9)

    def test_zbuffer_tie_breaks_by_lowest_index(self):
        cam = simple_cam()
        xyz = np.array([[0.0, 0.0, 4.0], [0.0, 0.0, 4.0]])
        rast = geom.project_rasterize(geom.PointCloud(xyz, np.array([0.25, 0.75])), cam, 64, 64)
        assert rast.channels[1, 32, 32] == pytest.approx(0.25)

    def test_point_permutation_gives_identical_raster(self):
        rng = np.random.default_rng(2)
        xyz = rng.uniform(-2, 2, size=(500, 3))
        xyz[:, 2] = rng.uniform(3, 9, size=500)
        cloud = geom.PointCloud(xyz, rng.random(500))
        cam = simple_cam()
        base = geom.project_rasterize(cloud, cam, 64, 64)
        perm = rng.permutation(500)
        shuffled = geom.PointCloud(xyz[perm], cloud.intensity[perm])
        again = geom.project_rasterize(shuffled, cam, 64, 64)
        assert np.array_equal(base.channels, again.channels)
        assert np.array_equal(base.void_mask, again.void_mask)

    def test_empty_frustum_gives_all_void(self):
        cam = simple_cam()
        cloud = geom.PointCloud(np.array([[0.0, 0.0, -5.0]]), np.array([1.0]))
        rast = geom.project_rasterize(cloud, cam, 16, 16)
        assert rast.void_mask.sum() == 0
        assert rast.channels.sum() == 0.0

    def test_void_mask_complements_occupancy_exactly(self):
        rng = np.random.default_rng(3)
        xyz = rng.uniform(-3, 3, size=(200, 3))
        xyz[:, 2] = rng.uniform(2, 10, size=200)
        rast = geom.project_rasterize(geom.PointCloud(xyz, rng.random(200)), simple_cam(), 64, 64)
        occ = rast.channels[3]
        assert set(np.unique(rast.void_mask)) <= {0, 1}
        assert np.array_equal(rast.void_mask == 0, occ == 0)
        assert np.array_equal(rast.void_mask == 1, occ == 1)

    def test_occupancy_matches_analytic_frustum_coverage(self):
        # dense plane of points covering exactly the left half of the image
        cam = simple_cam(fx=32.0, fy=32.0, cx=32.0, cy=32.0)
        z = 8.0
        h = w = 64
        xs = np.linspace((0 - cam.cx) / cam.fx * z, (31.6 - cam.cx) / cam.fx * z, 400)
        ys = np.linspace((0 - cam.cy) / cam.fy * z, (h - 1 - cam.cy) / cam.fy * z, 800)
        gx, gy = np.meshgrid(xs, ys)
        xyz = np.stack([gx.reshape(-1), gy.reshape(-1), np.full(gx.size, z)], axis=1)
        rast = geom.project_rasterize(geom.PointCloud(xyz, np.ones(len(xyz))), cam, h, w)
        frac = rast.void_mask.mean()
        assert abs(frac - 0.5) < 0.02

    def test_scale_consistency_of_projection(self):
        rng = np.random.default_rng(4)
        xyz = rng.uniform(-2, 2, size=(50, 3))
        xyz[:, 2] = rng.uniform(3, 9, size=50)
        cloud = geom.PointCloud(xyz, np.ones(50))
        cam = simple_cam()
        u1, v1, _, _ = geom.project_points(cloud, cam)
        u2, v2, _, _ = geom.project_points(cloud, cam.scaled(2.0))
        assert np.allclose(u2, 2 * u1)
        assert np.allclose(v2, 2 * v1)

    def test_height_channel_is_elevation_above_minimum(self):
        cam = simple_cam()
        xyz = np.array([[0.0, 0.0, 5.0], [0.5, 0.5, 6.0]])
        rast = geom.project_rasterize(geom.PointCloud(xyz, np.ones(2)), cam, 64, 64)
        heights = rast.channels[2][rast.void_mask == 1]
        assert sorted(heights.tolist()) == [0.0, 1.0]


class TestLabelRaster:
    def test_single_labeled_point(self):
        cam = simple_cam()
        cloud = geom.PointCloud(np.array([[0.0, 0.0, 5.0]]), np.ones(1), labels=[1])
        label_map, void = geom.labels_to_raster(cloud, cam, 64, 64)
        assert label_map[32, 32] == 1
        assert (label_map[void == 0] == geom.IGNORE_LABEL).all()
        assert void.sum() == 1

    def test_unlabeled_cloud_rejected(self):
        cloud = geom.PointCloud(np.zeros((1, 3)), np.zeros(1))
        with pytest.raises(ValueError, match="labels"):
            geom.labels_to_raster(cloud, simple_cam(), 8, 8)

    def test_consistent_with_rasterize_winner(self):
        rng = np.random.default_rng(5)
        xyz = rng.uniform(-2, 2, size=(300, 3))
        xyz[:, 2] = rng.uniform(2, 10, size=300)
        labels = rng.integers(0, 2, size=300)
        # encode the label in the intensity so the two passes can be compared
        cloud = geom.PointCloud(xyz, labels.astype(float), labels=labels)
        cam = simple_cam()
        rast = geom.project_rasterize(cloud, cam, 64, 64)
        label_map, void = geom.labels_to_raster(cloud, cam, 64, 64)
        assert np.array_equal(void, rast.void_mask)
        occ = rast.void_mask == 1
        assert np.array_equal(label_map[occ].astype(float), rast.channels[1][occ])


class TestValidationAndIO:
    def test_camera_validation(self):
        with pytest.raises(ValueError, match="orthonormal"):
            geom.CalibratedCamera(10, 10, 5, 5, np.eye(3) * 1.5, np.zeros(3))
        with pytest.raises(ValueError, match="focal"):
            geom.CalibratedCamera(-1, 10, 5, 5, np.eye(3), np.zeros(3))

    def test_non_finite_points_rejected(self):
        with pytest.raises(ValueError, match="finite"):
            geom.PointCloud(np.array([[np.inf, 0, 0]]), np.zeros(1))

    def test_pose_validation(self):
        bad = np.eye(4)
        bad[0, 0] = 2.0
        with pytest.raises(ValueError, match="rigid"):
            geom.check_rigid(bad)

    def test_cloud_file_round_trip(self, tmp_path):
        rng = np.random.default_rng(6)
        cloud = geom.PointCloud(rng.standard_normal((20, 3)), rng.random(20),
                                labels=rng.integers(0, 3, size=20))
        path = tmp_path / "cloud.txt"
        geom.save_cloud(path, cloud)
        back = geom.load_cloud(path)
        assert np.array_equal(back.xyz, cloud.xyz)
        assert np.array_equal(back.intensity, cloud.intensity)
        assert np.array_equal(back.labels, cloud.labels)

    def test_pose_and_calib_round_trip(self, tmp_path):
        poses = [np.eye(4), rotz(0.3) @ translation_pose([1, 2, 3])]
        geom.save_poses(tmp_path / "poses.txt", poses)
        back = geom.load_poses(tmp_path / "poses.txt")
        assert np.allclose(back[1], poses[1], atol=1e-15)
        cam = geom.CalibratedCamera(50.5, 49.5, 31.7, 30.2, np.eye(3), np.array([0.1, 0.2, 0.3]))
        geom.save_calib(tmp_path / "calib.txt", cam)
        cam2 = geom.load_calib(tmp_path / "calib.txt")
        assert cam2.fx == cam.fx and cam2.cy == cam.cy
        assert np.array_equal(cam2.translation, cam.translation)
