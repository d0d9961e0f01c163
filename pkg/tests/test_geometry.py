import numpy as np
import pytest

from deformplan.geometry import (
    AxisAlignedBox,
    Camera,
    NNIndex,
    PointCloud,
    VoxelGridSpec,
    farthest_point_downsample,
    fuse_depth_views,
    look_at,
    ransac_remove_outliers,
    splat_to_voxels,
)
from deformplan.rng import make_rng


def simple_camera(width=32, height=32, pose=None, near=0.05, far=2.0):
    if pose is None:
        pose = np.eye(4)
    f = width  # ~53 deg horizontal fov
    return Camera(
        fx=f, fy=f, cx=width / 2, cy=height / 2,
        cam_to_world=pose, width=width, height=height, near=near, far=far,
    )


# ------------------------------------------------------------------- cameras


def test_camera_rejects_bad_rotation():
    pose = np.eye(4)
    pose[0, 0] = 2.0
    with pytest.raises(ValueError, match="orthonormal"):
        simple_camera(pose=pose)


def test_camera_rejects_bad_bounds():
    with pytest.raises(ValueError, match="near"):
        simple_camera(near=0.5, far=0.1)


def test_principal_point_backprojects_on_axis():
    cam = simple_camera()
    depth = np.zeros((32, 32))
    # craft a depth image valid only where we can hit the principal point exactly:
    # use rays_through at the exact principal point instead
    origins, dirs = cam.rays_through(np.array([[cam.cx, cam.cy]]))
    np.testing.assert_allclose(dirs[0], [0, 0, 1], atol=1e-12)
    np.testing.assert_allclose(origins[0], [0, 0, 0], atol=1e-12)
    # and a full-image constant-depth backprojection puts the nearest point to
    # the axis at (~0, ~0, d)
    depth[:] = 0.7
    pts, valid = cam.backproject(depth)
    assert valid.all()
    center = pts[np.argmin(np.abs(pts[:, 0]) + np.abs(pts[:, 1]))]
    assert center[2] == pytest.approx(0.7, abs=1e-12)


def test_corner_rays_mirror_symmetric():
    cam = simple_camera()
    _, d = cam.rays_through(np.array([[0.5, 0.5], [31.5, 0.5], [0.5, 31.5], [31.5, 31.5]]))
    np.testing.assert_allclose(d[0][0], -d[1][0], atol=1e-12)
    np.testing.assert_allclose(d[0][1], d[1][1], atol=1e-12)
    np.testing.assert_allclose(d[0][1], -d[2][1], atol=1e-12)


def test_backproject_then_project_round_trip():
    rng = np.random.default_rng(0)
    pose = look_at(eye=[0.3, -0.2, 0.4], target=[0.0, 0.0, 0.05])
    cam = simple_camera(pose=pose)
    depth = 0.2 + 0.4 * rng.random((32, 32))
    pts, valid = cam.backproject(depth)
    uv, z = cam.project(pts)
    centers = cam.pixel_centers()[valid]
    assert np.abs(uv - centers).max() < 0.5
    np.testing.assert_allclose(z, depth.reshape(-1)[valid], atol=1e-12)


def test_all_zero_depth_gives_empty_cloud():
    cam = simple_camera()
    cloud = fuse_depth_views([(np.zeros((32, 32, 3)), np.zeros((32, 32)))], [cam])
    assert len(cloud) == 0


def test_fuse_rejects_zero_cameras():
    with pytest.raises(ValueError, match="camera"):
        fuse_depth_views([], [])


def test_two_camera_fusion_consistent_with_one():
    # one scene seen from two exact poses: two-camera cloud is a superset
    # whose points lie near the one-camera cloud surface
    rng = np.random.default_rng(1)
    pose_a = look_at(eye=[0.0, -0.5, 0.3], target=[0, 0, 0])
    pose_b = look_at(eye=[0.25, -0.45, 0.3], target=[0, 0, 0])
    cam_a, cam_b = simple_camera(pose=pose_a), simple_camera(pose=pose_b)

    # synthetic scene: a sphere of radius .1 at origin; render depths by ray casting
    def render_depth(cam):
        origins, dirs = cam.rays_through(cam.pixel_centers())
        oc = origins - 0.0
        b = (oc * dirs).sum(1)
        c = (oc * oc).sum(1) - 0.1**2
        disc = b * b - c
        hit = disc > 0
        t = -b - np.sqrt(np.where(hit, disc, 0.0))
        zdir = (dirs @ cam.rotation)[:, 2]  # cos angle to optical axis
        depth = np.where(hit & (t > 0), t * zdir, 0.0)
        return depth.reshape(cam.height, cam.width)

    rgb = np.zeros((32, 32, 3))
    cloud_a = fuse_depth_views([(rgb, render_depth(cam_a))], [cam_a])
    cloud_ab = fuse_depth_views(
        [(rgb, render_depth(cam_a)), (rgb, render_depth(cam_b))], [cam_a, cam_b]
    )
    assert len(cloud_ab) > len(cloud_a)
    # every fused point sits on the sphere, so distance to the sphere is ~0
    r = np.linalg.norm(cloud_ab.positions, axis=1)
    assert np.abs(r - 0.1).max() < 1e-6


def test_crop_box_drops_outside_points():
    cam = simple_camera()
    depth = np.full((32, 32), 0.5)
    box = AxisAlignedBox((-0.05, -0.05, 0.4), (0.05, 0.05, 0.6))
    cloud = fuse_depth_views([(np.zeros((32, 32, 3)), depth)], [cam], crop_box=box)
    assert len(cloud) > 0
    assert box.contains(cloud.positions).all()


# ------------------------------------------------------------------ outliers


def test_ransac_removes_plane_keeps_blob():
    rng = make_rng(3)
    plane_pts = np.column_stack(
        [rng.uniform(-0.2, 0.2, 1000), rng.uniform(-0.2, 0.2, 1000), np.zeros(1000)]
    )
    v = rng.standard_normal((50, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    blob = v * 0.02 * rng.random(50)[:, None] ** (1 / 3) + np.array([0.0, 0.0, 0.08])
    pts = np.concatenate([plane_pts, blob])
    cloud = PointCloud(pts, np.zeros_like(pts))
    cleaned, report = ransac_remove_outliers(cloud, make_rng(0), distance_threshold=0.004)
    assert report.plane is not None
    # all plane points gone
    assert (np.abs(cleaned.positions[:, 2]) > 0.004).all()
    # >= 95% of the blob kept
    assert len(cleaned) >= 0.95 * 50


def test_ransac_collinear_cloud_flagged():
    t = np.linspace(0, 1, 100)
    pts = np.column_stack([t, 2 * t, 3 * t])
    cloud = PointCloud(pts, np.zeros_like(pts))
    cleaned, report = ransac_remove_outliers(cloud, make_rng(0))
    assert report.degenerate
    assert len(cleaned) == len(cloud)
    np.testing.assert_array_equal(cleaned.positions, cloud.positions)


def test_ransac_empty_after_filter_is_not_an_error():
    # a pure plane: everything is removed, empty cloud returned
    rng = make_rng(5)
    pts = np.column_stack([rng.uniform(0, 1, 500), rng.uniform(0, 1, 500), np.zeros(500)])
    cloud = PointCloud(pts, np.zeros_like(pts))
    cleaned, report = ransac_remove_outliers(cloud, make_rng(1), distance_threshold=0.01)
    assert len(cleaned) == 0
    assert report.plane_removed == 500


def test_ransac_deterministic_given_seed():
    rng = make_rng(9)
    pts = rng.standard_normal((300, 3))
    pts[:200, 2] = 0.0
    cloud = PointCloud(pts, np.zeros((300, 3)))
    a, _ = ransac_remove_outliers(cloud, make_rng(7))
    b, _ = ransac_remove_outliers(cloud, make_rng(7))
    np.testing.assert_array_equal(a.positions, b.positions)


# ------------------------------------------------------------------ NN index


def test_nn_query_identity():
    pts = np.array([[0.0, 0, 0], [1, 1, 1], [2, 0, 1]])
    index = NNIndex(pts)
    point, dist = index.query([1.0, 1.0, 1.0])
    assert dist == 0.0
    np.testing.assert_array_equal(point, [1, 1, 1])


def test_nn_matches_brute_force_randomized():
    for seed in range(100):
        rng = make_rng(seed)
        pts = rng.random((200, 3))
        queries = rng.random((50, 3))
        index = NNIndex(pts)
        for q in queries:
            d2 = ((pts - q) ** 2).sum(axis=1)
            expect_idx = int(np.argmin(d2))
            got_idx, got_dist = index.query_index(q)
            assert got_idx == expect_idx
            assert got_dist == pytest.approx(np.sqrt(d2[expect_idx]), abs=1e-12)


def test_nn_tie_breaks_to_lower_insertion_order():
    pts = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0], [0, -1.0, 0]])
    index = NNIndex(pts)
    idx, dist = index.query_index([0.0, 0.0, 0.0])
    assert idx == 0
    assert dist == pytest.approx(1.0)


def test_nn_empty_index_is_error():
    with pytest.raises(ValueError, match="empty"):
        NNIndex(np.zeros((0, 3)))


def test_nn_knn_sorted_and_exact():
    rng = make_rng(11)
    pts = rng.random((100, 3))
    idx, dists = NNIndex(pts).query_knn([0.5, 0.5, 0.5], 10)
    brute = np.sort(np.linalg.norm(pts - [0.5, 0.5, 0.5], axis=1))[:10]
    np.testing.assert_allclose(dists, brute, atol=1e-12)
    assert (np.diff(dists) >= 0).all()


# -------------------------------------------------------------------- voxels


def test_splat_single_point_peaks_at_its_cell():
    spec = VoxelGridSpec(origin=(0, 0, 0), cell_size=0.1, dims=(5, 5, 5))
    grid = splat_to_voxels(np.array([[0.25, 0.25, 0.25]]), spec)  # center of cell (2,2,2)
    assert grid.occupancy[2, 2, 2] == grid.occupancy.max()
    assert grid.occupancy[2, 2, 2] == pytest.approx(1.0)


def test_splat_empty_cloud_zero_grid():
    spec = VoxelGridSpec(origin=(0, 0, 0), cell_size=0.1, dims=(4, 4, 4))
    grid = splat_to_voxels(np.zeros((0, 3)), spec)
    assert grid.occupancy.sum() == 0.0


def test_splat_shift_equivariance():
    rng = make_rng(2)
    spec = VoxelGridSpec(origin=(0, 0, 0), cell_size=0.05, dims=(12, 12, 12))
    pts = 0.2 + 0.2 * rng.random((60, 3))
    g0 = splat_to_voxels(pts, spec).occupancy
    g1 = splat_to_voxels(pts + np.array([0.05, 0.0, 0.0]), spec).occupancy
    # interior cells shift by exactly one cell along x
    np.testing.assert_allclose(g1[2:-1, 1:-1, 1:-1], g0[1:-2, 1:-1, 1:-1], atol=1e-12)


def test_splat_occupancy_in_unit_range():
    rng = make_rng(4)
    spec = VoxelGridSpec(origin=(0, 0, 0), cell_size=0.02, dims=(8, 8, 8))
    pts = 0.08 + 0.02 * rng.random((500, 3))  # heavy overlap forces clamping
    occ = splat_to_voxels(pts, spec).occupancy
    assert occ.min() >= 0.0 and occ.max() <= 1.0
    assert occ.max() == 1.0


# ------------------------------------------------------------- downsampling


def test_fps_preserves_extremes_and_count():
    rng = make_rng(6)
    pts = rng.random((500, 3))
    pts[0] = [10.0, 10.0, 10.0]  # an extreme point must survive
    idx = farthest_point_downsample(pts, 50, make_rng(1))
    assert len(idx) == 50
    assert len(np.unique(idx)) == 50
    assert 0 in idx


def test_fps_deterministic_given_seed():
    rng = make_rng(8)
    pts = rng.random((200, 3))
    a = farthest_point_downsample(pts, 32, make_rng(5))
    b = farthest_point_downsample(pts, 32, make_rng(5))
    np.testing.assert_array_equal(a, b)


def test_fps_returns_everything_when_small():
    pts = np.random.default_rng(0).random((10, 3))
    idx = farthest_point_downsample(pts, 20, make_rng(0))
    np.testing.assert_array_equal(idx, np.arange(10))
