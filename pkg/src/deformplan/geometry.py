"""Cameras, point-cloud fusion and cleanup, spatial indexing, voxel splatting.

Camera convention (asserted in tests): right-handed, the camera looks down
its local +z axis, image y points down. Pixel (i, j) has its center at
continuous coordinates (i + 0.5, j + 0.5); intrinsics are expressed in the
same continuous pixel coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

__all__ = [
    "Camera",
    "look_at",
    "PointCloud",
    "AxisAlignedBox",
    "fuse_depth_views",
    "ransac_remove_outliers",
    "OutlierRemovalReport",
    "NNIndex",
    "VoxelGridSpec",
    "VoxelGrid",
    "splat_to_voxels",
    "farthest_point_downsample",
    "knn_distances",
]


# --------------------------------------------------------------------- cameras


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with a rigid camera-to-world transform."""

    fx: float
    fy: float
    cx: float
    cy: float
    cam_to_world: np.ndarray  # (4, 4)
    width: int
    height: int
    near: float
    far: float

    def __post_init__(self):
        m = np.asarray(self.cam_to_world, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"cam_to_world must be 4x4, got {m.shape}")
        r = m[:3, :3]
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9):
            raise ValueError("camera rotation block is not orthonormal")
        if np.linalg.det(r) < 0:
            raise ValueError("camera rotation block must have determinant +1")
        if not (0.0 < self.near < self.far):
            raise ValueError(f"need 0 < near < far, got near={self.near} far={self.far}")
        object.__setattr__(self, "cam_to_world", m)

    @property
    def position(self) -> np.ndarray:
        return self.cam_to_world[:3, 3]

    @property
    def rotation(self) -> np.ndarray:
        return self.cam_to_world[:3, :3]

    def pixel_centers(self) -> np.ndarray:
        """All pixel-center coordinates, shape (height*width, 2), row-major."""
        us = np.arange(self.width) + 0.5
        vs = np.arange(self.height) + 0.5
        uu, vv = np.meshgrid(us, vs)
        return np.stack([uu.reshape(-1), vv.reshape(-1)], axis=1)

    def rays_through(self, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """World-space (origins, unit directions) through continuous pixel coords."""
        pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
        d_cam = np.stack(
            [
                (pixels[:, 0] - self.cx) / self.fx,
                (pixels[:, 1] - self.cy) / self.fy,
                np.ones(len(pixels)),
            ],
            axis=1,
        )
        d_world = d_cam @ self.rotation.T
        d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
        origins = np.broadcast_to(self.position, d_world.shape).copy()
        return origins, d_world

    def backproject(self, depth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Lift a depth image to world points.

        depth is (height, width) in meters; entries that are 0, negative,
        or NaN are invalid. Returns (points (m,3), flat valid mask).
        """
        depth = np.asarray(depth, dtype=np.float64)
        if depth.shape != (self.height, self.width):
            raise ValueError(
                f"depth image shape {depth.shape} does not match camera "
                f"resolution ({self.height}, {self.width})"
            )
        z = depth.reshape(-1)
        valid = np.isfinite(z) & (z > 0.0)
        pix = self.pixel_centers()[valid]
        zv = z[valid]
        cam_pts = np.stack(
            [
                (pix[:, 0] - self.cx) / self.fx * zv,
                (pix[:, 1] - self.cy) / self.fy * zv,
                zv,
            ],
            axis=1,
        )
        world = cam_pts @ self.rotation.T + self.position
        return world, valid

    def project(self, points_world: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Project world points; returns (pixel coords (n,2), camera-space z (n,))."""
        pts = np.atleast_2d(np.asarray(points_world, dtype=np.float64))
        cam = (pts - self.position) @ self.rotation
        z = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * cam[:, 0] / z + self.cx
            v = self.fy * cam[:, 1] / z + self.cy
        return np.stack([u, v], axis=1), z


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world transform with +z toward target and image y down."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ValueError("look_at: eye and target coincide")
    z_axis = forward / norm
    x_axis = np.cross(z_axis, np.asarray(up, dtype=np.float64))
    x_norm = np.linalg.norm(x_axis)
    if x_norm < 1e-9:
        raise ValueError("look_at: view direction parallel to up vector")
    x_axis /= x_norm
    y_axis = np.cross(z_axis, x_axis)
    m = np.eye(4)
    m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = x_axis, y_axis, z_axis, eye
    return m


# ----------------------------------------------------------------- point clouds


@dataclass
class PointCloud:
    """Fused point set: world positions (meters) and RGB colors in [0, 1]."""

    positions: np.ndarray  # (n, 3)
    colors: np.ndarray  # (n, 3)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if len(self.positions) != len(self.colors):
            raise ValueError(
                f"positions ({len(self.positions)}) and colors ({len(self.colors)}) row counts differ"
            )
        if len(self.colors) and (self.colors.min() < -1e-9 or self.colors.max() > 1.0 + 1e-9):
            raise ValueError("colors must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.positions)

    def select(self, mask_or_indices) -> "PointCloud":
        return PointCloud(self.positions[mask_or_indices], self.colors[mask_or_indices])

    @staticmethod
    def empty() -> "PointCloud":
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 3)))


@dataclass(frozen=True)
class AxisAlignedBox:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def __post_init__(self):
        lo, hi = np.asarray(self.lo, float), np.asarray(self.hi, float)
        if not np.all(lo < hi):
            raise ValueError(f"box must have lo < hi, got {self.lo} / {self.hi}")

    def contains(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        return np.all((pts >= lo) & (pts <= hi), axis=1)

    def normalize(self, points: np.ndarray) -> np.ndarray:
        """Map box coordinates linearly to [-1, 1]^3."""
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        return 2.0 * (points - lo) / (hi - lo) - 1.0

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (np.asarray(self.lo) + np.asarray(self.hi))

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.hi) - np.asarray(self.lo)


def fuse_depth_views(frames, cameras, crop_box: AxisAlignedBox | None = None) -> PointCloud:
    """Back-project per-camera RGB-D frames into one world-space cloud.

    ``frames`` is a sequence of (rgb (H,W,3), depth (H,W)) pairs aligned
    with ``cameras``. Depth entries of 0 or NaN are skipped. Points outside
    ``crop_box`` (when given) are dropped. An all-invalid input produces an
    empty cloud, not an error.
    """
    if len(cameras) == 0:
        raise ValueError("fuse_depth_views: need at least one camera")
    if len(frames) != len(cameras):
        raise ValueError(f"got {len(frames)} frames for {len(cameras)} cameras")
    positions, colors = [], []
    for (rgb, depth), cam in zip(frames, cameras):
        rgb = np.asarray(rgb, dtype=np.float64)
        if rgb.shape[:2] != (cam.height, cam.width):
            raise ValueError(
                f"rgb image shape {rgb.shape[:2]} does not match camera "
                f"resolution ({cam.height}, {cam.width})"
            )
        pts, valid = cam.backproject(depth)
        cols = rgb.reshape(-1, 3)[valid]
        if crop_box is not None and len(pts):
            inside = crop_box.contains(pts)
            pts, cols = pts[inside], cols[inside]
        positions.append(pts)
        colors.append(cols)
    return PointCloud(np.concatenate(positions, axis=0), np.concatenate(colors, axis=0))


# ------------------------------------------------------------- outlier removal


@dataclass
class OutlierRemovalReport:
    degenerate: bool = False
    plane: np.ndarray | None = None  # (a, b, c, d) with a*x+b*y+c*z+d = 0, unit normal
    plane_removed: int = 0
    statistical_removed: int = 0


def _fit_plane(p0, p1, p2):
    normal = np.cross(p1 - p0, p2 - p0)
    norm = np.linalg.norm(normal)
    if norm < 1e-12:
        return None
    normal = normal / norm
    return np.concatenate([normal, [-normal @ p0]])


def ransac_remove_outliers(
    cloud: PointCloud,
    rng: np.random.Generator,
    iterations: int = 200,
    distance_threshold: float = 0.005,
    knn_k: int = 8,
    knn_lambda: float = 2.0,
    min_plane_fraction: float = 0.25,
) -> tuple[PointCloud, OutlierRemovalReport]:
    """Drop the dominant support plane, everything below it, and statistical outliers.

    RANSAC fits the single best plane; if it captures at least
    ``min_plane_fraction`` of the cloud it is treated as the support
    surface and all points on or below it are removed (the normal is
    oriented so the bulk of the remaining points sits on the positive
    side). Afterwards, points whose mean distance to their ``knn_k``
    nearest neighbors exceeds mean + ``knn_lambda`` * stddev of that
    statistic are removed. Deterministic given the generator state. If no
    valid plane can be fit (all points collinear), the input is returned
    unchanged with ``report.degenerate`` set.
    """
    report = OutlierRemovalReport()
    n = len(cloud)
    if n < 3:
        raise ValueError(f"ransac_remove_outliers: need at least 3 points, got {n}")

    pts = cloud.positions
    best_count, best_plane = -1, None
    for _ in range(iterations):
        idx = rng.choice(n, size=3, replace=False)
        plane = _fit_plane(pts[idx[0]], pts[idx[1]], pts[idx[2]])
        if plane is None:
            continue
        dist = np.abs(pts @ plane[:3] + plane[3])
        count = int((dist < distance_threshold).sum())
        if count > best_count:
            best_count, best_plane = count, plane

    if best_plane is None:
        report.degenerate = True
        return cloud, report

    keep = np.ones(n, dtype=bool)
    if best_count >= max(3, min_plane_fraction * n):
        signed = pts @ best_plane[:3] + best_plane[3]
        above = int((signed > distance_threshold).sum())
        below = int((signed < -distance_threshold).sum())
        if below > above:
            best_plane = -best_plane
            signed = -signed
        keep = signed > distance_threshold
        report.plane = best_plane
        report.plane_removed = int(n - keep.sum())

    kept = cloud.select(keep)
    if len(kept) > knn_k:
        stat = knn_distances(kept.positions, kept.positions, k=knn_k, skip_first=True).mean(axis=1)
        cut = stat.mean() + knn_lambda * stat.std()
        inliers = stat <= cut
        report.statistical_removed = int(len(kept) - inliers.sum())
        kept = kept.select(inliers)
    return kept, report


def knn_distances(
    queries: np.ndarray,
    points: np.ndarray,
    k: int = 1,
    skip_first: bool = False,
    chunk: int = 1024,
) -> np.ndarray:
    """Exact distances to the k nearest of ``points`` per query, ascending.

    ``skip_first`` drops the closest hit (for self-neighborhood queries
    where every point matches itself at distance 0). Computed by chunked
    full distance evaluation; exact by construction.
    """
    queries = np.atleast_2d(queries)
    points = np.atleast_2d(points)
    kk = k + 1 if skip_first else k
    if kk > len(points):
        raise ValueError(f"asked for {kk} neighbors among {len(points)} points")
    out = np.empty((len(queries), k))
    for start in range(0, len(queries), chunk):
        block = queries[start : start + chunk]
        d = cdist(block, points)
        part = np.partition(d, kk - 1, axis=1)[:, :kk]
        part.sort(axis=1)
        out[start : start + len(block)] = part[:, 1:] if skip_first else part[:, :k]
    return out


# ------------------------------------------------------------------- NN index


class _Node:
    __slots__ = ("axis", "threshold", "left", "right", "indices")

    def __init__(self, axis=-1, threshold=0.0, left=None, right=None, indices=None):
        self.axis = axis
        self.threshold = threshold
        self.left = left
        self.right = right
        self.indices = indices


class NNIndex:
    """Exact nearest-neighbor index over a fixed point set (KD-tree).

    Equidistant candidates resolve to the lowest insertion index. The
    index is immutable after construction and safe to share read-only.
    """

    LEAF_SIZE = 16

    def __init__(self, points: np.ndarray):
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(points) == 0:
            raise ValueError("NNIndex: cannot index an empty point set")
        self.points = points
        self._root = self._build(np.arange(len(points)))

    def _build(self, indices: np.ndarray) -> _Node:
        if len(indices) <= self.LEAF_SIZE:
            return _Node(indices=np.sort(indices))
        pts = self.points[indices]
        axis = int(np.argmax(pts.max(axis=0) - pts.min(axis=0)))
        order = np.argsort(pts[:, axis], kind="stable")
        mid = len(order) // 2
        threshold = float(pts[order[mid], axis])
        left, right = indices[order[:mid]], indices[order[mid:]]
        if len(left) == 0 or len(right) == 0:  # all coordinates equal on this axis
            return _Node(indices=np.sort(indices))
        return _Node(axis=axis, threshold=threshold, left=self._build(left), right=self._build(right))

    def query(self, point) -> tuple[np.ndarray, float]:
        """Nearest stored point and its Euclidean distance."""
        idx, dist = self.query_index(point)
        return self.points[idx], dist

    def query_index(self, point) -> tuple[int, float]:
        q = np.asarray(point, dtype=np.float64).reshape(3)
        best = [np.inf, -1]  # (squared distance, index)
        self._search(self._root, q, best)
        return best[1], float(np.sqrt(best[0]))

    def _search(self, node: _Node, q: np.ndarray, best: list) -> None:
        if node.indices is not None:
            d2 = ((self.points[node.indices] - q) ** 2).sum(axis=1)
            pos = int(np.argmin(d2))  # indices sorted, so first minimum has lowest index
            if d2[pos] < best[0] or (d2[pos] == best[0] and node.indices[pos] < best[1]):
                best[0], best[1] = d2[pos], int(node.indices[pos])
            return
        delta = q[node.axis] - node.threshold
        near, far = (node.left, node.right) if delta < 0 else (node.right, node.left)
        self._search(near, q, best)
        if delta * delta <= best[0]:  # equality still explored: tie-break needs both sides
            self._search(far, q, best)

    def query_knn(self, point, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Indices and distances of the k nearest points, ascending (ties by index)."""
        q = np.asarray(point, dtype=np.float64).reshape(3)
        if k > len(self.points):
            raise ValueError(f"asked for {k} neighbors among {len(self.points)} points")
        d2 = ((self.points - q) ** 2).sum(axis=1)
        order = np.lexsort((np.arange(len(d2)), d2))[:k]
        return order, np.sqrt(d2[order])


# -------------------------------------------------------------------- voxels


@dataclass(frozen=True)
class VoxelGridSpec:
    origin: tuple[float, float, float]
    cell_size: float
    dims: tuple[int, int, int]

    def __post_init__(self):
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        if any(d <= 0 for d in self.dims):
            raise ValueError(f"grid dims must be positive, got {self.dims}")

    @staticmethod
    def covering(box: AxisAlignedBox, dims=(32, 32, 32)) -> "VoxelGridSpec":
        cell = float(np.max(box.extent / np.asarray(dims)))
        return VoxelGridSpec(origin=tuple(box.lo), cell_size=cell, dims=tuple(dims))

    def cell_centers_of(self, ijk: np.ndarray) -> np.ndarray:
        return np.asarray(self.origin) + (np.asarray(ijk) + 0.5) * self.cell_size


@dataclass
class VoxelGrid:
    spec: VoxelGridSpec
    occupancy: np.ndarray

    def __post_init__(self):
        self.occupancy = np.asarray(self.occupancy, dtype=np.float64)
        if self.occupancy.shape != tuple(self.spec.dims):
            raise ValueError(
                f"occupancy shape {self.occupancy.shape} does not match dims {self.spec.dims}"
            )


_SPLAT_OFFSETS = np.array(
    [(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)], dtype=np.int64
)


def splat_to_voxels(positions, spec: VoxelGridSpec) -> VoxelGrid:
    """Deposit a truncated Gaussian per point into an occupancy grid.

    Kernel sigma is half the cell size, truncated at 2 sigma (one cell), so
    each point touches at most its 27-cell neighborhood. Occupancy is the
    clamped sum of kernel weights, in [0, 1]. An empty input yields an
    all-zero grid.
    """
    if isinstance(positions, PointCloud):
        positions = positions.positions
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    occ = np.zeros(spec.dims, dtype=np.float64)
    if len(positions) == 0:
        return VoxelGrid(spec, occ)

    sigma = spec.cell_size / 2.0
    trunc2 = (2.0 * sigma) ** 2
    base = np.floor((positions - np.asarray(spec.origin)) / spec.cell_size).astype(np.int64)
    dims = np.asarray(spec.dims)
    for off in _SPLAT_OFFSETS:
        cells = base + off
        centers = spec.cell_centers_of(cells)
        d2 = ((positions - centers) ** 2).sum(axis=1)
        ok = (d2 <= trunc2) & np.all((cells >= 0) & (cells < dims), axis=1)
        if not ok.any():
            continue
        w = np.exp(-d2[ok] / (2.0 * sigma * sigma))
        flat = np.ravel_multi_index(cells[ok].T, spec.dims)
        np.add.at(occ.reshape(-1), flat, w)
    np.clip(occ, 0.0, 1.0, out=occ)
    return VoxelGrid(spec, occ)


# ---------------------------------------------------------------- downsampling


def farthest_point_downsample(points: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of a farthest-point subsample; shape extremities survive.

    The first point is drawn from ``rng``; each subsequent pick maximizes
    the distance to the already-selected set (first index wins ties).
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    if count >= n:
        return np.arange(n)
    if count <= 0:
        raise ValueError("count must be positive")
    chosen = np.empty(count, dtype=np.int64)
    chosen[0] = rng.integers(n)
    dist2 = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    for i in range(1, count):
        chosen[i] = int(np.argmax(dist2))
        new_d2 = ((points - points[chosen[i]]) ** 2).sum(axis=1)
        np.minimum(dist2, new_d2, out=dist2)
    return chosen
