"""Point-cloud container and the geometric primitives every stage builds on.

Clouds are immutable: arrays are copied on construction and flagged read-only,
so a cloud (and any KdIndex built over it) can be shared freely.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyCloud, InsufficientPoints, InvalidParameter

ORTHO_TOL = 1e-9
DEFAULT_NEIGHBORS = 20
DEFAULT_COVARIANCE_EPSILON = 1e-3


def _frozen(a: np.ndarray | None, dtype=np.float64) -> np.ndarray | None:
    if a is None:
        return None
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class PointCloud:
    """An ordered set of 3D points (meters) with optional normals and covariances."""

    points: np.ndarray
    normals: np.ndarray | None = None
    covariances: np.ndarray | None = None
    frame_id: str = ""

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise InvalidParameter(f"points must have shape (n, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise InvalidParameter("points must be finite")
        object.__setattr__(self, "points", _frozen(pts))
        n = len(pts)
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(nrm) != n:
                raise InvalidParameter("normals length differs from points")
            if n and np.max(np.abs(np.linalg.norm(nrm, axis=1) - 1.0)) > 1e-6:
                raise InvalidParameter("normals must be unit length")
            object.__setattr__(self, "normals", _frozen(nrm))
        if self.covariances is not None:
            cov = np.asarray(self.covariances, dtype=np.float64).reshape(-1, 3, 3)
            if len(cov) != n:
                raise InvalidParameter("covariances length differs from points")
            object.__setattr__(self, "covariances", _frozen(cov))

    def __len__(self) -> int:
        return len(self.points)

    @property
    def is_empty(self) -> bool:
        return len(self.points) == 0

    def replace(self, **changes) -> "PointCloud":
        fields = dict(points=self.points, normals=self.normals,
                      covariances=self.covariances, frame_id=self.frame_id)
        fields.update(changes)
        return PointCloud(**fields)

    def select(self, indices) -> "PointCloud":
        idx = np.asarray(indices)
        return PointCloud(
            self.points[idx],
            None if self.normals is None else self.normals[idx],
            None if self.covariances is None else self.covariances[idx],
            self.frame_id,
        )


def _rot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rot_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_zyx_to_matrix(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """R = Rz(yaw) @ Ry(pitch) @ Rx(roll)."""
    return _rot_z(yaw) @ _rot_y(pitch) @ _rot_x(roll)


def matrix_to_euler_zyx(rotation: np.ndarray) -> tuple[float, float, float]:
    """Inverse of :func:`euler_zyx_to_matrix`; returns (roll, pitch, yaw)."""
    r = np.asarray(rotation)
    pitch = np.arctan2(-r[2, 0], np.hypot(r[0, 0], r[1, 0]))
    roll = np.arctan2(r[2, 1], r[2, 2])
    yaw = np.arctan2(r[1, 0], r[0, 0])
    return float(roll), float(pitch), float(yaw)


def so3_exp(omega: np.ndarray) -> np.ndarray:
    """Rodrigues' formula for a rotation vector."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega)
    k = np.array([[0.0, -omega[2], omega[1]],
                  [omega[2], 0.0, -omega[0]],
                  [-omega[1], omega[0], 0.0]])
    if theta < 1e-12:
        return np.eye(3) + k + 0.5 * k @ k
    return (np.eye(3) + np.sin(theta) / theta * k
            + (1.0 - np.cos(theta)) / theta**2 * k @ k)


def orthonormalize(rotation: np.ndarray) -> np.ndarray:
    """Closest proper rotation in Frobenius norm."""
    u, _, vt = np.linalg.svd(rotation)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """SE(3) pose. Maps p to ``rotation @ p + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise InvalidParameter("transform must be finite")
        if np.linalg.norm(r.T @ r - np.eye(3)) >= ORTHO_TOL:
            raise InvalidParameter("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > ORTHO_TOL:
            raise InvalidParameter("rotation determinant is not +1")
        object.__setattr__(self, "rotation", _frozen(r))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix, orthonormal: bool = False) -> "RigidTransform":
        m = np.asarray(matrix, dtype=np.float64).reshape(4, 4)
        r = m[:3, :3]
        if orthonormal:
            r = orthonormalize(r)
        return cls(r, m[:3, 3])

    @classmethod
    def from_euler(cls, roll=0.0, pitch=0.0, yaw=0.0, translation=(0.0, 0.0, 0.0)):
        return cls(euler_zyx_to_matrix(roll, pitch, yaw), translation)

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def to_euler(self) -> tuple[float, float, float]:
        return matrix_to_euler_zyx(self.rotation)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.rotation, np.eye(3))
                    and not np.any(self.translation))

    def __repr__(self) -> str:
        roll, pitch, yaw = np.degrees(self.to_euler())
        x, y, z = self.translation
        return (f"RigidTransform(xyz=({x:.4f}, {y:.4f}, {z:.4f}), "
                f"rpy_deg=({roll:.4f}, {pitch:.4f}, {yaw:.4f}))")


def _distances(points: np.ndarray, query: np.ndarray) -> np.ndarray:
    diff = points - query
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


class KdIndex:
    """Exact k-d tree over the points of a cloud (backed by scipy's cKDTree)."""

    def __init__(self, cloud: PointCloud | np.ndarray):
        pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, float)
        if len(pts) == 0:
            raise EmptyCloud("cannot index an empty cloud")
        self.points = pts
        self.tree = cKDTree(pts)

    def __len__(self) -> int:
        return len(self.points)

    def query(self, queries: np.ndarray, k: int = 1, distance_upper_bound=np.inf):
        """Vectorized k-NN (no tie-breaking guarantees); thin wrapper over cKDTree."""
        return self.tree.query(queries, k=k, distance_upper_bound=distance_upper_bound)


def _as_query(query) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(q)):
        raise InvalidParameter("query point must be finite")
    return q


def _sorted_hits(index: KdIndex, candidates, q: np.ndarray):
    cand = np.asarray(candidates, dtype=np.int64)
    d = _distances(index.points[cand], q)
    order = np.lexsort((cand, d))
    return cand[order], d[order]


def nearest_neighbors(index: KdIndex, query, k: int) -> list[tuple[int, float]]:
    """Exact k nearest neighbors, ascending by distance, ties by lower point index."""
    if k < 1:
        raise InvalidParameter("k must be >= 1")
    if index is None or len(index) == 0:
        raise EmptyCloud("empty index")
    q = _as_query(query)
    k = min(k, len(index))
    dist, _ = index.tree.query(q, k=k)
    kth = float(np.atleast_1d(dist)[-1])
    # every point tied with the k-th distance is a candidate
    cand = index.tree.query_ball_point(q, kth * (1 + 1e-9) + 1e-12)
    idx, d = _sorted_hits(index, cand, q)
    return [(int(i), float(x)) for i, x in zip(idx[:k], d[:k])]


def radius_neighbors(index: KdIndex, query, radius: float) -> list[tuple[int, float]]:
    """All points with distance <= radius, ascending by distance then index."""
    if not radius > 0:
        raise InvalidParameter("radius must be positive")
    if index is None or len(index) == 0:
        raise EmptyCloud("empty index")
    q = _as_query(query)
    cand = index.tree.query_ball_point(q, radius * (1 + 1e-9) + 1e-12)
    idx, d = _sorted_hits(index, cand, q)
    keep = d <= radius
    return [(int(i), float(x)) for i, x in zip(idx[keep], d[keep])]


def voxel_downsample(cloud: PointCloud, voxel_size: float) -> PointCloud:
    """Replace the points of every occupied voxel cell by their centroid.

    Cells are ``floor(coord / voxel_size)`` anchored at the origin; output is
    ordered lexicographically by cell index.  Normals and covariances are dropped.
    """
    if not voxel_size > 0:
        raise InvalidParameter("voxel_size must be positive")
    if cloud.is_empty:
        raise EmptyCloud("cannot downsample an empty cloud")
    cells = np.floor(cloud.points / voxel_size).astype(np.int64)
    _, inverse, counts = np.unique(cells, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.column_stack([
        np.bincount(inverse, weights=cloud.points[:, i], minlength=len(counts))
        for i in range(3)
    ])
    return PointCloud(sums / counts[:, None], frame_id=cloud.frame_id)


def _neighborhood_eigen(points: np.ndarray, k: int, index: KdIndex | None = None):
    index = index or KdIndex(points)
    _, nbr = index.query(points, k=k)
    nbr = np.asarray(nbr).reshape(len(points), k)
    local = points[nbr]
    local = local - local.mean(axis=1, keepdims=True)
    scatter = np.einsum("nki,nkj->nij", local, local) / k
    return np.linalg.eigh(scatter)


def _fallback_normals(major_axis: np.ndarray) -> np.ndarray:
    # any unit vector orthogonal to the dominant direction, picked per-axis for determinism
    helper = np.zeros_like(major_axis)
    helper[np.arange(len(major_axis)), np.argmin(np.abs(major_axis), axis=1)] = 1.0
    n = np.cross(major_axis, helper)
    return n / np.linalg.norm(n, axis=1, keepdims=True)


def estimate_normals_flagged(cloud: PointCloud, k: int = DEFAULT_NEIGHBORS,
                             index: KdIndex | None = None):
    """As :func:`estimate_normals`, also returning the degenerate-neighborhood mask."""
    if k < 3:
        raise InvalidParameter("k must be >= 3")
    if len(cloud) < k:
        raise InsufficientPoints(f"need at least {k} points, got {len(cloud)}")
    pts = cloud.points
    evals, evecs = _neighborhood_eigen(pts, k, index)
    normals = evecs[:, :, 0].copy()
    degenerate = (evals[:, 1] - evals[:, 0]) <= 1e-12
    if np.any(degenerate):
        normals[degenerate] = _fallback_normals(evecs[degenerate, :, 2])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    # orient toward the sensor origin
    flip = np.einsum("ij,ij->i", normals, -pts) < 0
    normals[flip] *= -1.0
    return cloud.replace(normals=normals), degenerate


def estimate_normals(cloud: PointCloud, k: int = DEFAULT_NEIGHBORS,
                     index: KdIndex | None = None) -> PointCloud:
    """Per-point k-NN PCA normals oriented toward the origin (0, 0, 0)."""
    return estimate_normals_flagged(cloud, k, index)[0]


def covariances_from_normals(normals: np.ndarray, epsilon: float) -> np.ndarray:
    """R diag(epsilon, 1, 1) R^T with R's first column the normal, i.e. I + (eps-1) n n^T."""
    n = np.asarray(normals)
    return np.eye(3)[None] + (epsilon - 1.0) * np.einsum("ni,nj->nij", n, n)


def estimate_covariances(cloud: PointCloud, k: int = DEFAULT_NEIGHBORS,
                         epsilon: float = DEFAULT_COVARIANCE_EPSILON,
                         index: KdIndex | None = None) -> PointCloud:
    """Plane-to-plane GICP covariances with eigenvalues (epsilon, 1, 1)."""
    if k < 4:
        raise InvalidParameter("k must be >= 4")
    if not epsilon > 0:
        raise InvalidParameter("epsilon must be positive")
    with_normals = estimate_normals(cloud, k, index)
    return with_normals.replace(
        covariances=covariances_from_normals(with_normals.normals, epsilon))


def apply_transform(cloud: PointCloud, t: RigidTransform) -> PointCloud:
    """Move points rigidly; normals are rotated and covariances conjugated."""
    if t.is_identity():
        return cloud.replace()
    r = t.rotation
    normals = None if cloud.normals is None else cloud.normals @ r.T
    covs = None
    if cloud.covariances is not None:
        covs = np.einsum("ij,njk,lk->nil", r, cloud.covariances, r)
    return PointCloud(t.apply(cloud.points), normals, covs, cloud.frame_id)


def merge(a: PointCloud, b: PointCloud) -> PointCloud:
    """Concatenate ``a`` then ``b``; attribute channels survive only if both carry them."""
    if b.is_empty:
        return a.replace()
    if a.is_empty:
        return b.replace(frame_id=a.frame_id or b.frame_id)
    normals = None
    if a.normals is not None and b.normals is not None:
        normals = np.vstack([a.normals, b.normals])
    covs = None
    if a.covariances is not None and b.covariances is not None:
        covs = np.concatenate([a.covariances, b.covariances])
    return PointCloud(np.vstack([a.points, b.points]), normals, covs, a.frame_id)
