"""LiDAR-to-ground calibration: roll, pitch and mounting height from a RANSAC plane.

Angle conventions
-----------------
A sensor mounted with ZYX angles (roll r, pitch p) above level ground sees the
ground normal, in its own frame, as ``n = (Ry(p) Rx(r))^T e_z``, i.e.
``(-sin p, sin r cos p, cos r cos p)``.  The two extraction formulas

    pitch_from_plane = atan2(a, sqrt(b^2 + c^2))
    roll_from_plane  = atan2(-b, c)

therefore return ``-p`` and ``-r``: the angles of the rotation ``Rx Ry`` that
tilts the level normal onto the observed one.  :class:`GroundCalibration`
reports the mounting angles (the negated formula values), so that
``Ry(pitch) Rx(roll)`` levels the sensor frame and maps the fitted normal to
``(0, 0, 1)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InsufficientPoints, InvalidParameter, NoPlaneFound
from .geometry import PointCloud, RigidTransform, euler_zyx_to_matrix
from .rng import PortableRandom

CONFIDENCE = 0.999
MIN_INLIER_RATIO = 0.10


@dataclass(frozen=True)
class PlaneModel:
    """``a x + b y + c z + d = 0`` with a unit normal and ``c >= 0``."""

    a: float
    b: float
    c: float
    d: float

    @property
    def normal(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c])

    def distances(self, points: np.ndarray) -> np.ndarray:
        """Signed point-to-plane distances."""
        return points @ self.normal + self.d

    @classmethod
    def from_normal(cls, normal, d: float) -> "PlaneModel":
        normal = np.asarray(normal, dtype=np.float64)
        norm = np.linalg.norm(normal)
        if not norm > 0:
            raise InvalidParameter("plane normal must be nonzero")
        normal, d = normal / norm, d / norm
        if _points_down(normal):
            normal, d = -normal, -d
        return cls(float(normal[0]), float(normal[1]), float(normal[2]), float(d))


def _points_down(normal: np.ndarray) -> bool:
    # c == 0 is ambiguous; the first nonzero component breaks the tie
    for value in (normal[2], normal[0], normal[1]):
        if value != 0:
            return value < 0
    return False


@dataclass(frozen=True)
class GroundCalibration:
    """Mounting roll and pitch (radians) and height above ground (meters)."""

    roll: float
    pitch: float
    z_offset: float
    plane: PlaneModel | None = None
    inlier_count: int = 0

    def leveling_transform(self) -> RigidTransform:
        """Sensor frame -> ground-aligned frame with origin on the ground below the sensor."""
        rotation = euler_zyx_to_matrix(self.roll, self.pitch, 0.0)
        return RigidTransform(rotation, np.array([0.0, 0.0, self.z_offset]))


@dataclass(frozen=True)
class GroundParams:
    distance_threshold: float = 0.05
    max_iterations: int = 1000
    seed: int = 0
    max_tilt_deg: float = 30.0

    def __post_init__(self):
        if not self.distance_threshold > 0:
            raise InvalidParameter("distance_threshold must be positive")
        if self.max_iterations < 1:
            raise InvalidParameter("max_iterations must be at least 1")
        if not 0 < self.max_tilt_deg <= 90:
            raise InvalidParameter("max_tilt_deg must lie in (0, 90]")


def pitch_from_plane(plane: PlaneModel) -> float:
    return math.atan2(plane.a, math.sqrt(plane.b * plane.b + plane.c * plane.c))


def roll_from_plane(plane: PlaneModel) -> float:
    return math.atan2(-plane.b, plane.c)


def _required_iterations(inliers: int, total: int, cap: int) -> int:
    w = inliers / total
    if w >= 1.0:
        return 1
    p_good = w ** 3
    if p_good <= 0.0:
        return cap
    # log1p keeps tiny sample probabilities from rounding to zero
    needed = math.log(1.0 - CONFIDENCE) / math.log1p(-p_good)
    return min(cap, max(1, math.ceil(needed)))


def _refit(points: np.ndarray) -> PlaneModel:
    centroid = points.mean(axis=0)
    centered = points - centroid
    _, vectors = np.linalg.eigh(centered.T @ centered)
    normal = vectors[:, 0]
    return PlaneModel.from_normal(normal, -float(normal @ centroid))


def ransac_plane(cloud: PointCloud | np.ndarray, distance_threshold: float,
                 max_iterations: int = 1000, seed: int = 0,
                 max_tilt_deg: float | None = None):
    """Seeded RANSAC plane fit.  Returns ``(PlaneModel, inlier_indices)``.

    Minimal samples are three distinct points drawn from :class:`PortableRandom`.
    The iteration budget shrinks as better models are found (99.9% confidence)
    and never exceeds ``max_iterations``.  When ``max_tilt_deg`` is given, only
    hypotheses whose normal lies within that angle of the sensor z-axis count.
    The winner is refit by least squares over its inliers; the returned
    indices are that winning inlier set.
    """
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    n = len(points)
    if n < 3:
        raise InsufficientPoints(f"plane fitting needs 3 points, got {n}")
    if not distance_threshold > 0:
        raise InvalidParameter("distance_threshold must be positive")
    if max_iterations < 1:
        raise InvalidParameter("max_iterations must be at least 1")
    min_c = -1.0 if max_tilt_deg is None else math.cos(math.radians(max_tilt_deg))

    rng = PortableRandom(seed)
    best_mask, best_count = None, 0
    budget, iteration = max_iterations, 0
    while iteration < budget:
        iteration += 1
        sample = np.minimum((rng.uniform(3) * n).astype(np.int64), n - 1)
        if len(set(sample.tolist())) < 3:
            continue
        p0, p1, p2 = points[sample]
        normal = np.cross(p1 - p0, p2 - p0)
        if not np.linalg.norm(normal) > 1e-12:
            continue
        model = PlaneModel.from_normal(normal, -float(normal @ p0))
        if model.c < min_c:
            continue
        mask = np.abs(model.distances(points)) <= distance_threshold
        count = int(mask.sum())
        if count > best_count:
            best_mask, best_count = mask, count
            budget = _required_iterations(count, n, max_iterations)

    if best_count < MIN_INLIER_RATIO * n or best_count < 3:
        raise NoPlaneFound(f"best plane explains {best_count} of {n} points")
    inliers = np.flatnonzero(best_mask)
    return _refit(points[inliers]), inliers


def ground_calibrate(cloud: PointCloud, params: GroundParams = GroundParams()) -> GroundCalibration:
    """Roll, pitch and height of the sensor over the dominant near-horizontal plane."""
    plane, inliers = ransac_plane(cloud, params.distance_threshold, params.max_iterations,
                                  params.seed, params.max_tilt_deg)
    return GroundCalibration(roll=-roll_from_plane(plane), pitch=-pitch_from_plane(plane),
                             z_offset=abs(plane.d), plane=plane, inlier_count=len(inliers))


def ground_cross_check(cloud: PointCloud, calibration: GroundCalibration,
                       extent: float = 20.0, spacing: float = 0.25,
                       gicp_params=None) -> GroundCalibration:
    """Re-estimate roll, pitch and height by GICP against a synthetic flat ground patch.

    Only the ground inliers found by RANSAC are registered, starting from a
    level pose at the measured height.  The result is a diagnostic; RANSAC
    stays authoritative.
    """
    from .fine import GicpParams, gicp, prepare_cloud

    if calibration.plane is None:
        raise InvalidParameter("calibration carries no plane model")
    params = gicp_params or GicpParams(max_correspondence_distance=0.5)
    mask = np.abs(calibration.plane.distances(cloud.points)) <= 3 * 0.05
    source = cloud.select(np.flatnonzero(mask))
    ticks = np.arange(-extent, extent + spacing / 2, spacing)
    gx, gy = np.meshgrid(ticks, ticks, indexing="ij")
    grid = np.column_stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)])
    target = PointCloud(grid, frame_id="ground")
    initial = RigidTransform(np.eye(3), np.array([0.0, 0.0, calibration.z_offset]))
    result = gicp(prepare_cloud(source, params), prepare_cloud(target, params), initial, params)
    roll, pitch, _ = result.transform.to_euler()
    return GroundCalibration(roll, pitch, float(result.transform.translation[2]),
                             inlier_count=result.correspondences)
