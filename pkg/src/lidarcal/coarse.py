"""Initial-guess-free global registration from FPFH correspondences.

The front end keeps mutual nearest neighbors in descriptor space, prunes
them with a pairwise length-consistency graph (greedy maximum clique) and
solves the pose with graduated non-convexity over a truncated least
squares cost.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import (CalibrationError, DegenerateCorrespondences, DegenerateGeometry,
                     InvalidParameter, NoCorrespondences, NoFeatures)
from .features import FeatureCloud, compute_fpfh
from .geometry import (DEFAULT_NEIGHBORS, PointCloud, RigidTransform, estimate_normals,
                       orthonormalize, voxel_downsample)

log = logging.getLogger(__name__)

GNC_FACTOR = 1.4
GNC_MAX_ITERATIONS = 100
GNC_WEIGHT_TOL = 1e-6


@dataclass(frozen=True)
class CoarseParams:
    voxel_size: float = 0.35
    fpfh_radius_factor: float = 5.0
    noise_bound: float | None = None  # defaults to voxel_size
    normal_neighbors: int = DEFAULT_NEIGHBORS
    min_inliers: int = 3

    def __post_init__(self):
        if not self.voxel_size > 0 or not self.fpfh_radius_factor > 0:
            raise InvalidParameter("voxel_size and fpfh_radius_factor must be positive")
        if self.noise_bound is not None and not self.noise_bound > 0:
            raise InvalidParameter("noise_bound must be positive")
        if self.min_inliers < 3:
            raise InvalidParameter("min_inliers must be >= 3")

    @property
    def effective_noise_bound(self) -> float:
        return self.voxel_size if self.noise_bound is None else self.noise_bound


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    pairs: np.ndarray  # (m, 2) int: (source_index, target_index)
    distances: np.ndarray  # (m,) descriptor-space L2 distance

    def __post_init__(self):
        object.__setattr__(self, "pairs", np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2))
        object.__setattr__(self, "distances", np.asarray(self.distances, dtype=np.float64).reshape(-1))

    def __len__(self) -> int:
        return len(self.pairs)

    def subset(self, mask_or_idx) -> "CorrespondenceSet":
        return CorrespondenceSet(self.pairs[mask_or_idx], self.distances[mask_or_idx])


@dataclass(frozen=True, eq=False)
class CoarseResult:
    transform: RigidTransform
    inlier_pairs: CorrespondenceSet
    inlier_count: int
    converged: bool = True
    failure_reason: str | None = None
    stats: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.failure_reason is None


def match_features(source: FeatureCloud, target: FeatureCloud) -> CorrespondenceSet:
    """Mutual nearest neighbors in descriptor space; invalid descriptors never match."""
    src_idx = np.flatnonzero(source.valid)
    tgt_idx = np.flatnonzero(target.valid)
    if len(src_idx) == 0 or len(tgt_idx) == 0:
        raise NoFeatures("no valid descriptors to match")
    src_desc = source.descriptors[src_idx]
    tgt_desc = target.descriptors[tgt_idx]
    d_st, nn_st = cKDTree(tgt_desc).query(src_desc, k=1)
    _, nn_ts = cKDTree(src_desc).query(tgt_desc, k=1)
    mutual = nn_ts[nn_st] == np.arange(len(src_idx))
    if not np.any(mutual):
        raise NoCorrespondences("no mutual descriptor matches")
    pairs = np.column_stack([src_idx[mutual], tgt_idx[nn_st[mutual]]])
    return CorrespondenceSet(pairs, d_st[mutual])


def consistency_graph(src_pts: np.ndarray, tgt_pts: np.ndarray, noise_bound: float,
                      chunk: int = 1024) -> np.ndarray:
    """Boolean adjacency: pairs u, v agree iff their point-to-point lengths differ by <= 2*noise_bound."""
    m = len(src_pts)
    adj = np.zeros((m, m), dtype=bool)
    for start in range(0, m, chunk):
        sl = slice(start, min(start + chunk, m))
        ds = np.linalg.norm(src_pts[sl, None, :] - src_pts[None, :, :], axis=2)
        dt = np.linalg.norm(tgt_pts[sl, None, :] - tgt_pts[None, :, :], axis=2)
        adj[sl] = np.abs(ds - dt) <= 2.0 * noise_bound
    np.fill_diagonal(adj, False)
    return adj


def greedy_max_clique(adj: np.ndarray) -> np.ndarray:
    """Repeatedly keep the highest-degree candidate and drop its non-neighbors.

    Degrees are counted inside the shrinking candidate set; ties go to the
    lowest index.  Returns sorted vertex indices of a maximal clique.
    """
    m = len(adj)
    cand = np.ones(m, dtype=bool)
    degree = adj.sum(axis=1).astype(np.int64)
    clique = []
    while cand.any():
        v = int(np.argmax(np.where(cand, degree, -1)))
        clique.append(v)
        removed = cand & ~adj[v]
        cand &= adj[v]
        if removed.any():
            degree -= adj[:, removed].sum(axis=1)
    return np.array(sorted(clique), dtype=np.int64)


def prune_correspondences(pairs: CorrespondenceSet, source: PointCloud, target: PointCloud,
                          noise_bound: float) -> CorrespondenceSet:
    """Keep the largest mutually length-consistent subset (greedy clique)."""
    if not noise_bound > 0:
        raise InvalidParameter("noise_bound must be positive")
    if len(pairs) < 3:
        raise DegenerateCorrespondences(f"need >= 3 pairs, got {len(pairs)}")
    adj = consistency_graph(source.points[pairs.pairs[:, 0]],
                            target.points[pairs.pairs[:, 1]], noise_bound)
    keep = greedy_max_clique(adj)
    if len(keep) < 3:
        raise DegenerateCorrespondences(f"only {len(keep)} consistent pairs survive")
    return pairs.subset(keep)


def weighted_procrustes(src: np.ndarray, tgt: np.ndarray, weights: np.ndarray | None = None):
    """Closed-form rigid fit minimizing sum w_i |R s_i + t - q_i|^2 (det-corrected SVD)."""
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64)
    total = w.sum()
    mu_s = w @ src / total
    mu_t = w @ tgt / total
    cross = (src - mu_s).T @ ((tgt - mu_t) * w[:, None])
    u, _, vt = np.linalg.svd(cross)
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return rot, mu_t - rot @ mu_s


def _is_collinear(points: np.ndarray, rel_tol: float = 1e-9) -> bool:
    if len(points) < 3:
        return True
    s = np.linalg.svd(points - points.mean(axis=0), compute_uv=False)
    return s[0] == 0 or s[1] <= rel_tol * s[0]


def _tls_weights(r2: np.ndarray, mu: float, c2: float) -> np.ndarray:
    w = np.sqrt(c2 * mu * (mu + 1.0) / np.maximum(r2, 1e-300)) - mu
    w = np.where(r2 >= (mu + 1.0) / mu * c2, 0.0, w)
    w = np.where(r2 <= mu / (mu + 1.0) * c2, 1.0, w)
    return np.clip(w, 0.0, 1.0)


def gnc_tls(src: np.ndarray, tgt: np.ndarray, noise_bound: float,
            max_iterations: int = GNC_MAX_ITERATIONS, factor: float = GNC_FACTOR,
            weight_tol: float = GNC_WEIGHT_TOL):
    """Graduated non-convexity for truncated least squares rigid registration.

    Returns (rotation, translation, weights, converged, iterations).
    """
    if _is_collinear(src) or _is_collinear(tgt):
        raise DegenerateGeometry("correspondences are collinear")
    c2 = noise_bound**2
    rot, trans = weighted_procrustes(src, tgt)
    r2 = np.sum((src @ rot.T + trans - tgt) ** 2, axis=1)
    weights = np.ones(len(src))
    max_r2 = r2.max()
    if max_r2 <= c2:
        return rot, trans, weights, True, 0
    mu = 1.0 / (2.0 * max_r2 / c2 - 1.0)
    converged = False
    iterations = 0
    for iterations in range(1, max_iterations + 1):
        new_w = _tls_weights(r2, mu, c2)
        if np.count_nonzero(new_w) < 3 or _is_collinear(src[new_w > 0]):
            break
        rot, trans = weighted_procrustes(src, tgt, new_w)
        r2 = np.sum((src @ rot.T + trans - tgt) ** 2, axis=1)
        change = np.max(np.abs(new_w - weights))
        weights = new_w
        if change < weight_tol:
            converged = True
            break
        mu *= factor
    return rot, trans, weights, converged, iterations


def solve_pose(pairs: CorrespondenceSet, source: PointCloud, target: PointCloud,
               noise_bound: float) -> CoarseResult:
    """Robust rigid pose (scale fixed to 1) from pruned correspondences."""
    if not noise_bound > 0:
        raise InvalidParameter("noise_bound must be positive")
    if len(pairs) < 3:
        raise DegenerateCorrespondences(f"need >= 3 pairs, got {len(pairs)}")
    src = source.points[pairs.pairs[:, 0]]
    tgt = target.points[pairs.pairs[:, 1]]
    rot, trans, weights, converged, iters = gnc_tls(src, tgt, noise_bound)
    inliers = weights > 0.5
    if np.count_nonzero(inliers) >= 3 and not _is_collinear(src[inliers]):
        # final unweighted refit on the inlier set
        rot, trans = weighted_procrustes(src[inliers], tgt[inliers])
    transform = RigidTransform(orthonormalize(rot), trans)
    inlier_set = pairs.subset(inliers)
    return CoarseResult(transform, inlier_set, len(inlier_set), converged,
                        stats={"gnc_iterations": iters})


def prepare_features(cloud: PointCloud, params: CoarseParams = CoarseParams()) -> FeatureCloud:
    """Voxelize, estimate normals and compute FPFH with radius = factor * voxel."""
    down = voxel_downsample(cloud, params.voxel_size)
    k = min(params.normal_neighbors, len(down))
    down = estimate_normals(down, k)
    return compute_fpfh(down, params.fpfh_radius_factor * params.voxel_size)


def _failure(reason: str) -> CoarseResult:
    log.debug("coarse alignment failed: %s", reason)
    return CoarseResult(RigidTransform.identity(), CorrespondenceSet(np.zeros((0, 2)), []),
                        0, converged=False, failure_reason=reason)


def align_features(source: FeatureCloud, target: FeatureCloud,
                   params: CoarseParams = CoarseParams()) -> CoarseResult:
    """Match, prune and solve on precomputed feature clouds; failures become identity results."""
    nb = params.effective_noise_bound
    try:
        matches = match_features(source, target)
        pruned = prune_correspondences(matches, source.cloud, target.cloud, nb)
        result = solve_pose(pruned, source.cloud, target.cloud, nb)
    except CalibrationError as exc:
        return _failure(f"{type(exc).__name__}: {exc}")
    if result.inlier_count < params.min_inliers:
        return _failure(f"only {result.inlier_count} inliers (< {params.min_inliers})")
    stats = dict(result.stats, matches=len(matches), pruned=len(pruned))
    return CoarseResult(result.transform, result.inlier_pairs, result.inlier_count,
                        result.converged, None, stats)


def coarse_align(source: PointCloud, target: PointCloud,
                 params: CoarseParams = CoarseParams()) -> CoarseResult:
    """Full coarse stage: voxelize, normals, FPFH, match, prune, solve.

    Never raises for data problems: a failed stage yields the identity
    transform with ``inlier_count == 0`` and a ``failure_reason``.
    """
    try:
        src = prepare_features(source, params)
        tgt = prepare_features(target, params)
    except CalibrationError as exc:
        return _failure(f"{type(exc).__name__}: {exc}")
    return align_features(src, tgt, params)
