"""Fast Point Feature Histograms over a (voxelized) cloud with normals."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .errors import InvalidParameter, MissingNormals
from .geometry import KdIndex, PointCloud

BINS_PER_FEATURE = 11
DESCRIPTOR_SIZE = 3 * BINS_PER_FEATURE
SWAP_MARGIN = 1e-12


@dataclass(frozen=True, eq=False)
class FeatureCloud:
    """A cloud plus one 33-bin descriptor per point.

    ``descriptors[:, 0:11]`` bins alpha (cosine), ``11:22`` phi (cosine) and
    ``22:33`` theta (radians).  ``valid`` is False for isolated points, whose
    descriptor is all zero.
    """

    cloud: PointCloud
    descriptors: np.ndarray
    radius: float
    valid: np.ndarray

    def __len__(self) -> int:
        return len(self.descriptors)


def pair_features(p1, n1, p2, n2):
    """Darboux-frame angle features for point pairs, vectorized over rows.

    Returns (alpha, phi, theta): alpha and phi are cosines in [-1, 1], theta
    is an angle in [-pi, pi].  The frame is anchored at whichever point's
    normal makes the smaller angle with the connecting line, as in the
    original FPFH construction.  Degenerate pairs map to zeros.
    """
    d = p2 - p1
    dist = np.linalg.norm(d, axis=1)
    ok = dist > 0
    safe = np.where(ok, dist, 1.0)[:, None]
    d = d / safe
    a1 = np.einsum("ij,ij->i", n1, d)
    a2 = np.einsum("ij,ij->i", n2, d)
    # a margin keeps exact ties (parallel normals) from flipping on rounding noise
    swap = np.abs(a1) < np.abs(a2) - SWAP_MARGIN
    u = np.where(swap[:, None], n2, n1)
    other = np.where(swap[:, None], n1, n2)
    d = np.where(swap[:, None], -d, d)
    phi = np.where(swap, -a2, a1)

    v = np.cross(d, u)
    vn = np.linalg.norm(v, axis=1)
    ok &= vn > 0
    v = v / np.where(vn > 0, vn, 1.0)[:, None]
    w = np.cross(u, v)
    alpha = np.einsum("ij,ij->i", v, other)
    theta = np.arctan2(np.einsum("ij,ij->i", w, other), np.einsum("ij,ij->i", u, other))

    zero = np.zeros_like(alpha)
    return (np.where(ok, alpha, zero), np.where(ok, phi, zero), np.where(ok, theta, zero))


def _bin(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    idx = np.floor((values - lo) / (hi - lo) * BINS_PER_FEATURE).astype(np.int64)
    return np.clip(idx, 0, BINS_PER_FEATURE - 1)


def _radius_graph(points: np.ndarray, radius: float):
    """CSR neighbor lists inside ``radius``, excluding each point itself and duplicates."""
    index = KdIndex(points)
    lists = index.tree.query_ball_point(points, radius, return_sorted=True)
    counts = np.fromiter((len(x) for x in lists), dtype=np.int64, count=len(lists))
    cols = np.fromiter((j for x in lists for j in x), dtype=np.int64, count=int(counts.sum()))
    rows = np.repeat(np.arange(len(points)), counts)
    dist = np.linalg.norm(points[cols] - points[rows], axis=1)
    keep = (dist > 0) & (dist <= radius)
    return rows[keep], cols[keep], dist[keep]


def compute_fpfh(cloud: PointCloud, radius: float) -> FeatureCloud:
    """FPFH descriptors with neighborhoods of the given radius.

    SPFH(p) histograms the (alpha, phi, theta) triples of p against each
    neighbor into 11 bins apiece, each sub-histogram scaled to sum to 100.
    The final descriptor is SPFH(p) + mean over neighbors q of SPFH(q)/|p - q|.
    """
    if cloud.normals is None:
        raise MissingNormals("compute_fpfh requires normals")
    if not radius > 0:
        raise InvalidParameter("radius must be positive")
    pts, nrm = cloud.points, cloud.normals
    n = len(pts)
    if n == 0:
        return FeatureCloud(cloud, np.zeros((0, DESCRIPTOR_SIZE)), radius, np.zeros(0, bool))

    rows, cols, dist = _radius_graph(pts, radius)
    counts = np.bincount(rows, minlength=n)
    valid = counts > 0

    alpha, phi, theta = pair_features(pts[rows], nrm[rows], pts[cols], nrm[cols])
    scale = 100.0 / np.where(valid, counts, 1)[rows]
    spfh = np.zeros(n * DESCRIPTOR_SIZE)
    for offset, idx in (
        (0, _bin(alpha, -1.0, 1.0)),
        (BINS_PER_FEATURE, _bin(phi, -1.0, 1.0)),
        (2 * BINS_PER_FEATURE, _bin(theta, -np.pi, np.pi)),
    ):
        flat = rows * DESCRIPTOR_SIZE + offset + idx
        spfh += np.bincount(flat, weights=scale, minlength=n * DESCRIPTOR_SIZE)
    spfh = spfh.reshape(n, DESCRIPTOR_SIZE)

    weights = 1.0 / (dist * counts[rows])
    w = sparse.csr_matrix((weights, (rows, cols)), shape=(n, n))
    fpfh = spfh + w @ spfh
    fpfh[~valid] = 0.0
    return FeatureCloud(cloud, fpfh, float(radius), valid)
