"""Plane-to-plane GICP and the fitness-ordered match-and-merge calibration loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import InsufficientPoints, InvalidParameter, PartialCalibration
from .geometry import (KdIndex, PointCloud, RigidTransform, apply_transform,
                       estimate_covariances, merge, orthonormalize, so3_exp,
                       voxel_downsample)

log = logging.getLogger(__name__)

MAX_STEP_HALVINGS = 12


@dataclass(frozen=True)
class GicpParams:
    max_correspondence_distance: float = 1.0
    max_iterations: int = 64
    transformation_epsilon: float = 1e-8
    fitness_threshold: float = 0.2
    covariance_epsilon: float = 1e-3
    neighbor_count: int = 20
    fine_voxel_size: float | None = None

    def __post_init__(self):
        for name in ("max_correspondence_distance", "transformation_epsilon", "covariance_epsilon"):
            if not getattr(self, name) > 0:
                raise InvalidParameter(f"{name} must be positive")
        if self.max_iterations < 1 or self.neighbor_count < 4:
            raise InvalidParameter("max_iterations >= 1 and neighbor_count >= 4 required")
        if not 0 < self.fitness_threshold < 1:
            raise InvalidParameter("fitness_threshold must lie in (0, 1)")
        if self.fine_voxel_size is not None and not self.fine_voxel_size > 0:
            raise InvalidParameter("fine_voxel_size must be positive")


@dataclass(frozen=True, eq=False)
class RegistrationResult:
    """One GICP run.  ``transform`` maps source coordinates into the target frame.

    ``history`` holds (objective before, objective after) for every accepted
    Gauss-Newton step, both evaluated on that step's correspondence set.
    """

    transform: RigidTransform
    fitness: float
    inlier_rmse: float
    converged: bool
    iterations: int
    correspondences: int = 0
    history: tuple = ()


def prepare_cloud(cloud: PointCloud, params: GicpParams) -> PointCloud:
    """Optional fine-stage voxelization followed by GICP covariances."""
    if params.fine_voxel_size is not None:
        cloud = voxel_downsample(cloud, params.fine_voxel_size)
    if len(cloud) < params.neighbor_count:
        raise InsufficientPoints(
            f"cloud {cloud.frame_id!r} has {len(cloud)} points, need {params.neighbor_count}")
    return estimate_covariances(cloud, params.neighbor_count, params.covariance_epsilon)


def _skew(v: np.ndarray) -> np.ndarray:
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1], out[..., 0, 2] = -v[..., 2], v[..., 1]
    out[..., 1, 0], out[..., 1, 2] = v[..., 2], -v[..., 0]
    out[..., 2, 0], out[..., 2, 1] = -v[..., 1], v[..., 0]
    return out


def _information(rot, src_cov, tgt_cov):
    return np.linalg.inv(tgt_cov + np.einsum("ij,njk,lk->nil", rot, src_cov, rot))


def _objective(rot, trans, src_pts, tgt_pts, info):
    moved = src_pts @ rot.T + trans
    resid = tgt_pts - moved
    return float(np.einsum("ni,nij,nj->", resid, info, resid)), resid, moved


def _correspond(index: KdIndex, moved: np.ndarray, max_dist: float):
    dist, idx = index.query(moved, k=1, distance_upper_bound=max_dist * (1 + 1e-9))
    mask = np.isfinite(dist)
    # exact <= test with the same distance formula everywhere
    d = np.full(len(moved), np.inf)
    if mask.any():
        diff = index.points[idx[mask]] - moved[mask]
        d[mask] = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    mask &= d <= max_dist
    return mask, np.where(mask, idx, -1), d


def evaluate_registration(source: PointCloud, target: PointCloud, transform: RigidTransform,
                          max_correspondence_distance: float,
                          target_index: KdIndex | None = None) -> tuple[float, float, int]:
    """(fitness, inlier_rmse, inlier count) of ``source`` placed by ``transform``."""
    if len(source) == 0 or len(target) == 0:
        return 0.0, 0.0, 0
    index = target_index or KdIndex(target)
    mask, _, d = _correspond(index, transform.apply(source.points), max_correspondence_distance)
    count = int(mask.sum())
    if count == 0:
        return 0.0, 0.0, 0
    rmse = float(np.sqrt(np.mean(d[mask] ** 2)))
    return count / len(source), rmse, count


def gicp(source: PointCloud, target: PointCloud, initial: RigidTransform | None = None,
         params: GicpParams = GicpParams(), *, target_index: KdIndex | None = None
         ) -> RegistrationResult:
    """Generalized ICP with plane-to-plane covariances, Gauss-Newton on SE(3).

    Clouds lacking covariances get them estimated here.  Each iteration
    re-associates nearest neighbours, takes one Gauss-Newton step (left
    perturbation, halved until the objective does not increase) and stops
    once the step norm drops below ``transformation_epsilon``.
    """
    initial = initial or RigidTransform.identity()
    n_min = params.neighbor_count
    if len(source) < n_min or len(target) < n_min:
        raise InsufficientPoints(f"gicp needs >= {n_min} points per cloud")
    if source.covariances is None:
        source = estimate_covariances(source, n_min, params.covariance_epsilon)
    if target.covariances is None:
        target = estimate_covariances(target, n_min, params.covariance_epsilon)
        target_index = None
    index = target_index or KdIndex(target)
    max_dist = params.max_correspondence_distance

    rot = initial.rotation.copy()
    trans = initial.translation.copy()
    history = []
    converged = False
    iterations = 0
    for iterations in range(1, params.max_iterations + 1):
        mask, idx, _ = _correspond(index, source.points @ rot.T + trans, max_dist)
        if not mask.any():
            iterations -= 1
            break
        sp, sc = source.points[mask], source.covariances[mask]
        tp, tc = target.points[idx[mask]], target.covariances[idx[mask]]
        # the weights are frozen for the iteration, as in standard GICP
        info = _information(rot, sc, tc)
        cost, resid, moved = _objective(rot, trans, sp, tp, info)

        jac = np.concatenate([_skew(moved), np.broadcast_to(-np.eye(3), moved.shape + (3,))],
                             axis=2)
        info_jac = info @ jac
        hessian = np.einsum("nki,nkj->ij", jac, info_jac)
        grad = np.einsum("nki,nk->i", info_jac, resid)
        try:
            step = -np.linalg.solve(hessian, grad)
        except np.linalg.LinAlgError:
            step = -np.linalg.lstsq(hessian, grad, rcond=None)[0]

        accepted = False
        for _ in range(MAX_STEP_HALVINGS):
            dr = so3_exp(step[:3])
            new_rot = dr @ rot
            new_trans = dr @ trans + step[3:]
            new_cost = _objective(new_rot, new_trans, sp, tp, info)[0]
            if new_cost <= cost:
                accepted = True
                break
            step = 0.5 * step
        if not accepted:
            converged = True
            break
        history.append((cost, new_cost))
        rot, trans = new_rot, new_trans
        if np.linalg.norm(step) < params.transformation_epsilon:
            converged = True
            break

    transform = RigidTransform(orthonormalize(rot), trans)
    fitness, rmse, count = evaluate_registration(source, target, transform, max_dist, index)
    if count == 0:
        converged = False
    return RegistrationResult(transform, fitness, rmse, converged, iterations, count,
                              tuple(history))


@dataclass(frozen=True)
class CalibrationEntry:
    transform: RigidTransform
    fitness: float
    order: int


@dataclass(frozen=True, eq=False)
class CalibrationSet:
    """Sensor id -> transform into the target sensor frame (target maps to identity)."""

    target_id: str
    entries: dict
    merged_cloud: PointCloud | None = None
    rounds: tuple = ()

    def transform(self, sensor_id: str) -> RigidTransform:
        return self.entries[sensor_id].transform

    def ordered_ids(self) -> list[str]:
        return sorted(self.entries, key=lambda s: self.entries[s].order)

    def __contains__(self, sensor_id) -> bool:
        return sensor_id in self.entries

    def __len__(self) -> int:
        return len(self.entries)


def _pick_best(candidates: dict):
    return min(candidates.items(), key=lambda kv: (-kv[1].fitness, kv[0]))


def calibrate_all(clouds: dict, target_id: str, seeds: dict | None = None,
                  params: GicpParams = GicpParams()) -> CalibrationSet:
    """Attach every sensor to ``target_id`` by greedy fitness-ordered GICP merging.

    All ordered pairs are registered first (``seeds[(source, target)]`` as
    the initial pose, identity when missing).  Each round accepts the
    candidate with the highest fitness that links an uncalibrated sensor to
    the calibrated set, merges that sensor's cloud into the running target
    cloud, drops every candidate involving it and re-registers the remaining
    sensors against the merged cloud.

    Raises PartialCalibration when the best remaining candidate is below
    ``params.fitness_threshold``.
    """
    if target_id not in clouds:
        raise InvalidParameter(f"target {target_id!r} not among sensors")
    if len(clouds) < 2:
        raise InvalidParameter("need at least two sensors")
    seeds = seeds or {}
    ids = sorted(clouds)
    prepared = {i: prepare_cloud(clouds[i], params) for i in ids}
    indices = {i: KdIndex(prepared[i]) for i in ids}

    pairwise = {}
    for s in ids:
        for t in ids:
            if s != t:
                seed = seeds.get((s, t)) or RigidTransform.identity()
                pairwise[(s, t)] = gicp(prepared[s], prepared[t], seed, params,
                                        target_index=indices[t])
                log.debug("pair %s->%s fitness %.4f", s, t, pairwise[(s, t)].fitness)

    entries = {target_id: CalibrationEntry(RigidTransform.identity(), 1.0, 0)}
    # candidate key (a, b): a registered into b's frame; exactly one side calibrated
    candidates = {k: r for k, r in pairwise.items() if target_id in k}
    merged = prepared[target_id]
    rounds = []

    while len(entries) < len(ids):
        uncalibrated = [i for i in ids if i not in entries]
        (src, dst), best = _pick_best(candidates)
        if best.fitness < params.fitness_threshold:
            rounds.append({"sensor": None, "fitness": best.fitness, "rejected": f"{src}->{dst}",
                           "candidates": {f"{a}->{b}": r.fitness
                                          for (a, b), r in candidates.items()}})
            partial = CalibrationSet(target_id, dict(entries), merged, tuple(rounds))
            raise PartialCalibration(uncalibrated, partial)
        if src in entries:
            src, transform = dst, best.transform.inverse()
        else:
            transform = best.transform
        entries[src] = CalibrationEntry(transform, best.fitness, len(entries))
        rounds.append({"sensor": src, "fitness": best.fitness,
                       "candidates": {f"{a}->{b}": r.fitness for (a, b), r in candidates.items()}})
        log.info("calibrated %s (fitness %.4f, round %d)", src, best.fitness, len(entries) - 1)

        # neighborhoods change at the seams, so covariances are re-estimated
        moved = apply_transform(prepared[src], transform)
        fused = merge(merged, moved).replace(normals=None, covariances=None)
        merged = estimate_covariances(fused, params.neighbor_count, params.covariance_epsilon)
        merged_index = KdIndex(merged)

        remaining = [i for i in ids if i not in entries]
        previous = candidates
        candidates = {}
        for x in remaining:
            # every prior is refined against the merged cloud; the merged cloud decides
            results = [gicp(prepared[x], merged, seed, params, target_index=merged_index)
                       for seed in _priors(x, previous, pairwise, entries, target_id)]
            candidates[(x, target_id)] = max(results, key=lambda r: r.fitness)

    return CalibrationSet(target_id, entries, merged, tuple(rounds))


def _priors(sensor, previous, pairwise, entries, target_id) -> list:
    """Known estimates of ``sensor`` in the target frame, best fitness first.

    Candidates come from the previous round (direct or swapped) and from
    chaining pairwise results through already calibrated sensors.
    Near-duplicates are dropped so each distinct hypothesis is refined once.
    """
    options = []
    for (a, b), res in sorted(previous.items()):
        if a == sensor and b == target_id:
            options.append((res.fitness, res.transform))
        elif b == sensor and a == target_id:
            options.append((res.fitness, res.transform.inverse()))
    for other, entry in sorted(entries.items()):
        if other == target_id:
            continue
        fwd = pairwise.get((sensor, other))
        if fwd is not None:
            options.append((fwd.fitness, entry.transform @ fwd.transform))
        back = pairwise.get((other, sensor))
        if back is not None:
            options.append((back.fitness, entry.transform @ back.transform.inverse()))
    if not options:
        return [RigidTransform.identity()]
    order = sorted(range(len(options)), key=lambda i: (-options[i][0], i))
    distinct = []
    for i in order:
        cand = options[i][1]
        if not any(_close(cand, kept) for kept in distinct):
            distinct.append(cand)
    return distinct


def _close(a: RigidTransform, b: RigidTransform, angle: float = 1e-3, dist: float = 1e-3) -> bool:
    rel = a.inverse() @ b
    cos = (np.trace(rel.rotation) - 1.0) / 2.0
    return np.arccos(np.clip(cos, -1.0, 1.0)) < angle and np.linalg.norm(rel.translation) < dist
