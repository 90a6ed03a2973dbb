"""Acceptance criteria 1-9, each at its stated tolerance.

Every test carries a ``criterion`` marker; the terminal summary prints one
PASS/FAIL line per criterion together with the measured values.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest
import yaml

from lidarcal.coarse import CorrespondenceSet, coarse_align, solve_pose
from lidarcal.config import load_config
from lidarcal.errors import PartialCalibration
from lidarcal.evaluation import aggregate_rmse, pose_error
from lidarcal.features import compute_fpfh
from lidarcal.fine import GicpParams, calibrate_all, gicp
from lidarcal.geometry import (KdIndex, PointCloud, RigidTransform, apply_transform,
                               estimate_normals, nearest_neighbors, radius_neighbors,
                               voxel_downsample)
from lidarcal.ground import GroundParams, PlaneModel, ground_calibrate, pitch_from_plane, roll_from_plane
from lidarcal.pcd import read_pcd
from lidarcal.pipeline import coarse_stage, read_clouds, run_pipeline, strip_run_section
from lidarcal.synth import (SceneSpec, SensorSpec, cascade_scene, fixture_dict, generate_scan,
                            isolated_scene, pair_scene, write_scene_outputs)

from conftest import angle_between, box_surface, random_transform
from test_evaluation import quaternion_angle, two_pass_rmse

FITNESS_GATE = 0.2


def load_truth(directory: Path) -> dict:
    raw = yaml.safe_load((directory / "truth.yaml").read_text())
    return {sid: RigidTransform.from_matrix(np.array(p["matrix"]), orthonormal=True)
            for sid, p in raw["poses"].items()}


def truth_in_target(poses: dict, sid: str, target: str) -> RigidTransform:
    return poses[target].inverse() @ poses[sid]


def scene_dir(tmp_path_factory, name, scene_and_sensors):
    out = tmp_path_factory.mktemp(name)
    scene, sensors = scene_and_sensors
    write_scene_outputs(scene, sensors, out, calibration=fixture_dict(name.split("_")[0])
                        .get("calibration"))
    return out


def timed_run(directory: Path):
    config = load_config(directory / "calibrate.yaml")
    wall, cpu = time.perf_counter(), time.process_time()
    report = run_pipeline(config)
    return report, time.perf_counter() - wall, time.process_time() - cpu


@pytest.fixture(scope="session")
def cascade_dir(tmp_path_factory):
    return scene_dir(tmp_path_factory, "cascade", cascade_scene())


@pytest.fixture(scope="session")
def cascade_run(cascade_dir):
    return timed_run(cascade_dir)


@pytest.fixture(scope="session")
def pair_dir(tmp_path_factory):
    return scene_dir(tmp_path_factory, "pair", pair_scene())


@pytest.fixture(scope="session")
def pair_run(pair_dir):
    return timed_run(pair_dir)


def pose_errors(report, poses, target):
    out = {}
    for sid in report.data["sensors"]:
        if sid != target:
            truth = truth_in_target(poses, sid, target)
            est = report.transform(sid)
            out[sid] = (angle_between(est, truth), np.abs(est.translation - truth.translation).max())
    return out


@pytest.mark.criterion(1, "cascade recovery (0.2 deg / 0.02 m, <= 30 s)")
def test_criterion_1_cascade(cascade_dir, cascade_run, record):
    report, wall, cpu = cascade_run
    sizes = [len(read_pcd(cascade_dir / f"{sid}.pcd")) for sid in "ABCT"]
    assert max(sizes) <= 50000
    assert report.status == "ok" and report.data["uncalibrated"] == []
    assert set(report.data["sensors"]) == {"A", "B", "C", "T"}
    errors = pose_errors(report, load_truth(cascade_dir), "T")
    record(", ".join(f"{sid} {a:.3f} deg/{d:.4f} m" for sid, (a, d) in sorted(errors.items())))
    record(f"run_pipeline {wall:.1f} s wall, {cpu:.1f} s cpu, points {sizes}")
    for sid, (angle, dist) in errors.items():
        assert angle <= 0.2, sid
        assert dist <= 0.02, sid
    assert wall <= 30.0


@pytest.mark.criterion(2, "direct-overlap pair (coarse 2 deg / 0.2 m, full 0.1 deg / 0.01 m)")
def test_criterion_2_pair(pair_dir, pair_run, record):
    poses = load_truth(pair_dir)
    truth = truth_in_target(poses, "S", "T")
    yaw_pitch = truth.to_euler()
    assert math.degrees(yaw_pitch[2]) == pytest.approx(30, abs=1e-9)
    assert math.degrees(yaw_pitch[1]) == pytest.approx(5, abs=1e-9)
    assert np.allclose(truth.translation, [2, 1, 0.5], atol=1e-9)

    config = load_config(pair_dir / "calibrate.yaml")
    src, tgt = read_pcd(pair_dir / "S.pcd"), read_pcd(pair_dir / "T.pcd")
    coarse = coarse_align(src, tgt, config.coarse)
    c_angle = angle_between(coarse.transform, truth)
    c_dist = np.abs(coarse.transform.translation - truth.translation).max()

    report, wall, _ = pair_run
    f_angle, f_dist = pose_errors(report, poses, "T")["S"]
    record(f"coarse {c_angle:.3f} deg/{c_dist:.4f} m ({coarse.inlier_count} inliers); "
           f"full {f_angle:.4f} deg/{f_dist:.4f} m in {wall:.1f} s")
    assert coarse.ok and c_angle <= 2.0 and c_dist <= 0.2
    assert report.status == "ok"
    assert f_angle <= 0.1 and f_dist <= 0.01


@pytest.mark.criterion(3, "zero-overlap sensor -> PartialCalibration naming it; fitness gate 0.2")
def test_criterion_3_threshold(tmp_path_factory, cascade_run, pair_run, record):
    directory = scene_dir(tmp_path_factory, "cascade_isolated", isolated_scene())
    config = load_config(directory / "calibrate.yaml")
    clouds = read_clouds(config, [])
    seeds, _ = coarse_stage(clouds, config, [])
    with pytest.raises(PartialCalibration) as info:
        calibrate_all(clouds, config.target_id, seeds, config.gicp)
    partial = info.value.calibration
    rejected = partial.rounds[-1]
    record(f"uncalibrated {sorted(info.value.uncalibrated)}, best rejected fitness "
           f"{rejected['fitness']:.3f}; accepted " + ", ".join(
               f"{sid} {e.fitness:.3f}" for sid, e in sorted(partial.entries.items()) if sid != "T"))
    assert info.value.uncalibrated == {"X"}
    assert set(partial.entries) == {"A", "B", "C", "T"}
    accepted = [e.fitness for sid, e in partial.entries.items() if sid != "T"]
    for report in (cascade_run[0], pair_run[0]):
        accepted += [v["fitness"] for sid, v in report.data["sensors"].items()
                     if sid != report.data["target"]]
    assert min(accepted) >= FITNESS_GATE


@pytest.mark.criterion(4, "ground roll/pitch within 0.1 deg, z within 0.01 m; plane formulas to 1e-12")
def test_criterion_4_ground(record):
    roll, pitch, height = math.radians(2), math.radians(3), 2.1
    sensor = SensorSpec("G", RigidTransform.from_euler(roll, pitch, 0.0, (0, 0, height)),
                        kind="rotating", azimuth_step=0.4, channels=32, elevation_min=-30,
                        elevation_max=-3, max_range=60, noise_sigma=0.01, seed=4)
    scan = generate_scan(SceneSpec(100.0), sensor)
    result = ground_calibrate(scan.cloud, GroundParams(distance_threshold=0.03))
    d_roll = math.degrees(abs(result.roll - roll))
    d_pitch = math.degrees(abs(result.pitch - pitch))
    d_z = abs(result.z_offset - height)
    record(f"d_roll {d_roll:.4f} deg, d_pitch {d_pitch:.4f} deg, dz {d_z * 1000:.2f} mm "
           f"({len(scan.cloud)} points)")
    assert d_roll <= 0.1 and d_pitch <= 0.1 and d_z <= 0.01

    # the plane formulas on analytic normals
    assert pitch_from_plane(PlaneModel(0.0, 0.0, 1.0, 1.8)) == 0.0
    assert roll_from_plane(PlaneModel(0.0, 0.0, 1.0, 1.8)) == 0.0
    ten, five = math.radians(10), math.radians(5)
    assert abs(pitch_from_plane(PlaneModel.from_normal([math.sin(ten), 0, math.cos(ten)], 1)) - ten) <= 1e-12
    assert abs(roll_from_plane(PlaneModel.from_normal([0, -math.sin(five), math.cos(five)], 1)) - five) <= 1e-12
    rng = np.random.default_rng(0)
    for _ in range(1000):
        r, p = rng.uniform(-1.2, 1.2, 2)
        # e_z carried by Rx(r) Ry(p), written out by hand
        n = [math.sin(p), -math.sin(r) * math.cos(p), math.cos(r) * math.cos(p)]
        plane = PlaneModel.from_normal(n, 1.0)
        assert abs(roll_from_plane(plane) - r) <= 1e-12
        assert abs(pitch_from_plane(plane) - p) <= 1e-12


@pytest.mark.criterion(5, "GICP self-registration exact; objective non-increasing on 100 fixtures")
def test_criterion_5_gicp(record):
    rng = np.random.default_rng(5)
    worst_id = 0.0
    for _ in range(5):
        cloud = PointCloud(box_surface(rng, 2000, size=rng.uniform(1, 5, 3), center=(0, 0, 6)))
        res = gicp(cloud, cloud)
        assert res.fitness == 1.0
        worst_id = max(worst_id, np.abs(res.transform.as_matrix() - np.eye(4)).max())
    assert worst_id <= 1e-9

    params = GicpParams(max_correspondence_distance=1.0)
    steps = increases = 0
    for _ in range(100):
        size = rng.uniform(1.0, 5.0, 3)
        pts = np.vstack([box_surface(rng, 800, size=size, center=(0, 0, 4)),
                         box_surface(rng, 400, size=size[::-1] / 2, center=(3, 2, 4.5))])
        truth = random_transform(rng, math.radians(8), 0.4)
        target = PointCloud(truth.apply(pts) + rng.normal(0, 0.01, pts.shape))
        start = random_transform(rng, math.radians(3), 0.1) @ truth
        res = gicp(PointCloud(pts), target, start, params)
        steps += len(res.history)
        increases += sum(after > before for before, after in res.history)
    record(f"self-registration deviation {worst_id:.1e}; {steps} iterations, {increases} increases")
    assert increases == 0


@pytest.mark.criterion(6, "k-d tree, voxel and FPFH oracles")
def test_criterion_6_geometry(record):
    rng = np.random.default_rng(6)
    queries = 0
    for _ in range(100):
        n = int(rng.integers(1000, 10001))
        pts = rng.uniform(-10, 10, size=(n, 3))
        index = KdIndex(pts)
        for q in rng.uniform(-11, 11, size=(5, 3)):
            d = np.sqrt(((pts - q) ** 2).sum(axis=1))
            order = np.lexsort((np.arange(n), d))
            k = int(rng.integers(1, 30))
            knn = nearest_neighbors(index, q, k)
            assert [i for i, _ in knn] == order[:k].tolist()
            assert np.allclose([x for _, x in knn], d[order[:k]], rtol=0, atol=1e-12)
            radius = float(rng.uniform(0.5, 3.0))
            within = [i for i in order if d[i] <= radius]
            assert [i for i, _ in radius_neighbors(index, q, radius)] == within
            queries += 1

    clouds = 0
    for _ in range(20):
        size = float(rng.uniform(0.05, 1.5))
        pts = rng.normal(0, 3, size=(int(rng.integers(100, 5000)), 3))
        cells = {}
        for p in pts.tolist():
            key = tuple(math.floor(c / size) for c in p)
            cells[key] = cells.get(key, 0) + 1
        out = voxel_downsample(PointCloud(pts), size)
        assert len(out) == len(cells)
        assert sum(cells.values()) == len(pts)
        clouds += 1

    base = estimate_normals(voxel_downsample(PointCloud(box_surface(rng, 8000, center=(0, 0, 6))), 0.2), 10)
    reference = compute_fpfh(base, 0.6).descriptors
    worst = 0.0
    for _ in range(5):
        moved = apply_transform(base, random_transform(rng))
        worst = max(worst, np.abs(compute_fpfh(moved, 0.6).descriptors - reference).max())
    record(f"{queries} k-NN/radius queries, {clouds} voxel clouds, FPFH max bin deviation {worst:.1e}")
    assert worst < 1e-6


@pytest.mark.criterion(7, ">= 99/100 GNC trials at 30% outliers within 0.5 deg / 0.05 m")
def test_criterion_7_gnc(record):
    rng = np.random.default_rng(7)
    n, successes, worst = 100, 0, 0.0
    pairs = CorrespondenceSet(np.column_stack([np.arange(n), np.arange(n)]), np.zeros(n))
    for _ in range(100):
        truth = random_transform(rng, math.pi, 10.0)
        src = rng.uniform(-10, 10, size=(n, 3))
        tgt = truth.apply(src) + rng.normal(0, 0.01, size=(n, 3))
        bad = rng.choice(n, int(0.3 * n), replace=False)
        tgt[bad] = rng.uniform(-20, 20, size=(len(bad), 3))
        res = solve_pose(pairs, PointCloud(src), PointCloud(tgt), 0.05)
        angle = angle_between(res.transform, truth)
        dist = np.abs(res.transform.translation - truth.translation).max()
        worst = max(worst, angle)
        successes += angle <= 0.5 and dist <= 0.05
    record(f"{successes}/100 recovered, worst angle {worst:.3f} deg")
    assert successes >= 99


@pytest.mark.criterion(8, "byte-identical reports modulo timestamps")
def test_criterion_8_determinism(pair_dir, pair_run, record):
    config = load_config(pair_dir / "calibrate.yaml")
    first = pair_run[0].to_json()
    fused = (pair_dir / "fused.pcd").read_bytes()
    second = run_pipeline(config).to_json()
    assert (pair_dir / "report.json").read_text() == second
    assert strip_run_section(first) == strip_run_section(second)
    assert (pair_dir / "fused.pcd").read_bytes() == fused
    record("two runs on this machine; cross-machine identity not checked here")


@pytest.mark.criterion(9, "pose_error / aggregate_rmse vs quaternion and two-pass oracles (1e-9)")
def test_criterion_9_metrics(record):
    rng = np.random.default_rng(9)
    errors, worst = [], 0.0
    for _ in range(1000):
        est, truth = random_transform(rng), random_transform(rng)
        err = pose_error(est, truth)
        worst = max(worst, abs(err.angle - quaternion_angle(est, truth)))
        assert np.array_equal(err.translation, est.translation - truth.translation)
        errors.append(err)
    report = aggregate_rmse(errors)
    rmse_dev = max(
        max(abs(report.translation_rmse[a] - two_pass_rmse(e.translation[a] for e in errors)),
            abs(report.rotation_rmse[a] - two_pass_rmse(e.rotation[a] for e in errors)))
        for a in range(3))
    rmse_dev = max(rmse_dev, abs(report.angle_rmse - two_pass_rmse(e.angle for e in errors)))
    record(f"max angle deviation {worst:.1e} rad, max RMSE deviation {rmse_dev:.1e}")
    assert worst <= 1e-9 and rmse_dev <= 1e-9
