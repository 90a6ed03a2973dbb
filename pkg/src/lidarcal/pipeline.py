"""End-to-end calibration run: read clouds, coarse-align, fine-register, level, report.

Report transforms map source-sensor coordinates into the target-sensor frame.
Euler angles follow the ZYX convention, ``R = Rz(yaw) Ry(pitch) Rx(roll)``.
Everything outside the ``run`` section depends only on the configuration
and the input files; ``run`` holds the timestamp and stage timings.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .coarse import align_features, prepare_features
from .config import RunConfig
from .errors import CalibrationError, PartialCalibration
from .fine import CalibrationSet, calibrate_all
from .geometry import PointCloud, RigidTransform, apply_transform
from .ground import GroundCalibration, GroundParams, ground_calibrate
from .pcd import load_pcd, write_pcd

log = logging.getLogger(__name__)

REPORT_SCHEMA = 1
CONVENTION = "source sensor -> target sensor frame; euler ZYX (roll, pitch, yaw) in radians"


@dataclass
class CalibrationReport:
    data: dict
    calibration: CalibrationSet | None = None
    clouds: dict = field(default_factory=dict, repr=False)

    @property
    def status(self) -> str:
        return self.data["status"]

    @property
    def partial(self) -> bool:
        return self.status == "partial"

    def transform(self, sensor_id: str) -> RigidTransform:
        return RigidTransform.from_matrix(self.data["sensors"][sensor_id]["matrix"])

    def to_json(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True) + "\n"

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())


def transform_entry(t: RigidTransform) -> dict:
    roll, pitch, yaw = t.to_euler()
    return {"matrix": t.as_matrix().tolist(), "xyz": [float(v) for v in t.translation],
            "rpy": [roll, pitch, yaw]}


def ground_entry(g: GroundCalibration) -> dict:
    p = g.plane
    return {"roll": g.roll, "pitch": g.pitch, "z_offset": g.z_offset,
            "plane": [p.a, p.b, p.c, p.d], "inliers": g.inlier_count}


def read_clouds(config: RunConfig, diagnostics: list) -> dict:
    clouds = {}
    for sensor in config.sensors:
        data = load_pcd(config.resolve(sensor.cloud))
        if data.dropped_nan:
            diagnostics.append(f"{sensor.id}: dropped {data.dropped_nan} points with NaN coordinates")
        clouds[sensor.id] = data.cloud.replace(frame_id=sensor.id)
        log.info("read %s: %d points", sensor.id, len(data.cloud))
    return clouds


def coarse_stage(clouds: dict, config: RunConfig, diagnostics: list):
    """Coarse poses for every ordered pair; failed pairs fall back to identity."""
    features = {}
    for sid, cloud in clouds.items():
        try:
            features[sid] = prepare_features(cloud, config.coarse)
        except CalibrationError as exc:
            diagnostics.append(f"{sid}: no coarse features ({type(exc).__name__}: {exc})")
    seeds, summary = {}, {}
    for s in clouds:
        for t in clouds:
            if s == t:
                continue
            key = f"{s}->{t}"
            if s not in features or t not in features:
                summary[key] = {"inliers": 0, "failure": "missing features"}
                continue
            result = align_features(features[s], features[t], config.coarse)
            summary[key] = {"inliers": result.inlier_count, "failure": result.failure_reason}
            if result.ok:
                seeds[(s, t)] = result.transform
            log.debug("coarse %s: %d inliers %s", key, result.inlier_count,
                      result.failure_reason or "")
    return seeds, summary


def fuse(clouds: dict, calibration: CalibrationSet) -> PointCloud:
    """Full-resolution clouds of every calibrated sensor in the target frame."""
    parts = [apply_transform(clouds[sid], calibration.transform(sid)).points
             for sid in calibration.ordered_ids()]
    return PointCloud(np.concatenate(parts), frame_id=calibration.target_id)


def run_pipeline(config: RunConfig, write_outputs: bool = True) -> CalibrationReport:
    """Calibrate every configured sensor into the target frame.

    Input problems (missing or malformed PCDs) propagate as exceptions.  A
    partial calibration does not raise: the report lists the uncalibrated
    sensors under ``uncalibrated`` and has status ``"partial"``.
    """
    timings, diagnostics = {}, []
    started = datetime.now(timezone.utc)

    tic = time.perf_counter()
    clouds = read_clouds(config, diagnostics)
    timings["read"] = time.perf_counter() - tic

    tic = time.perf_counter()
    seeds, coarse_summary = coarse_stage(clouds, config, diagnostics)
    timings["coarse"] = time.perf_counter() - tic

    tic = time.perf_counter()
    uncalibrated = []
    try:
        calibration = calibrate_all(clouds, config.target_id, seeds, config.gicp)
    except PartialCalibration as exc:
        calibration = exc.calibration
        uncalibrated = sorted(exc.uncalibrated)
        diagnostics.append(f"uncalibrated: {', '.join(uncalibrated)}")
        last = calibration.rounds[-1]
        diagnostics.append(f"best remaining candidate {last['rejected']} has fitness "
                           f"{last['fitness']:.4f}, below {config.gicp.fitness_threshold}")
    timings["fine"] = time.perf_counter() - tic

    tic = time.perf_counter()
    ground = {}
    for sid in config.ground_sensors():
        params = GroundParams(config.ground.distance_threshold, config.ground.max_iterations,
                              config.seed, config.ground.max_tilt_deg)
        try:
            ground[sid] = ground_entry(ground_calibrate(clouds[sid], params))
        except CalibrationError as exc:
            ground[sid] = {"error": f"{type(exc).__name__}: {exc}"}
            diagnostics.append(f"{sid}: ground calibration failed ({exc})")
    timings["ground"] = time.perf_counter() - tic

    sensors = {}
    for sid in calibration.ordered_ids():
        entry = calibration.entries[sid]
        sensors[sid] = {**transform_entry(entry.transform), "fitness": entry.fitness,
                        "order": entry.order}
    data = {
        "schema": REPORT_SCHEMA,
        "tool_version": __version__,
        "status": "partial" if uncalibrated else "ok",
        "convention": CONVENTION,
        "target": config.target_id,
        "order": calibration.ordered_ids(),
        "sensors": sensors,
        "uncalibrated": uncalibrated,
        "ground": ground,
        "coarse": coarse_summary,
        "rounds": [dict(r) for r in calibration.rounds],
        "diagnostics": diagnostics,
        "config": config.echo(),
    }
    report = CalibrationReport(data, calibration, clouds)

    if write_outputs and config.fused_cloud_path:
        tic = time.perf_counter()
        write_pcd(fuse(clouds, calibration), config.resolve(config.fused_cloud_path))
        timings["fused_export"] = time.perf_counter() - tic
    timings["total"] = sum(timings.values())
    data["run"] = {"started": started.isoformat(), "timings_s": timings}
    if write_outputs and config.report_path:
        report.write(config.resolve(config.report_path))
    return report


def strip_run_section(report_text: str) -> str:
    """Report JSON without its timestamp/timing section, for reproducibility checks."""
    data = json.loads(report_text)
    data.pop("run", None)
    return json.dumps(data, indent=2, sort_keys=True)
