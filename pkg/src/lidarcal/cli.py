"""Command line entry point.

Exit codes: 0 success, 2 partial calibration, 3 input error (unreadable or
malformed data files), 4 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .config import load_config
from .errors import CalibrationError, ConfigError, InvalidParameter, ParseError, UnsupportedFormat
from .evaluation import aggregate_rmse, pose_error
from .geometry import RigidTransform
from .ground import GroundParams, ground_calibrate
from .pcd import read_pcd
from .pipeline import ground_entry, run_pipeline

EXIT_OK, EXIT_PARTIAL, EXIT_INPUT, EXIT_CONFIG = 0, 2, 3, 4

log = logging.getLogger("lidarcal")


def _cmd_calibrate(args) -> int:
    config = load_config(args.config)
    report = run_pipeline(config)
    if config.report_path is None or args.stdout:
        sys.stdout.write(report.to_json())
    else:
        print(f"report written to {config.resolve(config.report_path)}")
    for sid in report.data["uncalibrated"]:
        print(f"uncalibrated: {sid}", file=sys.stderr)
    return EXIT_PARTIAL if report.partial else EXIT_OK


def _cmd_ground(args) -> int:
    config = load_config(args.config)
    ids = list(config.ground.sensors) if config.ground.sensors is not None else config.sensor_ids
    params = GroundParams(config.ground.distance_threshold, config.ground.max_iterations,
                          config.seed, config.ground.max_tilt_deg)
    result, failed = {}, False
    for sensor in config.sensors:
        if sensor.id not in ids:
            continue
        cloud = read_pcd(config.resolve(sensor.cloud))
        try:
            result[sensor.id] = ground_entry(ground_calibrate(cloud, params))
        except CalibrationError as exc:
            result[sensor.id] = {"error": f"{type(exc).__name__}: {exc}"}
            failed = True
    print(json.dumps({"ground": result}, indent=2, sort_keys=True))
    return EXIT_PARTIAL if failed else EXIT_OK


def _cmd_synth(args) -> int:
    from .synth import FIXTURES, fixture_dict, scene_from_dict, write_scene_outputs

    if args.scene in FIXTURES and not Path(args.scene).exists():
        raw = fixture_dict(args.scene)
        default_out = Path(f"{args.scene}_scene")
    else:
        try:
            raw = yaml.safe_load(Path(args.scene).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read scene config {args.scene}: {exc.strerror}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"{args.scene}: invalid YAML: {exc}") from exc
        default_out = Path(args.scene).with_suffix("")
    if not isinstance(raw, dict):
        raise ConfigError("scene config must be a mapping")
    if args.with_isolated:
        raw = dict(raw, sensors=list(raw.get("sensors", [])) + list(raw.get("isolated_sensors", [])))
    try:
        scene, sensors = scene_from_dict(raw)
    except (KeyError, TypeError, InvalidParameter) as exc:
        raise ConfigError(f"invalid scene config: {exc}") from exc
    out = Path(args.out) if args.out else default_out
    write_scene_outputs(scene, sensors, out, target_id=args.target,
                        encoding="ascii" if args.ascii else "binary",
                        calibration=raw.get("calibration"))
    print(f"wrote {len(sensors)} scans, truth.yaml and calibrate.yaml to {out}")
    return EXIT_OK


def _load_truth(path) -> dict:
    try:
        raw = yaml.safe_load(Path(path).read_text())
        return {sid: RigidTransform.from_matrix(np.asarray(p["matrix"]), orthonormal=True)
                for sid, p in raw["poses"].items()}
    except OSError as exc:
        raise ConfigError(f"cannot read truth file {path}: {exc.strerror}") from exc
    except (yaml.YAMLError, KeyError, TypeError, ValueError, InvalidParameter) as exc:
        raise ConfigError(f"malformed truth file {path}: {exc}") from exc


def _cmd_evaluate(args) -> int:
    try:
        report = json.loads(Path(args.report).read_text())
        target, sensors = report["target"], report["sensors"]
    except OSError as exc:
        raise ConfigError(f"cannot read report {args.report}: {exc.strerror}") from exc
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ConfigError(f"malformed report {args.report}: {exc}") from exc
    poses = _load_truth(args.truth)
    if target not in poses:
        raise ConfigError(f"truth file has no pose for target {target!r}")
    scene = Path(args.report).resolve().parent.name
    errors, labels = [], []
    for sid in sorted(sensors):
        if sid == target:
            continue
        if sid not in poses:
            raise ConfigError(f"truth file has no pose for sensor {sid!r}")
        truth = poses[target].inverse() @ poses[sid]
        estimate = RigidTransform.from_matrix(np.asarray(sensors[sid]["matrix"]), orthonormal=True)
        errors.append(pose_error(estimate, truth, absolute_euler=args.absolute_euler))
        labels.append((scene, sid))
    if not errors:
        print("report contains no calibrated non-target sensors", file=sys.stderr)
        return EXIT_PARTIAL
    summary = aggregate_rmse(errors, labels)
    print(summary.to_json() if args.json else summary.to_text())
    return EXIT_PARTIAL if report.get("uncalibrated") else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lidarcal", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="more diagnostics on stderr (repeat for debug output)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="calibrate all sensors into the target frame")
    p.add_argument("config")
    p.add_argument("--stdout", action="store_true", help="also print the report JSON")
    p.set_defaults(func=_cmd_calibrate)

    p = sub.add_parser("ground", help="roll, pitch and height over the ground plane")
    p.add_argument("config")
    p.set_defaults(func=_cmd_ground)

    p = sub.add_parser("synth", help="generate synthetic scans with ground truth")
    p.add_argument("scene", help="scene YAML file or a built-in fixture name (cascade, pair)")
    p.add_argument("-o", "--out", help="output directory")
    p.add_argument("--target", help="target sensor id for the generated config")
    p.add_argument("--ascii", action="store_true", help="write ASCII PCD files")
    p.add_argument("--with-isolated", action="store_true",
                   help="include the scene's isolated_sensors (no shared view)")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("evaluate", help="compare a report against ground-truth poses")
    p.add_argument("report")
    p.add_argument("truth")
    p.add_argument("--json", action="store_true")
    p.add_argument("--absolute-euler", action="store_true",
                   help="per-axis rotation errors as differences of absolute Euler angles")
    p.set_defaults(func=_cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ParseError, UnsupportedFormat, CalibrationError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
