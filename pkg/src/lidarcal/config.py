"""Run configuration: a single YAML file, validated before any point cloud is read.

Example::

    version: 1
    target: T
    sensors:
      - {id: A, cloud: A.pcd}
      - {id: T, cloud: T.pcd}
    coarse: {voxel_size: 0.35, fpfh_radius_factor: 5}
    gicp: {max_correspondence_distance: 1.0, fitness_threshold: 0.2}
    ground: {enabled: true, sensors: [T], distance_threshold: 0.05}
    seed: 0
    output: {report: report.json, fused_cloud: fused.pcd}

Relative paths are resolved against the directory holding the config file.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .coarse import CoarseParams
from .errors import ConfigError, InvalidParameter
from .fine import GicpParams

SCHEMA_VERSION = 1
_TOP_KEYS = {"version", "target", "sensors", "coarse", "gicp", "ground", "seed", "output"}
_GROUND_KEYS = {"enabled", "sensors", "distance_threshold", "max_iterations", "max_tilt_deg"}
_OUTPUT_KEYS = {"report", "fused_cloud"}


@dataclass(frozen=True)
class SensorInput:
    id: str
    cloud: str  # as written in the config


@dataclass(frozen=True)
class GroundOptions:
    enabled: bool = False
    sensors: tuple | None = None  # None: every sensor
    distance_threshold: float = 0.05
    max_iterations: int = 1000
    max_tilt_deg: float = 30.0


@dataclass(frozen=True)
class RunConfig:
    target_id: str
    sensors: tuple
    coarse: CoarseParams = CoarseParams()
    gicp: GicpParams = GicpParams()
    ground: GroundOptions = GroundOptions()
    seed: int = 0
    report_path: str | None = None
    fused_cloud_path: str | None = None
    base_dir: Path = field(default=Path("."), compare=False)

    @property
    def sensor_ids(self) -> list[str]:
        return [s.id for s in self.sensors]

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def ground_sensors(self) -> list[str]:
        if not self.ground.enabled:
            return []
        return list(self.ground.sensors) if self.ground.sensors is not None else self.sensor_ids

    def echo(self) -> dict:
        """The effective configuration, defaults filled in, paths as written."""
        ground = dataclasses.asdict(self.ground)
        if ground["sensors"] is not None:
            ground["sensors"] = list(ground["sensors"])
        return {
            "version": SCHEMA_VERSION,
            "target": self.target_id,
            "sensors": [{"id": s.id, "cloud": s.cloud} for s in self.sensors],
            "coarse": dataclasses.asdict(self.coarse),
            "gicp": dataclasses.asdict(self.gicp),
            "ground": ground,
            "seed": self.seed,
            "output": {"report": self.report_path, "fused_cloud": self.fused_cloud_path},
        }


def _section(raw: dict, key: str, allowed: set | None = None) -> dict:
    value = raw.get(key) or {}
    if not isinstance(value, dict):
        raise ConfigError(f"'{key}' must be a mapping")
    if allowed is not None and (unknown := set(value) - allowed):
        raise ConfigError(f"unknown keys in '{key}': {', '.join(sorted(unknown))}")
    return value


def _params(cls, values: dict, section: str):
    names = {f.name for f in dataclasses.fields(cls)}
    if unknown := set(values) - names:
        raise ConfigError(f"unknown keys in '{section}': {', '.join(sorted(unknown))}")
    try:
        return cls(**values)
    except (InvalidParameter, TypeError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def config_from_dict(raw, base_dir: Path | str = ".") -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    if unknown := set(raw) - _TOP_KEYS:
        raise ConfigError(f"unknown top-level keys: {', '.join(sorted(unknown))}")
    if raw.get("version", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise ConfigError(f"unsupported config version {raw.get('version')!r}")

    entries = raw.get("sensors")
    if not isinstance(entries, list) or len(entries) < 2:
        raise ConfigError("'sensors' must list at least two sensors")
    sensors, seen = [], set()
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict) or set(entry) != {"id", "cloud"}:
            raise ConfigError(f"sensor #{i + 1} needs exactly the keys 'id' and 'cloud'")
        sid, cloud = str(entry["id"]), entry["cloud"]
        if not sid:
            raise ConfigError(f"sensor #{i + 1} has an empty id")
        if sid in seen:
            raise ConfigError(f"duplicate sensor id {sid!r}")
        if not isinstance(cloud, str) or not cloud:
            raise ConfigError(f"sensor {sid!r} has an empty cloud path")
        seen.add(sid)
        sensors.append(SensorInput(sid, cloud))

    target = raw.get("target")
    if target is None or str(target) not in seen:
        raise ConfigError(f"target {target!r} is not among the sensors")

    ground_raw = dict(_section(raw, "ground", _GROUND_KEYS))
    if ground_raw.get("sensors") is not None:
        listed = [str(s) for s in ground_raw["sensors"]]
        if missing := [s for s in listed if s not in seen]:
            raise ConfigError(f"ground sensors not configured: {', '.join(missing)}")
        ground_raw["sensors"] = tuple(listed)
    try:
        ground = GroundOptions(**ground_raw)
    except TypeError as exc:
        raise ConfigError(f"ground: {exc}") from exc
    if not ground.distance_threshold > 0 or ground.max_iterations < 1:
        raise ConfigError("ground: distance_threshold > 0 and max_iterations >= 1 required")

    output = _section(raw, "output", _OUTPUT_KEYS)
    for key, value in output.items():
        if value is not None and (not isinstance(value, str) or not value):
            raise ConfigError(f"output.{key} must be a non-empty path")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("seed must be an integer")

    return RunConfig(
        target_id=str(target),
        sensors=tuple(sensors),
        coarse=_params(CoarseParams, _section(raw, "coarse"), "coarse"),
        gicp=_params(GicpParams, _section(raw, "gicp"), "gicp"),
        ground=ground,
        seed=seed,
        report_path=output.get("report"),
        fused_cloud_path=output.get("fused_cloud"),
        base_dir=Path(base_dir),
    )


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    return config_from_dict(raw, path.parent)
