"""Deterministic ray-cast LiDAR scans of analytic scenes (ground plane + boxes).

Range noise is drawn from :class:`lidarcal.rng.PortableRandom` keyed by the
sensor seed, so scans are bitwise reproducible across platforms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .errors import EmptyScan, InvalidParameter
from .geometry import PointCloud, RigidTransform, euler_zyx_to_matrix
from .rng import PortableRandom

GROUND_LABEL = 0


@dataclass(frozen=True)
class Box:
    """Oriented box; angles are radians, composed as Rz(yaw) Ry(pitch) Rx(roll)."""

    center: tuple
    size: tuple
    yaw: float = 0.0
    name: str = ""
    roll: float = 0.0
    pitch: float = 0.0

    def __post_init__(self):
        if any(s <= 0 for s in self.size):
            raise InvalidParameter("box dimensions must be positive")
        if self.corners()[:, 2].min() < -1e-9:
            raise InvalidParameter(f"box {self.name!r} extends below the ground plane")

    @property
    def rotation(self) -> np.ndarray:
        return euler_zyx_to_matrix(self.roll, self.pitch, self.yaw)

    def corners(self) -> np.ndarray:
        signs = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], float)
        local = signs * np.asarray(self.size, float) / 2
        return local @ self.rotation.T + np.asarray(self.center, float)


@dataclass(frozen=True)
class SceneSpec:
    """Flat ground z = 0 over [-half_extent, half_extent]^2 plus boxes.

    Labels: 0 is the ground, box i carries label i + 1.
    """

    ground_half_extent: float = 100.0
    boxes: tuple = ()

    def label_names(self) -> list[str]:
        return ["ground"] + [b.name or f"box{i}" for i, b in enumerate(self.boxes)]


@dataclass(frozen=True)
class SensorSpec:
    id: str
    pose: RigidTransform
    kind: str = "solid_state"  # or "rotating"
    horizontal_fov: float = 90.0  # degrees (solid state)
    vertical_fov: float = 30.0
    horizontal_resolution: float = 0.3
    vertical_resolution: float = 0.3
    azimuth_step: float = 0.2  # degrees (rotating)
    channels: int = 32
    elevation_min: float = -15.0
    elevation_max: float = 15.0
    min_range: float = 0.5
    max_range: float = 60.0
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("solid_state", "rotating"):
            raise InvalidParameter(f"unknown sensor kind {self.kind!r}")
        if self.kind == "solid_state" and (self.horizontal_fov <= 0 or self.vertical_fov <= 0):
            raise InvalidParameter("FOV spans must be positive")
        if self.kind == "rotating" and (self.elevation_max <= self.elevation_min
                                        or self.channels < 1 or self.azimuth_step <= 0):
            raise InvalidParameter("invalid rotating sensor layout")
        if self.noise_sigma < 0:
            raise InvalidParameter("noise_sigma must be >= 0")
        if not 0 <= self.min_range < self.max_range:
            raise InvalidParameter("invalid range limits")

    def ray_directions(self) -> np.ndarray:
        """Unit ray directions in the sensor frame (x forward, z up)."""
        if self.kind == "rotating":
            az = np.arange(0.0, 360.0, self.azimuth_step)
            el = np.linspace(self.elevation_min, self.elevation_max, self.channels)
        else:
            nh = int(math.floor(self.horizontal_fov / self.horizontal_resolution + 1e-9)) + 1
            nv = int(math.floor(self.vertical_fov / self.vertical_resolution + 1e-9)) + 1
            az = _centered_grid(self.horizontal_fov, nh)
            el = _centered_grid(self.vertical_fov, nv)
        el_g, az_g = np.meshgrid(np.radians(el), np.radians(az), indexing="ij")
        el_g, az_g = el_g.ravel(), az_g.ravel()
        return np.column_stack([np.cos(el_g) * np.cos(az_g), np.cos(el_g) * np.sin(az_g),
                                np.sin(el_g)])


def _centered_grid(span: float, n: int) -> np.ndarray:
    # a single ray looks straight along the boresight rather than at the FOV edge
    return np.linspace(-span / 2, span / 2, n) if n > 1 else np.zeros(1)


@dataclass(frozen=True, eq=False)
class SyntheticScan:
    cloud: PointCloud  # sensor frame
    ground_truth_pose: RigidTransform  # sensor -> scene
    labels: np.ndarray
    ranges: np.ndarray = field(default=None)  # noiseless hit distances


def _intersect_ground(origin, dirs, half_extent):
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -origin[2] / dirs[:, 2]
        hit = origin + t[:, None] * dirs
    ok = (dirs[:, 2] < 0) & (t > 0) & (np.abs(hit[:, 0]) <= half_extent) \
        & (np.abs(hit[:, 1]) <= half_extent)
    return np.where(ok, t, np.inf)


def _intersect_box(origin, dirs, box: Box):
    rot = box.rotation
    o = rot.T @ (origin - np.asarray(box.center, float))
    d = dirs @ rot  # rows: R^T d
    h = np.asarray(box.size, float) / 2
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-h - o) / d
        t2 = (h - o) / d
    lo = np.fmin(t1, t2)
    hi = np.fmax(t1, t2)
    # rays parallel to a slab: inside it the slab imposes nothing, outside it misses
    parallel = d == 0
    inside = np.abs(o) <= h
    lo = np.where(parallel, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(parallel, np.where(inside, np.inf, -np.inf), hi)
    t_near = lo.max(axis=1)
    t_far = hi.min(axis=1)
    ok = (t_near <= t_far) & (t_near > 0)
    return np.where(ok, t_near, np.inf)


def cast_rays(scene: SceneSpec, origin: np.ndarray, dirs: np.ndarray):
    """Nearest hit distance and label for world-frame rays (inf / -1 on a miss)."""
    best = _intersect_ground(origin, dirs, scene.ground_half_extent)
    labels = np.where(np.isfinite(best), GROUND_LABEL, -1)
    for i, box in enumerate(scene.boxes):
        t = _intersect_box(origin, dirs, box)
        closer = t < best
        best = np.where(closer, t, best)
        labels = np.where(closer, i + 1, labels)
    return best, labels


def generate_scan(scene: SceneSpec, sensor: SensorSpec) -> SyntheticScan:
    """Ray-cast one scan; points are returned in the sensor frame."""
    dirs_s = sensor.ray_directions()
    pose = sensor.pose
    dirs_w = dirs_s @ pose.rotation.T
    t, labels = cast_rays(scene, pose.translation, dirs_w)
    keep = np.isfinite(t) & (t >= sensor.min_range) & (t <= sensor.max_range)
    if not keep.any():
        raise EmptyScan(f"sensor {sensor.id!r} produced no returns")
    t, labels, dirs_s = t[keep], labels[keep], dirs_s[keep]
    noisy = t
    if sensor.noise_sigma > 0:
        noisy = t + sensor.noise_sigma * PortableRandom(sensor.seed).normal(len(t))
    points = dirs_s * noisy[:, None]
    return SyntheticScan(PointCloud(points, frame_id=sensor.id), pose, labels, t)


def distance_to_primitive(scene: SceneSpec, label: int, world_points: np.ndarray) -> np.ndarray:
    """Unsigned distance from points to the surface of one labeled primitive."""
    if label == GROUND_LABEL:
        return np.abs(world_points[:, 2])
    box = scene.boxes[label - 1]
    local = (world_points - np.asarray(box.center, float)) @ box.rotation
    h = np.asarray(box.size, float) / 2
    q = np.abs(local) - h
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = np.minimum(q.max(axis=1), 0.0)
    return np.abs(outside + inside)


# ---------------------------------------------------------------- serialization

def sensor_from_dict(d: dict) -> SensorSpec:
    d = dict(d)
    position = d.pop("position", (0.0, 0.0, 0.0))
    roll, pitch, yaw = np.radians(d.pop("rpy_deg", (0.0, 0.0, 0.0)))
    pose = RigidTransform.from_euler(roll, pitch, yaw, position)
    rename = {"horizontal_fov_deg": "horizontal_fov", "vertical_fov_deg": "vertical_fov",
              "horizontal_resolution_deg": "horizontal_resolution",
              "vertical_resolution_deg": "vertical_resolution",
              "azimuth_step_deg": "azimuth_step", "elevation_min_deg": "elevation_min",
              "elevation_max_deg": "elevation_max"}
    kwargs = {rename.get(k, k): v for k, v in d.items()}
    try:
        return SensorSpec(pose=pose, **kwargs)
    except TypeError as exc:
        raise InvalidParameter(f"bad sensor spec: {exc}") from None


def sensor_to_dict(s: SensorSpec) -> dict:
    roll, pitch, yaw = s.pose.to_euler()
    out = {"id": s.id, "kind": s.kind,
           "position": [float(v) for v in s.pose.translation],
           "rpy_deg": [float(np.degrees(a)) for a in (roll, pitch, yaw)]}
    if s.kind == "solid_state":
        out.update(horizontal_fov_deg=s.horizontal_fov, vertical_fov_deg=s.vertical_fov,
                   horizontal_resolution_deg=s.horizontal_resolution,
                   vertical_resolution_deg=s.vertical_resolution)
    else:
        out.update(azimuth_step_deg=s.azimuth_step, channels=s.channels,
                   elevation_min_deg=s.elevation_min, elevation_max_deg=s.elevation_max)
    out.update(min_range=s.min_range, max_range=s.max_range,
               noise_sigma=s.noise_sigma, seed=s.seed)
    return out


def scene_from_dict(d: dict) -> tuple[SceneSpec, list[SensorSpec]]:
    boxes = tuple(
        Box(tuple(b["center"]), tuple(b["size"]), math.radians(b.get("yaw_deg", 0.0)),
            b.get("name", ""), math.radians(b.get("roll_deg", 0.0)),
            math.radians(b.get("pitch_deg", 0.0)))
        for b in d.get("boxes", [])
    )
    scene = SceneSpec(float(d.get("ground_half_extent", 100.0)), boxes)
    sensors = [sensor_from_dict(s) for s in d.get("sensors", [])]
    ids = [s.id for s in sensors]
    if len(set(ids)) != len(ids):
        raise InvalidParameter("duplicate sensor ids in scene")
    return scene, sensors


def scene_to_dict(scene: SceneSpec, sensors) -> dict:
    return {
        "ground_half_extent": scene.ground_half_extent,
        "boxes": [_box_to_dict(b) for b in scene.boxes],
        "sensors": [sensor_to_dict(s) for s in sensors],
    }


def _box_to_dict(b: Box) -> dict:
    out = {"name": b.name, "center": [float(v) for v in b.center],
           "size": [float(v) for v in b.size], "yaw_deg": math.degrees(b.yaw)}
    if b.roll or b.pitch:
        out.update(roll_deg=math.degrees(b.roll), pitch_deg=math.degrees(b.pitch))
    return out


def load_scene(path) -> tuple[SceneSpec, list[SensorSpec]]:
    with open(path) as fh:
        return scene_from_dict(yaml.safe_load(fh))


FIXTURES = ("cascade", "pair")


def fixture_dict(name: str) -> dict:
    """Raw YAML mapping of a packaged fixture ("cascade" or "pair")."""
    if name not in FIXTURES:
        raise InvalidParameter(f"unknown fixture {name!r}; choose from {FIXTURES}")
    text = resources.files("lidarcal.data").joinpath(f"{name}.yaml").read_text()
    return yaml.safe_load(text)


def cascade_scene() -> tuple[SceneSpec, list[SensorSpec]]:
    """Four solid-state sensors whose FOVs overlap only as A-B, B-C, C-T.

    Sensors are returned in the order A, B, C, T; T is the calibration target.
    """
    return scene_from_dict(fixture_dict("cascade"))


def isolated_scene() -> tuple[SceneSpec, list[SensorSpec]]:
    """The cascade fixture plus sensor X, whose view overlaps no other sensor."""
    d = fixture_dict("cascade")
    d["sensors"] = d["sensors"] + d["isolated_sensors"]
    return scene_from_dict(d)


def pair_scene() -> tuple[SceneSpec, list[SensorSpec]]:
    """Two sensors with 40% FOV overlap; S sits at yaw 30 deg, pitch 5 deg and
    t = (2, 1, 0.5) m relative to the target T."""
    return scene_from_dict(fixture_dict("pair"))


def relative_pose(poses: dict, sensor_id: str, target_id: str) -> RigidTransform:
    """Ground-truth transform mapping ``sensor_id`` coordinates into ``target_id``'s frame."""
    return poses[target_id].inverse() @ poses[sensor_id]


def write_scene_outputs(scene: SceneSpec, sensors, out_dir: Path, target_id: str | None = None,
                        encoding: str = "binary", calibration: dict | None = None) -> dict:
    """Write one PCD per sensor plus ``truth.yaml`` and a ready-to-run ``calibrate.yaml``.

    ``calibration`` may carry ``target`` and parameter sections (``coarse``,
    ``gicp``) that are copied into the generated config.
    """
    from .pcd import write_pcd

    calibration = dict(calibration or {})
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    target_id = target_id or calibration.pop("target", None) or sensors[-1].id
    calibration.pop("target", None)
    truth = {"frame": "scene", "target": target_id, "poses": {}}
    config_sensors = []
    for sensor in sensors:
        scan = generate_scan(scene, sensor)
        path = out_dir / f"{sensor.id}.pcd"
        write_pcd(scan.cloud, path, encoding=encoding)
        truth["poses"][sensor.id] = {"matrix": scan.ground_truth_pose.as_matrix().tolist()}
        config_sensors.append({"id": sensor.id, "cloud": path.name})
    with open(out_dir / "truth.yaml", "w") as fh:
        yaml.safe_dump(truth, fh, sort_keys=True)
    config = {"version": 1, "target": target_id, "sensors": config_sensors, **calibration,
              "output": {"report": "report.json", "fused_cloud": "fused.pcd"}}
    with open(out_dir / "calibrate.yaml", "w") as fh:
        yaml.safe_dump(config, fh, sort_keys=False)
    return truth
