"""Accuracy metrics against ground-truth poses."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyInput
from .geometry import RigidTransform, matrix_to_euler_zyx

AXES = ("x", "y", "z")


@dataclass(frozen=True)
class PoseError:
    """Per-axis translation error (m), per-axis rotation error (rad) and total angle (rad).

    Rotation errors are the ZYX Euler angles (roll, pitch, yaw) of
    ``truth.rotation.T @ estimate.rotation``.  With ``absolute_euler=True``
    :func:`pose_error` instead stores wrapped differences of the two poses'
    own Euler angles.
    """

    translation: tuple
    rotation: tuple
    angle: float

    def as_dict(self) -> dict:
        return {"translation": list(self.translation), "rotation": list(self.rotation),
                "angle": self.angle}


def _wrap(angle: float) -> float:
    return math.remainder(angle, 2.0 * math.pi)


def rotation_angle(rotation: np.ndarray) -> float:
    cos = (np.trace(rotation) - 1.0) / 2.0
    return float(np.arccos(np.clip(cos, -1.0, 1.0)))


def pose_error(estimate: RigidTransform, truth: RigidTransform,
               absolute_euler: bool = False) -> PoseError:
    translation = tuple(float(v) for v in estimate.translation - truth.translation)
    delta = truth.rotation.T @ estimate.rotation
    if absolute_euler:
        rotation = tuple(_wrap(e - t) for e, t in zip(estimate.to_euler(), truth.to_euler()))
    else:
        rotation = matrix_to_euler_zyx(delta)
    return PoseError(translation, tuple(rotation), rotation_angle(delta))


@dataclass(frozen=True)
class ErrorReport:
    """Error table keyed by (scene, sensor) plus per-axis RMSE over all rows."""

    rows: tuple  # ((scene, sensor, PoseError), ...)
    translation_rmse: tuple
    rotation_rmse: tuple
    angle_rmse: float

    def to_dict(self) -> dict:
        return {
            "rows": [{"scene": sc, "sensor": se, **err.as_dict()} for sc, se, err in self.rows],
            "rmse": {"translation": dict(zip(AXES, self.translation_rmse)),
                     "rotation": dict(zip(("roll", "pitch", "yaw"), self.rotation_rmse)),
                     "angle": self.angle_rmse},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [f"{'scene':<12} {'sensor':<10} {'dx':>9} {'dy':>9} {'dz':>9} "
                 f"{'droll':>8} {'dpitch':>8} {'dyaw':>8} {'angle':>8}"]
        for scene, sensor, e in self.rows:
            rot = [math.degrees(v) for v in e.rotation]
            lines.append(f"{scene:<12} {sensor:<10} "
                         + " ".join(f"{v:>9.4f}" for v in e.translation) + " "
                         + " ".join(f"{v:>8.4f}" for v in rot)
                         + f" {math.degrees(e.angle):>8.4f}")
        t = self.translation_rmse
        r = [math.degrees(v) for v in self.rotation_rmse]
        lines.append(f"{'RMSE':<23} " + " ".join(f"{v:>9.4f}" for v in t) + " "
                     + " ".join(f"{v:>8.4f}" for v in r) + f" {math.degrees(self.angle_rmse):>8.4f}")
        lines.append("(translation in m, angles in degrees)")
        return "\n".join(lines)


def _rmse(values: np.ndarray) -> np.ndarray:
    return np.sqrt(np.mean(np.square(values), axis=0))


def aggregate_rmse(errors, labels=None) -> ErrorReport:
    """Per-axis RMSE over every entry.

    ``errors`` is a sequence of PoseError; ``labels`` optionally gives a
    matching (scene, sensor) pair for each row of the table.
    """
    errors = list(errors)
    if not errors:
        raise EmptyInput("aggregate_rmse needs at least one PoseError")
    labels = list(labels) if labels is not None else [("", str(i)) for i in range(len(errors))]
    if len(labels) != len(errors):
        raise ValueError("labels and errors differ in length")
    t = _rmse(np.array([e.translation for e in errors]))
    r = _rmse(np.array([e.rotation for e in errors]))
    a = _rmse(np.array([e.angle for e in errors]))
    rows = tuple((sc, se, e) for (sc, se), e in zip(labels, errors))
    return ErrorReport(rows, tuple(map(float, t)), tuple(map(float, r)), float(a))
