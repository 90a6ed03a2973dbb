"""Targetless multi-LiDAR extrinsic calibration."""

__version__ = "0.1.0"
