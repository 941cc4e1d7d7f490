"""Decentralized collaborative SLAM on synthetic structured indoor worlds."""

__version__ = "0.1.0"

from .geometry import Plane, Pose, PointCloud  # noqa: F401
