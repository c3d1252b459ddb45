"""Backscatter-tag AoA and IMU sliding-window SLAM for a planar robot."""

__version__ = "0.1.0"
