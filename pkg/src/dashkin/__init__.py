"""Dashcam kinematics: CAN decoding, chunk datasets, model grid, events."""

__version__ = "0.1.0"
