"""Trajectory forecasting and lane-change classification for on-ramp merges."""

__version__ = "0.1.0"
