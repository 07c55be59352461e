"""Synthetic IMU exercise-repetition generation with IK projection and rule-based relabeling."""

__version__ = "0.1.0"
