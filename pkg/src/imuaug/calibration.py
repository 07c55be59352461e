"""Static-pose sensor-to-segment calibration.

The offset is left-multiplied (``T_segment = T_offset * T_IMU``), so it also
absorbs the arbitrary heading of a magnetometer-free orientation filter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rotation as rot
from .errors import InvalidArgument
from .rotation import OrientationTrajectory


@dataclass(frozen=True, eq=False)
class SegmentFrameOffset:
    segment_id: str
    offset: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "offset", rot.canonical(rot.check_unit(self.offset)))

    def inverse(self) -> "SegmentFrameOffset":
        return SegmentFrameOffset(self.segment_id, rot.conjugate(self.offset))


def mean_orientation(samples) -> np.ndarray:
    """Normalized component-wise mean of hemisphere-aligned quaternions."""
    samples = rot.check_unit(samples)
    aligned = rot.align_hemisphere(samples, samples[0])
    return rot.canonical(rot.normalize(aligned.mean(axis=0)))


def compute_offset(imu_traj: OrientationTrajectory, static_window, reference=rot.IDENTITY) -> SegmentFrameOffset:
    """Offset mapping the mean orientation over ``static_window`` onto ``reference``.

    ``static_window`` is a half-open ``(start, stop)`` sample-index range.
    """
    start, stop = (int(v) for v in static_window)
    if not 0 <= start < stop <= len(imu_traj):
        raise InvalidArgument(
            f"{imu_traj.segment_id}: static window [{start}, {stop}) outside trajectory of length {len(imu_traj)}"
        )
    mean = mean_orientation(imu_traj.samples[start:stop])
    offset = rot.multiply(rot.check_unit(reference), rot.conjugate(mean))
    return SegmentFrameOffset(imu_traj.segment_id, rot.normalize(offset))


def apply_offset(offset: SegmentFrameOffset, traj: OrientationTrajectory) -> OrientationTrajectory:
    if offset.segment_id != traj.segment_id:
        raise InvalidArgument(f"offset for {offset.segment_id!r} applied to trajectory {traj.segment_id!r}")
    return traj.with_samples(rot.multiply(offset.offset, traj.samples))
