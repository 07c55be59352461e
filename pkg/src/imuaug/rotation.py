"""Quaternion and Euler-angle mathematics, trajectory resampling and IMU orientation filtering.

Conventions
-----------
* Quaternions are ``[w, x, y, z]`` arrays (Hamilton product). A quaternion
  ``q`` describes a body orientation: it rotates body-frame vectors into the
  lab frame.
* Lab frame: x to the subject's right, y anterior, z up.
* Euler angles are ``[roll, pitch, yaw]`` for the intrinsic Z-Y-X sequence,
  i.e. ``q = Rz(yaw) * Ry(pitch) * Rx(roll)``.
* Single quaternions returned by this module are unit norm with ``w >= 0``.
  Trajectories are instead kept hemisphere-continuous (neighbouring samples
  have a non-negative dot product), which can require ``w < 0`` samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidAngle, InvalidArgument, InvalidRotation

UNIT_TOL = 1e-6
GIMBAL_TOL = 1e-6
SLERP_LINEAR_TOL = 1e-7
STATIC_RANGE = 1e-6

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


def as_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape[-1] != 4:
        raise InvalidArgument(f"quaternion arrays need a trailing axis of 4, got shape {q.shape}")
    return q


def check_unit(q, tol=UNIT_TOL):
    q = as_quat(q)
    norm = np.linalg.norm(q, axis=-1)
    bad = ~(np.abs(norm - 1.0) <= tol)
    if np.any(bad):
        idx = np.argwhere(np.atleast_1d(bad))[0].tolist()
        raise InvalidRotation(f"non-unit quaternion at index {idx}: norm {np.atleast_1d(norm)[tuple(idx)]!r}")
    return q


def normalize(q) -> np.ndarray:
    q = as_quat(q)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0.0) or not np.all(np.isfinite(norm)):
        raise InvalidRotation("cannot normalize a zero or non-finite quaternion")
    return q / norm


def canonical(q) -> np.ndarray:
    """Flip sign so that ``w >= 0``."""
    q = as_quat(q)
    return np.where(q[..., :1] < 0.0, -q, q)


def conjugate(q) -> np.ndarray:
    q = as_quat(q)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def multiply(a, b) -> np.ndarray:
    """Hamilton product ``a * b`` (apply ``b`` first, then ``a``), broadcasting."""
    a = as_quat(a)
    b = as_quat(b)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def rotate(q, v) -> np.ndarray:
    """Rotate 3-vectors ``v`` by unit quaternions ``q``."""
    q = as_quat(q)
    v = np.asarray(v, dtype=float)
    w = q[..., :1]
    u = q[..., 1:]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def from_axis_angle(axis, angle) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    half = 0.5 * np.asarray(angle, dtype=float)[..., None]
    return canonical(np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1))


def to_matrix(q) -> np.ndarray:
    q = as_quat(q)
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        axis=-2,
    )


def align_hemisphere(q, reference) -> np.ndarray:
    """Negate ``q`` where its dot product with ``reference`` is negative."""
    q = as_quat(q)
    dot = np.sum(q * as_quat(reference), axis=-1, keepdims=True)
    return np.where(dot < 0.0, -q, q)


def make_continuous(samples) -> np.ndarray:
    """Hemisphere-align a sequence so consecutive samples have dot >= 0.

    The first sample is put in canonical form and the rest follow it.
    """
    samples = np.array(as_quat(samples), dtype=float, copy=True)
    if len(samples) and samples[0, 0] < 0.0:
        samples[0] = -samples[0]
    for i in range(1, len(samples)):
        if np.dot(samples[i], samples[i - 1]) < 0.0:
            samples[i] = -samples[i]
    return samples


def angle_between(q0, q1) -> np.ndarray:
    """Geodesic rotation angle (rad, in [0, pi]) between orientations."""
    q0 = as_quat(q0)
    q1 = align_hemisphere(q1, q0)
    return 4.0 * np.arctan2(np.linalg.norm(q1 - q0, axis=-1), np.linalg.norm(q1 + q0, axis=-1))


def wrap_angle(a):
    """Wrap angles into (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a, dtype=float), 2.0 * np.pi)


def quat_to_euler(q, return_degenerate=False):
    """Intrinsic Z-Y-X decomposition into ``[roll, pitch, yaw]``.

    Within ``GIMBAL_TOL`` of pitch = +-pi/2 the roll is set to zero and the
    remaining rotation is folded into yaw; those samples are reported in the
    optional degenerate mask.
    """
    q = check_unit(q)
    w, x, y, z = np.moveaxis(q, -1, 0)
    r00 = 1.0 - 2.0 * (y * y + z * z)
    r10 = 2.0 * (x * y + w * z)
    r20 = 2.0 * (x * z - w * y)
    r21 = 2.0 * (y * z + w * x)
    r22 = 1.0 - 2.0 * (x * x + y * y)
    pitch = np.arctan2(-r20, np.hypot(r00, r10))
    roll = np.arctan2(r21, r22)
    yaw = np.arctan2(r10, r00)

    degenerate = np.abs(np.abs(pitch) - np.pi / 2) <= GIMBAL_TOL
    if np.any(degenerate):
        r01 = 2.0 * (x * y - w * z)
        r11 = 1.0 - 2.0 * (x * x + z * z)
        roll = np.where(degenerate, 0.0, roll)
        yaw = np.where(degenerate, np.arctan2(-r01, r11), yaw)

    euler = np.stack([wrap_angle(roll), pitch, wrap_angle(yaw)], axis=-1)
    if return_degenerate:
        return euler, degenerate
    return euler


def euler_to_quat(e) -> np.ndarray:
    """Inverse of :func:`quat_to_euler`: ``Rz(yaw) * Ry(pitch) * Rx(roll)``."""
    e = np.asarray(e, dtype=float)
    if e.shape[-1] != 3:
        raise InvalidArgument(f"Euler arrays need a trailing axis of 3, got shape {e.shape}")
    if not np.all(np.isfinite(e)):
        raise InvalidAngle("Euler angles must be finite")
    half = 0.5 * e
    cr, cp, cy = np.moveaxis(np.cos(half), -1, 0)
    sr, sp, sy = np.moveaxis(np.sin(half), -1, 0)
    q = np.stack(
        [
            cr * cp * cy + sr * sp * sy,
            sr * cp * cy - cr * sp * sy,
            cr * sp * cy + sr * cp * sy,
            cr * cp * sy - sr * sp * cy,
        ],
        axis=-1,
    )
    return canonical(normalize(q))


def _slerp_aligned(q0, q1, t):
    """Slerp between already hemisphere-aligned unit quaternions (no sign canonicalization)."""
    t = np.asarray(t, dtype=float)[..., None]
    omega = 4.0 * np.arctan2(np.linalg.norm(q1 - q0, axis=-1), np.linalg.norm(q1 + q0, axis=-1))
    half = (0.5 * omega)[..., None]
    linear = (omega < SLERP_LINEAR_TOL)[..., None]
    sin_half = np.sin(half)
    safe = np.where(linear, 1.0, sin_half)
    w0 = np.where(linear, 1.0 - t, np.sin((1.0 - t) * half) / safe)
    w1 = np.where(linear, t, np.sin(t * half) / safe)
    out = normalize(w0 * q0 + w1 * q1)
    out = np.where(t == 0.0, q0, out)
    return np.where(t == 1.0, q1, out)


def slerp(q0, q1, t) -> np.ndarray:
    """Spherical linear interpolation at fraction(s) ``t`` in [0, 1]."""
    q0 = check_unit(q0)
    q1 = align_hemisphere(check_unit(q1), q0)
    t = np.asarray(t, dtype=float)
    if np.any((t < 0.0) | (t > 1.0)):
        raise InvalidArgument("slerp fraction must lie in [0, 1]")
    return canonical(_slerp_aligned(q0, q1, t))


@dataclass(frozen=True, eq=False)
class OrientationTrajectory:
    """Unit-quaternion time series of one body segment at a fixed sample rate."""

    segment_id: str
    sample_rate: float
    samples: np.ndarray

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=float)
        if samples.ndim != 2 or samples.shape[1] != 4:
            raise InvalidArgument(f"{self.segment_id}: samples must have shape (n, 4), got {samples.shape}")
        if len(samples) < 2:
            raise InvalidArgument(f"{self.segment_id}: a trajectory needs at least 2 samples")
        if not self.sample_rate > 0:
            raise InvalidArgument(f"{self.segment_id}: sample rate must be positive")
        check_unit(samples)
        samples = make_continuous(samples)
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return len(self.samples)

    def with_samples(self, samples, segment_id=None) -> "OrientationTrajectory":
        return OrientationTrajectory(segment_id or self.segment_id, self.sample_rate, samples)


def resample_trajectory(traj: OrientationTrajectory, n: int) -> OrientationTrajectory:
    """Resample to ``n`` samples by slerp at linearly spaced normalized times.

    Endpoints are copied verbatim; equal-length resampling returns the input samples.
    """
    if n < 2:
        raise InvalidArgument(f"resample length must be >= 2, got {n}")
    q = traj.samples
    m = len(q)
    if n == m:
        return traj.with_samples(q.copy())
    pos = np.linspace(0.0, m - 1.0, n)
    lo = np.minimum(np.floor(pos).astype(int), m - 2)
    frac = pos - lo
    out = _slerp_aligned(q[lo], q[lo + 1], frac)
    out[0] = q[0]
    out[-1] = q[-1]
    return traj.with_samples(out)


def unwrap_euler_track(angles) -> np.ndarray:
    """Remove 2*pi jumps per axis; the first sample is unchanged."""
    angles = np.asarray(angles, dtype=float)
    if len(angles) == 0:
        raise InvalidArgument("cannot unwrap an empty track")
    return np.unwrap(angles, axis=0)


@dataclass(frozen=True)
class ImuSample:
    gyro: tuple  # rad/s, sensor frame
    accel: tuple  # m/s^2, specific force in sensor frame
    dt: float

    def __post_init__(self):
        if not self.dt > 0:
            raise InvalidArgument(f"IMU sample period must be positive, got {self.dt}")


def madgwick_update(state, sample: ImuSample, beta: float = 0.033) -> np.ndarray:
    """One IMU-only Madgwick step (gyro integration plus gravity gradient correction).

    A zero accelerometer vector skips the correction; the step is then pure
    gyro integration.
    """
    if beta < 0:
        raise InvalidArgument("beta must be non-negative")
    q0, q1, q2, q3 = check_unit(state)
    gx, gy, gz = (float(v) for v in sample.gyro)
    ax, ay, az = (float(v) for v in sample.accel)
    dt = sample.dt

    qd0 = 0.5 * (-q1 * gx - q2 * gy - q3 * gz)
    qd1 = 0.5 * (q0 * gx + q2 * gz - q3 * gy)
    qd2 = 0.5 * (q0 * gy - q1 * gz + q3 * gx)
    qd3 = 0.5 * (q0 * gz + q1 * gy - q2 * gx)

    norm = math.sqrt(ax * ax + ay * ay + az * az)
    if norm > 0.0 and beta > 0.0:
        ax, ay, az = ax / norm, ay / norm, az / norm
        # objective: predicted gravity direction in the sensor frame minus measured
        f1 = 2.0 * (q1 * q3 - q0 * q2) - ax
        f2 = 2.0 * (q0 * q1 + q2 * q3) - ay
        f3 = 1.0 - 2.0 * (q1 * q1 + q2 * q2) - az
        s0 = -2.0 * q2 * f1 + 2.0 * q1 * f2
        s1 = 2.0 * q3 * f1 + 2.0 * q0 * f2 - 4.0 * q1 * f3
        s2 = -2.0 * q0 * f1 + 2.0 * q3 * f2 - 4.0 * q2 * f3
        s3 = 2.0 * q1 * f1 + 2.0 * q2 * f2
        snorm = math.sqrt(s0 * s0 + s1 * s1 + s2 * s2 + s3 * s3)
        if snorm > 0.0:
            qd0 -= beta * s0 / snorm
            qd1 -= beta * s1 / snorm
            qd2 -= beta * s2 / snorm
            qd3 -= beta * s3 / snorm

    q = np.array([q0 + qd0 * dt, q1 + qd1 * dt, q2 + qd2 * dt, q3 + qd3 * dt])
    return canonical(normalize(q))


def tilt_from_accel(accel) -> np.ndarray:
    """Yaw-free orientation whose z axis matches the measured gravity direction."""
    a = np.asarray(accel, dtype=float)
    norm = np.linalg.norm(a)
    if norm == 0.0:
        return IDENTITY.copy()
    g = a / norm  # lab z expressed in the sensor frame
    roll = math.atan2(g[1], g[2])
    pitch = math.atan2(-g[0], math.hypot(g[1], g[2]))
    return euler_to_quat([roll, pitch, 0.0])


def madgwick_filter(gyro, accel, dt, beta=0.033, initial=None):
    """Run :func:`madgwick_update` over a stream.

    Returns ``(orientations, flagged)`` where ``orientations[i]`` is the state
    after sample ``i`` and ``flagged`` marks samples without an accelerometer
    reading. Without ``initial`` the state starts from the tilt implied by the
    first accelerometer sample.
    """
    gyro = np.asarray(gyro, dtype=float)
    accel = np.asarray(accel, dtype=float)
    if gyro.shape != accel.shape or gyro.ndim != 2 or gyro.shape[1] != 3:
        raise InvalidArgument("gyro and accel must both have shape (n, 3)")
    state = tilt_from_accel(accel[0]) if initial is None else check_unit(initial)
    out = np.empty((len(gyro), 4))
    flagged = np.linalg.norm(accel, axis=1) == 0.0
    for i in range(len(gyro)):
        state = madgwick_update(state, ImuSample(gyro[i], accel[i], dt), beta)
        out[i] = state
    return out, flagged
