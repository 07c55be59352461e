"""Orientation-tracking inverse kinematics with hard joint limits.

Each frame minimizes ``sum_s angle(world(s), target(s))**2`` over the joint
angles by per-DoF coordinate descent. A single DoF only rotates its subtree
about a fixed axis, so its 1-D subproblem is solved in closed form for the
chordal surrogate and then polished with safeguarded Gauss-Newton steps on the
true geodesic objective, always clamped to the DoF limits. The root
orientation is set directly from the root-segment target.

Before descending, the warm start competes against a hierarchical analytic
guess (per-joint Euler decomposition of the parent-relative target, clamped);
the better one seeds a bounded Levenberg-Marquardt stage over all DoFs, which
removes most of the slow inter-joint coupling before the coordinate sweeps
settle the result. Every accepted step strictly lowers the objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .. import rotation as rot
from ..errors import InvalidArgument
from ..rotation import OrientationTrajectory
from .model import Pose, PoseSequence, SkeletalModel

MAX_ITERATIONS = 200
TOLERANCE = 1e-10
RESIDUAL_FLAG = 1e-6

# -- quaternion helpers on 4-tuples ------------------------------------------


@njit(cache=True, inline="always")
def _qmul(a, b):
    a0, a1, a2, a3 = a
    b0, b1, b2, b3 = b
    return (
        a0 * b0 - a1 * b1 - a2 * b2 - a3 * b3,
        a0 * b1 + a1 * b0 + a2 * b3 - a3 * b2,
        a0 * b2 - a1 * b3 + a2 * b0 + a3 * b1,
        a0 * b3 + a1 * b2 - a2 * b1 + a3 * b0,
    )


@njit(cache=True, inline="always")
def _qconj(a):
    return (a[0], -a[1], -a[2], -a[3])


@njit(cache=True, inline="always")
def _row(m, i):
    return (m[i, 0], m[i, 1], m[i, 2], m[i, 3])


@njit(cache=True, inline="always")
def _axis_quat(axis, sign, angle):
    c = math.cos(0.5 * angle)
    s = math.sin(0.5 * angle) * sign
    if axis == 0:
        return (c, s, 0.0, 0.0)
    if axis == 1:
        return (c, 0.0, s, 0.0)
    return (c, 0.0, 0.0, s)


@njit(cache=True, inline="always")
def _pure_axis(axis, sign):
    if axis == 0:
        return (0.0, sign, 0.0, 0.0)
    if axis == 1:
        return (0.0, 0.0, sign, 0.0)
    return (0.0, 0.0, 0.0, sign)


@njit(cache=True, inline="always")
def _err_angle(e):
    n = math.sqrt(e[1] * e[1] + e[2] * e[2] + e[3] * e[3])
    return 2.0 * math.atan2(n, abs(e[0]))


@njit(cache=True)
def _clamp_circular(a, lo, hi):
    # pick the 2*pi representative closest to [lo, hi], then clamp
    best = a
    best_d = 1e300
    for k in (-1.0, 0.0, 1.0):
        c = a + k * 2.0 * math.pi
        d = 0.0
        if c < lo:
            d = lo - c
        elif c > hi:
            d = c - hi
        if d < best_d:
            best_d = d
            best = c
    return min(max(best, lo), hi)


# -- kinematics --------------------------------------------------------------


@njit(cache=True)
def _fk(root_q, angles, parent, dof_start, dof_count, axis, sign, Q):
    Q[0, 0] = root_q[0]
    Q[0, 1] = root_q[1]
    Q[0, 2] = root_q[2]
    Q[0, 3] = root_q[3]
    for s in range(1, parent.shape[0]):
        q = _row(Q, parent[s])
        for d in range(dof_start[s], dof_start[s] + dof_count[s]):
            q = _qmul(q, _axis_quat(axis[d], sign[d], angles[d]))
        Q[s, 0] = q[0]
        Q[s, 1] = q[1]
        Q[s, 2] = q[2]
        Q[s, 3] = q[3]


@njit(cache=True)
def _objective(Q, T, has_t):
    f = 0.0
    for s in range(Q.shape[0]):
        if has_t[s]:
            th = _err_angle(_qmul(_qconj(_row(T, s)), _row(Q, s)))
            f += th * th
    return f


@njit(cache=True)
def _decompose(r, n, ax, out):
    """Raw angles about unsigned principal axes ``ax[:n]`` reproducing ``r``."""
    if n == 1:
        b = 2.0 * math.atan2(r[1 + ax[0]], r[0])
        if b > math.pi:
            b -= 2.0 * math.pi
        elif b <= -math.pi:
            b += 2.0 * math.pi
        out[0] = b
        return
    i = ax[0]
    j = ax[1]
    k = 3 - i - j if n == 2 else ax[2]
    w, x, y, z = r
    m = np.empty((3, 3))
    m[0, 0] = 1 - 2 * (y * y + z * z)
    m[0, 1] = 2 * (x * y - w * z)
    m[0, 2] = 2 * (x * z + w * y)
    m[1, 0] = 2 * (x * y + w * z)
    m[1, 1] = 1 - 2 * (x * x + z * z)
    m[1, 2] = 2 * (y * z - w * x)
    m[2, 0] = 2 * (x * z - w * y)
    m[2, 1] = 2 * (y * z + w * x)
    m[2, 2] = 1 - 2 * (x * x + y * y)
    e = 1.0 if (j - i) % 3 == 1 else -1.0  # cyclic axis order
    out[0] = math.atan2(-e * m[j, k], m[k, k])
    out[1] = math.asin(min(1.0, max(-1.0, e * m[i, k])))
    if n == 3:
        out[2] = math.atan2(-e * m[i, j], m[i, i])


@njit(cache=True)
def _analytic(root_q, T, has_t, warm, parent, dof_start, dof_count, axis, sign, lo, hi, Q):
    angles = warm.copy()
    Q[0, 0] = root_q[0]
    Q[0, 1] = root_q[1]
    Q[0, 2] = root_q[2]
    Q[0, 3] = root_q[3]
    raw = np.zeros(3)
    ax = np.zeros(3, dtype=np.int64)
    for s in range(1, parent.shape[0]):
        qp = _row(Q, parent[s])
        n = dof_count[s]
        d0 = dof_start[s]
        if has_t[s]:
            rel = _qmul(_qconj(qp), _row(T, s))
            for k in range(n):
                ax[k] = axis[d0 + k]
            _decompose(rel, n, ax, raw)
            for k in range(n):
                angles[d0 + k] = _clamp_circular(sign[d0 + k] * raw[k], lo[d0 + k], hi[d0 + k])
        q = qp
        for d in range(d0, d0 + n):
            q = _qmul(q, _axis_quat(axis[d], sign[d], angles[d]))
        Q[s, 0] = q[0]
        Q[s, 1] = q[1]
        Q[s, 2] = q[2]
        Q[s, 3] = q[3]
    return angles


# -- bounded Levenberg-Marquardt over all DoFs ----------------------------------


@njit(cache=True)
def _rotvec(e):
    # rotation vector of the shorter rotation represented by quaternion e
    n = math.sqrt(e[1] * e[1] + e[2] * e[2] + e[3] * e[3])
    if n < 1e-15:
        sw = 1.0 if e[0] >= 0.0 else -1.0
        return 2.0 * sw * e[1], 2.0 * sw * e[2], 2.0 * sw * e[3]
    th = 2.0 * math.atan2(n, abs(e[0]))
    k = th / n if e[0] >= 0.0 else -th / n
    return k * e[1], k * e[2], k * e[3]


@njit(cache=True)
def _cholesky_solve(A, b, n):
    L = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1):
            acc = A[i, j]
            for k in range(j):
                acc -= L[i, k] * L[j, k]
            if i == j:
                if acc <= 0.0:
                    return b * 0.0, False
                L[i, i] = math.sqrt(acc)
            else:
                L[i, j] = acc / L[j, j]
    y = np.empty(n)
    for i in range(n):
        acc = b[i]
        for k in range(i):
            acc -= L[i, k] * y[k]
        y[i] = acc / L[i, i]
    x = np.empty(n)
    for i in range(n - 1, -1, -1):
        acc = y[i]
        for k in range(i + 1, n):
            acc -= L[k, i] * x[k]
        x[i] = acc / L[i, i]
    return x, True


@njit(cache=True)
def _lm(root, angles, T, has_t, parent, dof_start, dof_count, axis, sign, lo, hi, subtree, max_iter, tol, Q):
    """Box-constrained Levenberg-Marquardt on the stacked rotation-vector residuals."""
    S = parent.shape[0]
    D = angles.shape[0]
    seg_of = np.empty(D, dtype=np.int64)
    for s in range(1, S):
        for d in range(dof_start[s], dof_start[s] + dof_count[s]):
            seg_of[d] = s
    J = np.zeros((3 * S, D))
    r = np.zeros(3 * S)
    omega = np.empty((D, 3))
    trial = np.empty(D)
    lam = 1e-3
    _fk(root, angles, parent, dof_start, dof_count, axis, sign, Q)
    f = _objective(Q, T, has_t)
    it = 0
    while it < max_iter and f > 0.0:
        it += 1
        # world axis of every DoF at the current pose
        for s in range(1, S):
            q = _row(Q, parent[s])
            for d in range(dof_start[s], dof_start[s] + dof_count[s]):
                q = _qmul(q, _axis_quat(axis[d], sign[d], angles[d]))
                v = _qmul(_qmul(q, _pure_axis(axis[d], sign[d])), _qconj(q))
                omega[d, 0] = v[1]
                omega[d, 1] = v[2]
                omega[d, 2] = v[3]
        J[:, :] = 0.0
        r[:] = 0.0
        for t in range(S):
            if not has_t[t]:
                continue
            px, py, pz = _rotvec(_qmul(_row(Q, t), _qconj(_row(T, t))))
            r[3 * t] = px
            r[3 * t + 1] = py
            r[3 * t + 2] = pz
            th = math.sqrt(px * px + py * py + pz * pz)
            if th < 1e-6:
                c = 1.0 / 12.0
            elif th < math.pi - 1e-3:
                c = 1.0 / (th * th) - (1.0 + math.cos(th)) / (2.0 * th * math.sin(th))
            else:
                c = 0.0
            for d in range(D):
                if not subtree[seg_of[d], t]:
                    continue
                wx, wy, wz = omega[d, 0], omega[d, 1], omega[d, 2]
                cx = py * wz - pz * wy
                cy = pz * wx - px * wz
                cz = px * wy - py * wx
                ccx = py * cz - pz * cy
                ccy = pz * cx - px * cz
                ccz = px * cy - py * cx
                J[3 * t, d] = wx - 0.5 * cx + c * ccx
                J[3 * t + 1, d] = wy - 0.5 * cy + c * ccy
                J[3 * t + 2, d] = wz - 0.5 * cz + c * ccz
        g = J.T @ r
        H = J.T @ J
        free = np.empty(D, dtype=np.int64)
        nf = 0
        for d in range(D):
            if (angles[d] <= lo[d] and g[d] > 0.0) or (angles[d] >= hi[d] and g[d] < 0.0):
                continue
            free[nf] = d
            nf += 1
        if nf == 0:
            break
        accepted = False
        fn = f
        for _ in range(12):
            A = np.empty((nf, nf))
            b = np.empty(nf)
            for i in range(nf):
                for j in range(nf):
                    A[i, j] = H[free[i], free[j]]
                A[i, i] += lam * (H[free[i], free[i]] + 1e-9)
                b[i] = -g[free[i]]
            step, ok = _cholesky_solve(A, b, nf)
            if ok:
                for d in range(D):
                    trial[d] = angles[d]
                for i in range(nf):
                    d = free[i]
                    trial[d] = min(max(angles[d] + step[i], lo[d]), hi[d])
                _fk(root, trial, parent, dof_start, dof_count, axis, sign, Q)
                fn = _objective(Q, T, has_t)
                if fn < f:
                    accepted = True
                    break
            lam *= 4.0
        if not accepted:
            _fk(root, angles, parent, dof_start, dof_count, axis, sign, Q)
            break
        for d in range(D):
            angles[d] = trial[d]
        improvement = f - fn
        f = fn
        lam = max(lam / 3.0, 1e-9)
        if improvement < tol:
            break
    return f, it


# -- single-DoF subproblem ------------------------------------------------------


@njit(cache=True)
def _f1d(a, E0, E1, m):
    c = math.cos(0.5 * a)
    s = math.sin(0.5 * a)
    f = 0.0
    for t in range(m):
        e = (c * E0[t, 0] + s * E1[t, 0], c * E0[t, 1] + s * E1[t, 1],
             c * E0[t, 2] + s * E1[t, 2], c * E0[t, 3] + s * E1[t, 3])
        th = _err_angle(e)
        f += th * th
    return f


@njit(cache=True)
def _grad_hess(a, E0, E1, m):
    c = math.cos(0.5 * a)
    s = math.sin(0.5 * a)
    g = 0.0
    h = 0.0
    for t in range(m):
        w = c * E0[t, 0] + s * E1[t, 0]
        dw = 0.5 * (-s * E0[t, 0] + c * E1[t, 0])
        vv = 0.0
        dd = 0.0
        nn = 0.0
        for k in range(1, 4):
            v = c * E0[t, k] + s * E1[t, k]
            dv = 0.5 * (-s * E0[t, k] + c * E1[t, k])
            nn += v * v
            vv += v * dv
            dd += dv * dv
        n = math.sqrt(nn)
        aw = abs(w)
        sw = 1.0 if w >= 0.0 else -1.0
        if n > 1e-12:
            ratio = math.atan2(n, aw) / n
            kk = vv / n
        else:
            ratio = 1.0 / max(aw, 1e-300)
            kk = math.sqrt(dd)
        # theta = 2*atan2(n, |w|); d(theta^2)/da and a Gauss-Newton curvature
        g += 8.0 * ratio * (aw * vv - nn * sw * dw)
        dth = 2.0 * (aw * kk - n * sw * dw)
        h += 2.0 * dth * dth
    return g, h


@njit(cache=True)
def _update_dof(d, s, angles, Q, T, has_t, parent, dof_start, dof_count, axis, sign, lo, hi, subtree, E0, E1):
    d0 = dof_start[s]
    pre = _row(Q, parent[s])
    for k in range(d0, d):
        pre = _qmul(pre, _axis_quat(axis[k], sign[k], angles[k]))
    post = (1.0, 0.0, 0.0, 0.0)
    for k in range(d + 1, d0 + dof_count[s]):
        post = _qmul(post, _axis_quat(axis[k], sign[k], angles[k]))
    qs_inv = _qconj(_row(Q, s))
    u = _pure_axis(axis[d], sign[d])
    m = 0
    for t in range(Q.shape[0]):
        if subtree[s, t] and has_t[t]:
            nt = _qmul(post, _qmul(qs_inv, _row(Q, t)))
            at = _qmul(_qconj(_row(T, t)), pre)
            e0 = _qmul(at, nt)
            e1 = _qmul(at, _qmul(u, nt))
            for k in range(4):
                E0[m, k] = e0[k]
                E1[m, k] = e1[k]
            m += 1
    if m == 0:
        return False

    a = angles[d]
    f = _f1d(a, E0, E1, m)
    a_start = a

    # chordal closed form: maximize sum of squared scalar parts over (cos, sin) of a/2
    spp = 0.0
    spr = 0.0
    srr = 0.0
    for t in range(m):
        spp += E0[t, 0] * E0[t, 0]
        spr += E0[t, 0] * E1[t, 0]
        srr += E1[t, 0] * E1[t, 0]
    a_ch = math.atan2(2.0 * spr, spp - srr)
    two_pi = 2.0 * math.pi
    base = a_ch + two_pi * math.floor((a - a_ch) / two_pi + 0.5)
    for k in (-1.0, 0.0, 1.0):
        cand = min(max(base + k * two_pi, lo[d]), hi[d])
        fc = _f1d(cand, E0, E1, m)
        if fc < f:
            f = fc
            a = cand

    for _ in range(30):
        g, h = _grad_hess(a, E0, E1, m)
        if not h > 1e-300:
            break
        step = -g / h
        accepted = False
        an = a
        fn = f
        for _bt in range(40):
            an = min(max(a + step, lo[d]), hi[d])
            if an == a:
                break
            fn = _f1d(an, E0, E1, m)
            if fn < f:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        small = abs(an - a) < 1e-15
        a = an
        f = fn
        if small:
            break
    angles[d] = a
    return a != a_start


@njit(cache=True)
def _fit_frame(T, has_t, root_warm, warm, parent, dof_start, dof_count, axis, sign, lo, hi, subtree,
               max_iter, tol, Q, E0, E1):
    S = parent.shape[0]
    angles = np.empty_like(warm)
    for d in range(warm.shape[0]):
        angles[d] = min(max(warm[d], lo[d]), hi[d])
    if has_t[0]:
        root = np.empty(4)
        sgn = 1.0 if T[0, 0] >= 0.0 else -1.0
        for k in range(4):
            root[k] = sgn * T[0, k]
    else:
        root = root_warm.copy()

    active = np.zeros(S, dtype=np.bool_)
    for s in range(1, S):
        for t in range(S):
            if subtree[s, t] and has_t[t]:
                active[s] = True

    _fk(root, angles, parent, dof_start, dof_count, axis, sign, Q)
    f = _objective(Q, T, has_t)
    guess = _analytic(root, T, has_t, angles, parent, dof_start, dof_count, axis, sign, lo, hi, Q)
    fg = _objective(Q, T, has_t)
    if fg < f - 1e-12:
        angles = guess
        f = fg
    f, it = _lm(root, angles, T, has_t, parent, dof_start, dof_count, axis, sign, lo, hi, subtree,
                max_iter, tol, Q)

    while it < max_iter:
        it += 1
        for s in range(1, S):
            if not active[s]:
                continue
            for d in range(dof_start[s], dof_start[s] + dof_count[s]):
                if _update_dof(d, s, angles, Q, T, has_t, parent, dof_start, dof_count, axis, sign,
                               lo, hi, subtree, E0, E1):
                    _fk(root, angles, parent, dof_start, dof_count, axis, sign, Q)
        fn = _objective(Q, T, has_t)
        improvement = f - fn
        f = fn
        if improvement < tol:
            break
    return angles, root, f, it


@njit(cache=True)
def _run(T, has_t, root0, warm0, parent, dof_start, dof_count, axis, sign, lo, hi, subtree, max_iter, tol):
    n = T.shape[0]
    S = parent.shape[0]
    D = warm0.shape[0]
    out_angles = np.empty((n, D))
    out_root = np.empty((n, 4))
    resid = np.empty(n)
    iters = np.empty(n, dtype=np.int64)
    Q = np.empty((S, 4))
    E0 = np.empty((S, 4))
    E1 = np.empty((S, 4))
    angles = warm0.copy()
    root = root0.copy()
    for i in range(n):
        angles, root, f, it = _fit_frame(T[i], has_t, root, angles, parent, dof_start, dof_count, axis, sign,
                                         lo, hi, subtree, max_iter, tol, Q, E0, E1)
        out_angles[i] = angles
        out_root[i] = root
        resid[i] = f
        iters[i] = it
    return out_angles, out_root, resid, iters


# -- public API --------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class IKResult:
    poses: PoseSequence
    residuals: np.ndarray  # per-frame objective, rad^2
    iterations: np.ndarray
    flagged: np.ndarray  # residual above RESIDUAL_FLAG


def _target_array(model: SkeletalModel, targets, n):
    T = np.tile(rot.IDENTITY, (n, model.n_segments, 1))
    has_t = np.zeros(model.n_segments, dtype=np.bool_)
    for seg_id, q in targets.items():
        if seg_id not in model.index:
            raise InvalidArgument(f"target for unknown segment {seg_id!r}")
        i = model.index[seg_id]
        T[:, i] = rot.check_unit(np.asarray(q, dtype=float).reshape(n, 4))
        has_t[i] = True
    if not has_t.any():
        raise InvalidArgument("inverse kinematics needs at least one segment target")
    return T, has_t


def _kernel_args(model):
    a = model.arrays()
    return a["parent"], a["dof_start"], a["dof_count"], a["axis"], a["sign"], a["lo"], a["hi"], a["subtree"]


def fit_pose(model: SkeletalModel, targets, warm_start: Pose | None = None,
             max_iterations=MAX_ITERATIONS, tol=TOLERANCE):
    """Best-fitting in-limits pose for per-segment target orientations.

    Returns ``(pose, residual, iterations)``; the residual is the summed
    squared geodesic error in rad^2.
    """
    warm_start = warm_start or Pose.neutral(model)
    if len(warm_start.joint_angles) != model.n_dofs:
        raise InvalidArgument("warm start does not match the model DoF count")
    T, has_t = _target_array(model, targets, 1)
    S = model.n_segments
    Q, E0, E1 = np.empty((S, 4)), np.empty((S, 4)), np.empty((S, 4))
    angles, root, f, it = _fit_frame(T[0], has_t, np.asarray(warm_start.root_orientation, dtype=float),
                                     np.asarray(warm_start.joint_angles, dtype=float), *_kernel_args(model),
                                     max_iterations, tol, Q, E0, E1)
    pose = Pose(np.array(warm_start.root_position, dtype=float), rot.canonical(root), angles)
    return pose, float(f), int(it)


def run_ik(model: SkeletalModel, trajs, max_iterations=MAX_ITERATIONS, tol=TOLERANCE,
           flag_threshold=RESIDUAL_FLAG) -> IKResult:
    """Solve every frame, warm-starting frame ``t`` from the solution of ``t - 1``.

    ``trajs`` maps segment ids to :class:`OrientationTrajectory` (or raw
    ``(n, 4)`` arrays) of equal length and sample rate.
    """
    if not trajs:
        raise InvalidArgument("inverse kinematics needs at least one segment target")
    lengths = {len(t) for t in trajs.values()}
    rates = {t.sample_rate for t in trajs.values() if isinstance(t, OrientationTrajectory)}
    if len(lengths) != 1 or len(rates) > 1:
        raise InvalidArgument("all target trajectories must share length and sample rate")
    n = lengths.pop()
    samples = {k: (t.samples if isinstance(t, OrientationTrajectory) else t) for k, t in trajs.items()}
    T, has_t = _target_array(model, samples, n)
    neutral = Pose.neutral(model)
    angles, root, resid, iters = _run(T, has_t, neutral.root_orientation, neutral.joint_angles,
                                      *_kernel_args(model), max_iterations, tol)
    poses = PoseSequence(np.zeros((n, 3)), rot.canonical(root), angles)
    return IKResult(poses, resid, iters, resid > flag_threshold)
