"""Axis-angle rotations: exp/log maps on so(3), numpy and tape variants.

Axis-angle vectors are unnormalized (direction = axis, norm = angle in
radians). The exponential map uses the Rodrigues form written in terms of
the squared angle, with a truncated series below 1e-16 so the map and its
gradient stay finite at the identity.
"""

from __future__ import annotations

import numpy as np

from . import tape
from .tape import Tensor

_SERIES_T = 1e-16  # switch point on theta^2


def _skew(v):
    """(..., 3) -> (..., 3, 3) skew-symmetric matrices (numpy)."""
    v = np.asarray(v, dtype=np.float64)
    z = np.zeros(v.shape[:-1])
    x, y, w = v[..., 0], v[..., 1], v[..., 2]
    return np.stack(
        [
            np.stack([z, -w, y], axis=-1),
            np.stack([w, z, -x], axis=-1),
            np.stack([-y, x, z], axis=-1),
        ],
        axis=-2,
    )


def exp_so3(aa):
    """Axis-angle (..., 3) -> rotation matrices (..., 3, 3) in numpy."""
    aa = np.asarray(aa, dtype=np.float64)
    t = (aa * aa).sum(axis=-1)  # theta^2
    theta = np.sqrt(t)
    small = t < _SERIES_T
    ts = np.where(small, 1.0, t)
    a = np.where(small, 1.0 - t / 6.0, np.sin(theta) / np.sqrt(ts))
    b = np.where(small, 0.5 - t / 24.0, (1.0 - np.cos(theta)) / ts)
    k = _skew(aa)
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


def log_so3(rot):
    """Rotation matrices (..., 3, 3) -> axis-angle (..., 3) with angle in [0, pi]."""
    rot = np.asarray(rot, dtype=np.float64)
    tr = np.clip((np.trace(rot, axis1=-2, axis2=-1) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(tr)
    vee = 0.5 * np.stack(
        [
            rot[..., 2, 1] - rot[..., 1, 2],
            rot[..., 0, 2] - rot[..., 2, 0],
            rot[..., 1, 0] - rot[..., 0, 1],
        ],
        axis=-1,
    )
    sin_t = np.sin(theta)
    small = theta < 1e-7
    near_pi = theta > np.pi - 1e-5
    scale = np.where(small, 1.0 + theta**2 / 6.0, theta / np.where(sin_t == 0.0, 1.0, sin_t))
    aa = vee * scale[..., None]
    if np.any(near_pi):
        # Near pi the skew part vanishes; recover the axis from the symmetric part.
        aa = aa.copy()
        idx = np.argwhere(near_pi)
        for ix in idx:
            r = rot[tuple(ix)]
            th = theta[tuple(ix)]
            m = (r + np.eye(3)) / 2.0
            axis = np.sqrt(np.maximum(np.diagonal(m), 0.0))
            k = int(np.argmax(axis))
            if axis[k] > 0.0:
                axis = m[:, k] / (axis[k] if axis[k] > 0 else 1.0)
                axis = axis / np.linalg.norm(axis)
            # Fix the sign using the skew part when it is not exactly zero.
            v = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
            if v @ axis < 0.0:
                axis = -axis
            aa[tuple(ix)] = axis * th
    return aa


def is_rotation(rot, tol=1e-6):
    rot = np.asarray(rot)
    eye = rot @ np.swapaxes(rot, -1, -2)
    ortho = np.abs(eye - np.eye(3)).max() <= tol
    det = np.abs(np.linalg.det(rot) - 1.0).max() <= tol
    return bool(ortho and det)


# -- tape variants -----------------------------------------------------------


def skew_t(v: Tensor) -> Tensor:
    zeros = tape.mul(v[..., 0], 0.0)
    x, y, w = v[..., 0], v[..., 1], v[..., 2]
    rows = tape.stack(
        [
            tape.stack([zeros, -w, y], axis=-1),
            tape.stack([w, zeros, -x], axis=-1),
            tape.stack([-y, x, zeros], axis=-1),
        ],
        axis=-2,
    )
    return rows


def exp_so3_t(aa: Tensor) -> Tensor:
    """Tape version of :func:`exp_so3`; differentiable at the identity."""
    t = tape.sum_(tape.mul(aa, aa), axis=-1)
    small = t.data < _SERIES_T
    t_safe = tape.where(small, Tensor(np.ones_like(t.data)), t)
    theta = tape.sqrt(t_safe)
    a_exact = tape.div(tape.sin(theta), theta)
    b_exact = tape.div(tape.sub(1.0, tape.cos(theta)), t_safe)
    a_series = tape.sub(1.0, tape.mul(t, 1.0 / 6.0))
    b_series = tape.sub(0.5, tape.mul(t, 1.0 / 24.0))
    a = tape.where(small, a_series, a_exact)
    b = tape.where(small, b_series, b_exact)
    k = skew_t(aa)
    k2 = tape.matmul(k, k)
    eye = Tensor(np.broadcast_to(np.eye(3), k.data.shape).copy())
    a_ = tape.reshape(a, a.data.shape + (1, 1))
    b_ = tape.reshape(b, b.data.shape + (1, 1))
    return tape.add(eye, tape.add(tape.mul(a_, k), tape.mul(b_, k2)))


def log_so3_t(rot: Tensor) -> Tensor:
    """Tape version of :func:`log_so3`. Valid for angles away from pi."""
    diag = tape.stack([rot[..., 0, 0], rot[..., 1, 1], rot[..., 2, 2]], axis=-1)
    tr = tape.sum_(diag, axis=-1)
    c = tape.mul(tape.sub(tr, 1.0), 0.5)
    c = tape.minimum(tape.maximum(c, -1.0 + 1e-12), 1.0 - 1e-12)
    theta = tape.arccos(c)
    vee = tape.mul(
        tape.stack(
            [
                tape.sub(rot[..., 2, 1], rot[..., 1, 2]),
                tape.sub(rot[..., 0, 2], rot[..., 2, 0]),
                tape.sub(rot[..., 1, 0], rot[..., 0, 1]),
            ],
            axis=-1,
        ),
        0.5,
    )
    small = theta.data < 1e-7
    theta_safe = tape.where(small, Tensor(np.ones_like(theta.data)), theta)
    scale_exact = tape.div(theta_safe, tape.sin(theta_safe))
    scale_series = tape.add(1.0, tape.mul(tape.mul(theta, theta), 1.0 / 6.0))
    scale = tape.where(small, scale_series, scale_exact)
    return tape.mul(vee, tape.reshape(scale, scale.data.shape + (1,)))
