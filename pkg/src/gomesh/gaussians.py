"""Per-face world gaussians from local parameters and current vertex positions.

Each triangle carries a local unit gaussian shaped by a learned rotation
and scale. The local-to-world map puts the mean at the face centroid and
sends the local x/y axes to the semi-axes of the triangle's circumscribed
Steiner ellipse, with a thin third axis of length ``eps`` along the face
normal. Orthogonality of the semi-axes means the learned scales act along
principal directions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape
from .model import DEFAULT_NORMAL_EPS, DEGENERATE_AREA, Face, face_areas
from .rotations import exp_so3_t
from .tape import Tensor

_SQRT3 = np.sqrt(3.0)


class DegenerateFaceError(ValueError):
    """Raised when a face is too small to define a local frame."""


@dataclass
class WorldGaussian:
    mean: np.ndarray  # (3,) meters
    cov: np.ndarray  # (3, 3) symmetric PSD, m^2
    color: np.ndarray  # (3,) in (0, 1)


@dataclass
class LocalFrame:
    """Affine local-to-world map x -> A x + b for one face.

    Columns of A are the two Steiner semi-axes and the scaled normal; the
    in-plane parametrization b + A (cos t, sin t, 0) traces the Steiner
    circumellipse, passing through the vertices at t = -t0, 2pi/3 - t0,
    -2pi/3 - t0 (third, second, first vertex).
    """

    A: np.ndarray  # (3, 3)
    b: np.ndarray  # (3,) centroid
    t0: float  # ellipse phase of the semi-axis construction


def _frame_tensors(p1, p2, p3, eps):
    """Tape Steiner frame for stacked triangles (..., 3). Returns (A, b, t0)."""
    b = tape.mul(tape.add(tape.add(p1, p2), p3), 1.0 / 3.0)
    u = tape.sub(p3, b)
    v = tape.sub(p2, p1)
    uv = tape.sum_(tape.mul(u, v), axis=-1)
    num = tape.mul(uv, 2.0 / _SQRT3)
    den = tape.sub(
        tape.sum_(tape.mul(u, u), axis=-1),
        tape.mul(tape.sum_(tape.mul(v, v), axis=-1), 1.0 / 3.0),
    )
    t0 = tape.mul(tape.arctan2(num, den), 0.5)
    ct = tape.reshape(tape.cos(t0), t0.data.shape + (1,))
    st = tape.reshape(tape.sin(t0), t0.data.shape + (1,))
    vs = tape.mul(v, 1.0 / _SQRT3)
    a1 = tape.add(tape.mul(u, ct), tape.mul(vs, st))
    a2 = tape.sub(tape.mul(vs, ct), tape.mul(u, st))
    normal = tape.cross3(a1, a2)
    a3 = tape.mul(tape.normalize_last(normal), eps)
    a_mat = tape.stack([a1, a2, a3], axis=-1)
    return a_mat, b, t0


def steiner_frame(p1, p2, p3, eps) -> LocalFrame:
    """Local frame of one triangle; raises for degenerate geometry."""
    p1, p2, p3 = (np.asarray(p, dtype=np.float64) for p in (p1, p2, p3))
    area = 0.5 * np.linalg.norm(np.cross(p2 - p1, p3 - p1))
    if not area >= DEGENERATE_AREA:
        raise DegenerateFaceError(f"triangle area {area:.3e} m^2 below {DEGENERATE_AREA}")
    a_mat, b, t0 = _frame_tensors(Tensor(p1), Tensor(p2), Tensor(p3), float(eps))
    return LocalFrame(a_mat.data, b.data, float(t0.data))


def local_covariance_t(rotations, log_scales):
    """Tape: R S S^T R^T for (F, 3) axis-angle rotations and log scales."""
    rot = exp_so3_t(tape.as_tensor(rotations))
    s = tape.exp(tape.as_tensor(log_scales))
    rs = tape.mul(rot, tape.reshape(s, s.data.shape[:-1] + (1, 3)))
    return tape.matmul(rs, tape.transpose(rs, (0, 2, 1)))


def face_gaussians_t(positions, face_indices, rotations, log_scales, color_logits, eps):
    """Tape: world gaussians for all nondegenerate faces.

    Returns (means, covs, colors, valid) where valid is the plain boolean
    mask of faces whose area clears the degeneracy floor; degenerate faces
    are dropped (they carry no visible surface and their inverse covariance
    is ill-conditioned).
    """
    pos = tape.as_tensor(positions)
    fi = np.asarray(face_indices, dtype=np.int64)
    valid = face_areas(pos.data, fi) >= DEGENERATE_AREA
    fi_v = fi[valid]
    rot = tape.as_tensor(rotations)[valid]
    lsc = tape.as_tensor(log_scales)[valid]
    col = tape.as_tensor(color_logits)[valid]
    p1, p2, p3 = pos[fi_v[:, 0]], pos[fi_v[:, 1]], pos[fi_v[:, 2]]
    a_mat, b, _ = _frame_tensors(p1, p2, p3, float(eps))
    local = local_covariance_t(rot, lsc)
    cov = tape.matmul(tape.matmul(a_mat, local), tape.transpose(a_mat, (0, 2, 1)))
    return b, cov, tape.sigmoid(col), valid


def face_gaussian(face: Face, positions, eps=DEFAULT_NORMAL_EPS) -> WorldGaussian:
    """World gaussian of a single face at the given vertex positions."""
    pos = np.asarray(positions, dtype=np.float64)
    idx = np.asarray(face.vertex_indices, dtype=np.int64)
    tri = pos[idx]
    area = 0.5 * np.linalg.norm(np.cross(tri[1] - tri[0], tri[2] - tri[0]))
    if not area >= DEGENERATE_AREA:
        raise DegenerateFaceError(f"face area {area:.3e} m^2 below {DEGENERATE_AREA}")
    means, covs, colors, _ = face_gaussians_t(
        pos,
        idx.reshape(1, 3),
        np.asarray(face.local_rotation).reshape(1, 3),
        np.asarray(face.local_log_scale).reshape(1, 3),
        np.asarray(face.color_logit).reshape(1, 3),
        eps=eps,
    )
    return WorldGaussian(means.data[0], covs.data[0], colors.data[0])
