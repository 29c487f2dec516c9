"""Mesh-derived shading: normal map, soft silhouette, per-pixel scale factor.

The final image multiplies the splatted base color by a positive scalar
predicted per pixel from the camera-space normal map, which is what makes
the output view-dependent; face colors themselves never see the camera.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape
from ._kernels import soft_mask_backward, soft_mask_forward, zbuffer_faces
from .articulate import EncodingConfig, MLPParams, apply_mlp, pos_encode
from .articulate import SHADING_LAYERS, SHADING_WIDTH, _require_architecture
from .splat import Camera, NEAR_PLANE
from .tape import Tensor, from_op


@dataclass
class NormalMap:
    """Camera-space unit normals per covered pixel, viewer-facing (z < 0)."""

    normals: Tensor  # (H, W, 3); zero where uncovered
    coverage: np.ndarray  # (H, W) bool
    face_id: np.ndarray | None = None  # (H, W) int32, -1 uncovered
    face_normals: Tensor | None = None  # (F, 3) per-face camera-space normals


@dataclass
class ShadingMap:
    values: Tensor  # (H, W), strictly positive


def project_vertices(positions, cam: Camera):
    """Tape pinhole projection. Returns (v2d tensor (V, 2), z depths ndarray)."""
    pos = tape.as_tensor(positions)
    v_cam = tape.add(tape.matmul(pos, Tensor(cam.rotation.T)), Tensor(cam.translation))
    z = v_cam[:, 2]
    # Depths at/behind the near plane are excluded by the kernels; guard the
    # division so their projected coordinates stay finite.
    z_safe = tape.where(z.data <= NEAR_PLANE, Tensor(np.ones_like(z.data)), z)
    u = tape.add(tape.mul(tape.div(v_cam[:, 0], z_safe), cam.fx), cam.cx)
    v = tape.add(tape.mul(tape.div(v_cam[:, 1], z_safe), cam.fy), cam.cy)
    return tape.stack([u, v], axis=1), v_cam.data[:, 2].copy()


def camera_face_normals(positions, face_indices, cam: Camera):
    """Tape: unit face normals in camera space, flipped to face the viewer."""
    pos = tape.as_tensor(positions)
    fi = np.asarray(face_indices, dtype=np.int64)
    p0, p1, p2 = pos[fi[:, 0]], pos[fi[:, 1]], pos[fi[:, 2]]
    n_world = tape.cross3(tape.sub(p1, p0), tape.sub(p2, p0))
    n_cam = tape.matmul(n_world, Tensor(cam.rotation.T))
    n_cam = tape.normalize_last(n_cam)
    flip = np.where(n_cam.data[:, 2] > 0.0, -1.0, 1.0)
    return tape.mul(n_cam, flip[:, None])


def raster_normals(positions, face_indices, cam: Camera) -> NormalMap:
    """Hard z-buffer normal map; uncovered pixels flagged with zero normals."""
    pos = tape.as_tensor(positions)
    fi = np.ascontiguousarray(np.asarray(face_indices, dtype=np.int64))
    h, w = cam.height, cam.width
    face_id = np.full((h, w), -1, dtype=np.int32)
    if fi.shape[0] == 0:
        return NormalMap(Tensor(np.zeros((h, w, 3))), np.zeros((h, w), dtype=bool),
                         face_id, None)
    v2d, vz = project_vertices(pos, cam)
    depth = np.full((h, w), np.inf)
    zbuffer_faces(v2d.data, vz, fi, NEAR_PLANE, h, w, face_id, depth)
    coverage = face_id >= 0
    face_normals = camera_face_normals(pos, fi, cam)
    gather_id = np.where(coverage, face_id, 0).astype(np.int64)
    img = tape.take(face_normals, gather_id.reshape(-1))
    img = tape.where(
        np.repeat(coverage.reshape(-1, 1), 3, axis=1), img, Tensor(np.zeros((h * w, 3)))
    )
    return NormalMap(tape.reshape(img, (h, w, 3)), coverage, face_id, face_normals)


def soft_silhouette(positions, face_indices, cam: Camera, sigma):
    """Differentiable mesh mask from signed pixel-to-boundary distances.

    Per face, coverage probability sigmoid(delta / sigma) with delta the
    signed euclidean distance to the projected triangle boundary (positive
    inside); per pixel the faces combine as 1 - prod(1 - D). Gradients flow
    to vertex positions through the projection.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    pos = tape.as_tensor(positions)
    fi = np.ascontiguousarray(np.asarray(face_indices, dtype=np.int64))
    h, w = cam.height, cam.width
    if fi.shape[0] == 0:
        return Tensor(np.zeros((h, w)))
    v2d, vz = project_vertices(pos, cam)
    prod_nz = np.ones((h, w))
    zero_count = np.zeros((h, w), dtype=np.int32)
    soft_mask_forward(v2d.data, vz, fi, NEAR_PLANE, float(sigma), h, w,
                      prod_nz, zero_count)
    mask = 1.0 - np.where(zero_count > 0, 0.0, prod_nz)

    def vjp(g):
        grad_v2d = np.zeros_like(v2d.data)
        soft_mask_backward(v2d.data, vz, fi, NEAR_PLANE, float(sigma), h, w,
                           prod_nz, zero_count, np.ascontiguousarray(g), grad_v2d)
        return (grad_v2d,)

    return from_op(mask, (v2d,), vjp)


def shading_map(normal_map: NormalMap, params: MLPParams, cfg: EncodingConfig) -> ShadingMap:
    """Positive per-pixel scale: exp(net(encode(normal))); 1 off-surface."""
    _require_architecture(params, SHADING_LAYERS, SHADING_WIDTH, "shading network")
    if params.in_dim != cfg.output_dim(3):
        raise ValueError(
            f"shading network expects {params.in_dim} inputs, encoding gives "
            f"{cfg.output_dim(3)}"
        )
    cov = normal_map.coverage
    h, w = cov.shape
    flat_cov = cov.reshape(-1)
    if not flat_cov.any():
        return ShadingMap(Tensor(np.ones((h, w))))

    if normal_map.face_id is not None and normal_map.face_normals is not None:
        # One network evaluation per visible face; pixels gather their
        # face's value, which also makes pointwise equality exact.
        ids = normal_map.face_id.reshape(-1)
        uniq, inverse = np.unique(ids[flat_cov], return_inverse=True)
        reps = tape.take(normal_map.face_normals, uniq)
        raw = apply_mlp(params, pos_encode(reps, cfg))
        s_vals = tape.exp(tape.reshape(raw, (-1,)))
        gather = np.zeros(h * w, dtype=np.int64)
        gather[flat_cov] = inverse
        s_full = tape.take(s_vals, gather)
    else:
        normals_flat = tape.reshape(normal_map.normals, (-1, 3))
        covered_idx = np.nonzero(flat_cov)[0]
        raw = apply_mlp(params, pos_encode(normals_flat[covered_idx], cfg))
        s_vals = tape.exp(tape.reshape(raw, (-1,)))
        gather = np.zeros(h * w, dtype=np.int64)
        gather[flat_cov] = np.arange(covered_idx.shape[0])
        s_full = tape.take(s_vals, gather)

    ones = Tensor(np.ones(h * w))
    out = tape.where(flat_cov, s_full, ones)
    return ShadingMap(tape.reshape(out, (h, w)))


def compose_final(albedo, shading: ShadingMap):
    """Elementwise product, shading broadcast over channels; no clamping."""
    base = tape.as_tensor(albedo)
    s = shading.values if isinstance(shading, ShadingMap) else tape.as_tensor(shading)
    if base.data.shape[:2] != s.data.shape[:2]:
        raise ValueError(
            f"albedo {base.data.shape[:2]} and shading {s.data.shape[:2]} disagree"
        )
    return tape.mul(base, tape.reshape(s, s.data.shape + (1,)))
