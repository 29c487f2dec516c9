"""Full frame rendering: articulate, splat, shade, compose.

One call produces every render product for a frame: splatted base color
and subject mask, mesh normal map, predicted shading, the composed image,
and (for training) the differentiable mesh silhouette.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape
from .articulate import NetworkBundle, articulate
from .gaussians import face_gaussians_t
from .model import GoMCanonical, Pose
from .shading import (
    NormalMap,
    ShadingMap,
    compose_final,
    raster_normals,
    shading_map,
    soft_silhouette,
)
from .splat import Camera, project_gaussians, rasterize
from .tape import Tensor

RENDER_MODES = ("final", "albedo", "shading", "normal", "mask")
DEFAULT_SOFT_SIGMA_SCALE = 1e-4  # sigma = scale * image width, in pixels


@dataclass
class RenderOutput:
    albedo: Tensor  # (H, W, 3) splatted base color
    mask: Tensor  # (H, W) splatted subject mask
    shading: ShadingMap
    normal_map: NormalMap
    image: Tensor  # (H, W, 3) albedo * shading
    mesh_mask: Tensor | None = None  # (H, W) soft mesh silhouette (training)
    observed_positions: Tensor | None = None
    gaussian_count: int = 0


def render(
    avatar: GoMCanonical,
    pose: Pose,
    nets: NetworkBundle | None,
    cam: Camera,
    *,
    refine: bool = False,
    window_alpha=None,
    with_mesh_mask: bool = False,
    soft_sigma: float | None = None,
    positions=None,
    face_rotations=None,
    face_log_scales=None,
    face_color_logits=None,
) -> RenderOutput:
    """Render one frame; keyword tensors override avatar fields for training."""
    obs = articulate(avatar, pose, nets, refine,
                     window_alpha=window_alpha, positions=positions)
    rot = avatar.face_rotations if face_rotations is None else face_rotations
    lsc = avatar.face_log_scales if face_log_scales is None else face_log_scales
    col = avatar.face_color_logits if face_color_logits is None else face_color_logits
    means, covs, colors, valid = face_gaussians_t(
        obs, avatar.face_indices, rot, lsc, col, avatar.normal_eps
    )
    splats = project_gaussians(means, covs, colors, cam)
    albedo, mask = rasterize(splats, cam.height, cam.width)

    normal_map = raster_normals(obs, avatar.face_indices, cam)
    if nets is not None and nets.shading is not None:
        smap = shading_map(normal_map, nets.shading, nets.shading_encoding)
    else:
        smap = ShadingMap(Tensor(np.ones((cam.height, cam.width))))
    image = compose_final(albedo, smap)

    mesh_mask = None
    if with_mesh_mask:
        sigma = soft_sigma
        if sigma is None:
            sigma = DEFAULT_SOFT_SIGMA_SCALE * cam.width
        mesh_mask = soft_silhouette(obs, avatar.face_indices, cam, sigma)

    return RenderOutput(
        albedo=albedo,
        mask=mask,
        shading=smap,
        normal_map=normal_map,
        image=image,
        mesh_mask=mesh_mask,
        observed_positions=obs,
        gaussian_count=splats.count,
    )


def composite_over_background(image, mask, background):
    """Classical alpha composition: image + (1 - mask) * background."""
    img = np.asarray(image, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)[..., None]
    bg = np.broadcast_to(np.asarray(background, dtype=np.float64), img.shape)
    return img + (1.0 - m) * bg


def mode_image(out: RenderOutput, mode: str, background=(0.0, 0.0, 0.0)):
    """Float (H, W, 3) visualization of one render mode, in [0, 1] pre-clamp."""
    if mode not in RENDER_MODES:
        raise ValueError(f"unknown render mode {mode!r}; expected one of {RENDER_MODES}")
    if mode == "final":
        return composite_over_background(out.image.data, out.mask.data, background)
    if mode == "albedo":
        return composite_over_background(out.albedo.data, out.mask.data, background)
    if mode == "mask":
        return np.repeat(out.mask.data[..., None], 3, axis=2)
    if mode == "normal":
        vis = 0.5 * out.normal_map.normals.data + 0.5
        cov = out.normal_map.coverage[..., None]
        bg = np.broadcast_to(np.asarray(background, dtype=np.float64), vis.shape)
        return np.where(cov, vis, bg)
    # Shading values are unbounded above; min-max normalize for display.
    s = out.shading.values.data
    lo, hi = float(s.min()), float(s.max())
    vis = (s - lo) / (hi - lo) if hi > lo else np.full_like(s, 0.5)
    return np.repeat(vis[..., None], 3, axis=2)
