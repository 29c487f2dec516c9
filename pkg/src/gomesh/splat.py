"""Screen-space splatting: project world gaussians and composite them.

Projection is the standard perspective linearization: camera-space mean,
Jacobian of the pinhole map at that mean, and a 2x2 screen covariance
J W Sigma W^T J^T plus an anti-aliasing floor. Compositing sorts splats
front to back (ties by input index) and alpha-blends per pixel inside
16x16 tiles. The reference compositor evaluates every splat at every pixel
with no tiling, cutoff, or early termination, and anchors the tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels, tape
from ._kernels import (
    bin_pairs_by_tile,
    rasterize_full,
    rasterize_tiles,
    rasterize_tiles_backward,
    TILE,
)
from .gaussians import WorldGaussian
from .tape import Tensor, from_op

NEAR_PLANE = 0.01  # meters
DILATION = 0.3  # px^2 added to the screen covariance diagonal
# Pixels beyond this many mahalanobis units of a splat never contribute.
MAX_RADIUS_SIGMA = float(np.sqrt(_kernels.Q_CUT))


@dataclass
class Camera:
    """Pinhole camera: world-to-camera rigid transform + pixel intrinsics."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # (3, 3) world -> camera
    translation: np.ndarray  # (3,)
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (-self.width <= self.cx <= 2 * self.width) or not (
            -self.height <= self.cy <= 2 * self.height
        ):
            raise ValueError("principal point implausibly far outside the image")

    @property
    def intrinsics(self):
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def world_to_camera(self, points):
        return np.asarray(points) @ self.rotation.T + self.translation

    def resized(self, width, height):
        sx, sy = width / self.width, height / self.height
        return Camera(
            self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy,
            self.rotation.copy(), self.translation.copy(), width, height,
        )

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0), fov_deg=50.0, width=512, height=512):
        """Camera at ``eye`` looking at ``target``; +z forward, +y image down."""
        eye = np.asarray(eye, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        fwd = target - eye
        fwd = fwd / np.linalg.norm(fwd)
        upv = np.asarray(up, dtype=np.float64)
        down = fwd * (upv @ fwd) - upv
        nd = np.linalg.norm(down)
        if nd < 1e-12:
            upv = np.array([0.0, 0.0, 1.0])
            down = fwd * (upv @ fwd) - upv
            nd = np.linalg.norm(down)
        down /= nd
        right = np.cross(down, fwd)
        rot = np.stack([right, down, fwd], axis=0)
        trans = -rot @ eye
        f = 0.5 * height / np.tan(np.deg2rad(fov_deg) / 2.0)
        return cls(f, f, width / 2.0, height / 2.0, rot, trans, width, height)


@dataclass
class Splat2D:
    mean2d: np.ndarray  # (2,) pixels
    cov2d: np.ndarray  # (2, 2) pixels^2
    depth: float  # camera-space z, meters
    color: np.ndarray  # (3,)


@dataclass
class Splats:
    """Batched screen-space gaussians; tensor fields keep the tape alive."""

    mean2d: Tensor  # (N, 2)
    cov2d: Tensor  # (N, 2, 2)
    color: Tensor  # (N, 3)
    depth: np.ndarray  # (N,) detached; ordering is not differentiated

    @property
    def count(self):
        return self.depth.shape[0]

    @classmethod
    def from_list(cls, splats):
        if len(splats) == 0:
            return cls(Tensor(np.zeros((0, 2))), Tensor(np.zeros((0, 2, 2))),
                       Tensor(np.zeros((0, 3))), np.zeros(0))
        return cls(
            Tensor(np.stack([np.asarray(s.mean2d, dtype=np.float64) for s in splats])),
            Tensor(np.stack([np.asarray(s.cov2d, dtype=np.float64) for s in splats])),
            Tensor(np.stack([np.asarray(s.color, dtype=np.float64) for s in splats])),
            np.array([float(s.depth) for s in splats]),
        )

    def to_list(self):
        return [
            Splat2D(self.mean2d.data[i].copy(), self.cov2d.data[i].copy(),
                    float(self.depth[i]), self.color.data[i].copy())
            for i in range(self.count)
        ]


def perspective_jacobian(m):
    """Jacobian of (x, y, z) -> (fx x/z, fy y/z) at camera-space point m (without f)."""
    x, y, z = m
    return np.array([[1.0 / z, 0.0, -x / z**2], [0.0, 1.0 / z, -y / z**2]])


def project_gaussians(means, covs, colors, cam: Camera, near=NEAR_PLANE) -> Splats:
    """Project world gaussians to screen space, culling behind ``near``.

    Tape-differentiable in means, covariances, and colors; those behind the
    near plane drop out of the batch.
    """
    means = tape.as_tensor(means)
    covs = tape.as_tensor(covs)
    colors = tape.as_tensor(colors)
    rot = Tensor(cam.rotation)
    m_cam = tape.add(tape.matmul(means, Tensor(cam.rotation.T)), Tensor(cam.translation))
    keep = m_cam.data[:, 2] > near
    idx = np.nonzero(keep)[0]
    m = m_cam[idx]
    x, y, z = m[:, 0], m[:, 1], m[:, 2]
    inv_z = tape.div(1.0, z)
    u = tape.add(tape.mul(tape.mul(x, inv_z), cam.fx), cam.cx)
    v = tape.add(tape.mul(tape.mul(y, inv_z), cam.fy), cam.cy)
    mean2d = tape.stack([u, v], axis=1)

    zeros = tape.mul(z, 0.0)
    inv_z2 = tape.mul(inv_z, inv_z)
    j_row0 = tape.stack(
        [tape.mul(inv_z, cam.fx), zeros, tape.mul(tape.mul(x, inv_z2), -cam.fx)], axis=1
    )
    j_row1 = tape.stack(
        [zeros, tape.mul(inv_z, cam.fy), tape.mul(tape.mul(y, inv_z2), -cam.fy)], axis=1
    )
    jac = tape.stack([j_row0, j_row1], axis=1)  # (N, 2, 3)
    jw = tape.matmul(jac, rot)
    cov2d = tape.matmul(tape.matmul(jw, covs[idx]), tape.transpose(jw, (0, 2, 1)))
    cov2d = tape.add(cov2d, Tensor(DILATION * np.eye(2)))
    return Splats(mean2d, cov2d, colors[idx], m_cam.data[keep, 2].copy())


def project_gaussian(g: WorldGaussian, cam: Camera, near=NEAR_PLANE):
    """Project one gaussian; returns a Splat2D, or None when culled."""
    s = project_gaussians(g.mean.reshape(1, 3), g.cov.reshape(1, 3, 3),
                          g.color.reshape(1, 3), cam, near=near)
    if s.count == 0:
        return None
    return s.to_list()[0]


def _as_batch(splats):
    if isinstance(splats, Splats):
        return splats
    return Splats.from_list(list(splats))


def _check_finite(batch: Splats):
    for name, arr in (("mean2d", batch.mean2d.data), ("cov2d", batch.cov2d.data),
                      ("color", batch.color.data), ("depth", batch.depth)):
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite splat {name}")


def _conic_and_radius(cov2d: Tensor):
    """Screen-space inverse covariance as (a, b, c) triples + cutoff radii."""
    a = cov2d[:, 0, 0]
    b = tape.mul(tape.add(cov2d[:, 0, 1], cov2d[:, 1, 0]), 0.5)
    c = cov2d[:, 1, 1]
    det = tape.sub(tape.mul(a, c), tape.mul(b, b))
    conic = tape.stack(
        [tape.div(c, det), tape.div(tape.mul(b, -1.0), det), tape.div(a, det)], axis=1
    )
    ad, bd, cd = a.data, b.data, c.data
    mid = 0.5 * (ad + cd)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - (ad * cd - bd * bd), 0.0))
    radius = MAX_RADIUS_SIGMA * np.sqrt(lam_max)
    return conic, radius


def _bin_splats(mean2d, radius, depth, height, width):
    n = mean2d.shape[0]
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    order = np.lexsort((np.arange(n), depth))
    tx0 = np.clip(np.floor((mean2d[:, 0] - radius) / TILE), 0, tiles_x).astype(np.int64)
    tx1 = np.clip(np.floor((mean2d[:, 0] + radius) / TILE) + 1, 0, tiles_x).astype(np.int64)
    ty0 = np.clip(np.floor((mean2d[:, 1] - radius) / TILE), 0, tiles_y).astype(np.int64)
    ty1 = np.clip(np.floor((mean2d[:, 1] + radius) / TILE) + 1, 0, tiles_y).astype(np.int64)
    pair_splat, tile_starts = bin_pairs_by_tile(
        tx0, tx1, ty0, ty1, order, tiles_x, tiles_x * tiles_y
    )
    return pair_splat, tile_starts, tiles_x


def rasterize(splats, height, width):
    """Tile-based front-to-back compositing.

    Returns (image, mask) tape tensors of shape (H, W, 3) and (H, W).
    Deterministic for fixed input regardless of thread count: splat order
    is fixed by (depth, index) and tiles own disjoint pixels.
    """
    batch = _as_batch(splats)
    _check_finite(batch)
    if batch.count == 0:
        return Tensor(np.zeros((height, width, 3))), Tensor(np.zeros((height, width)))

    conic, radius = _conic_and_radius(batch.cov2d)
    mean2d = batch.mean2d
    colors = batch.color
    pair_splat, tile_starts, tiles_x = _bin_splats(
        mean2d.data, radius, batch.depth, height, width
    )

    out_img = np.zeros((height, width, 3))
    out_alpha = np.zeros((height, width))
    n_contrib = np.zeros((height, width), dtype=np.int32)
    final_t = np.ones((height, width))
    rasterize_tiles(
        mean2d.data, conic.data, colors.data, pair_splat, tile_starts, tiles_x,
        height, width, out_img, out_alpha, n_contrib, final_t,
    )

    n = batch.count

    def vjp(g):
        g_img = np.ascontiguousarray(g[..., :3])
        g_alpha = np.ascontiguousarray(g[..., 3])
        pair_grad_mean = np.zeros((pair_splat.shape[0], 2))
        pair_grad_conic = np.zeros((pair_splat.shape[0], 3))
        pair_grad_color = np.zeros((pair_splat.shape[0], 3))
        rasterize_tiles_backward(
            mean2d.data, conic.data, colors.data, pair_splat, tile_starts, tiles_x,
            height, width, n_contrib, g_img, g_alpha,
            pair_grad_mean, pair_grad_conic, pair_grad_color,
        )
        gm = np.zeros((n, 2))
        gc = np.zeros((n, 3))
        gcol = np.zeros((n, 3))
        np.add.at(gm, pair_splat, pair_grad_mean)
        np.add.at(gc, pair_splat, pair_grad_conic)
        np.add.at(gcol, pair_splat, pair_grad_color)
        return gm, gc, gcol

    packed = from_op(
        np.concatenate([out_img, out_alpha[..., None]], axis=2),
        (mean2d, conic, colors),
        vjp,
    )
    return packed[..., :3], packed[..., 3]


def rasterize_reference(splats, height, width):
    """Oracle compositor: global sort, full-extent evaluation, no cutoffs.

    Same contract as :func:`rasterize`; numpy outputs, forward only.
    """
    batch = _as_batch(splats)
    _check_finite(batch)
    img = np.zeros((height, width, 3))
    alpha = np.zeros((height, width))
    if batch.count == 0:
        return img, alpha
    conic, _ = _conic_and_radius(batch.cov2d)
    order = np.lexsort((np.arange(batch.count), batch.depth))
    rasterize_full(batch.mean2d.data, conic.data, batch.color.data, order,
                   height, width, img, alpha)
    return img, alpha
