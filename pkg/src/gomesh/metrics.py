"""Image and geometry quality metrics.

PSNR over [0, 1] images (capped at 99 dB for near-zero error), SSIM with
an 11x11 gaussian window averaged per channel, mask IoU, and vertex-set
geometry metrics: symmetric mean squared chamfer distance and normal
consistency (1 - L2 distance between unit vertex normals of matched
nearest vertices).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve

PSNR_CAP = 99.0
_SSIM_K1, _SSIM_K2 = 0.01, 0.03
_SSIM_WINDOW, _SSIM_SIGMA = 11, 1.5


@dataclass
class MetricReport:
    psnr: float | None = None
    ssim: float | None = None
    mask_iou: float | None = None
    chamfer: float | None = None  # squared meters (reported as stated)
    normal_consistency: float | None = None

    def as_text(self):
        lines = []
        if self.psnr is not None:
            lines.append(f"psnr_db {self.psnr:.6g}")
        if self.ssim is not None:
            lines.append(f"ssim {self.ssim:.6g}")
        if self.mask_iou is not None:
            lines.append(f"mask_iou {self.mask_iou:.6g}")
        if self.chamfer is not None:
            lines.append(f"chamfer_m2 {self.chamfer:.6g}")
        if self.normal_consistency is not None:
            lines.append(f"normal_consistency {self.normal_consistency:.6g}")
        return "\n".join(lines) + "\n"


def psnr(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    mse = float(np.mean((pred - gt) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _gaussian_kernel2d(size, sigma):
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (r / sigma) ** 2)
    k /= k.sum()
    return np.outer(k, k)


def ssim(pred, gt):
    """Mean structural similarity, channels averaged, dynamic range 1."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if pred.ndim == 2:
        pred, gt = pred[..., None], gt[..., None]
    kernel = _gaussian_kernel2d(_SSIM_WINDOW, _SSIM_SIGMA)
    c1, c2 = _SSIM_K1**2, _SSIM_K2**2
    vals = []
    for ch in range(pred.shape[2]):
        x, y = pred[..., ch], gt[..., ch]
        mu_x = convolve(x, kernel, mode="reflect")
        mu_y = convolve(y, kernel, mode="reflect")
        xx = convolve(x * x, kernel, mode="reflect") - mu_x * mu_x
        yy = convolve(y * y, kernel, mode="reflect") - mu_y * mu_y
        xy = convolve(x * y, kernel, mode="reflect") - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
        den = (mu_x**2 + mu_y**2 + c1) * (xx + yy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def image_metrics(pred, gt):
    """(psnr_db, ssim) for same-shape [0, 1] images."""
    return psnr(pred, gt), ssim(pred, gt)


def mask_iou(pred, gt, threshold=0.5):
    pred = np.asarray(pred, dtype=np.float64) >= threshold
    gt = np.asarray(gt, dtype=np.float64) >= threshold
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def _nearest_indices(query, points, block=2048):
    """Index of the nearest point for each query; ties pick the lowest index."""
    out = np.empty(len(query), dtype=np.int64)
    for s in range(0, len(query), block):
        q = query[s : s + block]
        d2 = ((q[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
        out[s : s + block] = np.argmin(d2, axis=1)
    return out


def vertex_normals(positions, face_indices):
    """Area-weighted average of incident face normals, normalized."""
    pos = np.asarray(positions, dtype=np.float64)
    fi = np.asarray(face_indices, dtype=np.int64)
    tri = pos[fi]
    fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])  # 2*area-weighted
    out = np.zeros_like(pos)
    for k in range(3):
        np.add.at(out, fi[:, k], fn)
    norms = np.linalg.norm(out, axis=1, keepdims=True)
    return out / np.where(norms > 0, norms, 1.0)


def chamfer_distance(pred_vertices, gt_vertices):
    """Symmetric mean squared nearest-neighbor distance between vertex sets."""
    a = np.asarray(pred_vertices, dtype=np.float64)
    b = np.asarray(gt_vertices, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance requires nonempty vertex sets")
    ia = _nearest_indices(a, b)
    ib = _nearest_indices(b, a)
    d_ab = np.mean(((a - b[ia]) ** 2).sum(axis=1))
    d_ba = np.mean(((b - a[ib]) ** 2).sum(axis=1))
    return float(0.5 * (d_ab + d_ba))


def normal_consistency(pred_positions, pred_faces, gt_positions, gt_faces):
    """Mean of 1 - ||n_gt - n_pred||_2 over ground-truth vertices.

    Each ground-truth vertex matches its nearest predicted vertex; unit
    vertex normals on both sides. Range [-1, 1].
    """
    pn = vertex_normals(pred_positions, pred_faces)
    gn = vertex_normals(gt_positions, gt_faces)
    gt_pos = np.asarray(gt_positions, dtype=np.float64)
    pred_pos = np.asarray(pred_positions, dtype=np.float64)
    if len(gt_pos) == 0 or len(pred_pos) == 0:
        raise ValueError("normal consistency requires nonempty meshes")
    idx = _nearest_indices(gt_pos, pred_pos)
    dist = np.linalg.norm(gn - pn[idx], axis=1)
    return float(np.mean(1.0 - dist))


def geometry_metrics(pred_positions, pred_faces, gt_positions, gt_faces, samples=None):
    """(chamfer, normal_consistency) on vertex sets. ``samples`` reserved."""
    cd = chamfer_distance(pred_positions, gt_positions)
    nc = normal_consistency(pred_positions, pred_faces, gt_positions, gt_faces)
    return cd, nc
