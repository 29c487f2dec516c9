import numpy as np
import pytest

from gomesh.metrics import (
    MetricReport,
    chamfer_distance,
    geometry_metrics,
    image_metrics,
    mask_iou,
    normal_consistency,
    psnr,
    ssim,
    vertex_normals,
)


def test_psnr_identical_capped(rng):
    img = rng.random((16, 16, 3))
    assert psnr(img, img) == 99.0


def test_psnr_constant_offset_is_20db(rng):
    gt = rng.random((32, 32, 3)) * 0.5
    assert psnr(gt + 0.1, gt) == pytest.approx(20.0, abs=1e-9)


def test_psnr_strictly_decreasing(rng):
    gt = rng.random((16, 16, 3)) * 0.5
    values = [psnr(gt + off, gt) for off in (0.05, 0.1, 0.2, 0.4)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4, 3)), np.zeros((5, 4, 3)))


def test_ssim_identical_is_one(rng):
    img = rng.random((24, 24, 3))
    assert ssim(img, img) == pytest.approx(1.0, abs=1e-9)
    assert ssim(img + 0.01, img) < 1.0


def test_ssim_complement_of_binary_nonpositive(rng):
    img = (rng.random((32, 32)) > 0.5).astype(float)
    assert ssim(1.0 - img, img) <= 0.0


def test_ssim_range(rng):
    a, b = rng.random((16, 16, 3)), rng.random((16, 16, 3))
    assert -1.0 <= ssim(a, b) <= 1.0


def test_mask_iou():
    a = np.zeros((8, 8))
    b = np.zeros((8, 8))
    a[:4] = 1.0
    b[2:6] = 1.0
    assert mask_iou(a, b) == pytest.approx(2 / 6)
    assert mask_iou(a, a) == 1.0
    assert mask_iou(np.zeros((4, 4)), np.zeros((4, 4))) == 1.0


def grid_mesh(n=4, spacing=1.0):
    xs, ys = np.meshgrid(np.arange(n), np.arange(n))
    pos = np.stack([xs.ravel() * spacing, ys.ravel() * spacing, np.zeros(n * n)], axis=1)
    faces = []
    for y in range(n - 1):
        for x in range(n - 1):
            a = y * n + x
            faces.append([a, a + 1, a + n])
            faces.append([a + 1, a + n + 1, a + n])
    return pos, np.array(faces)


def test_chamfer_identical_zero():
    pos, _ = grid_mesh()
    assert chamfer_distance(pos, pos) == 0.0


def test_chamfer_translation_squared():
    # Hand computation: shift small enough that matches are preserved.
    pos, _ = grid_mesh(spacing=1.0)
    d = 0.3
    shifted = pos + np.array([0.0, 0.0, d])
    assert chamfer_distance(shifted, pos) == pytest.approx(d * d, rel=1e-12)


def test_chamfer_symmetric(rng):
    a = rng.random((40, 3))
    b = rng.random((25, 3))
    assert chamfer_distance(a, b) == pytest.approx(chamfer_distance(b, a), rel=1e-12)


def test_chamfer_empty_rejected():
    with pytest.raises(ValueError):
        chamfer_distance(np.zeros((0, 3)), np.zeros((3, 3)))


def test_normal_consistency_identical_and_opposite():
    pos, faces = grid_mesh()
    assert normal_consistency(pos, faces, pos, faces) == pytest.approx(1.0)
    flipped = faces[:, ::-1]
    assert normal_consistency(pos, flipped, pos, faces) == pytest.approx(-1.0)


def test_vertex_normals_area_weighted_flat():
    pos, faces = grid_mesh()
    n = vertex_normals(pos, faces)
    assert np.allclose(np.abs(n[:, 2]), 1.0)
    assert np.allclose(np.linalg.norm(n, axis=1), 1.0)


def test_geometry_metrics_pair(rng):
    pos, faces = grid_mesh()
    cd, nc = geometry_metrics(pos, faces, pos, faces)
    assert cd == 0.0 and nc == pytest.approx(1.0)


def test_report_text():
    text = MetricReport(psnr=30.0, ssim=0.98, mask_iou=0.99).as_text()
    assert "psnr_db 30" in text and "ssim 0.98" in text and "mask_iou 0.99" in text
