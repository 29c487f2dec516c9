import subprocess
import sys

import numpy as np
import pytest

from gomesh import (
    Camera,
    Splat2D,
    WorldGaussian,
    project_gaussian,
    project_gaussians,
    rasterize,
    rasterize_reference,
)
from gomesh import tape
from gomesh.splat import Splats
from gomesh.tape import Tensor


def front_camera(width=64, height=64, f=100.0):
    return Camera(f, f, width / 2, height / 2, np.eye(3), np.zeros(3), width, height)


def isotropic(mean, sigma, depth_color=None):
    return WorldGaussian(
        np.asarray(mean, dtype=float),
        np.eye(3) * sigma**2,
        np.array([1.0, 0.0, 0.0]),
    )


def random_scene(rng, n, size=64):
    splats = []
    for _ in range(n):
        a = np.exp(rng.standard_normal() * 0.6) * 2.0
        c = np.exp(rng.standard_normal() * 0.6) * 2.0
        b = (rng.random() * 2 - 1) * 0.6 * np.sqrt(a * c)
        splats.append(
            Splat2D(
                rng.random(2) * size,
                np.array([[a, b], [b, c]]),
                float(rng.random() * 4 + 0.1),
                rng.random(3),
            )
        )
    return splats


# -- projection --------------------------------------------------------------------


def test_on_axis_projects_to_principal_point():
    cam = front_camera()
    s = project_gaussian(isotropic([0.0, 0.0, 2.0], 0.01), cam)
    assert np.allclose(s.mean2d, [32.0, 32.0])
    assert s.depth == pytest.approx(2.0)


def test_isotropic_cov2d_matches_fd_jacobian(rng):
    """Oracle: numerically differentiate the pinhole map, push the covariance."""
    cam = front_camera(f=120.0)
    for _ in range(10):
        mu = np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3),
                       rng.uniform(1.5, 4.0)])
        sigma = 1e-3
        s = project_gaussian(isotropic(mu, sigma), cam)

        def proj(p):
            q = cam.rotation @ p + cam.translation
            return np.array(
                [cam.fx * q[0] / q[2] + cam.cx, cam.fy * q[1] / q[2] + cam.cy]
            )

        h = 1e-7
        jac = np.zeros((2, 3))
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            jac[:, k] = (proj(mu + e) - proj(mu - e)) / (2 * h)
        expect = jac @ (np.eye(3) * sigma**2) @ jac.T + 0.3 * np.eye(2)
        assert np.allclose(s.cov2d, expect, rtol=1e-3, atol=1e-6)
        # on-axis special case: (f sigma / z)^2 before dilation
        if np.allclose(mu[:2], 0, atol=1e-12):
            assert s.cov2d[0, 0] - 0.3 == pytest.approx((cam.fx * sigma / mu[2]) ** 2,
                                                        rel=1e-3)


def test_on_axis_cov2d_closed_form():
    cam = front_camera(f=150.0)
    sigma, z = 2e-3, 2.5
    s = project_gaussian(isotropic([0, 0, z], sigma), cam)
    expect = (cam.fx * sigma / z) ** 2
    assert np.allclose(s.cov2d
                       - 0.3 * np.eye(2), expect * np.eye(2), rtol=1e-3)


def test_behind_camera_culled():
    cam = front_camera()
    assert project_gaussian(isotropic([0, 0, -1.0], 0.01), cam) is None
    assert project_gaussian(isotropic([0, 0, 0.005], 0.01), cam) is None


def test_projection_batch_culls_only_behind(rng):
    cam = front_camera()
    means = np.array([[0, 0, 2.0], [0, 0, -2.0], [0.1, 0, 3.0]])
    covs = np.tile(np.eye(3) * 1e-6, (3, 1, 1))
    colors = rng.random((3, 3))
    batch = project_gaussians(means, covs, colors, cam)
    assert batch.count == 2


# -- rasterization ------------------------------------------------------------------


def test_empty_scene_renders_zeros():
    img, mask = rasterize([], 8, 8)
    assert np.array_equal(img.data, np.zeros((8, 8, 3)))
    assert np.array_equal(mask.data, np.zeros((8, 8)))
    img_r, mask_r = rasterize_reference([], 8, 8)
    assert not img_r.any() and not mask_r.any()


def test_single_splat_on_pixel_center_clamps():
    color = np.array([0.2, 0.6, 1.0])
    s = Splat2D(np.array([3.5, 4.5]), np.eye(2) * 2.0, 1.0, color)
    img, mask = rasterize([s], 8, 8)
    assert mask.data[4, 3] == pytest.approx(0.999, abs=1e-12)
    assert np.allclose(img.data[4, 3], 0.999 * color, atol=1e-12)


def test_two_splat_compositing_hand_evaluated():
    red = Splat2D(np.array([4.5, 4.5]), np.eye(2) * 50, 1.0, np.array([1.0, 0, 0]))
    blue = Splat2D(np.array([4.5, 4.5]), np.eye(2) * 50, 2.0, np.array([0, 0, 1.0]))
    img, mask = rasterize([blue, red], 9, 9)  # input order must not matter
    px = img.data[4, 4]
    assert px[0] == pytest.approx(0.999, abs=1e-9)
    assert px[2] == pytest.approx(0.001 * 0.999, abs=1e-9)
    assert mask.data[4, 4] == pytest.approx(0.999 + 0.001 * 0.999, abs=1e-9)


def test_depth_ties_broken_by_input_index():
    a = Splat2D(np.array([4.5, 4.5]), np.eye(2) * 50, 1.0, np.array([1.0, 0, 0]))
    b = Splat2D(np.array([4.5, 4.5]), np.eye(2) * 50, 1.0, np.array([0, 1.0, 0]))
    img, _ = rasterize([a, b], 9, 9)
    assert img.data[4, 4, 0] > img.data[4, 4, 1]


def test_matches_reference_on_random_scenes(rng):
    for trial in range(8):
        splats = random_scene(rng, int(rng.integers(1, 200)))
        img_t, m_t = rasterize(splats, 64, 64)
        img_r, m_r = rasterize_reference(splats, 64, 64)
        assert np.abs(img_t.data - img_r).max() < 2e-4
        assert np.abs(m_t.data - m_r).max() < 2e-4


def test_single_splat_matches_reference_tightly(rng):
    splats = random_scene(rng, 1)
    img_t, m_t = rasterize(splats, 64, 64)
    img_r, m_r = rasterize_reference(splats, 64, 64)
    assert np.abs(img_t.data - img_r).max() < 1e-6
    assert np.abs(m_t.data - m_r).max() < 1e-6


def test_outputs_bounded(rng):
    splats = random_scene(rng, 120)
    img, mask = rasterize(splats, 64, 64)
    assert mask.data.min() >= 0.0 and mask.data.max() <= 1.0
    assert img.data.min() >= 0.0 and img.data.max() <= 1.0


def test_reference_mask_monotone_under_added_splat(rng):
    splats = random_scene(rng, 40)
    _, m0 = rasterize_reference(splats, 64, 64)
    _, m1 = rasterize_reference(splats + random_scene(rng, 1), 64, 64)
    assert np.all(m1 >= m0 - 1e-15)


def test_nonfinite_splat_rejected():
    s = Splat2D(np.array([np.nan, 2.0]), np.eye(2), 1.0, np.zeros(3))
    with pytest.raises(ValueError, match="non-finite"):
        rasterize([s], 8, 8)


def test_deterministic_across_runs(rng):
    splats = random_scene(rng, 150)
    img1, m1 = rasterize(splats, 64, 64)
    img2, m2 = rasterize(splats, 64, 64)
    assert np.array_equal(img1.data, img2.data)
    assert np.array_equal(m1.data, m2.data)


def test_deterministic_across_thread_counts(tmp_path):
    """Same pixels from 1 thread and N threads: tiles own disjoint pixels."""
    script = (
        "import numpy as np\n"
        "from gomesh.splat import Splat2D, rasterize\n"
        "rng = np.random.default_rng(99)\n"
        "splats = [Splat2D(rng.random(2)*64, np.eye(2)*(rng.random()+0.5)*4,"
        " float(rng.random()*3+0.1), rng.random(3)) for _ in range(150)]\n"
        "img, mask = rasterize(splats, 64, 64)\n"
        "np.save(r'{out}', np.concatenate([img.data.reshape(-1), mask.data.reshape(-1)]))\n"
    )
    outs = []
    for threads in ("1", "2"):
        out = tmp_path / f"t{threads}.npy"
        code = script.format(out=out)
        env = {"NUMBA_NUM_THREADS": threads, "PATH": "/usr/bin:/bin:/usr/local/bin"}
        subprocess.run([sys.executable, "-c", code], check=True, env=env,
                       capture_output=True)
        outs.append(np.load(out))
    assert np.array_equal(outs[0], outs[1])


# -- rasterizer gradients ------------------------------------------------------------


@pytest.mark.parametrize("height,width", [(16, 16), (24, 48)])
def test_rasterize_gradients_match_fd(rng, height, width):
    """Single-tile and multi-tile images; the latter exercises the per-pair
    gradient slot bookkeeping across tiles."""
    n = 8
    means = rng.random((n, 2)) * [width, height]
    covs = np.zeros((n, 2, 2))
    for i in range(n):
        a = np.exp(rng.standard_normal() * 0.3) * 3
        c = np.exp(rng.standard_normal() * 0.3) * 3
        b = (rng.random() - 0.5) * 0.8 * np.sqrt(a * c)
        covs[i] = [[a, b], [b, c]]
    colors = rng.random((n, 3))
    depth = rng.random(n) + 0.5
    w_img = rng.random((height, width, 3))
    w_mask = rng.random((height, width))

    def forward(m, c, col, want=False):
        mt = Tensor(m, requires_grad=want)
        ct = Tensor(c, requires_grad=want)
        colt = Tensor(col, requires_grad=want)
        img, mask = rasterize(Splats(mt, ct, colt, depth), height, width)
        loss = tape.add(
            tape.sum_(tape.mul(img, Tensor(w_img))),
            tape.sum_(tape.mul(mask, Tensor(w_mask))),
        )
        if want:
            loss.backward()
            return float(loss.data), (mt.grad, ct.grad, colt.grad)
        return float(loss.data), None

    _, (g_mean, g_cov, g_col) = forward(means, covs, colors, want=True)
    h = 1e-6
    for arr, grad in ((means, g_mean), (covs, g_cov), (colors, g_col)):
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for i in rng.choice(flat.size, size=8, replace=False):
            keep = flat[i]
            flat[i] = keep + h
            fp, _ = forward(means, covs, colors)
            flat[i] = keep - h
            fm, _ = forward(means, covs, colors)
            flat[i] = keep
            fd = (fp - fm) / (2 * h)
            assert abs(fd - gflat[i]) / max(abs(fd), abs(gflat[i]), 1e-6) < 1e-3
