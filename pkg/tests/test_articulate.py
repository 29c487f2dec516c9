import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gomesh import (
    EncodingConfig,
    JointTransforms,
    Pose,
    articulate,
    articulate_positions,
    lbs,
    make_test_rig,
    nr_deform,
    pos_encode,
    refine_pose,
)
from gomesh.articulate import (
    MLPParams,
    NetworkBundle,
    init_nr_deformer,
    init_pose_refiner,
    mlp_init,
    pose_conditioning_vector,
)
from gomesh.rotations import exp_so3
from gomesh.tape import Tensor


# -- positional encoding ---------------------------------------------------------


def test_encode_zero_vector():
    cfg = EncodingConfig(frequencies=2, include_input=True)
    out = pos_encode(np.zeros((1, 3)), cfg).data[0]
    expect = [0, 0, 0, 0, 0, 0, 1, 1, 1, 0, 0, 0, 1, 1, 1]
    assert np.allclose(out, expect)


def test_encode_output_length():
    cfg = EncodingConfig(frequencies=6, include_input=True)
    assert cfg.output_dim(3) == 39
    out = pos_encode(np.ones((2, 3)), cfg)
    assert out.data.shape == (2, 39)


def test_encode_period_two_without_input():
    cfg = EncodingConfig(frequencies=1, include_input=False)
    x = np.array([[0.37, -1.2, 2.01]])
    a = pos_encode(x, cfg).data
    b = pos_encode(x + 2.0, cfg).data
    assert np.allclose(a, b, atol=1e-9)


def test_encode_window_alpha_zero_matches_truncated_network(rng):
    """With all bands masked, the deformer sees only the raw input columns."""
    cfg = EncodingConfig(frequencies=6, include_input=True)
    joints = 3
    params = init_nr_deformer(joints, cfg, rng)
    params.weights[-1] = rng.standard_normal(params.weights[-1].shape) * 0.1
    positions = rng.standard_normal((5, 3)) * 0.3
    pose = Pose(rng.standard_normal((joints, 3)) * 0.2, np.zeros(3))
    cond = pose_conditioning_vector(pose)
    masked = nr_deform(positions, cond, params, cfg, alpha=0.0).data

    # Equivalent network over the frequency-free encoding: keep the columns
    # for the raw input and the pose conditioning, drop the band columns.
    cfg0 = EncodingConfig(frequencies=0, include_input=True)
    w0 = params.weights[0]
    keep = np.concatenate([np.arange(3), np.arange(39, w0.shape[1])])
    trimmed = MLPParams([w0[:, keep]] + [w.copy() for w in params.weights[1:]],
                        [b.copy() for b in params.biases])
    feats = np.concatenate(
        [positions, np.tile(cond, (5, 1))], axis=1
    )
    from gomesh.articulate import apply_mlp

    direct = apply_mlp(trimmed, feats).data
    assert np.allclose(masked, direct, atol=1e-12)
    assert cfg0.output_dim(3) == 3


# -- non-rigid deformation -------------------------------------------------------


def test_nr_deform_zero_init_gives_zero_offsets(rng):
    cfg = EncodingConfig()
    params = init_nr_deformer(4, cfg, rng)  # zero final layer
    pose = Pose(rng.standard_normal((4, 3)), np.zeros(3))
    out = nr_deform(rng.standard_normal((7, 3)), pose_conditioning_vector(pose),
                    params, cfg)
    assert np.array_equal(out.data, np.zeros((7, 3)))


def test_nr_deform_rejects_wrong_architecture(rng):
    cfg = EncodingConfig()
    bad = mlp_init([cfg.output_dim(3) + 9, 64, 64, 3], rng)
    pose = Pose(np.zeros((4, 3)), np.zeros(3))
    with pytest.raises(ValueError, match="deformer"):
        nr_deform(np.zeros((2, 3)), pose_conditioning_vector(pose), bad, cfg)


def test_nr_deform_gradient_matches_fd(rng):
    cfg = EncodingConfig(frequencies=2)
    joints = 3
    dims = [cfg.output_dim(3) + 3 * (joints - 1)] + [128] * 6 + [3]
    params = mlp_init(dims, rng, zero_last=False)
    # architecture helper builds 7x128 directly; rebuild through init for check
    params = init_nr_deformer(joints, cfg, rng)
    params.weights[-1] = rng.standard_normal(params.weights[-1].shape) * 0.05
    positions = rng.standard_normal((4, 3)) * 0.2
    pose = Pose(rng.standard_normal((joints, 3)) * 0.3, np.zeros(3))
    cond = pose_conditioning_vector(pose)
    w = rng.random((4, 3))

    tensors = params.enable_grad()
    out = nr_deform(positions, cond, params, cfg)
    from gomesh import tape

    tape.sum_(tape.mul(out, Tensor(w))).backward()
    target = params.weights[2]
    analytic = tensors[2].grad
    params.disable_grad()

    h = 1e-6
    idx = [(0, 0), (3, 7), (10, 100)]
    for i, j in idx:
        keep = target[i, j]
        target[i, j] = keep + h
        fp = (nr_deform(positions, cond, params, cfg).data * w).sum()
        target[i, j] = keep - h
        fm = (nr_deform(positions, cond, params, cfg).data * w).sum()
        target[i, j] = keep
        fd = (fp - fm) / (2 * h)
        assert abs(fd - analytic[i, j]) / max(abs(fd), abs(analytic[i, j]), 1e-6) < 1e-3


# -- pose refinement -------------------------------------------------------------


def test_refine_pose_zero_init_is_exact_identity(rng):
    params = init_pose_refiner(4, rng)
    pose = Pose(rng.standard_normal((4, 3)) * 0.7, rng.standard_normal(3))
    out = refine_pose(pose, make_test_rig(4, 8, 4).rig, params)
    assert np.array_equal(out.joint_rotations, pose.joint_rotations)
    assert np.array_equal(out.root_translation, pose.root_translation)


def test_refine_pose_outputs_valid_rotations(rng):
    params = init_pose_refiner(4, rng)
    for w, b in zip(params.weights, params.biases):
        w[:] = rng.standard_normal(w.shape) * 0.05
        b[:] = rng.standard_normal(b.shape) * 0.05
    rig = make_test_rig(4, 8, 4).rig
    pose = Pose(rng.standard_normal((4, 3)) * 0.5, np.zeros(3))
    out = refine_pose(pose, rig, params)
    rots = exp_so3(out.joint_rotations)
    assert np.allclose(np.linalg.det(rots), 1.0, atol=1e-6)


def test_refine_pose_forced_correction_composes_on_right(rng):
    """Zero all layers but the final bias: the correction is that constant."""
    joints = 3
    params = init_pose_refiner(joints, rng)
    for w in params.weights:
        w[:] = 0.0
    for b in params.biases:
        b[:] = 0.0
    xi = np.zeros((joints, 3))
    xi[1] = [np.pi / 2, 0.0, 0.0]
    params.biases[-1][:] = xi.reshape(-1)
    rig = make_test_rig(joints, 8, 4).rig
    pose = Pose(rng.standard_normal((joints, 3)) * 0.4, np.zeros(3))
    out = refine_pose(pose, rig, params)
    expect = exp_so3(pose.joint_rotations[1]) @ exp_so3(xi[1])
    assert np.allclose(exp_so3(out.joint_rotations[1]), expect, atol=1e-12)
    # untouched joints keep their input axis-angle bit for bit
    assert np.array_equal(out.joint_rotations[0], pose.joint_rotations[0])


def test_refine_pose_joint_count_mismatch(rng):
    params = init_pose_refiner(4, rng)
    rig = make_test_rig(3, 8, 4).rig
    with pytest.raises(ValueError):
        refine_pose(Pose.identity(4), rig, params)


# -- linear blend skinning -------------------------------------------------------


def identity_transforms(j):
    return JointTransforms(np.tile(np.eye(3), (j, 1, 1)), np.zeros((j, 3)))


def test_lbs_identity():
    p = np.array([0.3, -0.5, 1.0])
    assert np.allclose(lbs(p, np.array([0.2, 0.8]), identity_transforms(2)), p)


def test_lbs_one_hot(rng):
    jt = JointTransforms(
        exp_so3(rng.standard_normal((3, 3))), rng.standard_normal((3, 3))
    )
    p = rng.standard_normal(3)
    w = np.array([0.0, 1.0, 0.0])
    assert np.allclose(lbs(p, w, jt), jt.rotations[1] @ p + jt.translations[1])


def test_lbs_translation_blend():
    t1, t2 = np.array([1.0, 0.0, 0.0]), np.array([0.0, 2.0, 0.0])
    jt = JointTransforms(np.tile(np.eye(3), (2, 1, 1)), np.stack([t1, t2]))
    p = np.array([0.1, 0.2, 0.3])
    assert np.allclose(lbs(p, np.array([0.5, 0.5]), jt), p + (t1 + t2) / 2)


def test_lbs_zero_weight_sum_raises():
    with pytest.raises(ValueError, match="positive"):
        lbs(np.zeros(3), np.zeros(2), identity_transforms(2))


@settings(deadline=None, max_examples=30)
@given(
    scale=st.floats(min_value=1e-3, max_value=1e3),
    seed=st.integers(min_value=0, max_value=2**31),
)
def test_lbs_weight_rescale_invariance(scale, seed):
    rng = np.random.default_rng(seed)
    jt = JointTransforms(
        exp_so3(rng.standard_normal((4, 3))), rng.standard_normal((4, 3))
    )
    w = rng.random(4) + 1e-3
    p = rng.standard_normal(3)
    assert np.allclose(lbs(p, w, jt), lbs(p, scale * w, jt), atol=1e-9)


# -- full articulation -----------------------------------------------------------


def test_articulate_identity_with_zero_init_nets(tubeman, rng):
    nets = NetworkBundle.initialized(tubeman.rig.joint_count, rng)
    out = articulate_positions(tubeman, Pose.identity(4), nets, refine=True)
    assert np.abs(out - tubeman.positions).max() < 1e-12


def test_articulate_rigid_equivariance(tubeman, rng):
    from gomesh.rotations import log_so3

    pose = Pose(rng.standard_normal((4, 3)) * 0.3, rng.standard_normal(3) * 0.1)
    base = articulate_positions(tubeman, pose)

    g_rot = exp_so3(rng.standard_normal(3))
    g_tr = rng.standard_normal(3)
    c0 = tubeman.rig.rest_translations[0]
    pose2 = pose.copy()
    pose2.joint_rotations[0] = log_so3(g_rot @ exp_so3(pose.joint_rotations[0]))
    pose2.root_translation = g_rot @ c0 - c0 + g_rot @ pose.root_translation + g_tr
    moved = articulate_positions(tubeman, pose2)
    assert np.allclose(moved, base @ g_rot.T + g_tr, atol=1e-9)


def test_articulate_refine_off_equals_zero_init_refiner(tubeman, rng):
    nets = NetworkBundle.initialized(4, rng)
    pose = Pose(rng.standard_normal((4, 3)) * 0.4, rng.standard_normal(3) * 0.2)
    a = articulate_positions(tubeman, pose, nets, refine=False)
    b = articulate_positions(tubeman, pose, nets, refine=True)
    assert np.allclose(a, b, atol=1e-12)


def test_articulate_joint_count_mismatch(tubeman):
    with pytest.raises(ValueError):
        articulate(tubeman, Pose.identity(5))


def test_articulate_partition_independent_of_vertex_order(tubeman, rng):
    """Per-vertex work has no cross-vertex coupling: any subset matches."""
    pose = Pose(rng.standard_normal((4, 3)) * 0.3, np.zeros(3))
    full = articulate_positions(tubeman, pose)
    idx = rng.permutation(tubeman.vertex_count)[:50]
    sub = tubeman.copy()
    sub.positions = tubeman.positions[idx]
    sub.weights = tubeman.weights[idx]
    sub.face_indices = np.zeros((0, 3), dtype=np.int64)
    sub.face_rotations = np.zeros((0, 3))
    sub.face_log_scales = np.zeros((0, 3))
    sub.face_color_logits = np.zeros((0, 3))
    part = articulate_positions(sub, pose)
    assert np.array_equal(part, full[idx])
