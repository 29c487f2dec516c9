import numpy as np
import pytest

from gomesh import (
    GoMCanonical,
    Pose,
    Rig,
    forward_kinematics,
    make_test_rig,
    subdivide,
    validate,
)
from gomesh.rotations import exp_so3, log_so3


def two_joint_rig(child_at=(0.0, 1.0, 0.0)):
    return Rig(
        parents=[-1, 0],
        rest_rotations=np.tile(np.eye(3), (2, 1, 1)),
        rest_translations=np.array([[0.0, 0.0, 0.0], list(child_at)]),
    )


def test_fk_identity():
    rig = two_joint_rig()
    jt = forward_kinematics(rig, Pose.identity(2))
    assert np.allclose(jt.rotations, np.tile(np.eye(3), (2, 1, 1)))
    assert np.allclose(jt.translations, 0.0)


def test_fk_root_rotation_rotates_chain_about_root():
    # Hand-composed oracle: root at origin, rotation about z by 90 degrees.
    rig = two_joint_rig(child_at=(1.0, 0.0, 0.0))
    aa = np.array([[0.0, 0.0, np.pi / 2], [0.0, 0.0, 0.0]])
    jt = forward_kinematics(rig, Pose(aa, np.zeros(3)))
    r0 = exp_so3(aa[0])
    for j in range(2):
        assert np.allclose(jt.rotations[j], r0, atol=1e-12)
    # Child joint rest position (1,0,0) must map to (0,1,0).
    assert np.allclose(jt.apply(1, [1.0, 0.0, 0.0]), [0.0, 1.0, 0.0], atol=1e-12)
    # Root rest position is fixed.
    assert np.allclose(jt.apply(0, [0.0, 0.0, 0.0]), [0.0, 0.0, 0.0], atol=1e-12)


def test_fk_child_rotation_about_child_rest_position():
    # Hand-computed rigid composition: parent identity, child rotated 90deg
    # about z through its rest position c = (0, 1, 0).
    rig = two_joint_rig(child_at=(0.0, 1.0, 0.0))
    aa = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, np.pi / 2]])
    jt = forward_kinematics(rig, Pose(aa, np.zeros(3)))
    c = np.array([0.0, 1.0, 0.0])
    r = exp_so3(aa[1])
    probe = np.array([0.5, 2.0, -0.3])
    assert np.allclose(jt.apply(1, probe), r @ (probe - c) + c, atol=1e-12)
    assert np.allclose(jt.apply(1, c), c, atol=1e-12)


def test_fk_root_translation_added_to_all():
    rig = two_joint_rig()
    t = np.array([0.3, -0.2, 0.1])
    jt = forward_kinematics(rig, Pose(np.zeros((2, 3)), t))
    assert np.allclose(jt.translations, np.tile(t, (2, 1)))


def test_fk_joint_count_mismatch():
    rig = two_joint_rig()
    with pytest.raises(ValueError, match="joints"):
        forward_kinematics(rig, Pose.identity(3))


def test_fk_equivariance_under_global_rigid_motion(rng):
    rig = Rig(
        parents=[-1, 0, 1, 1],
        rest_rotations=np.tile(np.eye(3), (4, 1, 1)),
        rest_translations=rng.standard_normal((4, 3)) * 0.3,
    )
    pose = Pose(rng.standard_normal((4, 3)) * 0.5, rng.standard_normal(3) * 0.2)
    jt = forward_kinematics(rig, pose)

    g_rot = exp_so3(rng.standard_normal(3))
    g_tr = rng.standard_normal(3)
    c0 = rig.rest_translations[0]
    r0 = exp_so3(pose.joint_rotations[0])
    pose2 = pose.copy()
    pose2.joint_rotations[0] = log_so3(g_rot @ r0)
    pose2.root_translation = (
        g_rot @ c0 - c0 + g_rot @ pose.root_translation + g_tr
    )
    jt2 = forward_kinematics(rig, pose2)
    for j in range(4):
        assert np.allclose(jt2.rotations[j], g_rot @ jt.rotations[j], atol=1e-10)
        assert np.allclose(
            jt2.translations[j], g_rot @ jt.translations[j] + g_tr, atol=1e-10
        )


# -- subdivision ------------------------------------------------------------


def single_triangle_avatar():
    rig = Rig([-1], np.eye(3)[None], np.zeros((1, 3)))
    return GoMCanonical(
        positions=np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]),
        weights=np.ones((3, 1)),
        face_indices=np.array([[0, 1, 2]]),
        face_rotations=np.array([[0.1, 0.2, 0.3]]),
        face_log_scales=np.array([[-0.1, 0.4, 0.0]]),
        face_color_logits=np.array([[0.5, -0.5, 1.0]]),
        rig=rig,
    )


def tetrahedron_avatar():
    rig = Rig([-1], np.eye(3)[None], np.zeros((1, 3)))
    pos = np.array(
        [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, 1.0, 0.0], [0.5, 0.5, 1.0]]
    )
    faces = np.array([[0, 2, 1], [0, 1, 3], [1, 2, 3], [0, 3, 2]])
    f = len(faces)
    return GoMCanonical(
        pos, np.ones((4, 1)), faces,
        np.zeros((f, 3)), np.zeros((f, 3)), np.zeros((f, 3)), rig,
    )


def test_subdivide_single_triangle_counts():
    out = subdivide(single_triangle_avatar())
    assert out.vertex_count == 6 and out.face_count == 4
    assert out.subdivision_level == 1


def test_subdivide_tetrahedron_counts():
    out = subdivide(tetrahedron_avatar())
    assert out.vertex_count == 10 and out.face_count == 16


def test_subdivide_duplicates_face_attributes():
    av = single_triangle_avatar()
    out = subdivide(av)
    for j in range(4):
        assert np.array_equal(out.face_rotations[j], av.face_rotations[0])
        assert np.array_equal(out.face_log_scales[j], av.face_log_scales[0])
        assert np.array_equal(out.face_color_logits[j], av.face_color_logits[0])


def test_subdivide_midpoint_positions_and_weights(tubeman):
    out = subdivide(tubeman)
    v = tubeman.vertex_count
    edges = tubeman.edges()
    assert out.vertex_count == v + len(edges)
    assert out.face_count == 4 * tubeman.face_count
    mids = out.positions[v:]
    expect = 0.5 * (tubeman.positions[edges[:, 0]] + tubeman.positions[edges[:, 1]])
    assert np.array_equal(mids, expect)
    wmid = 0.5 * (tubeman.weights[edges[:, 0]] + tubeman.weights[edges[:, 1]])
    assert np.array_equal(out.weights[v:], wmid)


def test_subdivide_deterministic(tubeman):
    a = subdivide(tubeman)
    b = subdivide(tubeman.copy())
    assert np.array_equal(a.positions, b.positions)
    assert np.array_equal(a.face_indices, b.face_indices)
    assert np.array_equal(a.weights, b.weights)


def test_subdivide_preserves_surface_pointwise(tubeman, rng):
    """Random barycentric samples of parent faces lie on exactly one child face."""
    out = subdivide(tubeman)
    tri_child = out.positions[out.face_indices]
    for _ in range(100):
        f = int(rng.integers(tubeman.face_count))
        bary = rng.random(3)
        bary /= bary.sum()
        p = bary @ tubeman.positions[tubeman.face_indices[f]]
        # distance from p to each child triangle of face f
        hits = 0
        for c in range(4 * f, 4 * f + 4):
            a, b, cpt = tri_child[c]
            n = np.cross(b - a, cpt - a)
            n /= np.linalg.norm(n)
            dist = abs((p - a) @ n)
            # planar check + inside check via barycentric
            m = np.stack([b - a, cpt - a], axis=1)
            uv, *_ = np.linalg.lstsq(m, p - a, rcond=None)
            if dist < 1e-9 and uv.min() > -1e-9 and uv.sum() < 1 + 1e-9:
                hits += 1
        assert hits >= 1


# -- validation ----------------------------------------------------------------


def test_validate_clean(tubeman):
    assert validate(tubeman).ok


def test_validate_repeated_vertex_index(tubeman):
    av = tubeman.copy()
    av.face_indices[5] = [1, 1, 2]
    report = validate(av)
    assert any("face 5" in v and "repeated" in v for v in report.violations)


def test_validate_zero_weights(tubeman):
    av = tubeman.copy()
    av.weights[7] = 0.0
    report = validate(av)
    assert any("vertex 7" in v and "weight sum" in v for v in report.violations)


def test_validate_degenerate_face(tubeman):
    av = tubeman.copy()
    av.positions[av.face_indices[3]] = av.positions[av.face_indices[3][0]]
    report = validate(av)
    assert any("degenerate" in v for v in report.violations)


def test_validate_nonfinite_position(tubeman):
    av = tubeman.copy()
    av.positions[0, 0] = np.nan
    assert any("non-finite" in v for v in validate(av).violations)


def test_rig_rejects_cycles():
    rig = Rig(
        parents=[-1, 2, 1],
        rest_rotations=np.tile(np.eye(3), (3, 1, 1)),
        rest_translations=np.zeros((3, 3)),
    )
    assert any("root" in e or "tree" in e or "chain" in e for e in rig.validate())
