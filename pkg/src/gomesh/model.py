"""Canonical avatar data model: skinned mesh with per-face gaussian attributes.

The avatar couples a triangle mesh (vertex positions + skinning weights)
with per-face local gaussian parameters (axis-angle rotation, log-scale,
color logit). Faces own the render attributes; vertices own the geometry
and skinning. Storage is struct-of-arrays for speed; ``Vertex``/``Face``
views exist for element access and small fixtures.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .rotations import exp_so3, is_rotation

DEGENERATE_AREA = 1e-10  # m^2; faces below this break the local frame

# Default thickness of a face gaussian along its normal, in meters.
DEFAULT_NORMAL_EPS = 1e-3


@dataclass(frozen=True)
class Vertex:
    position: np.ndarray  # (3,) meters, canonical space
    weights: np.ndarray  # (J,) nonnegative skinning weights, sum > 0


@dataclass(frozen=True)
class Face:
    vertex_indices: tuple  # three distinct vertex indices
    local_rotation: np.ndarray  # (3,) axis-angle, radians
    local_log_scale: np.ndarray  # (3,) scale = exp(.)
    color_logit: np.ndarray  # (3,) albedo = sigmoid(.)


@dataclass
class Rig:
    """Joint tree with rest-pose global transforms. Root is the joint with parent -1."""

    parents: np.ndarray  # (J,) int, -1 for the root
    rest_rotations: np.ndarray  # (J, 3, 3)
    rest_translations: np.ndarray  # (J, 3) joint positions at rest
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=np.int64)
        self.rest_rotations = np.asarray(self.rest_rotations, dtype=np.float64)
        self.rest_translations = np.asarray(self.rest_translations, dtype=np.float64)
        if not self.names:
            self.names = [f"joint_{i}" for i in range(self.joint_count)]

    @property
    def joint_count(self):
        return len(self.parents)

    def validate(self):
        errors = []
        j = self.joint_count
        if j == 0:
            errors.append("rig has no joints")
            return errors
        if self.parents[0] != -1:
            errors.append("joint 0 must be the root (parent -1)")
        for i in range(1, j):
            p = self.parents[i]
            if not (0 <= p < j) or p == i:
                errors.append(f"joint {i}: invalid parent {p}")
        # Tree check: every joint must reach the root without cycles.
        for i in range(j):
            seen, cur = set(), i
            while cur != -1 and cur not in seen and 0 <= cur < j:
                seen.add(cur)
                cur = int(self.parents[cur])
            if cur != -1:
                errors.append(f"joint {i}: parent chain does not reach the root")
                break
        if not is_rotation(self.rest_rotations, tol=1e-6):
            errors.append("rest rotations are not orthonormal with det 1 (tol 1e-6)")
        return errors

    def topological_order(self):
        """Joint indices, parents before children."""
        order, placed = [], np.zeros(self.joint_count, dtype=bool)
        pending = list(range(self.joint_count))
        while pending:
            rest = []
            for i in pending:
                p = self.parents[i]
                if p == -1 or placed[p]:
                    order.append(i)
                    placed[i] = True
                else:
                    rest.append(i)
            if len(rest) == len(pending):
                raise ValueError("rig parents do not form a tree")
            pending = rest
        return order


@dataclass
class Pose:
    """Per-joint local rotations (axis-angle, relative to the parent) + root translation."""

    joint_rotations: np.ndarray  # (J, 3)
    root_translation: np.ndarray  # (3,)

    def __post_init__(self):
        self.joint_rotations = np.asarray(self.joint_rotations, dtype=np.float64)
        self.root_translation = np.asarray(self.root_translation, dtype=np.float64)

    @classmethod
    def identity(cls, joint_count):
        return cls(np.zeros((joint_count, 3)), np.zeros(3))

    @property
    def joint_count(self):
        return len(self.joint_rotations)

    def copy(self):
        return Pose(self.joint_rotations.copy(), self.root_translation.copy())


@dataclass
class JointTransforms:
    """Global per-joint rigid transforms mapping rest space to posed space."""

    rotations: np.ndarray  # (J, 3, 3)
    translations: np.ndarray  # (J, 3)

    def apply(self, j, points):
        return np.asarray(points) @ self.rotations[j].T + self.translations[j]


@dataclass
class GoMCanonical:
    """The canonical avatar: mesh + skinning + per-face gaussian attributes."""

    positions: np.ndarray  # (V, 3)
    weights: np.ndarray  # (V, J)
    face_indices: np.ndarray  # (F, 3) int
    face_rotations: np.ndarray  # (F, 3) axis-angle
    face_log_scales: np.ndarray  # (F, 3)
    face_color_logits: np.ndarray  # (F, 3)
    rig: Rig
    subdivision_level: int = 0
    normal_eps: float = DEFAULT_NORMAL_EPS

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.face_indices = np.asarray(self.face_indices, dtype=np.int64)
        self.face_rotations = np.asarray(self.face_rotations, dtype=np.float64)
        self.face_log_scales = np.asarray(self.face_log_scales, dtype=np.float64)
        self.face_color_logits = np.asarray(self.face_color_logits, dtype=np.float64)

    @property
    def vertex_count(self):
        return len(self.positions)

    @property
    def face_count(self):
        return len(self.face_indices)

    def vertex(self, i) -> Vertex:
        return Vertex(self.positions[i].copy(), self.weights[i].copy())

    def face(self, j) -> Face:
        return Face(
            tuple(int(k) for k in self.face_indices[j]),
            self.face_rotations[j].copy(),
            self.face_log_scales[j].copy(),
            self.face_color_logits[j].copy(),
        )

    def copy(self):
        return replace(
            self,
            positions=self.positions.copy(),
            weights=self.weights.copy(),
            face_indices=self.face_indices.copy(),
            face_rotations=self.face_rotations.copy(),
            face_log_scales=self.face_log_scales.copy(),
            face_color_logits=self.face_color_logits.copy(),
        )

    def edges(self):
        """Unique undirected edges as a sorted (E, 2) int array."""
        f = self.face_indices
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0)


def face_areas(positions, face_indices):
    p = np.asarray(positions)
    tri = p[np.asarray(face_indices)]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    return 0.5 * np.linalg.norm(n, axis=-1)


def forward_kinematics(rig: Rig, pose: Pose) -> JointTransforms:
    """Compose local joint rotations down the tree into global rigid transforms.

    Joint j's local motion rotates rest space about the joint's rest
    position, with the axis-angle expressed in the joint's rest frame.
    The root translation is added on top of the whole chain, so the
    returned transforms map rest-space points to posed space.
    """
    if pose.joint_count != rig.joint_count:
        raise ValueError(
            f"pose has {pose.joint_count} joints, rig has {rig.joint_count}"
        )
    j = rig.joint_count
    local = exp_so3(pose.joint_rotations)  # (J, 3, 3)
    # Express each local rotation in world axes via the rest orientation.
    world_local = rig.rest_rotations @ local @ np.swapaxes(rig.rest_rotations, -1, -2)
    rot = np.zeros((j, 3, 3))
    trans = np.zeros((j, 3))
    for i in rig.topological_order():
        c = rig.rest_translations[i]
        r_l = world_local[i]
        t_l = c - r_l @ c  # rotation about the rest position c
        p = rig.parents[i]
        if p == -1:
            rot[i] = r_l
            trans[i] = t_l + pose.root_translation
        else:
            rot[i] = rot[p] @ r_l
            trans[i] = rot[p] @ t_l + trans[p]
    return JointTransforms(rot, trans)


def subdivide(avatar: GoMCanonical) -> GoMCanonical:
    """Split every face into four at edge midpoints.

    Midpoint vertices average the endpoint positions and skinning weights;
    the three child corner faces and the central face all inherit copies
    of the parent's rotation/scale/color attributes. The surface, as a
    point set, is unchanged.
    """
    v, f = avatar.vertex_count, avatar.face_count
    edges = avatar.edges()
    edge_key = {(int(a), int(b)): v + i for i, (a, b) in enumerate(edges)}

    mid_pos = 0.5 * (avatar.positions[edges[:, 0]] + avatar.positions[edges[:, 1]])
    mid_w = 0.5 * (avatar.weights[edges[:, 0]] + avatar.weights[edges[:, 1]])

    new_faces = np.zeros((4 * f, 3), dtype=np.int64)
    for j in range(f):
        a, b, c = (int(k) for k in avatar.face_indices[j])
        ab = edge_key[(min(a, b), max(a, b))]
        bc = edge_key[(min(b, c), max(b, c))]
        ca = edge_key[(min(c, a), max(c, a))]
        new_faces[4 * j + 0] = (a, ab, ca)
        new_faces[4 * j + 1] = (ab, b, bc)
        new_faces[4 * j + 2] = (ca, bc, c)
        new_faces[4 * j + 3] = (ab, bc, ca)

    dup = np.repeat(np.arange(f), 4)
    return GoMCanonical(
        positions=np.concatenate([avatar.positions, mid_pos], axis=0),
        weights=np.concatenate([avatar.weights, mid_w], axis=0),
        face_indices=new_faces,
        face_rotations=avatar.face_rotations[dup].copy(),
        face_log_scales=avatar.face_log_scales[dup].copy(),
        face_color_logits=avatar.face_color_logits[dup].copy(),
        rig=avatar.rig,
        subdivision_level=avatar.subdivision_level + 1,
        normal_eps=avatar.normal_eps,
    )


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self):
        return not self.violations

    def __str__(self):
        return "ok" if self.ok else "\n".join(self.violations)


def validate(avatar: GoMCanonical) -> ValidationReport:
    """Check every structural invariant; the report lists all violations."""
    out = []
    v, f, j = avatar.vertex_count, avatar.face_count, avatar.rig.joint_count
    out.extend(avatar.rig.validate())

    if avatar.positions.shape != (v, 3):
        out.append(f"positions shape {avatar.positions.shape} != ({v}, 3)")
    if avatar.weights.shape != (v, j):
        out.append(f"weights shape {avatar.weights.shape} != ({v}, {j})")
    if not np.all(np.isfinite(avatar.positions)):
        out.append("non-finite vertex position")
    if np.any(avatar.weights < 0):
        bad = np.argwhere(avatar.weights < 0)[0]
        out.append(f"vertex {bad[0]}: negative skinning weight for joint {bad[1]}")
    wsum = avatar.weights.sum(axis=1)
    for i in np.nonzero(~(wsum > 0))[0]:
        out.append(f"vertex {i}: weight sum > 0 violated (sum={wsum[i]})")

    fi = avatar.face_indices
    if fi.size:
        if fi.min() < 0 or fi.max() >= v:
            out.append("face index out of range")
        same = (fi[:, 0] == fi[:, 1]) | (fi[:, 1] == fi[:, 2]) | (fi[:, 0] == fi[:, 2])
        for k in np.nonzero(same)[0]:
            out.append(f"face {k}: repeated vertex index {tuple(fi[k])}")
    for name, arr in (
        ("rotation", avatar.face_rotations),
        ("log_scale", avatar.face_log_scales),
        ("color_logit", avatar.face_color_logits),
    ):
        if arr.shape != (f, 3):
            out.append(f"face {name} shape {arr.shape} != ({f}, 3)")
        elif not np.all(np.isfinite(arr)):
            out.append(f"non-finite face {name}")

    if fi.size and fi.min() >= 0 and fi.max() < v:
        areas = face_areas(avatar.positions, fi)
        for k in np.nonzero(areas < DEGENERATE_AREA)[0]:
            out.append(f"face {k}: degenerate (area {areas[k]:.3e} m^2)")
    return ValidationReport(out)
