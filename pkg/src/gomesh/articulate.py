"""Canonical-to-observation articulation.

Pipeline: optional learned pose correction, pose-conditioned non-rigid
vertex offsets, forward kinematics, then linear blend skinning. All stages
run on the tape so gradients reach network weights, pose corrections and
canonical vertex positions; with constant inputs the same code is the
plain-numpy inference path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tape
from .model import GoMCanonical, JointTransforms, Pose, Rig, forward_kinematics
from .rotations import exp_so3, exp_so3_t, log_so3, log_so3_t
from .tape import Tensor


@dataclass
class EncodingConfig:
    """Sinusoidal positional encoding with ``frequencies`` octave bands."""

    frequencies: int = 6
    include_input: bool = True

    def output_dim(self, input_dim=3):
        return input_dim * (1 if self.include_input else 0) + 2 * input_dim * self.frequencies


def frequency_window(frequencies, alpha):
    """Per-band weights ramping low to high as ``alpha`` goes 0 to 1 (raised cosine)."""
    k = np.arange(frequencies, dtype=np.float64)
    x = np.clip(alpha * frequencies - k, 0.0, 1.0)
    return 0.5 * (1.0 - np.cos(np.pi * x))


def pos_encode(x, cfg: EncodingConfig, alpha=None):
    """Encode (..., D) values as [x?, sin(2^0 pi x), cos(2^0 pi x), ...].

    ``alpha`` in [0, 1] masks higher frequency bands during warm-up;
    None means all bands fully on.
    """
    t = tape.as_tensor(x)
    parts = []
    if cfg.include_input:
        parts.append(t)
    if cfg.frequencies > 0:
        window = None if alpha is None else frequency_window(cfg.frequencies, alpha)
        for k in range(cfg.frequencies):
            arg = tape.mul(t, (2.0**k) * np.pi)
            s, c = tape.sin(arg), tape.cos(arg)
            if window is not None:
                s, c = tape.mul(s, window[k]), tape.mul(c, window[k])
            parts.append(s)
            parts.append(c)
    if not parts:
        raise ValueError("encoding with no input term and no frequencies is empty")
    return tape.concat(parts, axis=-1)


@dataclass
class MLPParams:
    """Plain fully-connected network: weights (out, in), biases (out,)."""

    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)
    activation: str = "relu"

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        self._weight_tensors = None
        self._bias_tensors = None

    def enable_grad(self):
        """Expose parameters as gradient-tracking tensors sharing the arrays."""
        self._weight_tensors = [Tensor(w, requires_grad=True) for w in self.weights]
        self._bias_tensors = [Tensor(b, requires_grad=True) for b in self.biases]
        return self._weight_tensors + self._bias_tensors

    def disable_grad(self):
        self._weight_tensors = None
        self._bias_tensors = None

    @property
    def layer_count(self):
        return len(self.weights)

    @property
    def in_dim(self):
        return self.weights[0].shape[1]

    @property
    def out_dim(self):
        return self.weights[-1].shape[0]

    def validate(self):
        if len(self.weights) != len(self.biases):
            raise ValueError("weight/bias layer count mismatch")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[0],):
                raise ValueError(f"layer {i}: bias shape {b.shape} != ({w.shape[0]},)")
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i}: input dim {w.shape[1]} incompatible")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i}: non-finite parameters")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    def hidden_width(self):
        return self.weights[0].shape[0] if self.layer_count > 1 else None

    def copy(self):
        return MLPParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
        )


def mlp_init(dims, rng, zero_last=True):
    """He-initialized stack of linear layers; zero final layer = identity start."""
    weights, biases = [], []
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        last = i == len(dims) - 2
        if last and zero_last:
            w = np.zeros((fan_out, fan_in))
        else:
            w = rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in)
        weights.append(w)
        biases.append(np.zeros(fan_out))
    return MLPParams(weights, biases)


def apply_mlp(params: MLPParams, x):
    """Run the network on (..., in_dim) features; tape-differentiable.

    After ``params.enable_grad()`` the weights participate in the tape and
    collect gradients; otherwise they enter as constants.
    """
    h = tape.as_tensor(x)
    n = params.layer_count
    wt = params._weight_tensors
    bt = params._bias_tensors
    for i in range(n):
        if wt is not None:
            w = tape.transpose(wt[i], (1, 0))
            b = bt[i]
        else:
            w = Tensor(params.weights[i].T)
            b = Tensor(params.biases[i])
        h = tape.add(tape.matmul(h, w), b)
        if i < n - 1:
            h = tape.relu(h)
    return h


def _require_architecture(params, layers, width, what):
    params.validate()
    if params.layer_count != layers or params.hidden_width() != width:
        raise ValueError(
            f"{what} must be a {layers}-layer network with {width} channels, "
            f"got {params.layer_count} layers x {params.hidden_width()}"
        )


# -- network constructors ----------------------------------------------------

NR_DEFORMER_LAYERS, NR_DEFORMER_WIDTH = 7, 128
POSE_REFINER_LAYERS, POSE_REFINER_WIDTH = 5, 256
SHADING_LAYERS, SHADING_WIDTH = 4, 128


def nr_deformer_input_dim(joint_count, cfg: EncodingConfig):
    return cfg.output_dim(3) + 3 * (joint_count - 1)


def init_nr_deformer(joint_count, cfg: EncodingConfig, rng):
    dims = [nr_deformer_input_dim(joint_count, cfg)]
    dims += [NR_DEFORMER_WIDTH] * (NR_DEFORMER_LAYERS - 1)
    dims += [3]
    return mlp_init(dims, rng)


def init_pose_refiner(joint_count, rng):
    dims = [9 * joint_count] + [POSE_REFINER_WIDTH] * (POSE_REFINER_LAYERS - 1)
    dims += [3 * joint_count]
    return mlp_init(dims, rng)


def init_shading(cfg: EncodingConfig, rng):
    dims = [cfg.output_dim(3)] + [SHADING_WIDTH] * (SHADING_LAYERS - 1) + [1]
    return mlp_init(dims, rng)


@dataclass
class NetworkBundle:
    nr_deformer: MLPParams | None = None
    pose_refiner: MLPParams | None = None
    shading: MLPParams | None = None
    nr_encoding: EncodingConfig = field(default_factory=EncodingConfig)
    shading_encoding: EncodingConfig = field(
        default_factory=lambda: EncodingConfig(frequencies=4)
    )

    @classmethod
    def initialized(cls, joint_count, rng=None):
        rng = rng or np.random.default_rng(0)
        bundle = cls()
        bundle.nr_deformer = init_nr_deformer(joint_count, bundle.nr_encoding, rng)
        bundle.pose_refiner = init_pose_refiner(joint_count, rng)
        bundle.shading = init_shading(bundle.shading_encoding, rng)
        return bundle

    def copy(self):
        return NetworkBundle(
            self.nr_deformer.copy() if self.nr_deformer else None,
            self.pose_refiner.copy() if self.pose_refiner else None,
            self.shading.copy() if self.shading else None,
            EncodingConfig(self.nr_encoding.frequencies, self.nr_encoding.include_input),
            EncodingConfig(
                self.shading_encoding.frequencies, self.shading_encoding.include_input
            ),
        )


# -- articulation stages -------------------------------------------------------


def nr_deform(positions, pose_conditioning, params: MLPParams, cfg: EncodingConfig,
              alpha=None):
    """Pose-conditioned per-vertex offsets, (V, 3).

    ``pose_conditioning`` is the concatenated axis-angle of all non-root
    joints (translation-invariant conditioning), broadcast to every vertex.
    """
    pos = tape.as_tensor(positions)
    cond = tape.as_tensor(pose_conditioning)
    v = pos.data.shape[0]
    expected = params.in_dim
    enc = pos_encode(pos, cfg, alpha=alpha)
    cond_flat = tape.reshape(cond, (1, -1))
    ones = Tensor(np.ones((v, 1)))
    cond_rows = tape.matmul(ones, cond_flat)
    feats = tape.concat([enc, cond_rows], axis=1)
    _require_architecture(params, NR_DEFORMER_LAYERS, NR_DEFORMER_WIDTH, "deformer")
    if feats.data.shape[1] != expected:
        raise ValueError(
            f"deformer expects {expected} input features, got {feats.data.shape[1]}"
        )
    return apply_mlp(params, feats)


def pose_conditioning_vector(pose: Pose):
    return pose.joint_rotations[1:].reshape(-1)


def refined_local_rotations(pose: Pose, params: MLPParams):
    """Tape: corrected per-joint local rotation matrices (J, 3, 3) and corrections.

    Returns (rotations, corrections) where corrections is the (J, 3)
    axis-angle output of the refiner network.
    """
    _require_architecture(params, POSE_REFINER_LAYERS, POSE_REFINER_WIDTH, "pose refiner")
    est = exp_so3(pose.joint_rotations)  # (J, 3, 3) plain
    feats = Tensor(est.reshape(1, -1))
    if feats.data.shape[1] != params.in_dim:
        raise ValueError(
            f"pose refiner expects {params.in_dim} inputs, got {feats.data.shape[1]}"
        )
    xi = tape.reshape(apply_mlp(params, feats), (pose.joint_count, 3))
    refined = tape.matmul(Tensor(est), exp_so3_t(xi))
    return refined, xi


def refine_pose(pose_est: Pose, rig: Rig, params: MLPParams) -> Pose:
    """Apply the learned correction to estimated local joint rotations.

    Corrections compose on the right of the estimated rotation; root
    translation passes through. A joint with an exactly-zero correction
    keeps its input axis-angle bit-for-bit.
    """
    if pose_est.joint_count != rig.joint_count:
        raise ValueError(
            f"pose has {pose_est.joint_count} joints, rig has {rig.joint_count}"
        )
    refined_t, xi = refined_local_rotations(pose_est, params)
    aa = log_so3(refined_t.data)
    unchanged = np.all(xi.data == 0.0, axis=1)
    aa[unchanged] = pose_est.joint_rotations[unchanged]
    return Pose(aa, pose_est.root_translation.copy())


def lbs(p_nr, weights, jt: JointTransforms):
    """Blend per-joint rigid transforms of a single point by its skinning weights."""
    w = np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if not total > 0:
        raise ValueError(f"skinning weight sum must be positive, got {total}")
    p = np.asarray(p_nr, dtype=np.float64)
    moved = jt.rotations @ p + jt.translations  # (J, 3)
    return (w[:, None] * moved).sum(axis=0) / total


def forward_kinematics_t(rig: Rig, local_rots: Tensor, root_translation):
    """Tape forward kinematics from per-joint local rotation matrices.

    Same composition rule as :func:`gomesh.model.forward_kinematics`.
    """
    restr = rig.rest_rotations
    world_local = tape.matmul(
        tape.matmul(Tensor(restr), local_rots), Tensor(np.swapaxes(restr, -1, -2))
    )
    rots: list = [None] * rig.joint_count
    trans: list = [None] * rig.joint_count
    root_t = tape.as_tensor(root_translation)
    for i in rig.topological_order():
        c = Tensor(rig.rest_translations[i].reshape(3, 1))
        r_l = world_local[i]
        t_l = tape.reshape(tape.sub(c, tape.matmul(r_l, c)), (3,))
        p = rig.parents[i]
        if p == -1:
            rots[i] = r_l
            trans[i] = tape.add(t_l, root_t)
        else:
            rots[i] = tape.matmul(rots[p], r_l)
            trans[i] = tape.add(
                tape.reshape(tape.matmul(rots[p], tape.reshape(t_l, (3, 1))), (3,)),
                trans[p],
            )
    return tape.stack(rots, axis=0), tape.stack(trans, axis=0)


def lbs_batch(p_nr, weights, rot_t, trans_t):
    """Skin (V, 3) points with normalized weights by blending joint matrices."""
    w = np.asarray(weights, dtype=np.float64)
    w = w / w.sum(axis=1, keepdims=True)
    j = rot_t.data.shape[0]
    flat = tape.concat(
        [tape.reshape(rot_t, (j, 9)), tape.reshape(trans_t, (j, 3))], axis=1
    )  # (J, 12)
    blended = tape.matmul(Tensor(w), flat)  # (V, 12)
    rb = tape.reshape(blended[:, :9], (-1, 3, 3))
    tb = blended[:, 9:]
    p = tape.as_tensor(p_nr)
    moved = tape.reshape(
        tape.matmul(rb, tape.reshape(p, p.data.shape + (1,))), p.data.shape
    )
    return tape.add(moved, tb)


def articulate(
    avatar: GoMCanonical,
    pose: Pose,
    nets: NetworkBundle | None = None,
    refine: bool = False,
    *,
    window_alpha=None,
    positions=None,
):
    """Observation-space vertex positions (V, 3) as a tape tensor.

    Stage order: pose refinement (training / novel-view only), non-rigid
    offsets, forward kinematics, skinning. Face attributes are untouched by
    articulation; only vertex coordinates move. Pass ``positions`` to
    substitute a tape tensor for the avatar's canonical positions.
    """
    if pose.joint_count != avatar.rig.joint_count:
        raise ValueError(
            f"pose has {pose.joint_count} joints, rig has {avatar.rig.joint_count}"
        )
    p_c = tape.as_tensor(avatar.positions if positions is None else positions)

    if refine and nets is not None and nets.pose_refiner is not None:
        local_rots, _ = refined_local_rotations(pose, nets.pose_refiner)
        cond = tape.reshape(log_so3_t(local_rots)[1:], (-1,))
    else:
        local_rots = Tensor(exp_so3(pose.joint_rotations))
        cond = Tensor(pose_conditioning_vector(pose))

    if nets is not None and nets.nr_deformer is not None:
        offsets = nr_deform(p_c, cond, nets.nr_deformer, nets.nr_encoding,
                            alpha=window_alpha)
        p_nr = tape.add(p_c, offsets)
    else:
        p_nr = p_c

    rot_t, trans_t = forward_kinematics_t(avatar.rig, local_rots, pose.root_translation)
    return lbs_batch(p_nr, avatar.weights, rot_t, trans_t)


def articulate_positions(avatar, pose, nets=None, refine=False, **kw):
    """Numpy convenience wrapper around :func:`articulate`."""
    return articulate(avatar, pose, nets, refine, **kw).data


def skin_only(avatar: GoMCanonical, pose: Pose):
    """Pure skeleton articulation (forward kinematics + skinning), numpy.

    This is the per-frame cost of driving an already-deformed mesh; the
    articulation benchmark times this path.
    """
    jt = forward_kinematics(avatar.rig, pose)
    w = avatar.weights / avatar.weights.sum(axis=1, keepdims=True)
    flat = np.concatenate(
        [jt.rotations.reshape(-1, 9), jt.translations.reshape(-1, 3)], axis=1
    )
    blended = w @ flat
    rb = blended[:, :9].reshape(-1, 3, 3)
    tb = blended[:, 9:]
    return np.einsum("vij,vj->vi", rb, avatar.positions) + tb
