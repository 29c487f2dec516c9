"""Desk-scale fitting: losses, Adam, gradient checking, the training loop.

The loss couples a photometric L1 term and a splatted-mask term with mesh
regularizers (soft-silhouette match, uniform-Laplacian smoothing, adjacent
face normal and color smoothness), combined as

    total = L_image + a_lpips * L_perceptual + a_mask * L_mask_gs
          + a_reg * (L_mask_mesh + a_lap * L_lap + a_normal * L_normal
                     + a_color * L_color)

A perceptual scorer is an optional plug-in (value + gradient callable);
without one its term is zero. All gradients flow through the tape and are
gated by central finite differences.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import tape
from .articulate import NetworkBundle
from .model import GoMCanonical, Pose, subdivide
from .render import DEFAULT_SOFT_SIGMA_SCALE, RenderOutput, render
from .splat import Camera
from .tape import Tensor, from_op


class NumericError(RuntimeError):
    """Non-finite value produced during fitting."""


@dataclass
class LossWeights:
    """Loss term weights; defaults are the production configuration."""

    lpips: float = 1.0
    mask: float = 5.0
    reg: float = 1.0
    laplacian: float = 10.0
    normal: float = 0.1
    color: float = 0.05

    def validate(self):
        for name, v in self.__dict__.items():
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {v}")


@dataclass
class FrameObservation:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    mask: np.ndarray  # (H, W) in [0, 1]
    pose: Pose
    camera: Camera

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.mask.ndim == 3:
            self.mask = self.mask[..., 0]
        h, w = self.mask.shape
        if self.image.shape != (h, w, 3):
            raise ValueError(f"image {self.image.shape} / mask {self.mask.shape} mismatch")
        if (h, w) != (self.camera.height, self.camera.width):
            raise ValueError("observation resolution differs from camera resolution")


@dataclass
class TrainConfig:
    """Desk-scale schedule: the production schedule divided by 100."""

    total_iterations: int = 3000
    lr_main: float = 5e-4
    lr_pose_refiner: float = 5e-5
    kickoff_pose_refiner: int = 1000
    kickoff_nr_deformer: int = 1500
    subdivide_at: int = 500
    anneal_span: int | None = None  # default: 10% of total iterations
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    soft_sigma_scale: float = DEFAULT_SOFT_SIGMA_SCALE
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    trainable_groups: tuple | None = None  # None = all groups
    refine_poses: bool = True
    perceptual_fn: object = None  # optional plug-in: (pred, gt) -> (value, grad)
    log_path: str | None = None

    def validate(self):
        if self.total_iterations < 0:
            raise ValueError("total_iterations must be >= 0")
        if not (self.lr_main > 0 and self.lr_pose_refiner > 0):
            raise ValueError("learning rates must be positive")
        for name in ("kickoff_pose_refiner", "kickoff_nr_deformer", "subdivide_at"):
            v = getattr(self, name)
            if v < 0 or (self.total_iterations and v > self.total_iterations):
                raise ValueError(f"{name}={v} outside [0, total_iterations]")
        self.weights.validate()

    @property
    def anneal_iters(self):
        if self.anneal_span is not None:
            return max(1, self.anneal_span)
        return max(1, self.total_iterations // 10)


ALL_GROUPS = (
    "positions",
    "face_rotations",
    "face_log_scales",
    "face_color_logits",
    "nr_deformer",
    "pose_refiner",
    "shading",
)


# -- mesh structures -----------------------------------------------------------


def uniform_laplacian(avatar: GoMCanonical):
    """Sparse V x V operator: p -> p - mean(1-ring neighbors of p)."""
    v = avatar.vertex_count
    edges = avatar.edges()
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    adj = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(v, v)).tocsr()
    deg = np.asarray(adj.sum(axis=1)).reshape(-1)
    deg_safe = np.where(deg > 0, deg, 1.0)
    inv = sp.diags(1.0 / deg_safe)
    return (sp.eye(v) - inv @ adj).tocsr()


def adjacent_face_pairs(avatar: GoMCanonical):
    """(P, 2) indices of faces sharing an edge."""
    owners = {}
    pairs = []
    for j, (a, b, c) in enumerate(avatar.face_indices):
        for e in ((a, b), (b, c), (c, a)):
            key = (min(e), max(e))
            if key in owners:
                pairs.append((owners[key], j))
            else:
                owners[key] = j
    return np.asarray(sorted(pairs), dtype=np.int64).reshape(-1, 2)


@dataclass
class MeshStructures:
    laplacian: sp.csr_matrix
    face_pairs: np.ndarray

    @classmethod
    def build(cls, avatar):
        return cls(uniform_laplacian(avatar), adjacent_face_pairs(avatar))


# -- loss -----------------------------------------------------------------------


@dataclass
class LossBreakdown:
    image: Tensor
    perceptual: Tensor
    mask_gs: Tensor
    mask_mesh: Tensor
    laplacian: Tensor
    normal: Tensor
    color: Tensor
    total: Tensor

    def values(self):
        return {
            name: float(getattr(self, name).data)
            for name in (
                "image", "perceptual", "mask_gs", "mask_mesh",
                "laplacian", "normal", "color", "total",
            )
        }


def _face_normals_t(positions, face_indices):
    pos = tape.as_tensor(positions)
    fi = np.asarray(face_indices, dtype=np.int64)
    p0, p1, p2 = pos[fi[:, 0]], pos[fi[:, 1]], pos[fi[:, 2]]
    n = tape.cross3(tape.sub(p1, p0), tape.sub(p2, p0))
    return tape.normalize_last(n)


def loss_terms(
    out: RenderOutput,
    obs: FrameObservation,
    avatar: GoMCanonical,
    weights: LossWeights | None = None,
    *,
    positions=None,
    color_logits=None,
    structures: MeshStructures | None = None,
    perceptual_fn=None,
) -> LossBreakdown:
    """All loss terms for one frame. Regularizers act on the canonical mesh.

    ``positions``/``color_logits`` substitute tape tensors for the avatar
    arrays so the regularizers differentiate the same parameters the render
    used. ``out.mesh_mask`` must be present (render with_mesh_mask=True).
    """
    w = weights or LossWeights()
    w.validate()
    if out.image.data.shape != obs.image.shape:
        raise ValueError(
            f"render {out.image.data.shape} vs observation {obs.image.shape}"
        )
    if out.mesh_mask is None:
        raise ValueError("render output lacks the mesh mask; render with_mesh_mask=True")
    structures = structures or MeshStructures.build(avatar)
    pos = tape.as_tensor(avatar.positions if positions is None else positions)
    logits = tape.as_tensor(
        avatar.face_color_logits if color_logits is None else color_logits
    )

    l_image = tape.mean_(tape.absolute(tape.sub(out.image, Tensor(obs.image))))
    l_mask_gs = tape.mean_(tape.absolute(tape.sub(out.mask, Tensor(obs.mask))))
    l_mask_mesh = tape.mean_(tape.absolute(tape.sub(out.mesh_mask, Tensor(obs.mask))))

    delta = tape.sparse_matmul(structures.laplacian, pos)
    l_lap = tape.mean_(tape.sum_(tape.mul(delta, delta), axis=1))

    pairs = structures.face_pairs
    if len(pairs):
        normals = _face_normals_t(pos, avatar.face_indices)
        na, nb = normals[pairs[:, 0]], normals[pairs[:, 1]]
        cos = tape.sum_(tape.mul(na, nb), axis=1)
        l_normal = tape.mean_(tape.sub(1.0, cos))
        colors = tape.sigmoid(logits)
        l_color = tape.mean_(tape.absolute(tape.sub(colors[pairs[:, 0]], colors[pairs[:, 1]])))
    else:
        l_normal = Tensor(0.0)
        l_color = Tensor(0.0)

    if perceptual_fn is not None:
        value, grad = perceptual_fn(out.image.data, obs.image)
        grad = np.asarray(grad, dtype=np.float64)
        l_percep = from_op(np.float64(value), (out.image,), lambda g: (g * grad,))
    else:
        l_percep = Tensor(0.0)

    reg = tape.add(
        l_mask_mesh,
        tape.add(
            tape.mul(l_lap, w.laplacian),
            tape.add(tape.mul(l_normal, w.normal), tape.mul(l_color, w.color)),
        ),
    )
    total = tape.add(
        tape.add(l_image, tape.mul(l_percep, w.lpips)),
        tape.add(tape.mul(l_mask_gs, w.mask), tape.mul(reg, w.reg)),
    )
    return LossBreakdown(
        image=l_image, perceptual=l_percep, mask_gs=l_mask_gs, mask_mesh=l_mask_mesh,
        laplacian=l_lap, normal=l_normal, color=l_color, total=total,
    )


# -- optimizer -------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def like(cls, param):
        return cls(np.zeros_like(param), np.zeros_like(param))


def adam_step(param, grad, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update with bias correction. Mutates and returns (param, state)."""
    param = np.asarray(param)
    grad = np.asarray(grad)
    if param.shape != grad.shape:
        raise ValueError(f"param shape {param.shape} != grad shape {grad.shape}")
    state.step += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = state.m / (1.0 - beta1**state.step)
    v_hat = state.v / (1.0 - beta2**state.step)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return param, state


# -- parameter plumbing -----------------------------------------------------------


class Trainables:
    """Per-group gradient-tracking tensors over the live parameter arrays."""

    def __init__(self, avatar: GoMCanonical, nets: NetworkBundle, groups=None):
        self.avatar = avatar
        self.nets = nets
        self.groups = tuple(groups) if groups is not None else ALL_GROUPS
        for g in self.groups:
            if g not in ALL_GROUPS:
                raise ValueError(f"unknown trainable group {g!r}")

    def arrays(self, group):
        if group == "positions":
            return [self.avatar.positions]
        if group == "face_rotations":
            return [self.avatar.face_rotations]
        if group == "face_log_scales":
            return [self.avatar.face_log_scales]
        if group == "face_color_logits":
            return [self.avatar.face_color_logits]
        net = getattr(self.nets, group)
        if net is None:
            return []
        return list(net.weights) + list(net.biases)

    def tensors_for_step(self, active_groups):
        """Fresh tensors per group; network params register on their MLPs."""
        tensors = {}
        for g in self.groups:
            if g in ("positions", "face_rotations", "face_log_scales",
                     "face_color_logits"):
                arr = self.arrays(g)[0]
                tensors[g] = [Tensor(arr, requires_grad=g in active_groups)]
            else:
                net = getattr(self.nets, g)
                if net is None:
                    tensors[g] = []
                elif g in active_groups:
                    tensors[g] = net.enable_grad()
                else:
                    net.disable_grad()
                    tensors[g] = []
        return tensors

    def release(self):
        for g in ("nr_deformer", "pose_refiner", "shading"):
            net = getattr(self.nets, g)
            if net is not None:
                net.disable_grad()


def collect_gradients(loss: Tensor, tensors: dict):
    """Backward pass + per-group gradient arrays (zeros for untouched params)."""
    if not np.isfinite(loss.data):
        raise NumericError("non-finite loss")
    loss.backward()
    grads = {}
    for group, ts in tensors.items():
        out = []
        for t in ts:
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in group {group}")
            out.append(g)
        grads[group] = out
    return grads


# -- finite-difference gate --------------------------------------------------------


@dataclass
class FDReport:
    per_group: dict
    worst_entries: dict

    @property
    def max_rel_error(self):
        return max(self.per_group.values()) if self.per_group else 0.0

    def __str__(self):
        lines = [f"  {g}: {e:.3e}" for g, e in sorted(self.per_group.items())]
        return "finite-difference check (max relative error per group)\n" + "\n".join(lines)


def fd_check(loss_fn, groups, h=1e-5, samples_per_group=24, seed=0, rel_floor=1e-6,
             refine=(0.125, 0.015625)):
    """Compare analytic gradients against central differences.

    ``loss_fn(want_grads)`` evaluates the loss from the live arrays in
    ``groups`` (dict name -> list of arrays); with ``want_grads`` it also
    returns the per-group analytic gradients. Large groups are subsampled.

    Rasterization makes the loss piecewise smooth: a step that happens to
    straddle a pixel-ownership boundary yields a bogus difference quotient
    no matter how correct the adjoint is. Entries that miss tolerance are
    therefore retried at ``h`` scaled by each ``refine`` factor and score
    their best attempt; a wrong adjoint stays wrong at every step size,
    while a straddled discontinuity falls out of the window.
    """
    if h == 0:
        raise ValueError("finite-difference step h must be nonzero")
    _, analytic = loss_fn(True)
    rng = np.random.default_rng(seed)

    def quotient(flat, i, step):
        keep = flat[i]
        flat[i] = keep + step
        f_plus, _ = loss_fn(False)
        flat[i] = keep - step
        f_minus, _ = loss_fn(False)
        flat[i] = keep
        return (f_plus - f_minus) / (2.0 * step)

    per_group, worst = {}, {}
    for name, arrays in groups.items():
        grads = analytic.get(name, [])
        if not arrays or not grads:
            continue
        worst_err = 0.0
        worst_info = None
        for arr, grad in zip(arrays, grads):
            flat = arr.reshape(-1)
            gflat = grad.reshape(-1)
            n = flat.size
            idx = (
                np.arange(n)
                if n <= samples_per_group
                else rng.choice(n, size=samples_per_group, replace=False)
            )
            for i in idx:
                an = gflat[i]
                fd = quotient(flat, i, h)
                err = abs(fd - an) / max(abs(fd), abs(an), rel_floor)
                for factor in refine:
                    if err < 1e-3:
                        break
                    fd2 = quotient(flat, i, h * factor)
                    err2 = abs(fd2 - an) / max(abs(fd2), abs(an), rel_floor)
                    if err2 < err:
                        fd, err = fd2, err2
                if err > worst_err:
                    worst_err = err
                    worst_info = (int(i), float(fd), float(an))
        per_group[name] = worst_err
        worst[name] = worst_info
    return FDReport(per_group, worst)


# -- training loop -------------------------------------------------------------------


@dataclass
class TrainResult:
    avatar: GoMCanonical
    nets: NetworkBundle
    log: list


def _log_record(iteration, values, wall_ms):
    rec = {"iteration": iteration, "wall_ms": round(wall_ms, 3)}
    rec.update({k: v for k, v in values.items()})
    return rec


def train(frames, avatar: GoMCanonical, cfg: TrainConfig | None = None,
          nets: NetworkBundle | None = None) -> TrainResult:
    """Fit the avatar (and networks) to posed frame observations.

    One frame per iteration (seeded shuffle per epoch). Pose-refiner and
    deformer groups stay frozen until their kick-off iterations; the mesh
    is subdivided once at the configured iteration, resetting optimizer
    moments for the structural groups whose shapes changed.
    """
    cfg = cfg or TrainConfig()
    cfg.validate()
    if len(frames) == 0:
        raise ValueError("need at least one observation frame")
    avatar = avatar.copy()
    rng = np.random.default_rng(cfg.seed)
    if nets is None:
        nets = NetworkBundle.initialized(avatar.rig.joint_count, rng)
    else:
        nets = nets.copy()

    trainables = Trainables(avatar, nets, cfg.trainable_groups)
    structures = MeshStructures.build(avatar)
    adam = {
        g: [AdamState.like(a) for a in trainables.arrays(g)] for g in trainables.groups
    }
    log = []
    log_fh = open(cfg.log_path, "w") if cfg.log_path else None
    order = []

    try:
        for it in range(cfg.total_iterations):
            if it == cfg.subdivide_at and cfg.subdivide_at > 0:
                avatar_new = subdivide(avatar)
                avatar.__dict__.update(avatar_new.__dict__)
                structures = MeshStructures.build(avatar)
                for g in ("positions", "face_rotations", "face_log_scales",
                          "face_color_logits"):
                    if g in adam:
                        adam[g] = [AdamState.like(a) for a in trainables.arrays(g)]

            if not order:
                order = list(rng.permutation(len(frames)))
            obs = frames[int(order.pop(0))]

            refine_on = cfg.refine_poses and it >= cfg.kickoff_pose_refiner
            deform_on = it >= cfg.kickoff_nr_deformer
            alpha = None
            if deform_on:
                alpha = min(1.0, (it - cfg.kickoff_nr_deformer) / cfg.anneal_iters)

            active = set(trainables.groups)
            if not refine_on:
                active.discard("pose_refiner")
            if not deform_on:
                active.discard("nr_deformer")

            t0 = time.perf_counter()
            tensors = trainables.tensors_for_step(active)
            step_nets = NetworkBundle(
                nets.nr_deformer if deform_on else None,
                nets.pose_refiner if refine_on else None,
                nets.shading,
                nets.nr_encoding,
                nets.shading_encoding,
            )
            out = render(
                avatar, obs.pose, step_nets, obs.camera,
                refine=refine_on,
                window_alpha=alpha,
                with_mesh_mask=True,
                soft_sigma=cfg.soft_sigma_scale * obs.camera.width,
                positions=tensors["positions"][0] if "positions" in tensors else None,
                face_rotations=tensors.get("face_rotations", [None])[0],
                face_log_scales=tensors.get("face_log_scales", [None])[0],
                face_color_logits=tensors.get("face_color_logits", [None])[0],
            )
            losses = loss_terms(
                out, obs, avatar, cfg.weights,
                positions=tensors.get("positions", [None])[0],
                color_logits=tensors.get("face_color_logits", [None])[0],
                structures=structures,
                perceptual_fn=cfg.perceptual_fn,
            )
            if not np.isfinite(losses.total.data):
                raise NumericError(f"non-finite loss at iteration {it}")
            try:
                grads = collect_gradients(losses.total, tensors)
            except NumericError as e:
                raise NumericError(f"{e} at iteration {it}") from e

            for g in active:
                lr = cfg.lr_pose_refiner if g == "pose_refiner" else cfg.lr_main
                arrays = trainables.arrays(g)
                for arr, grad, state in zip(arrays, grads.get(g, []), adam[g]):
                    adam_step(arr, grad, state, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)

            wall = (time.perf_counter() - t0) * 1000.0
            rec = _log_record(it, losses.values(), wall)
            log.append(rec)
            if log_fh:
                log_fh.write(json.dumps(rec) + "\n")
    finally:
        trainables.release()
        if log_fh:
            log_fh.close()

    return TrainResult(avatar, nets, log)
