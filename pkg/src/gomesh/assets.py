"""Serialization: binary avatars, JSON rigs/poses/cameras, PNG images.

The avatar file is a compact little-endian binary (magic ``GOMA``): header,
float32 geometry arrays in declared order, three network blocks with layer
shape descriptors, then the rig block. Rigs, poses, and cameras travel as
human-readable JSON so fixtures stay auditable. Images are 8-bit PNG with
values treated as linear in [0, 1].

Also hosts the procedural "tubeman" capsule rig used as the desk-scale
initialization and test fixture.
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np
from PIL import Image

from .articulate import EncodingConfig, MLPParams, NetworkBundle
from .model import GoMCanonical, Pose, Rig, validate
from .splat import Camera

MAGIC = b"GOMA"
VERSION = 1


class FormatError(ValueError):
    """Malformed or truncated avatar/pose/camera file."""


class DataError(ValueError):
    """Well-formed file whose contents violate model invariants."""


# -- low-level helpers --------------------------------------------------------


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(
                f"truncated file: needed {n} bytes for {what} at offset {self.pos}"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def f32(self, what):
        return struct.unpack("<f", self.take(4, what))[0]

    def array(self, count, dtype, what):
        itemsize = np.dtype(dtype).itemsize
        raw = self.take(count * itemsize, what)
        return np.frombuffer(raw, dtype=np.dtype(dtype).newbyteorder("<")).copy()

    def done(self):
        if self.pos != len(self.data):
            raise FormatError(
                f"{len(self.data) - self.pos} trailing bytes at offset {self.pos}"
            )


def _write_array(buf, arr, dtype):
    buf.write(np.ascontiguousarray(arr, dtype=dtype).astype(dtype, copy=False).tobytes())


# -- avatar binary format ------------------------------------------------------


def _write_network(buf, params: MLPParams | None):
    if params is None:
        buf.write(struct.pack("<I", 0))
        return
    buf.write(struct.pack("<I", params.layer_count))
    for w, b in zip(params.weights, params.biases):
        buf.write(struct.pack("<II", w.shape[0], w.shape[1]))
        _write_array(buf, w, "<f4")
        _write_array(buf, b, "<f4")


def _read_network(r: _Reader, name) -> MLPParams | None:
    layers = r.u32(f"{name} layer count")
    if layers == 0:
        return None
    if layers > 64:
        raise FormatError(f"{name}: implausible layer count {layers}")
    weights, biases = [], []
    for i in range(layers):
        rows = r.u32(f"{name} layer {i} rows")
        cols = r.u32(f"{name} layer {i} cols")
        if rows == 0 or cols == 0 or rows * cols > 50_000_000:
            raise FormatError(f"{name} layer {i}: bad shape {rows}x{cols}")
        w = r.array(rows * cols, "f4", f"{name} layer {i} weights").reshape(rows, cols)
        b = r.array(rows, "f4", f"{name} layer {i} biases")
        weights.append(w.astype(np.float64))
        biases.append(b.astype(np.float64))
    return MLPParams(weights, biases)


def save_avatar(avatar: GoMCanonical, nets: NetworkBundle | None, path):
    """Write the avatar (and networks) as a deterministic binary file."""
    v, f, j = avatar.vertex_count, avatar.face_count, avatar.rig.joint_count
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<III", v, f, j))
    buf.write(struct.pack("<f", avatar.normal_eps))
    buf.write(struct.pack("<II", avatar.subdivision_level, 0))

    _write_array(buf, avatar.positions, "<f4")
    _write_array(buf, avatar.weights, "<f4")
    _write_array(buf, avatar.face_indices, "<u4")
    _write_array(buf, avatar.face_rotations, "<f4")
    _write_array(buf, avatar.face_log_scales, "<f4")
    _write_array(buf, avatar.face_color_logits, "<f4")

    nets = nets or NetworkBundle()
    _write_network(buf, nets.nr_deformer)
    _write_network(buf, nets.pose_refiner)
    _write_network(buf, nets.shading)

    buf.write(struct.pack("<I", j))
    _write_array(buf, avatar.rig.parents, "<i4")
    _write_array(buf, avatar.rig.rest_rotations, "<f4")
    _write_array(buf, avatar.rig.rest_translations, "<f4")
    buf.write(struct.pack("<I", len(avatar.rig.names)))
    for name in avatar.rig.names:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)

    try:
        with open(path, "wb") as fh:
            fh.write(buf.getvalue())
    except OSError as e:
        raise OSError(f"failed to write avatar to {path}: {e}") from e


def _encoding_from_dims(in_dim, extra=0):
    """Reconstruct the encoding config from a network's input width."""
    enc_dim = in_dim - extra
    freqs = (enc_dim - 3) // 6
    if enc_dim != 3 + 6 * freqs or freqs < 0:
        raise FormatError(f"network input width {in_dim} matches no known encoding")
    return EncodingConfig(frequencies=freqs, include_input=True)


def load_avatar(path):
    """Parse and validate an avatar file -> (avatar, networks)."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as e:
        raise OSError(f"failed to read avatar from {path}: {e}") from e
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic; not an avatar file")
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    v = r.u32("vertex count")
    f = r.u32("face count")
    j = r.u32("joint count")
    eps = r.f32("normal epsilon")
    subdivision = r.u32("subdivision level")
    r.u32("reserved")
    if v > 50_000_000 or f > 50_000_000 or j > 10_000:
        raise FormatError(f"implausible counts V={v} F={f} J={j}")

    positions = r.array(v * 3, "f4", "positions").astype(np.float64).reshape(v, 3)
    weights = r.array(v * j, "f4", "weights").astype(np.float64).reshape(v, j)
    faces = r.array(f * 3, "u4", "face indices").astype(np.int64).reshape(f, 3)
    rots = r.array(f * 3, "f4", "face rotations").astype(np.float64).reshape(f, 3)
    scales = r.array(f * 3, "f4", "face log scales").astype(np.float64).reshape(f, 3)
    colors = r.array(f * 3, "f4", "face color logits").astype(np.float64).reshape(f, 3)

    nr = _read_network(r, "deformer network")
    refiner = _read_network(r, "pose refiner network")
    shading = _read_network(r, "shading network")

    j2 = r.u32("rig joint count")
    if j2 != j:
        raise FormatError(f"rig joint count {j2} != header joint count {j}")
    parents = r.array(j, "i4", "rig parents").astype(np.int64)
    rest_rot = r.array(j * 9, "f4", "rig rest rotations").astype(np.float64)
    rest_tr = r.array(j * 3, "f4", "rig rest translations").astype(np.float64)
    name_count = r.u32("rig name count")
    if name_count != j:
        raise FormatError(f"rig name count {name_count} != joint count {j}")
    names = []
    for i in range(name_count):
        ln = r.u32(f"name {i} length")
        if ln > 4096:
            raise FormatError(f"name {i}: implausible length {ln}")
        try:
            names.append(r.take(ln, f"name {i}").decode("utf-8"))
        except UnicodeDecodeError as e:
            raise FormatError(f"name {i}: invalid utf-8") from e
    r.done()

    rig = Rig(parents, rest_rot.reshape(j, 3, 3), rest_tr.reshape(j, 3), names)
    avatar = GoMCanonical(
        positions, weights, faces, rots, scales, colors, rig,
        subdivision_level=subdivision, normal_eps=float(eps),
    )
    report = validate(avatar)
    if not report.ok:
        raise DataError(f"avatar fails validation:\n{report}")

    nets = NetworkBundle(nr, refiner, shading)
    if nr is not None:
        nets.nr_encoding = _encoding_from_dims(nr.in_dim, extra=3 * (j - 1))
    if shading is not None:
        nets.shading_encoding = _encoding_from_dims(shading.in_dim)
    return avatar, nets


# -- JSON fixtures -------------------------------------------------------------


def save_camera(cam: Camera, path):
    payload = {
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "width": cam.width, "height": cam.height,
        "rotation": cam.rotation.tolist(),
        "translation": cam.translation.tolist(),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def camera_from_dict(d) -> Camera:
    try:
        return Camera(
            float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
            np.asarray(d["rotation"], dtype=np.float64),
            np.asarray(d["translation"], dtype=np.float64),
            int(d["width"]), int(d["height"]),
        )
    except (KeyError, TypeError) as e:
        raise FormatError(f"camera record missing/invalid field: {e}") from e


def load_camera(path) -> Camera:
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as e:
            raise FormatError(f"camera file is not valid JSON: {e}") from e
    return camera_from_dict(d)


def pose_to_dict(pose: Pose):
    return {
        "joint_rotations": pose.joint_rotations.tolist(),
        "root_translation": pose.root_translation.tolist(),
    }


def pose_from_dict(d, expected_joints=None) -> Pose:
    try:
        rot = np.asarray(d["joint_rotations"], dtype=np.float64)
        tr = np.asarray(d["root_translation"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"pose record missing/invalid field: {e}") from e
    if rot.ndim != 2 or rot.shape[1] != 3 or tr.shape != (3,):
        raise FormatError(f"pose arrays have wrong shape {rot.shape}, {tr.shape}")
    if expected_joints is not None and rot.shape[0] != expected_joints:
        raise FormatError(
            f"pose has {rot.shape[0]} joints, rig expects {expected_joints}"
        )
    return Pose(rot, tr)


def save_pose(pose: Pose, path):
    with open(path, "w") as fh:
        json.dump(pose_to_dict(pose), fh, indent=2)
        fh.write("\n")


def load_pose(path, expected_joints=None) -> Pose:
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as e:
            raise FormatError(f"pose file is not valid JSON: {e}") from e
    return pose_from_dict(d, expected_joints)


def save_pose_sequence(frames, path):
    """``frames`` is a list of (time, Pose) with increasing times."""
    payload = {
        "frames": [
            {"time": float(t), "pose": pose_to_dict(p)} for t, p in frames
        ]
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def load_pose_sequence(path, expected_joints=None):
    """Timestamped poses; timestamps must strictly increase."""
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as e:
            raise FormatError(f"pose sequence is not valid JSON: {e}") from e
    if not isinstance(d, dict) or "frames" not in d:
        raise FormatError("pose sequence missing 'frames'")
    out = []
    last_t = None
    for i, entry in enumerate(d["frames"]):
        try:
            t = float(entry["time"])
            pose = pose_from_dict(entry["pose"], expected_joints)
        except (KeyError, TypeError) as e:
            raise FormatError(f"frame {i}: missing/invalid field {e}") from e
        if last_t is not None and t <= last_t:
            raise FormatError(f"frame {i}: timestamp {t} not increasing (last {last_t})")
        last_t = t
        out.append((t, pose))
    return out


# -- images --------------------------------------------------------------------


def save_image(path, values):
    """Write float values in [0, 1] as 8-bit PNG (grayscale or RGB)."""
    arr = np.asarray(values, dtype=np.float64)
    quant = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    if quant.ndim == 2:
        Image.fromarray(quant, mode="L").save(path)
    elif quant.ndim == 3 and quant.shape[2] == 3:
        Image.fromarray(quant, mode="RGB").save(path)
    else:
        raise ValueError(f"expected (H, W) or (H, W, 3) image, got {arr.shape}")


def encode_png(values) -> bytes:
    arr = np.clip(np.round(np.asarray(values) * 255.0), 0, 255).astype(np.uint8)
    mode = "L" if arr.ndim == 2 else ("RGB" if arr.shape[2] == 3 else "RGBA")
    buf = io.BytesIO()
    Image.fromarray(arr, mode=mode).save(buf, format="PNG")
    return buf.getvalue()


def load_image(path):
    """PNG -> float RGB (H, W, 3) in [0, 1], linear."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def load_mask(path):
    """PNG -> float (H, W) in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


# -- procedural test rig ---------------------------------------------------------

TUBEMAN_SHARPNESS = 50.0  # 1/m; softmax skinning falloff


def make_test_rig(joints=4, segments=16, radial=12, *, height=0.8, radius=0.07,
                  sharpness=TUBEMAN_SHARPNESS) -> GoMCanonical:
    """Watertight capsule tube along a joint chain ("tubeman").

    ``segments`` rings of ``radial`` vertices plus two cap vertices;
    skinning weights are a softmax over negative vertex-to-bone distances.
    Face attributes start at zero rotation, unit scale, mid-gray color.
    """
    if joints < 2:
        raise ValueError("need at least 2 joints")
    if segments < joints:
        raise ValueError("need at least as many segments as joints")
    if radial < 3:
        raise ValueError("need at least 3 vertices per ring")

    joint_y = np.linspace(0.0, height, joints)
    joint_pos = np.stack([np.zeros(joints), joint_y, np.zeros(joints)], axis=1)
    parents = np.arange(-1, joints - 1)
    rig = Rig(parents, np.tile(np.eye(3), (joints, 1, 1)), joint_pos,
              ["root"] + [f"spine_{i}" for i in range(1, joints)])

    ring_y = np.linspace(0.0, height, segments)
    theta = 2.0 * np.pi * np.arange(radial) / radial
    rings = np.stack(
        [
            np.repeat(ring_y, radial),
            np.tile(np.cos(theta), segments) * radius,
            np.tile(np.sin(theta), segments) * radius,
        ],
        axis=1,
    )[:, [1, 0, 2]]  # (segments*radial, 3) as x, y, z
    caps = np.array([[0.0, -0.6 * radius, 0.0], [0.0, height + 0.6 * radius, 0.0]])
    positions = np.concatenate([rings, caps], axis=0)

    faces = []
    for k in range(segments - 1):
        for i in range(radial):
            a = k * radial + i
            b = k * radial + (i + 1) % radial
            c = (k + 1) * radial + i
            d = (k + 1) * radial + (i + 1) % radial
            faces.append((a, b, c))
            faces.append((b, d, c))
    bottom, top = segments * radial, segments * radial + 1
    for i in range(radial):
        a, b = i, (i + 1) % radial
        faces.append((b, a, bottom))
        base = (segments - 1) * radial
        faces.append((base + a, base + b, top))
    faces = np.asarray(faces, dtype=np.int64)

    # Distance from each vertex to each bone segment (parent -> joint);
    # the root contributes its joint position as a point bone.
    dists = np.empty((len(positions), joints))
    for j in range(joints):
        if parents[j] == -1:
            dists[:, j] = np.linalg.norm(positions - joint_pos[j], axis=1)
        else:
            a, b = joint_pos[parents[j]], joint_pos[j]
            ab = b - a
            tt = np.clip((positions - a) @ ab / (ab @ ab), 0.0, 1.0)
            closest = a + tt[:, None] * ab
            dists[:, j] = np.linalg.norm(positions - closest, axis=1)
    logits = -sharpness * dists
    logits -= logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=1, keepdims=True)

    f = len(faces)
    return GoMCanonical(
        positions=positions,
        weights=weights,
        face_indices=faces,
        face_rotations=np.zeros((f, 3)),
        face_log_scales=np.zeros((f, 3)),
        face_color_logits=np.zeros((f, 3)),
        rig=rig,
    )


def frame_camera(avatar: GoMCanonical, width=256, height=256, azimuth_deg=0.0,
                 elevation_deg=0.0, distance_scale=2.6) -> Camera:
    """Look-at camera framing the whole avatar from an orbit position."""
    center = 0.5 * (avatar.positions.min(axis=0) + avatar.positions.max(axis=0))
    radius = float(np.linalg.norm(avatar.positions - center, axis=1).max())
    dist = max(distance_scale * radius, 0.3)
    az, el = np.deg2rad(azimuth_deg), np.deg2rad(elevation_deg)
    eye = center + dist * np.array(
        [np.sin(az) * np.cos(el), np.sin(el), np.cos(az) * np.cos(el)]
    )
    return Camera.look_at(eye, center, width=width, height=height)
