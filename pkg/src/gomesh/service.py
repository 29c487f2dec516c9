"""Interactive render service over WebSocket.

Text control messages steer per-connection session state (pose, camera,
render mode, frame format); the server streams binary frames whenever the
state changes. Message handling never waits on rendering: a reader thread
mutates the state under a lock and bumps a version counter, while a render
thread always picks up the newest snapshot (intermediate states may be
skipped).

Frame wire format: 16-byte header = magic ``GOMF``, u32 width, u32 height,
u32 format code (0 raw RGBA8, 1 PNG), then the payload.
"""

from __future__ import annotations

import json
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np
from websockets.exceptions import ConnectionClosed
from websockets.sync.server import serve as _ws_serve

from . import assets
from .model import Pose
from .render import RENDER_MODES, mode_image, render
from .splat import Camera

FRAME_MAGIC = b"GOMF"
FORMAT_RAW_RGBA = 0
FORMAT_PNG = 1


@dataclass
class SessionState:
    pose: Pose
    camera: Camera
    mode: str = "final"
    background: tuple = (0.0, 0.0, 0.0)
    frame_format: int = FORMAT_PNG
    version: int = 1


@dataclass
class SessionStats:
    last_render_ms: float = 0.0
    rendered_frames: int = 0
    gaussian_count: int = 0
    recent_ms: list = field(default_factory=list)

    @property
    def fps(self):
        if not self.recent_ms:
            return 0.0
        return 1000.0 / (sum(self.recent_ms) / len(self.recent_ms))


def encode_frame(rgb, fmt):
    """Binary frame message from a float [0, 1] (H, W, 3) image."""
    h, w = rgb.shape[:2]
    header = FRAME_MAGIC + struct.pack("<III", w, h, fmt)
    if fmt == FORMAT_RAW_RGBA:
        quant = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
        rgba = np.concatenate(
            [quant, np.full((h, w, 1), 255, dtype=np.uint8)], axis=2
        )
        return header + rgba.tobytes()
    if fmt == FORMAT_PNG:
        return header + assets.encode_png(rgb)
    raise ValueError(f"unknown frame format {fmt}")


def decode_frame(message):
    """(width, height, format, payload) from a binary frame message."""
    if len(message) < 16 or message[:4] != FRAME_MAGIC:
        raise ValueError("bad frame magic")
    w, h, fmt = struct.unpack("<III", message[4:16])
    return w, h, fmt, message[16:]


class AvatarService:
    """Shared avatar + per-connection sessions."""

    def __init__(self, avatar, nets):
        self.avatar = avatar
        self.nets = nets
        self.default_camera = assets.frame_camera(avatar, 512, 512)

    # -- protocol ------------------------------------------------------------

    def rig_description(self):
        rig = self.avatar.rig
        cam = self.default_camera
        return {
            "type": "rig",
            "joint_count": rig.joint_count,
            "names": list(rig.names),
            "parents": [int(p) for p in rig.parents],
            "modes": list(RENDER_MODES),
            "default_camera": {
                "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
                "width": cam.width, "height": cam.height,
                "rotation": cam.rotation.tolist(),
                "translation": cam.translation.tolist(),
            },
        }

    def handle_connection(self, ws):
        state = SessionState(
            pose=Pose.identity(self.avatar.rig.joint_count),
            camera=self.default_camera,
        )
        stats = SessionStats()
        lock = threading.Lock()
        wake = threading.Event()
        stop = threading.Event()
        wake.set()  # render the initial state

        def render_loop():
            last_version = 0
            while not stop.is_set():
                if not wake.wait(timeout=0.25):
                    continue
                with lock:
                    if state.version == last_version:
                        wake.clear()
                        continue
                    last_version = state.version
                    pose = state.pose.copy()
                    cam = state.camera
                    mode = state.mode
                    fmt = state.frame_format
                    background = state.background
                t0 = time.perf_counter()
                out = render(self.avatar, pose, self.nets, cam)
                rgb = mode_image(out, mode, background)
                ms = (time.perf_counter() - t0) * 1000.0
                with lock:
                    stats.last_render_ms = ms
                    stats.rendered_frames += 1
                    stats.gaussian_count = out.gaussian_count
                    stats.recent_ms.append(ms)
                    del stats.recent_ms[:-10]
                try:
                    ws.send(encode_frame(rgb, fmt))
                except Exception:
                    stop.set()

        worker = threading.Thread(target=render_loop, daemon=True)
        worker.start()
        try:
            for message in ws:
                if isinstance(message, bytes):
                    ws.send(_error("bad_message", "binary messages are not accepted"))
                    continue
                reply = self._apply(message, state, stats, lock)
                if reply is not None:
                    ws.send(reply)
                wake.set()
        except ConnectionClosed:
            pass
        finally:
            stop.set()
            wake.set()
            worker.join(timeout=2.0)

    def _apply(self, message, state: SessionState, stats: SessionStats, lock):
        try:
            msg = json.loads(message)
            kind = msg.get("type")
        except (json.JSONDecodeError, AttributeError):
            return _error("bad_message", "message is not a JSON object")
        if kind == "hello":
            return json.dumps(self.rig_description())
        if kind == "stats_request":
            with lock:
                return json.dumps(
                    {
                        "type": "stats",
                        "fps": round(stats.fps, 2),
                        "gaussian_count": stats.gaussian_count,
                        "last_render_ms": round(stats.last_render_ms, 3),
                        "rendered_frames": stats.rendered_frames,
                    }
                )
        if kind == "pose":
            try:
                pose = assets.pose_from_dict(msg, self.avatar.rig.joint_count)
            except assets.FormatError as e:
                return _error("bad_pose", str(e))
            with lock:
                state.pose = pose
                state.version += 1
            return None
        if kind == "camera":
            try:
                cam = assets.camera_from_dict(msg)
            except (assets.FormatError, ValueError) as e:
                return _error("bad_camera", str(e))
            with lock:
                state.camera = cam
                state.version += 1
            return None
        if kind == "mode":
            mode = msg.get("mode")
            fmt = msg.get("format")
            if mode is not None and mode not in RENDER_MODES:
                return _error("bad_mode", f"mode must be one of {RENDER_MODES}")
            if fmt is not None and fmt not in ("raw", "png", FORMAT_RAW_RGBA, FORMAT_PNG):
                return _error("bad_mode", "format must be 'raw' or 'png'")
            with lock:
                if mode is not None:
                    state.mode = mode
                if fmt is not None:
                    state.frame_format = (
                        FORMAT_RAW_RGBA if fmt in ("raw", FORMAT_RAW_RGBA) else FORMAT_PNG
                    )
                if "background" in msg:
                    bg = msg["background"]
                    if (
                        not isinstance(bg, (list, tuple))
                        or len(bg) != 3
                        or not all(isinstance(v, (int, float)) for v in bg)
                    ):
                        return _error("bad_mode", "background must be [r, g, b]")
                    state.background = tuple(float(v) for v in bg)
                state.version += 1
            return None
        return _error("bad_message", f"unknown message type {kind!r}")


def _error(code, message):
    return json.dumps({"type": "error", "code": code, "message": message})


class SessionServer:
    """Owns the listening socket; use as a context manager in tests."""

    def __init__(self, avatar_path, host="127.0.0.1", port=8765):
        avatar, nets = assets.load_avatar(avatar_path)
        self.service = AvatarService(avatar, nets)
        try:
            self._server = _ws_serve(self.service.handle_connection, host, port)
        except OSError as e:
            raise OSError(f"failed to bind {host}:{port}: {e}") from e
        self.host = host
        self.port = self._server.socket.getsockname()[1]

    def serve_forever(self):
        self._server.serve_forever()

    def start_background(self):
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def shutdown(self):
        self._server.shutdown()

    def __enter__(self):
        return self.start_background()

    def __exit__(self, *exc):
        self.shutdown()


def serve_session(avatar_path, host="127.0.0.1", port=8765):
    """Run the service until interrupted."""
    server = SessionServer(avatar_path, host, port)
    print(f"serving {avatar_path} on ws://{server.host}:{server.port}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.shutdown()
    return 0
