/**
 * DOM application: connects to the render service, builds one 3-axis slider
 * row per joint from the rig handshake, steers the orbit camera with the
 * mouse, and blits incoming frames to the canvas.
 */

import { orbitCamera } from "./orbit.js";
import {
  decodeFrame,
  FORMAT_PNG,
  FORMAT_RAW_RGBA,
  helloMessage,
  modeMessage,
  RENDER_MODES,
  statsRequest,
  type CameraParams,
  type FrameMessage,
  type RenderMode,
  type RigDescription,
  type StatsReply,
} from "./protocol.js";
import {
  clampOrbit,
  initialUiState,
  jointControls,
  MessageCoalescer,
  samplePose,
  type UiState,
} from "./state.js";

const SLIDER_RANGE_DEG = 180;

export class ViewerApp {
  state: UiState = initialUiState(0);
  rig: RigDescription | null = null;
  baseCamera: CameraParams | null = null;
  private ws: WebSocket | null = null;
  private coalescer = new MessageCoalescer();
  private url = "";
  private lastPlaybackTick = 0;

  constructor(
    private canvas: HTMLCanvasElement,
    private jointPanel: HTMLElement,
    private banner: HTMLElement,
    private statsEl: HTMLElement,
    private modePanel: HTMLElement,
  ) {
    this.buildModeButtons();
    this.attachOrbitControls();
    requestAnimationFrame((t) => this.tick(t));
  }

  connect(url: string): void {
    this.url = url;
    this.showBanner(`connecting to ${url} ...`, false);
    const ws = new WebSocket(url);
    ws.binaryType = "arraybuffer";
    this.ws = ws;
    ws.onopen = () => {
      this.state.connected = true;
      this.hideBanner();
      ws.send(helloMessage());
      // restore previous steering after a reconnect
      this.coalescer.markCamera();
      this.coalescer.markPose();
      ws.send(modeMessage(this.state.mode, "raw"));
    };
    ws.onmessage = (ev) => this.onMessage(ev);
    ws.onclose = () => {
      this.state.connected = false;
      this.setControlsEnabled(false);
      this.showBanner("connection closed", true);
    };
    ws.onerror = () => {
      this.state.connected = false;
      this.setControlsEnabled(false);
      this.showBanner("connection failed", true);
    };
  }

  private onMessage(ev: MessageEvent): void {
    if (typeof ev.data === "string") {
      const msg = JSON.parse(ev.data);
      if (msg.type === "rig") {
        this.applyRig(msg as RigDescription);
      } else if (msg.type === "stats") {
        this.state.lastStats = msg as StatsReply;
        this.renderStats();
      } else if (msg.type === "error") {
        this.showBanner(`server error: ${msg.code}`, false);
      }
      return;
    }
    const frame = decodeFrame(ev.data as ArrayBuffer);
    if (frame === null) {
      this.state.droppedFrames += 1;
      this.renderStats();
      return;
    }
    void this.presentFrame(frame);
  }

  private applyRig(rig: RigDescription): void {
    this.rig = rig;
    this.baseCamera = rig.default_camera;
    const keepPose =
      this.state.jointRotations.length === rig.joint_count
        ? this.state.jointRotations
        : null;
    this.state = { ...initialUiState(rig.joint_count), connected: true };
    if (keepPose) this.state.jointRotations = keepPose;
    this.buildJointPanel(rig);
    this.setControlsEnabled(true);
    this.coalescer.markCamera();
    this.coalescer.markPose();
  }

  async presentFrame(frame: FrameMessage): Promise<void> {
    const ctx = this.canvas.getContext("2d");
    if (!ctx) return;
    if (this.canvas.width !== frame.width || this.canvas.height !== frame.height) {
      this.canvas.width = frame.width;
      this.canvas.height = frame.height;
    }
    if (frame.format === FORMAT_RAW_RGBA) {
      const img = new ImageData(
        new Uint8ClampedArray(frame.payload.buffer, frame.payload.byteOffset,
                              frame.width * frame.height * 4),
        frame.width,
        frame.height,
      );
      ctx.putImageData(img, 0, 0);
    } else if (frame.format === FORMAT_PNG) {
      const blob = new Blob([frame.payload.slice()], { type: "image/png" });
      const bitmap = await createImageBitmap(blob);
      ctx.drawImage(bitmap, 0, 0);
      bitmap.close();
    } else {
      this.state.droppedFrames += 1;
    }
    this.renderStats();
  }

  // -- controls ---------------------------------------------------------------

  private buildJointPanel(rig: RigDescription): void {
    this.jointPanel.replaceChildren();
    for (const spec of jointControls(rig)) {
      const row = document.createElement("div");
      row.className = "joint-row";
      const label = document.createElement("label");
      label.textContent = spec.label;
      row.appendChild(label);
      ["x", "y", "z"].forEach((axis, k) => {
        const slider = document.createElement("input");
        slider.type = "range";
        slider.min = String(-SLIDER_RANGE_DEG);
        slider.max = String(SLIDER_RANGE_DEG);
        slider.value = "0";
        slider.step = "1";
        slider.title = `${spec.label} ${axis}`;
        slider.addEventListener("input", () => {
          this.state.jointRotations[spec.index][k] =
            (Number(slider.value) * Math.PI) / 180;
          this.coalescer.markPose();
        });
        row.appendChild(slider);
      });
      this.jointPanel.appendChild(row);
    }
  }

  private buildModeButtons(): void {
    for (const mode of RENDER_MODES) {
      const btn = document.createElement("button");
      btn.textContent = mode;
      btn.addEventListener("click", () => {
        this.state.mode = mode as RenderMode;
        this.ws?.send(modeMessage(this.state.mode));
      });
      this.modePanel.appendChild(btn);
    }
  }

  private attachOrbitControls(): void {
    let dragging = false;
    let lastX = 0;
    let lastY = 0;
    this.canvas.addEventListener("mousedown", (e) => {
      dragging = true;
      lastX = e.clientX;
      lastY = e.clientY;
    });
    window.addEventListener("mouseup", () => {
      dragging = false;
    });
    window.addEventListener("mousemove", (e) => {
      if (!dragging) return;
      this.state.orbit.azimuthDeg -= (e.clientX - lastX) * 0.4;
      this.state.orbit.elevationDeg += (e.clientY - lastY) * 0.4;
      this.state.orbit = clampOrbit(this.state.orbit);
      lastX = e.clientX;
      lastY = e.clientY;
      this.coalescer.markCamera();
    });
    this.canvas.addEventListener("wheel", (e) => {
      e.preventDefault();
      this.state.orbit.distance *= Math.exp(e.deltaY * 0.001);
      this.state.orbit = clampOrbit(this.state.orbit);
      this.coalescer.markCamera();
    });
  }

  loadPoseSequence(text: string): void {
    const parsed = JSON.parse(text);
    const frames = (parsed.frames ?? []) as Array<{
      time: number;
      pose: { joint_rotations: number[][] };
    }>;
    this.state.playback = {
      keyframes: frames.map((f) => ({
        time: f.time,
        jointRotations: f.pose.joint_rotations,
      })),
      time: frames.length ? frames[0].time : 0,
      playing: frames.length > 0,
    };
  }

  private tick(t: number): void {
    const pb = this.state.playback;
    if (pb.playing && pb.keyframes.length) {
      const dt = this.lastPlaybackTick ? (t - this.lastPlaybackTick) / 1000 : 0;
      pb.time += dt;
      const end = pb.keyframes[pb.keyframes.length - 1].time;
      if (pb.time > end) pb.time = pb.keyframes[0].time; // loop
      const pose = samplePose(pb.keyframes, pb.time);
      if (pose) {
        this.state.jointRotations = pose.map((r) => [...r]);
        this.coalescer.markPose();
      }
    }
    this.lastPlaybackTick = t;
    if (this.ws && this.ws.readyState === WebSocket.OPEN) {
      for (const msg of this.coalescer.flush(this.state, this.baseCamera)) {
        this.ws.send(msg);
      }
    }
    requestAnimationFrame((next) => this.tick(next));
  }

  requestStats(): void {
    this.ws?.send(statsRequest());
  }

  private renderStats(): void {
    const s = this.state.lastStats;
    const parts = [
      s ? `fps ${s.fps}` : "fps -",
      s ? `render ${s.last_render_ms} ms` : "",
      s ? `${s.gaussian_count} gaussians` : "",
      this.state.droppedFrames ? `${this.state.droppedFrames} dropped` : "",
    ].filter(Boolean);
    this.statsEl.textContent = parts.join(" | ");
  }

  private setControlsEnabled(enabled: boolean): void {
    this.jointPanel
      .querySelectorAll("input")
      .forEach((el) => ((el as HTMLInputElement).disabled = !enabled));
  }

  private showBanner(text: string, retry: boolean): void {
    this.banner.replaceChildren();
    this.banner.textContent = text;
    if (retry) {
      const btn = document.createElement("button");
      btn.textContent = "reconnect";
      btn.addEventListener("click", () => this.connect(this.url));
      this.banner.appendChild(btn);
    }
    this.banner.style.display = "block";
  }

  private hideBanner(): void {
    this.banner.style.display = "none";
  }
}
