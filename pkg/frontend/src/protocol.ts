/**
 * Wire protocol shared with the render service.
 *
 * Control messages are JSON text; frames are binary with a 16-byte header:
 * magic "GOMF", u32 width, u32 height, u32 format (0 raw RGBA8, 1 PNG),
 * all little-endian, followed by the payload.
 */

export const FORMAT_RAW_RGBA = 0;
export const FORMAT_PNG = 1;

export const RENDER_MODES = ["final", "albedo", "shading", "normal", "mask"] as const;
export type RenderMode = (typeof RENDER_MODES)[number];

export interface FrameMessage {
  width: number;
  height: number;
  format: number;
  payload: Uint8Array;
}

export interface CameraParams {
  fx: number;
  fy: number;
  cx: number;
  cy: number;
  width: number;
  height: number;
  rotation: number[][]; // 3x3 world -> camera
  translation: number[]; // length 3
}

export interface RigDescription {
  joint_count: number;
  names: string[];
  parents: number[];
  modes: string[];
  default_camera: CameraParams;
}

export interface StatsReply {
  fps: number;
  gaussian_count: number;
  last_render_ms: number;
  rendered_frames: number;
}

const MAGIC = [0x47, 0x4f, 0x4d, 0x46]; // "GOMF"

export function decodeFrame(data: ArrayBuffer): FrameMessage | null {
  if (data.byteLength < 16) return null;
  const bytes = new Uint8Array(data, 0, 4);
  for (let i = 0; i < 4; i++) {
    if (bytes[i] !== MAGIC[i]) return null;
  }
  const view = new DataView(data);
  const width = view.getUint32(4, true);
  const height = view.getUint32(8, true);
  const format = view.getUint32(12, true);
  return { width, height, format, payload: new Uint8Array(data, 16) };
}

export function helloMessage(): string {
  return JSON.stringify({ type: "hello" });
}

export function poseMessage(
  jointRotations: number[][],
  rootTranslation: [number, number, number] = [0, 0, 0],
): string {
  return JSON.stringify({
    type: "pose",
    joint_rotations: jointRotations,
    root_translation: rootTranslation,
  });
}

export function cameraMessage(cam: CameraParams): string {
  return JSON.stringify({ type: "camera", ...cam });
}

export function modeMessage(
  mode?: RenderMode,
  format?: "raw" | "png",
  background?: [number, number, number],
): string {
  const msg: Record<string, unknown> = { type: "mode" };
  if (mode !== undefined) msg.mode = mode;
  if (format !== undefined) msg.format = format;
  if (background !== undefined) msg.background = background;
  return JSON.stringify(msg);
}

export function statsRequest(): string {
  return JSON.stringify({ type: "stats_request" });
}
