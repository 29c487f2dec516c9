/**
 * Client-side UI state and the outbound message coalescer.
 *
 * Dragging a slider or the orbit control only marks state dirty; one
 * animation tick flushes at most one camera message and one pose message,
 * however many mutations happened in between.
 */

import { orbitCamera, type OrbitParams } from "./orbit.js";
import {
  cameraMessage,
  poseMessage,
  type CameraParams,
  type RenderMode,
  type RigDescription,
  type StatsReply,
} from "./protocol.js";

export interface PoseKeyframe {
  time: number;
  jointRotations: number[][];
}

export interface PlaybackState {
  keyframes: PoseKeyframe[];
  time: number;
  playing: boolean;
}

export interface UiState {
  orbit: OrbitParams;
  jointRotations: number[][]; // axis-angle per joint
  mode: RenderMode;
  playback: PlaybackState;
  connected: boolean;
  lastStats: StatsReply | null;
  droppedFrames: number;
}

export function initialUiState(jointCount: number): UiState {
  return {
    orbit: { azimuthDeg: 0, elevationDeg: 10, distance: 1.2, target: [0, 0.4, 0] },
    jointRotations: Array.from({ length: jointCount }, () => [0, 0, 0]),
    mode: "final",
    playback: { keyframes: [], time: 0, playing: false },
    connected: false,
    lastStats: null,
    droppedFrames: 0,
  };
}

export function clampOrbit(orbit: OrbitParams): OrbitParams {
  return {
    ...orbit,
    distance: Math.max(orbit.distance, 1e-3),
    elevationDeg: Math.min(89.9, Math.max(-89.9, orbit.elevationDeg)),
  };
}

export interface JointControlSpec {
  index: number;
  label: string;
  parent: number;
}

export function jointControls(rig: RigDescription): JointControlSpec[] {
  return rig.names.map((label, index) => ({
    index,
    label,
    parent: rig.parents[index],
  }));
}

/** Piecewise-linear pose interpolation in axis-angle, per joint. */
export function samplePose(keyframes: PoseKeyframe[], time: number): number[][] | null {
  if (keyframes.length === 0) return null;
  if (time <= keyframes[0].time) return keyframes[0].jointRotations;
  const last = keyframes[keyframes.length - 1];
  if (time >= last.time) return last.jointRotations;
  for (let i = 0; i + 1 < keyframes.length; i++) {
    const a = keyframes[i];
    const b = keyframes[i + 1];
    if (time >= a.time && time <= b.time) {
      const t = (time - a.time) / (b.time - a.time);
      return a.jointRotations.map((rot, j) =>
        rot.map((v, k) => v + t * (b.jointRotations[j][k] - v)),
      );
    }
  }
  return last.jointRotations;
}

export class MessageCoalescer {
  private cameraDirty = false;
  private poseDirty = false;

  markCamera(): void {
    this.cameraDirty = true;
  }

  markPose(): void {
    this.poseDirty = true;
  }

  /** At most one camera and one pose message per tick; nothing when clean
   * or disconnected. */
  flush(state: UiState, baseCamera: CameraParams | null): string[] {
    if (!state.connected) return [];
    const out: string[] = [];
    if (this.cameraDirty && baseCamera) {
      out.push(cameraMessage(orbitCamera(clampOrbit(state.orbit), baseCamera)));
      this.cameraDirty = false;
    }
    if (this.poseDirty) {
      out.push(poseMessage(state.jointRotations));
      this.poseDirty = false;
    }
    return out;
  }
}
