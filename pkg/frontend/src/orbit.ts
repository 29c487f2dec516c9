/**
 * Orbit camera: spherical coordinates around a target point, converted to
 * the service's world-to-camera extrinsics (+z forward, +y image down).
 * The construction mirrors the renderer's look-at so steering matches what
 * the server draws.
 */

import type { CameraParams } from "./protocol.js";

export interface OrbitParams {
  azimuthDeg: number;
  elevationDeg: number;
  distance: number;
  target: [number, number, number];
}

type Vec3 = [number, number, number];

const sub = (a: Vec3, b: Vec3): Vec3 => [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
const scale = (a: Vec3, s: number): Vec3 => [a[0] * s, a[1] * s, a[2] * s];
const dot = (a: Vec3, b: Vec3) => a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
const cross = (a: Vec3, b: Vec3): Vec3 => [
  a[1] * b[2] - a[2] * b[1],
  a[2] * b[0] - a[0] * b[2],
  a[0] * b[1] - a[1] * b[0],
];
const norm = (a: Vec3) => Math.hypot(a[0], a[1], a[2]);
const normalize = (a: Vec3): Vec3 => scale(a, 1 / norm(a));

export function orbitEye(orbit: OrbitParams): Vec3 {
  const az = (orbit.azimuthDeg * Math.PI) / 180;
  const el = (orbit.elevationDeg * Math.PI) / 180;
  const d = orbit.distance;
  return [
    orbit.target[0] + d * Math.sin(az) * Math.cos(el),
    orbit.target[1] + d * Math.sin(el),
    orbit.target[2] + d * Math.cos(az) * Math.cos(el),
  ];
}

export function lookAtExtrinsics(
  eye: Vec3,
  target: Vec3,
  up: Vec3 = [0, 1, 0],
): { rotation: number[][]; translation: number[] } {
  const fwd = normalize(sub(target, eye));
  let down = sub(scale(fwd, dot(up, fwd)), up);
  if (norm(down) < 1e-12) {
    const alt: Vec3 = [0, 0, 1];
    down = sub(scale(fwd, dot(alt, fwd)), alt);
  }
  down = normalize(down);
  const right = cross(down, fwd);
  const rotation = [right, down, fwd].map((r) => [...r]);
  const translation = [-dot(right, eye), -dot(down, eye), -dot(fwd, eye)];
  return { rotation, translation };
}

/** Extrinsics for the orbit pose, keeping the base camera's intrinsics. */
export function orbitCamera(orbit: OrbitParams, base: CameraParams): CameraParams {
  const { rotation, translation } = lookAtExtrinsics(orbitEye(orbit), orbit.target);
  return { ...base, rotation, translation };
}
