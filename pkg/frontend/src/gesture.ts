/**
 * Click-to-point gesture: unproject a screen click through a pinhole
 * camera into a world ray. The server does the actual raycast; the
 * console only ships the ray.
 */

export type Vec3 = [number, number, number];

export interface CameraModel {
  position: Vec3;
  forward: Vec3; // unit, view direction
  up: Vec3; // unit, roughly orthogonal to forward
  fovYDeg: number;
  aspect: number; // width / height
}

export interface GestureRay {
  origin: Vec3;
  direction: Vec3; // unit
}

function cross(a: Vec3, b: Vec3): Vec3 {
  return [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
}

function normalize(v: Vec3): Vec3 {
  const n = Math.hypot(v[0], v[1], v[2]);
  if (n === 0) throw new Error("zero-length vector");
  return [v[0] / n, v[1] / n, v[2] / n];
}

/**
 * Pixel coordinates have (0, 0) at the top-left; the returned direction
 * is unit-norm. A click at the exact screen center gives the camera's
 * forward direction.
 */
export function clickToRay(
  px: number,
  py: number,
  width: number,
  height: number,
  cam: CameraModel,
): GestureRay {
  const ndcX = (2 * px) / width - 1;
  const ndcY = 1 - (2 * py) / height;
  const f = normalize(cam.forward);
  const right = normalize(cross(f, cam.up));
  const up = cross(right, f);
  const tanHalf = Math.tan((cam.fovYDeg * Math.PI) / 360);
  const direction = normalize([
    f[0] + ndcX * tanHalf * cam.aspect * right[0] + ndcY * tanHalf * up[0],
    f[1] + ndcX * tanHalf * cam.aspect * right[1] + ndcY * tanHalf * up[1],
    f[2] + ndcX * tanHalf * cam.aspect * right[2] + ndcY * tanHalf * up[2],
  ]);
  return { origin: [...cam.position], direction };
}
