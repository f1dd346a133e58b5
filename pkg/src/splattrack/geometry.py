"""Camera models, SE(3) poses and pinhole projection.

Conventions (used consistently everywhere):
  * poses are camera-to-world: X_world = R @ X_cam + t
  * right-handed coordinates, +z points into the scene
  * quaternions are (w, x, y, z), unit norm, double cover accepted
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError, BehindCameraError


@dataclass(frozen=True)
class Quaternion:
    """Unit quaternion (w, x, y, z) representing a rotation."""

    w: float
    x: float
    y: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z], dtype=np.float64)

    @staticmethod
    def from_array(q: np.ndarray) -> "Quaternion":
        return Quaternion(float(q[0]), float(q[1]), float(q[2]), float(q[3]))

    @staticmethod
    def identity() -> "Quaternion":
        return Quaternion(1.0, 0.0, 0.0, 0.0)

    def norm(self) -> float:
        return float(np.linalg.norm(self.as_array()))

    def normalized(self) -> "Quaternion":
        n = self.norm()
        if n < 1e-15:
            raise InvalidInputError("cannot normalize zero-norm quaternion")
        return Quaternion.from_array(self.as_array() / n)

    def conjugate(self) -> "Quaternion":
        return Quaternion(self.w, -self.x, -self.y, -self.z)

    def __mul__(self, other: "Quaternion") -> "Quaternion":
        w1, x1, y1, z1 = self.w, self.x, self.y, self.z
        w2, x2, y2, z2 = other.w, other.x, other.y, other.z
        return Quaternion(
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        )

    def rotate(self, v: np.ndarray) -> np.ndarray:
        return quat_to_matrix(self) @ np.asarray(v, dtype=np.float64)

    @staticmethod
    def from_axis_angle(axis: np.ndarray, angle_rad: float) -> "Quaternion":
        axis = np.asarray(axis, dtype=np.float64)
        n = np.linalg.norm(axis)
        if n < 1e-15:
            return Quaternion.identity()
        axis = axis / n
        half = 0.5 * angle_rad
        s = np.sin(half)
        return Quaternion(float(np.cos(half)), *(s * axis))

    def angle_deg(self) -> float:
        """Rotation angle of this quaternion in degrees (always in [0, 180])."""
        q = self.normalized()
        w = min(1.0, abs(q.w))
        return float(np.degrees(2.0 * np.arccos(w)))


def quat_to_matrix(q: Quaternion) -> np.ndarray:
    """3x3 rotation matrix of ``q`` (input is normalized internally)."""
    q = q.normalized()
    w, x, y, z = q.w, q.x, q.y, q.z
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ],
        dtype=np.float64,
    )


def matrix_to_quat(m: np.ndarray) -> Quaternion:
    """Inverse of :func:`quat_to_matrix` (Shepperd's method, branch on trace)."""
    m = np.asarray(m, dtype=np.float64)
    t = np.trace(m)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        w = 0.25 * s
        x = (m[2, 1] - m[1, 2]) / s
        y = (m[0, 2] - m[2, 0]) / s
        z = (m[1, 0] - m[0, 1]) / s
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        w = (m[2, 1] - m[1, 2]) / s
        x = 0.25 * s
        y = (m[0, 1] + m[1, 0]) / s
        z = (m[0, 2] + m[2, 0]) / s
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        w = (m[0, 2] - m[2, 0]) / s
        x = (m[0, 1] + m[1, 0]) / s
        y = 0.25 * s
        z = (m[1, 2] + m[2, 1]) / s
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        w = (m[1, 0] - m[0, 1]) / s
        x = (m[0, 2] + m[2, 0]) / s
        y = (m[1, 2] + m[2, 1]) / s
        z = 0.25 * s
    return Quaternion(w, x, y, z).normalized()


@dataclass(frozen=True)
class CameraPose:
    """Camera-to-world rigid transform: rotation (unit quaternion) + translation."""

    rotation: Quaternion = field(default_factory=Quaternion.identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(
            self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3)
        )

    @staticmethod
    def identity() -> "CameraPose":
        return CameraPose(Quaternion.identity(), np.zeros(3))

    def as_matrix(self) -> np.ndarray:
        """4x4 homogeneous camera-to-world matrix."""
        m = np.eye(4)
        m[:3, :3] = quat_to_matrix(self.rotation)
        m[:3, 3] = self.translation
        return m

    @staticmethod
    def from_matrix(m: np.ndarray) -> "CameraPose":
        m = np.asarray(m, dtype=np.float64)
        return CameraPose(matrix_to_quat(m[:3, :3]), m[:3, 3].copy())

    def apply(self, point_cam: np.ndarray) -> np.ndarray:
        """Map a camera-space point to world space."""
        return quat_to_matrix(self.rotation) @ np.asarray(point_cam, float) + self.translation


# A relative transform is structurally identical to a pose: it maps the next
# camera's frame into the current one (T_i = P_i^-1 P_{i+1}).
RelativeTransform = CameraPose


def compose(a: CameraPose, b: CameraPose) -> CameraPose:
    """Rigid composition a after b: (a o b).apply(x) == a.apply(b.apply(x))."""
    rot = (a.rotation * b.rotation).normalized()
    trans = quat_to_matrix(a.rotation) @ b.translation + a.translation
    return CameraPose(rot, trans)


def inverse(p: CameraPose) -> CameraPose:
    r_inv = p.rotation.conjugate().normalized()
    return CameraPose(r_inv, -(quat_to_matrix(r_inv) @ p.translation))


def relative_pose(p_i: CameraPose, p_next: CameraPose) -> RelativeTransform:
    """Transform T with compose(p_i, T) == p_next."""
    return compose(inverse(p_i), p_next)


def pose_distance(a: CameraPose, b: CameraPose) -> float:
    """Scalar pose discrepancy: rotation angle (rad) + translation distance."""
    rel = relative_pose(a, b)
    return float(np.radians(rel.rotation.angle_deg()) + np.linalg.norm(rel.translation))


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics; focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidInputError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise InvalidInputError("principal point must lie inside the image")

    def as_matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1]], dtype=np.float64
        )

    @staticmethod
    def simple(size: int, focal: float | None = None) -> "Intrinsics":
        """Square image with centered principal point, default focal = size."""
        f = float(size) if focal is None else float(focal)
        c = (size - 1) / 2.0
        return Intrinsics(fx=f, fy=f, cx=c, cy=c, width=size, height=size)


def project(K: Intrinsics, point_cam: np.ndarray) -> np.ndarray:
    """Pinhole projection of a camera-space point (z must be > 0)."""
    p = np.asarray(point_cam, dtype=np.float64)
    if p[2] <= 0:
        raise BehindCameraError(f"point has non-positive depth z={p[2]}")
    return np.array([K.fx * p[0] / p[2] + K.cx, K.fy * p[1] / p[2] + K.cy])


def unproject(K: Intrinsics, pixel: np.ndarray, depth: float) -> np.ndarray:
    """Lift a pixel at the given depth back to a camera-space point."""
    if depth <= 0:
        raise InvalidInputError(f"depth must be positive, got {depth}")
    u, v = float(pixel[0]), float(pixel[1])
    return np.array(
        [(u - K.cx) * depth / K.fx, (v - K.cy) * depth / K.fy, depth], dtype=np.float64
    )


def random_unit_quaternion(rng: np.random.Generator) -> Quaternion:
    q = rng.normal(size=4)
    return Quaternion.from_array(q / np.linalg.norm(q))


class Trajectory:
    """Ordered list of (frame_index, CameraPose) with strictly increasing indices."""

    def __init__(self, entries: list[tuple[int, CameraPose]] | None = None):
        self.entries: list[tuple[int, CameraPose]] = list(entries or [])
        idx = [i for i, _ in self.entries]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise InvalidInputError("trajectory frame indices must be strictly increasing")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def append(self, frame_index: int, pose: CameraPose) -> None:
        if self.entries and frame_index <= self.entries[-1][0]:
            raise InvalidInputError("trajectory frame indices must be strictly increasing")
        self.entries.append((frame_index, pose))

    def poses(self) -> list[CameraPose]:
        return [p for _, p in self.entries]

    def positions(self) -> np.ndarray:
        return np.array([p.translation for _, p in self.entries]).reshape(-1, 3)

    def save(self, path: str | Path) -> None:
        """One pose per line: ``frame_index tx ty tz qx qy qz qw`` (TUM ordering)."""
        lines = []
        for idx, pose in self.entries:
            t = pose.translation
            q = pose.rotation.normalized()
            vals = [t[0], t[1], t[2], q.x, q.y, q.z, q.w]
            lines.append(" ".join([str(idx)] + [repr(float(v)) for v in vals]))
        Path(path).write_text("\n".join(lines) + "\n")

    @staticmethod
    def load(path: str | Path) -> "Trajectory":
        traj = Trajectory()
        for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise InvalidInputError(
                    f"{path}:{lineno}: expected 8 fields, got {len(parts)}"
                )
            idx = int(parts[0])
            tx, ty, tz, qx, qy, qz, qw = (float(v) for v in parts[1:])
            traj.append(idx, CameraPose(Quaternion(qw, qx, qy, qz).normalized(), [tx, ty, tz]))
        return traj
