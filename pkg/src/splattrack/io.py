"""Dataset layout, interchange file formats, and synthetic scene generation.

A sequence lives in a directory:

    meta.txt            flat key = value (intrinsics, frame count, ...)
    frames/000.png      8-bit RGB images
    depth/000.dmap      per-pixel depth, <= 0 marks invalid
    features/000.fmap   dense per-pixel feature grids
    gt_trajectory.txt   optional ground-truth poses (TUM field order)
    gt_gaussians.gspt   optional ground-truth Gaussian set

Synthetic scenes render a random Gaussian set along a parametric trajectory;
their feature maps are deterministic functions of the 3D surface points, so
true correspondences carry matching feature vectors across views.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError, InvalidInputError
from .geometry import (
    CameraPose,
    Intrinsics,
    Quaternion,
    Trajectory,
    matrix_to_quat,
    quat_to_matrix,
)
from .losses import FeatureMap
from .splat import GaussianSet, render, save_gaussians

FMAP_MAGIC = b"FMAP"
FMAP_VERSION = 1
DMAP_MAGIC = b"DMAP"

TRAJECTORIES = ("orbit", "dolly", "random-walk")
STRUCTURES = ("cloud", "wall")


# --------------------------------------------------------------------------
# file formats


def save_feature_map(fmap: FeatureMap, path: str | Path) -> None:
    """FMAP binary: magic, version, H, W, C (u32 LE), flag u8, then f32 data."""
    h, w, c = fmap.data.shape
    with open(path, "wb") as fh:
        fh.write(FMAP_MAGIC)
        fh.write(struct.pack("<IIIIB", FMAP_VERSION, h, w, c, 1 if fmap.normalized else 0))
        fh.write(np.ascontiguousarray(fmap.data, dtype="<f4").tobytes())


def load_feature_map(path: str | Path) -> FeatureMap:
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != FMAP_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}", offset=0)
    if len(blob) < 21:
        raise FormatError(f"{path}: truncated header", offset=len(blob))
    version, h, w, c, flag = struct.unpack("<IIIIB", blob[4:21])
    if version != FMAP_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    if flag not in (0, 1):
        raise FormatError(f"{path}: bad normalized flag {flag}", offset=20)
    expected = 21 + h * w * c * 4
    if len(blob) != expected:
        raise FormatError(
            f"{path}: expected {expected} bytes for {h}x{w}x{c}, got {len(blob)}",
            offset=min(len(blob), expected),
        )
    data = np.frombuffer(blob, dtype="<f4", offset=21).reshape(h, w, c).astype(np.float64)
    return FeatureMap(data=data, normalized=bool(flag))


def save_depth_map(depth: np.ndarray, path: str | Path) -> None:
    """DMAP binary: magic, H, W (u32 LE), then H*W f32; <= 0 marks invalid."""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise InvalidInputError(f"depth must be 2-D, got shape {depth.shape}")
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(DMAP_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(depth.astype("<f4").tobytes())


def load_depth_map(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != DMAP_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}", offset=0)
    if len(blob) < 12:
        raise FormatError(f"{path}: truncated header", offset=len(blob))
    h, w = struct.unpack("<II", blob[4:12])
    expected = 12 + h * w * 4
    if len(blob) != expected:
        raise FormatError(
            f"{path}: expected {expected} bytes for {h}x{w}, got {len(blob)}",
            offset=min(len(blob), expected),
        )
    return np.frombuffer(blob, dtype="<f4", offset=12).reshape(h, w).astype(np.float64)


def save_image(image: np.ndarray, path: str | Path) -> None:
    """Write an (H, W, 3) float image in [0, 1] as 8-bit RGB PNG."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InvalidInputError(f"image must be (H, W, 3), got shape {arr.shape}")
    u8 = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8, mode="RGB").save(path, format="PNG")


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    """Flat ``key = value`` text; '#' comments; duplicate keys are errors."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidInputError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise InvalidInputError(f"{source}:{lineno}: empty key")
        if key in out:
            raise InvalidInputError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_kv(path: str | Path) -> dict[str, str]:
    return parse_kv(Path(path).read_text(), source=str(path))


def save_kv(mapping: dict[str, str], path: str | Path) -> None:
    lines = [f"{k} = {v}" for k, v in mapping.items()]
    Path(path).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# sequence dataset


@dataclass(frozen=True)
class FrameRecord:
    index: int
    image_path: Path
    depth_path: Path | None = None
    feature_path: Path | None = None
    gt_pose: CameraPose | None = None


@dataclass
class SequenceDataset:
    """Ordered frames with shared intrinsics; arrays load lazily from disk."""

    root: Path
    frames: list[FrameRecord]
    intrinsics: Intrinsics
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.frames) < 2:
            raise InvalidInputError(f"need at least 2 frames, got {len(self.frames)}")
        if self.intrinsics.width % 2 or self.intrinsics.height % 2:
            raise InvalidInputError("image dimensions must be even")

    def __len__(self) -> int:
        return len(self.frames)

    def image(self, i: int) -> np.ndarray:
        arr = load_image(self.frames[i].image_path)
        h, w = arr.shape[:2]
        if (w, h) != (self.intrinsics.width, self.intrinsics.height):
            raise InvalidInputError(
                f"frame {i} is {w}x{h}, expected "
                f"{self.intrinsics.width}x{self.intrinsics.height}"
            )
        return arr

    def depth(self, i: int) -> np.ndarray:
        path = self.frames[i].depth_path
        if path is None:
            raise InvalidInputError(f"frame {i} has no depth map")
        return load_depth_map(path)

    def features(self, i: int) -> FeatureMap:
        path = self.frames[i].feature_path
        if path is None:
            raise InvalidInputError(f"frame {i} has no feature map")
        return load_feature_map(path)

    def gt_trajectory(self) -> Trajectory:
        traj = Trajectory()
        for fr in self.frames:
            if fr.gt_pose is None:
                raise InvalidInputError(f"frame {fr.index} has no ground-truth pose")
            traj.append(fr.index, fr.gt_pose)
        return traj

    def subset(self, indices: list[int]) -> "SequenceDataset":
        """New dataset view over a subset of frames (indices into this list)."""
        return SequenceDataset(
            self.root, [self.frames[i] for i in indices], self.intrinsics, dict(self.metadata)
        )


def load_sequence(root: str | Path) -> SequenceDataset:
    root = Path(root)
    meta_path = root / "meta.txt"
    if not meta_path.exists():
        raise InvalidInputError(f"{root}: not a sequence directory (missing meta.txt)")
    meta = load_kv(meta_path)
    try:
        K = Intrinsics(
            fx=float(meta["fx"]),
            fy=float(meta["fy"]),
            cx=float(meta["cx"]),
            cy=float(meta["cy"]),
            width=int(meta["width"]),
            height=int(meta["height"]),
        )
        n = int(meta["frames"])
    except KeyError as exc:
        raise InvalidInputError(f"{meta_path}: missing key {exc}") from exc

    gt: dict[int, CameraPose] = {}
    gt_path = root / "gt_trajectory.txt"
    if gt_path.exists():
        gt = {idx: pose for idx, pose in Trajectory.load(gt_path)}

    frames = []
    for i in range(n):
        image_path = root / "frames" / f"{i:03d}.png"
        if not image_path.exists():
            raise InvalidInputError(f"{root}: missing frame image {image_path.name}")
        depth_path = root / "depth" / f"{i:03d}.dmap"
        feature_path = root / "features" / f"{i:03d}.fmap"
        frames.append(
            FrameRecord(
                index=i,
                image_path=image_path,
                depth_path=depth_path if depth_path.exists() else None,
                feature_path=feature_path if feature_path.exists() else None,
                gt_pose=gt.get(i),
            )
        )
    return SequenceDataset(root=root, frames=frames, intrinsics=K, metadata=meta)


# --------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class SyntheticSceneSpec:
    """Recipe for a rendered scene with known poses, depth, and features.

    ``structure`` picks the 3D layout: "cloud" scatters Gaussians in a ball
    (depth maps come from the renderer's expected depth), "wall" lays them on
    a plane whose per-pixel ray intersection gives analytically exact depth.

    The structure sits at the origin and is scaled to the camera distance,
    which the orbit trajectory fixes through its step sizes; for dolly and
    random-walk, ``scene_distance`` is the closest approach allowed by the
    translation budget.
    """

    num_gaussians: int = 300
    trajectory: str = "orbit"
    rotation_step_deg: float = 8.0
    translation_step: float = 0.28
    image_size: int = 64
    feature_channels: int = 8
    seed: int = 0
    num_frames: int = 10
    structure: str = "cloud"
    focal: float | None = None
    feature_amplitude: float = 0.05
    scene_distance: float = 2.0

    def __post_init__(self):
        if self.image_size % 2:
            raise InvalidInputError(f"image size must be even, got {self.image_size}")
        if self.rotation_step_deg < 0:
            raise InvalidInputError("rotation step must be >= 0")
        if self.trajectory not in TRAJECTORIES:
            raise InvalidInputError(
                f"trajectory must be one of {TRAJECTORIES}, got {self.trajectory!r}"
            )
        if self.structure not in STRUCTURES:
            raise InvalidInputError(
                f"structure must be one of {STRUCTURES}, got {self.structure!r}"
            )
        if self.num_frames < 2:
            raise InvalidInputError("need at least 2 frames")
        if self.num_gaussians < 1:
            raise InvalidInputError("need at least one Gaussian")

    def intrinsics(self) -> Intrinsics:
        focal = 1.1 * self.image_size if self.focal is None else self.focal
        return Intrinsics.simple(self.image_size, focal)


def _trajectory_poses(
    spec: SyntheticSceneSpec, rng: np.random.Generator
) -> tuple[list[CameraPose], float]:
    """Camera poses plus the distance the structure should be scaled to.

    The scale is the orbit radius (fixed by the step sizes) for orbits, and
    the closest approach to the origin for the other trajectories, so the
    camera never enters the structure regardless of step sizes.
    """
    theta = np.deg2rad(spec.rotation_step_deg)
    travel = (spec.num_frames - 1) * spec.translation_step
    poses = []
    if spec.trajectory == "orbit":
        # Camera circles the origin in the x-z plane, always looking at it, so
        # each step is exactly a rotation by theta about +y.
        if theta > 0 and spec.translation_step > 0:
            radius = spec.translation_step / (2.0 * np.sin(theta / 2.0))
        else:
            radius = spec.scene_distance
        for k in range(spec.num_frames):
            q = Quaternion.from_axis_angle(np.array([0.0, 1.0, 0.0]), k * theta)
            center = -q.rotate(np.array([0.0, 0.0, radius]))
            poses.append(CameraPose(q, center))
        return poses, float(radius)
    if spec.trajectory == "dolly":
        # Straight push toward the scene, ending at scene_distance; any
        # rotation budget becomes roll.
        start = spec.scene_distance + travel
        for k in range(spec.num_frames):
            q = Quaternion.from_axis_angle(np.array([0.0, 0.0, 1.0]), k * theta)
            center = np.array([0.0, 0.0, -start + k * spec.translation_step])
            poses.append(CameraPose(q, center))
        return poses, spec.scene_distance
    # random-walk: start far enough back that no walk can reach the origin.
    pose = CameraPose(Quaternion.identity(), np.array([0.0, 0.0, -(spec.scene_distance + travel)]))
    poses.append(pose)
    for _ in range(spec.num_frames - 1):
        axis = rng.normal(size=3)
        dq = Quaternion.from_axis_angle(axis, theta)
        step = rng.normal(size=3)
        norm = np.linalg.norm(step)
        step = step / norm * spec.translation_step if norm > 0 else step * 0.0
        rot = (pose.rotation * dq).normalized()
        pose = CameraPose(rot, pose.translation + step)
        poses.append(pose)
    return poses, spec.scene_distance


def _cloud_gaussians(
    spec: SyntheticSceneSpec, rng: np.random.Generator, distance: float
) -> GaussianSet:
    n = spec.num_gaussians
    ball_radius = 0.45 * distance
    # Uniform in a ball via normalized normals + cubed-root radius.
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = ball_radius * rng.uniform(0.0, 1.0, size=n) ** (1.0 / 3.0)
    centers = dirs * radii[:, None]

    base = ball_radius * 1.1 / max(n, 8) ** (1.0 / 3.0)
    scales = base * rng.uniform(0.5, 1.5, size=(n, 1)) * rng.uniform(0.7, 1.3, size=(n, 3))
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    logits = rng.uniform(0.0, 2.0, size=n)
    colors = rng.uniform(0.05, 0.95, size=(n, 3))
    return GaussianSet(centers, scales, quats, logits, colors)


def _wall_frame(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unit normal (slightly tilted off -z) and an orthonormal in-plane basis."""
    normal = np.array([rng.uniform(-0.04, 0.04), rng.uniform(-0.04, 0.04), -1.0])
    normal /= np.linalg.norm(normal)
    e1 = np.cross(np.array([0.0, 1.0, 0.0]), normal)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(normal, e1)
    return normal, e1, e2


def _wall_gaussians(
    spec: SyntheticSceneSpec,
    rng: np.random.Generator,
    e1: np.ndarray,
    e2: np.ndarray,
    normal: np.ndarray,
    half_extent: float,
) -> GaussianSet:
    n = spec.num_gaussians
    ab = rng.uniform(-half_extent, half_extent, size=(n, 2))
    centers = ab[:, :1] * e1 + ab[:, 1:2] * e2

    in_plane = 2.2 * half_extent / np.sqrt(n)
    scales = np.column_stack(
        [
            in_plane * rng.uniform(0.8, 1.2, size=n),
            in_plane * rng.uniform(0.8, 1.2, size=n),
            np.full(n, 1e-3 * half_extent),
        ]
    )
    # Rotation taking the local z-axis onto the wall normal.
    basis = np.column_stack([e1, e2, normal])
    q_plane = matrix_to_quat(basis)
    quats = np.tile(q_plane.as_array(), (n, 1))

    waves = rng.uniform(1.0, 3.0, size=(3, 2))
    phases = rng.uniform(0.0, 2 * np.pi, size=3)
    colors = 0.5 + 0.4 * np.cos(ab @ waves.T / half_extent * np.pi + phases)
    logits = np.full(n, 3.0)
    return GaussianSet(centers, scales, quats, logits, np.clip(colors, 0.0, 1.0))


def _wall_depth(
    K: Intrinsics, pose: CameraPose, normal: np.ndarray, half_extent: float,
    e1: np.ndarray, e2: np.ndarray,
) -> np.ndarray:
    """Exact per-pixel ray/plane intersection depth (0 where off the wall)."""
    h, w = K.height, K.width
    us, vs = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    dirs_cam = np.stack(
        [(us - K.cx) / K.fx, (vs - K.cy) / K.fy, np.ones_like(us)], axis=-1
    )
    rot = quat_to_matrix(pose.rotation)
    dirs_world = dirs_cam @ rot.T
    denom = dirs_world @ normal
    num = -(normal @ pose.translation)  # plane passes through the origin
    with np.errstate(divide="ignore", invalid="ignore"):
        z = num / denom
    pts = pose.translation[None, None, :] + z[..., None] * dirs_world
    a = pts @ e1
    b = pts @ e2
    on_wall = (
        (z > 0)
        & np.isfinite(z)
        & (np.abs(a) <= half_extent)
        & (np.abs(b) <= half_extent)
    )
    return np.where(on_wall, z, 0.0)


def _feature_field(
    spec: SyntheticSceneSpec, rng: np.random.Generator, distance: float
) -> tuple[np.ndarray, np.ndarray, str]:
    """Seeded parameters of the world-point feature function."""
    c = spec.feature_channels
    if spec.structure == "wall":
        # Linear fields: bilinear sampling of a nearly affine image is
        # near-exact, which keeps the reprojection loss at the true transform
        # at the noise floor.
        dirs = rng.normal(size=(c, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        offsets = rng.uniform(-0.5, 0.5, size=c)
        return dirs, offsets, "linear"
    freqs = rng.normal(size=(c, 3)) * (2.0 / distance)
    phases = rng.uniform(0.0, 2 * np.pi, size=c)
    return freqs, phases, "cosine"


def _evaluate_features(
    points: np.ndarray,
    valid: np.ndarray,
    params: tuple[np.ndarray, np.ndarray, str],
    amplitude: float,
) -> np.ndarray:
    mat, offs, kind = params
    proj = points @ mat.T + offs
    feats = amplitude * (proj if kind == "linear" else np.cos(proj))
    return np.where(valid[..., None], feats, 0.0)


def generate_synthetic(spec: SyntheticSceneSpec, out_dir: str | Path) -> SequenceDataset:
    """Render a synthetic sequence with ground truth into ``out_dir``.

    Writes images, depth maps, feature maps, the ground-truth trajectory, the
    Gaussian set, and meta.txt. Identical spec (including seed) produces
    byte-identical files.
    """
    rng = np.random.default_rng(spec.seed)
    K = spec.intrinsics()
    poses, distance = _trajectory_poses(spec, rng)

    travel = spec.translation_step * spec.num_frames
    d_far = distance + travel
    half_extent = 1.8 * (0.6 * K.width / K.fx * d_far + travel + 0.3 * d_far)
    normal, e1, e2 = _wall_frame(rng)
    if spec.structure == "wall":
        gaussians = _wall_gaussians(spec, rng, e1, e2, normal, half_extent)
    else:
        gaussians = _cloud_gaussians(spec, rng, distance)
    feat_params = _feature_field(spec, rng, distance)

    root = Path(out_dir)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(exist_ok=True)
    (root / "features").mkdir(exist_ok=True)

    gt = Trajectory()
    for i, pose in enumerate(poses):
        out = render(gaussians, pose, K)
        save_image(out.color, root / "frames" / f"{i:03d}.png")

        if spec.structure == "wall":
            depth = _wall_depth(K, pose, normal, half_extent, e1, e2)
        else:
            safe_alpha = np.where(out.alpha > 0.5, out.alpha, 1.0)
            depth = np.where(out.alpha > 0.5, out.depth / safe_alpha, 0.0)
        save_depth_map(depth, root / "depth" / f"{i:03d}.dmap")

        valid = depth > 0
        h, w = depth.shape
        us, vs = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
        safe_d = np.where(valid, depth, 1.0)
        cam_pts = np.stack(
            [(us - K.cx) / K.fx * safe_d, (vs - K.cy) / K.fy * safe_d, safe_d], axis=-1
        )
        rot = quat_to_matrix(pose.rotation)
        world_pts = cam_pts @ rot.T + pose.translation
        feats = _evaluate_features(world_pts, valid, feat_params, spec.feature_amplitude)
        save_feature_map(FeatureMap(feats), root / "features" / f"{i:03d}.fmap")

        gt.append(i, pose)

    gt.save(root / "gt_trajectory.txt")
    save_gaussians(gaussians, root / "gt_gaussians.gspt")
    meta = {
        "width": str(K.width),
        "height": str(K.height),
        "fx": repr(K.fx),
        "fy": repr(K.fy),
        "cx": repr(K.cx),
        "cy": repr(K.cy),
        "frames": str(spec.num_frames),
        "feature_channels": str(spec.feature_channels),
        "structure": spec.structure,
        "trajectory": spec.trajectory,
        "seed": str(spec.seed),
    }
    save_kv(meta, root / "meta.txt")
    return load_sequence(root)
