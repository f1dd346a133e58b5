"""Differentiable forward renderer for 3D Gaussians (color, depth, alpha).

Desk-scale design: every visible Gaussian is evaluated at every pixel and
composited front-to-back after a global depth sort, so outputs are exact and
smooth in all parameters. Gradients come from reverse-mode differentiation of
this graph; everything runs in float64 so finite-difference checks are sharp.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import InvalidInputError, FormatError
from .geometry import CameraPose, Intrinsics, Quaternion

DEFAULT_NEAR = 0.01
ALPHA_CLAMP = 0.99
COV2D_EIGENVALUE_FLOOR = 0.1  # px^2, anti-aliasing floor

GSPT_MAGIC = b"GSPT"
GSPT_VERSION = 1


@dataclass(frozen=True)
class Gaussian:
    """One anisotropic Gaussian: center, per-axis scale, rotation, opacity, color."""

    center: np.ndarray
    scale: np.ndarray
    rotation: Quaternion
    opacity_logit: float
    color: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        object.__setattr__(self, "scale", np.asarray(self.scale, dtype=np.float64).reshape(3))
        object.__setattr__(self, "color", np.asarray(self.color, dtype=np.float64).reshape(3))
        if np.any(self.scale <= 0):
            raise InvalidInputError(f"scales must be strictly positive, got {self.scale}")

    @property
    def opacity(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.opacity_logit)))


@dataclass
class GaussianSet:
    """Column-major storage of N Gaussians (quaternions are (w, x, y, z))."""

    centers: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        n = len(self.centers)
        self.centers = np.asarray(self.centers, dtype=np.float64).reshape(n, 3)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)
        if n and np.any(self.scales <= 0):
            raise InvalidInputError("scales must be strictly positive")

    def __len__(self) -> int:
        return len(self.centers)

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(
            self.centers[i],
            self.scales[i],
            Quaternion.from_array(self.rotations[i]),
            float(self.opacity_logits[i]),
            self.colors[i],
        )

    @staticmethod
    def empty() -> "GaussianSet":
        return GaussianSet(
            np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3))
        )

    def copy(self) -> "GaussianSet":
        return GaussianSet(
            self.centers.copy(),
            self.scales.copy(),
            self.rotations.copy(),
            self.opacity_logits.copy(),
            self.colors.copy(),
        )

    def state_bytes(self) -> bytes:
        """Canonical byte view of all parameters (for freeze checks)."""
        return b"".join(
            np.ascontiguousarray(a).tobytes()
            for a in (self.centers, self.scales, self.rotations, self.opacity_logits, self.colors)
        )


@dataclass(frozen=True)
class RenderOutput:
    color: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W), scene units
    alpha: np.ndarray  # (H, W) in [0, 1]


@dataclass(frozen=True)
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    opacity: float


def quat_to_matrix_t(q: torch.Tensor) -> torch.Tensor:
    """Rotation matrices from (..., 4) quaternions, normalized inside the graph."""
    q = q / torch.linalg.norm(q, dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    row0 = torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1)
    row1 = torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1)
    row2 = torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1)
    return torch.stack([row0, row1, row2], -2)


def pack_gaussians(gs: GaussianSet) -> dict[str, torch.Tensor]:
    return {
        "centers": torch.from_numpy(gs.centers.copy()),
        "scales": torch.from_numpy(gs.scales.copy()),
        "rotations": torch.from_numpy(gs.rotations.copy()),
        "opacity_logits": torch.from_numpy(gs.opacity_logits.copy()),
        "colors": torch.from_numpy(gs.colors.copy()),
    }


def unpack_gaussians(params: dict[str, torch.Tensor]) -> GaussianSet:
    return GaussianSet(
        params["centers"].detach().numpy().copy(),
        params["scales"].detach().numpy().copy(),
        params["rotations"].detach().numpy().copy(),
        params["opacity_logits"].detach().numpy().copy(),
        params["colors"].detach().numpy().copy(),
    )


def _project_splats_t(
    centers: torch.Tensor,
    scales: torch.Tensor,
    rotations: torch.Tensor,
    cam_q: torch.Tensor,
    cam_t: torch.Tensor,
    K: Intrinsics,
    near: float = DEFAULT_NEAR,
):
    """Camera-space depth, 2D means and floored 2D covariances for all Gaussians.

    Uses the local-affine (first-order Jacobian) approximation of the pinhole
    map at each center. Returns tensors over all N; callers mask by ``visible``.
    """
    r_c2w = quat_to_matrix_t(cam_q)
    x_cam = (centers - cam_t) @ r_c2w  # rows: R^T (x - t)
    z = x_cam[:, 2]
    visible = z > near

    r_g = quat_to_matrix_t(rotations)  # (N, 3, 3)
    cov_world = r_g @ torch.diag_embed(scales * scales) @ r_g.transpose(1, 2)
    w_rot = r_c2w.t().unsqueeze(0)
    cov_cam = w_rot @ cov_world @ w_rot.transpose(1, 2)

    zs = torch.clamp(z, min=near)  # keep culled rows finite; they are masked out
    fx, fy = K.fx, K.fy
    zero = torch.zeros_like(zs)
    j_row0 = torch.stack([fx / zs, zero, -fx * x_cam[:, 0] / (zs * zs)], -1)
    j_row1 = torch.stack([zero, fy / zs, -fy * x_cam[:, 1] / (zs * zs)], -1)
    jac = torch.stack([j_row0, j_row1], -2)  # (N, 2, 3)
    cov2d = jac @ cov_cam @ jac.transpose(1, 2)

    # Raise both eigenvalues just enough to bring the smallest to the floor;
    # leaves well-conditioned splats untouched.
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    disc = torch.sqrt(((a - c) * 0.5) ** 2 + b * b + 1e-24)
    lam_min = (a + c) * 0.5 - disc
    boost = torch.relu(COV2D_EIGENVALUE_FLOOR - lam_min)
    eye = torch.eye(2, dtype=cov2d.dtype)
    cov2d = cov2d + boost[:, None, None] * eye

    mean2d = torch.stack(
        [fx * x_cam[:, 0] / zs + K.cx, fy * x_cam[:, 1] / zs + K.cy], -1
    )
    return mean2d, cov2d, z, visible


def render_t(
    params: dict[str, torch.Tensor],
    cam_q: torch.Tensor,
    cam_t: torch.Tensor,
    K: Intrinsics,
    near: float = DEFAULT_NEAR,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Differentiable render; returns (color (H,W,3), depth (H,W), alpha (H,W))."""
    h, w = K.height, K.width
    n = params["centers"].shape[0]
    dtype = torch.float64
    if n == 0:
        return (
            torch.zeros((h, w, 3), dtype=dtype),
            torch.zeros((h, w), dtype=dtype),
            torch.zeros((h, w), dtype=dtype),
        )

    mean2d, cov2d, z, visible = _project_splats_t(
        params["centers"], params["scales"], params["rotations"], cam_q, cam_t, K, near
    )
    keep = torch.nonzero(visible, as_tuple=False).flatten()
    if keep.numel() == 0:
        return (
            torch.zeros((h, w, 3), dtype=dtype),
            torch.zeros((h, w), dtype=dtype),
            torch.zeros((h, w), dtype=dtype),
        )

    mean2d, cov2d, z = mean2d[keep], cov2d[keep], z[keep]
    opacity = torch.sigmoid(params["opacity_logits"][keep])
    colors = params["colors"][keep]

    order = torch.argsort(z, stable=True)  # front-to-back by center depth
    mean2d, cov2d, z = mean2d[order], cov2d[order], z[order]
    opacity, colors = opacity[order], colors[order]

    ys = torch.arange(h, dtype=dtype)
    xs = torch.arange(w, dtype=dtype)
    dx = xs[None, None, :] - mean2d[:, 0][:, None, None]  # (N, 1->H, W)
    dy = ys[None, :, None] - mean2d[:, 1][:, None, None]

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    ia = (c / det)[:, None, None]
    ib = (-b / det)[:, None, None]
    ic = (a / det)[:, None, None]
    power = -0.5 * (ia * dx * dx + 2.0 * ib * dx * dy + ic * dy * dy)
    alpha = torch.clamp(opacity[:, None, None] * torch.exp(power), max=ALPHA_CLAMP)

    trans_after = torch.cumprod(1.0 - alpha, dim=0)
    transmittance = torch.cat(
        [torch.ones((1, h, w), dtype=dtype), trans_after[:-1]], dim=0
    )
    weight = alpha * transmittance  # (N, H, W)

    color = torch.einsum("nhw,nk->hwk", weight, colors)
    depth = torch.einsum("nhw,n->hw", weight, z)
    alpha_img = weight.sum(dim=0)
    return color, depth, alpha_img


def render(
    gs: GaussianSet, pose: CameraPose, K: Intrinsics, near: float = DEFAULT_NEAR
) -> RenderOutput:
    """Render a Gaussian set under a camera-to-world pose."""
    with torch.no_grad():
        color, depth, alpha = render_t(
            pack_gaussians(gs),
            torch.from_numpy(pose.rotation.as_array()),
            torch.from_numpy(pose.translation.copy()),
            K,
            near,
        )
    return RenderOutput(
        color=np.clip(color.numpy(), 0.0, 1.0), depth=depth.numpy(), alpha=alpha.numpy()
    )


def project_gaussian(
    g: Gaussian, pose: CameraPose, K: Intrinsics, near: float = DEFAULT_NEAR
) -> Splat2D | None:
    """2D footprint of one Gaussian; None when culled behind the near plane."""
    gs = GaussianSet(
        g.center[None], g.scale[None], g.rotation.as_array()[None],
        np.array([g.opacity_logit]), g.color[None],
    )
    params = pack_gaussians(gs)
    with torch.no_grad():
        mean2d, cov2d, z, visible = _project_splats_t(
            params["centers"], params["scales"], params["rotations"],
            torch.from_numpy(pose.rotation.as_array()),
            torch.from_numpy(pose.translation.copy()),
            K, near,
        )
    if not bool(visible[0]):
        return None
    return Splat2D(
        mean2d=mean2d[0].numpy(),
        cov2d=cov2d[0].numpy(),
        depth=float(z[0]),
        opacity=g.opacity,
    )


def render_with_gradients(
    gs: GaussianSet,
    pose: CameraPose,
    K: Intrinsics,
    color_adjoint: np.ndarray | None = None,
    depth_adjoint: np.ndarray | None = None,
    alpha_adjoint: np.ndarray | None = None,
    near: float = DEFAULT_NEAR,
) -> dict[str, np.ndarray]:
    """Backpropagate per-pixel adjoints through the renderer.

    Returns gradients of sum(color * color_adjoint) + sum(depth * depth_adjoint)
    + sum(alpha * alpha_adjoint) with respect to every Gaussian parameter and
    the 7 pose coordinates (quaternion wxyz, then translation xyz).
    """
    params = {k: v.requires_grad_(True) for k, v in pack_gaussians(gs).items()}
    cam_q = torch.from_numpy(pose.rotation.as_array()).requires_grad_(True)
    cam_t = torch.from_numpy(pose.translation.copy()).requires_grad_(True)
    color, depth, alpha = render_t(params, cam_q, cam_t, K, near)

    total = color.sum() * 0.0
    if color_adjoint is not None:
        total = total + (color * torch.from_numpy(np.asarray(color_adjoint, float))).sum()
    if depth_adjoint is not None:
        total = total + (depth * torch.from_numpy(np.asarray(depth_adjoint, float))).sum()
    if alpha_adjoint is not None:
        total = total + (alpha * torch.from_numpy(np.asarray(alpha_adjoint, float))).sum()

    leaves = [params[k] for k in ("centers", "scales", "rotations", "opacity_logits", "colors")]
    grads = torch.autograd.grad(total, leaves + [cam_q, cam_t], allow_unused=True)
    out = {}
    names = ["centers", "scales", "rotations", "opacity_logits", "colors"]
    for name, leaf, grad in zip(names, leaves, grads[:5]):
        out[name] = (
            grad.numpy() if grad is not None else np.zeros(leaf.shape, dtype=np.float64)
        )
    q_grad = grads[5].numpy() if grads[5] is not None else np.zeros(4)
    t_grad = grads[6].numpy() if grads[6] is not None else np.zeros(3)
    out["pose"] = np.concatenate([q_grad, t_grad])
    return out


def init_from_depth(
    image: np.ndarray,
    depth: np.ndarray,
    K: Intrinsics,
    stride: int = 4,
    opacity_logit: float = 0.0,
    scale_factor: float = 0.5,
) -> GaussianSet:
    """Seed Gaussians by unprojecting a strided pixel grid of the depth map."""
    image = np.asarray(image, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    vs, us = np.meshgrid(
        np.arange(stride // 2, h, stride), np.arange(stride // 2, w, stride), indexing="ij"
    )
    us, vs = us.ravel(), vs.ravel()
    d = depth[vs, us]
    valid = d > 0
    if not np.any(valid):
        raise InvalidInputError("depth map has no valid (positive) samples")
    us, vs, d = us[valid], vs[valid], d[valid]

    x = (us - K.cx) * d / K.fx
    y = (vs - K.cy) * d / K.fy
    centers = np.stack([x, y, d], axis=1)
    s = (scale_factor * stride / K.fx) * d
    scales = np.stack([s, s, s], axis=1)
    n = len(centers)
    rotations = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    colors = np.clip(image[vs, us], 1e-4, 1.0 - 1e-4)
    return GaussianSet(centers, scales, rotations, np.full(n, opacity_logit), colors)


def fit_gaussians(
    image: np.ndarray,
    depth: np.ndarray,
    K: Intrinsics,
    iters: int = 300,
    stride: int = 4,
    lambda_dssim: float = 0.2,
    loss_threshold: float = 0.0,
    anchor_weight: float = 1.0,
    lr_centers: float = 2e-3,
    lr_scales: float = 5e-3,
    lr_rotations: float = 1e-3,
    lr_opacities: float = 5e-2,
    lr_colors: float = 5e-2,
    near: float = DEFAULT_NEAR,
) -> GaussianSet:
    """Fit a per-frame Gaussian set to one image given its depth map.

    The camera is the frame's own: identity pose. Optimizes all Gaussian
    parameters with Adam on the photometric loss plus a center anchor that
    keeps splats near their depth-derived positions (``anchor_weight``,
    normalized by the median depth so it is scene-scale-free). Without the
    anchor the single-view fit drifts into translucent multi-layer stacks
    that reproduce the frame but fall apart under any viewpoint change.
    Stops early once the photometric term drops under ``loss_threshold``.
    """
    from .losses import photometric_loss_t  # local import to avoid cycle

    init = init_from_depth(image, depth, K, stride=stride)
    if iters <= 0:
        return init

    target = torch.from_numpy(np.asarray(image, dtype=np.float64))
    centers = torch.from_numpy(init.centers).clone().requires_grad_(True)
    log_scales = torch.from_numpy(np.log(init.scales)).clone().requires_grad_(True)
    rotations = torch.from_numpy(init.rotations).clone().requires_grad_(True)
    opacity_logits = torch.from_numpy(init.opacity_logits).clone().requires_grad_(True)
    color_logits = torch.from_numpy(
        np.log(init.colors / (1.0 - init.colors))
    ).clone().requires_grad_(True)

    opt = torch.optim.Adam(
        [
            {"params": [centers], "lr": lr_centers},
            {"params": [log_scales], "lr": lr_scales},
            {"params": [rotations], "lr": lr_rotations},
            {"params": [opacity_logits], "lr": lr_opacities},
            {"params": [color_logits], "lr": lr_colors},
        ],
        betas=(0.9, 0.999),
        eps=1e-8,
    )
    cam_q = torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=torch.float64)
    cam_t = torch.zeros(3, dtype=torch.float64)
    anchor = torch.from_numpy(init.centers.copy())
    depth_scale = float(np.median(init.centers[:, 2]))

    for _ in range(iters):
        opt.zero_grad()
        params = {
            "centers": centers,
            "scales": torch.exp(log_scales),
            "rotations": rotations,
            "opacity_logits": opacity_logits,
            "colors": torch.sigmoid(color_logits),
        }
        color, _, _ = render_t(params, cam_q, cam_t, K, near)
        loss = photometric_loss_t(target, color, lambda_dssim)
        if loss_threshold > 0 and float(loss.detach()) < loss_threshold:
            break
        if anchor_weight > 0:
            loss = loss + anchor_weight * torch.mean(((centers - anchor) / depth_scale) ** 2)
        loss.backward()
        opt.step()
        with torch.no_grad():
            rotations /= torch.linalg.norm(rotations, dim=1, keepdim=True)

    return GaussianSet(
        centers.detach().numpy(),
        np.exp(log_scales.detach().numpy()),
        rotations.detach().numpy(),
        opacity_logits.detach().numpy(),
        torch.sigmoid(color_logits).detach().numpy(),
    )


def save_gaussians(gs: GaussianSet, path: str | Path) -> None:
    """GSPT binary: magic, version u32, count u32, then 14 LE f32 per Gaussian."""
    rows = np.concatenate(
        [gs.centers, gs.scales, gs.rotations, gs.opacity_logits[:, None], gs.colors], axis=1
    ).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(GSPT_MAGIC)
        fh.write(struct.pack("<II", GSPT_VERSION, len(gs)))
        fh.write(rows.tobytes())


def load_gaussians(path: str | Path) -> GaussianSet:
    blob = Path(path).read_bytes()
    if blob[:4] != GSPT_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}", offset=0)
    if len(blob) < 12:
        raise FormatError(f"{path}: truncated header", offset=len(blob))
    version, count = struct.unpack("<II", blob[4:12])
    if version != GSPT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    expected = 12 + count * 14 * 4
    if len(blob) != expected:
        raise FormatError(
            f"{path}: expected {expected} bytes for {count} Gaussians, got {len(blob)}",
            offset=min(len(blob), expected),
        )
    rows = np.frombuffer(blob, dtype="<f4", offset=12).reshape(count, 14).astype(np.float64)
    return GaussianSet(rows[:, 0:3], rows[:, 3:6], rows[:, 6:10], rows[:, 10], rows[:, 11:14])
