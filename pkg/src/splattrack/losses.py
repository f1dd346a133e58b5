"""Photometric and feature-space losses.

The photometric term is the usual L1 + D-SSIM mix. The feature term lifts
every source pixel to 3D with its (frozen) depth, moves it by the relative
camera transform, projects it into the neighbouring view and compares
bilinearly sampled feature vectors. Depth is treated as a constant, so
gradients flow only into the transform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import DegenerateOverlapError, InvalidInputError
from .geometry import CameraPose, Intrinsics
from .wavelet import smooth_norm

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


@dataclass(frozen=True)
class LossWeights:
    """Mixing weights for the pose-stage objective.

    ``lambda_dssim`` blends L1 with D-SSIM inside the photometric term; the
    three stage weights (photometric, feature, frequency) default to
    0.6 / 0.2 / 0.2.
    """

    lambda_dssim: float = 0.2
    photometric: float = 0.6
    feature: float = 0.2
    frequency: float = 0.2

    def __post_init__(self):
        for name in ("lambda_dssim", "photometric", "feature", "frequency"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidInputError(f"{name} must be in [0, 1], got {v}")


@dataclass(frozen=True)
class FeatureMap:
    """Dense per-pixel feature grid, (H, W, C) float64.

    ``normalized`` records whether vectors are unit L2 (metadata only; the
    losses work either way).
    """

    data: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3:
            raise InvalidInputError(f"feature map must be (H, W, C), got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvalidInputError("feature map contains non-finite values")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def _gaussian_window(size: int, sigma: float) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2.0 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim_t(a: torch.Tensor, b: torch.Tensor, window: int = SSIM_WINDOW) -> torch.Tensor:
    """Mean SSIM over valid window positions (no padding), channels averaged.

    Images are (H, W) or (H, W, C) in [0, 1]; dynamic range L = 1. The window
    shrinks to the largest odd size that fits small images.
    """
    if a.shape != b.shape:
        raise InvalidInputError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() == 2:
        a = a.unsqueeze(-1)
        b = b.unsqueeze(-1)
    h, w, c = a.shape
    win = min(window, h, w)
    if win % 2 == 0:
        win -= 1
    win = max(win, 1)

    kernel = _gaussian_window(win, SSIM_SIGMA).reshape(1, 1, win, win)
    x = a.permute(2, 0, 1).unsqueeze(1)  # (C, 1, H, W)
    y = b.permute(2, 0, 1).unsqueeze(1)

    def filt(img: torch.Tensor) -> torch.Tensor:
        return torch.nn.functional.conv2d(img, kernel)

    mu_x = filt(x)
    mu_y = filt(y)
    sigma_x = filt(x * x) - mu_x * mu_x
    sigma_y = filt(y * y) - mu_y * mu_y
    sigma_xy = filt(x * y) - mu_x * mu_y

    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    num = (2 * mu_x * mu_y + c1) * (2 * sigma_xy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sigma_x + sigma_y + c2)
    return (num / den).mean()


def ssim(a: np.ndarray, b: np.ndarray, window: int = SSIM_WINDOW) -> float:
    with torch.no_grad():
        return float(
            ssim_t(
                torch.from_numpy(np.asarray(a, dtype=np.float64)),
                torch.from_numpy(np.asarray(b, dtype=np.float64)),
                window,
            )
        )


def photometric_loss_t(
    target: torch.Tensor, rendered: torch.Tensor, lambda_dssim: float = 0.2
) -> torch.Tensor:
    """(1 - lambda) * mean|target - rendered| + lambda * (1 - SSIM)."""
    if target.shape != rendered.shape:
        raise InvalidInputError(
            f"image shapes differ: {tuple(target.shape)} vs {tuple(rendered.shape)}"
        )
    l1 = (target - rendered).abs().mean()
    if lambda_dssim == 0.0:
        return l1
    dssim = 1.0 - ssim_t(target, rendered)
    return (1.0 - lambda_dssim) * l1 + lambda_dssim * dssim


def photometric_loss(
    target: np.ndarray, rendered: np.ndarray, lambda_dssim: float = 0.2
) -> float:
    with torch.no_grad():
        return float(
            photometric_loss_t(
                torch.from_numpy(np.asarray(target, dtype=np.float64)),
                torch.from_numpy(np.asarray(rendered, dtype=np.float64)),
                lambda_dssim,
            )
        )


def bilinear_sample(fmap: FeatureMap, u: float, v: float) -> tuple[np.ndarray, bool]:
    """Sample one feature vector at continuous pixel coordinates (u, v).

    Returns (vector, valid). Coordinates outside [0, W-1] x [0, H-1] are
    invalid and yield a zero vector; integer coordinates return the stored
    vector exactly.
    """
    vals, valid = bilinear_sample_t(
        torch.from_numpy(fmap.data),
        torch.tensor([float(u)], dtype=torch.float64),
        torch.tensor([float(v)], dtype=torch.float64),
    )
    return vals[0].numpy(), bool(valid[0])


def bilinear_sample_t(
    data: torch.Tensor, u: torch.Tensor, v: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Batched bilinear sampling of an (H, W, C) grid at P points.

    Returns (values (P, C), valid (P,) bool); invalid points get zeros and
    carry no gradient. Differentiable in u and v.
    """
    h, w, _ = data.shape
    valid = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)

    uc = torch.clamp(u, 0.0, float(w - 1))
    vc = torch.clamp(v, 0.0, float(h - 1))
    x0 = torch.clamp(uc.detach().floor().long(), max=w - 2) if w > 1 else uc.detach().long() * 0
    y0 = torch.clamp(vc.detach().floor().long(), max=h - 2) if h > 1 else vc.detach().long() * 0
    x1 = torch.clamp(x0 + 1, max=w - 1)
    y1 = torch.clamp(y0 + 1, max=h - 1)

    fx = uc - x0.to(uc.dtype)
    fy = vc - y0.to(vc.dtype)

    f00 = data[y0, x0]
    f01 = data[y0, x1]
    f10 = data[y1, x0]
    f11 = data[y1, x1]
    wx0, wx1 = (1.0 - fx).unsqueeze(-1), fx.unsqueeze(-1)
    wy0, wy1 = (1.0 - fy).unsqueeze(-1), fy.unsqueeze(-1)
    vals = wy0 * (wx0 * f00 + wx1 * f01) + wy1 * (wx0 * f10 + wx1 * f11)
    return vals * valid.unsqueeze(-1).to(vals.dtype), valid


def feature_reprojection_loss_t(
    feat_src: torch.Tensor,
    feat_dst: torch.Tensor,
    depth_src: torch.Tensor,
    K: Intrinsics,
    rel_q: torch.Tensor,
    rel_t: torch.Tensor,
    min_valid_fraction: float = 0.01,
) -> torch.Tensor:
    """Mean per-pixel feature L2 after warping source pixels into the next view.

    ``rel_q``/``rel_t`` form the camera-to-world transform of the next camera
    expressed in the source camera frame, so source-frame points move into the
    next frame by the inverse map R^T (X - t). Depth is constant (no gradient).
    """
    from .splat import quat_to_matrix_t  # shared quaternion kernel

    h, w, _ = feat_src.shape
    if feat_dst.shape != feat_src.shape:
        raise InvalidInputError(
            f"feature shapes differ: {tuple(feat_src.shape)} vs {tuple(feat_dst.shape)}"
        )
    if depth_src.shape != (h, w):
        raise InvalidInputError(
            f"depth shape {tuple(depth_src.shape)} does not match features ({h}, {w})"
        )

    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=torch.float64),
        torch.arange(w, dtype=torch.float64),
        indexing="ij",
    )
    d = depth_src.reshape(-1)
    u = xs.reshape(-1)
    v = ys.reshape(-1)
    has_depth = d > 0

    x = (u - K.cx) * d / K.fx
    y = (v - K.cy) * d / K.fy
    pts = torch.stack([x, y, d], dim=1)  # source camera frame

    r = quat_to_matrix_t(rel_q)
    pts_next = (pts - rel_t) @ r  # rows: R^T (X - t)
    z = pts_next[:, 2]
    in_front = z > 0
    zs = torch.where(in_front, z, torch.ones_like(z))
    u_next = K.fx * pts_next[:, 0] / zs + K.cx
    v_next = K.fy * pts_next[:, 1] / zs + K.cy

    sampled, in_bounds = bilinear_sample_t(feat_dst, u_next, v_next)
    valid = has_depth & in_front & in_bounds
    n_valid = int(valid.sum())
    if n_valid < min_valid_fraction * h * w:
        raise DegenerateOverlapError(
            f"only {n_valid}/{h * w} pixels reproject into the next view"
        )

    diff = sampled - feat_src.reshape(-1, feat_src.shape[2])
    per_pixel = smooth_norm(diff, dim=1)
    mask = valid.to(per_pixel.dtype)
    return (per_pixel * mask).sum() / mask.sum()


def feature_reprojection_loss(
    feat_src: FeatureMap,
    feat_dst: FeatureMap,
    depth_src: np.ndarray,
    K: Intrinsics,
    transform: CameraPose,
    pose_src: CameraPose | None = None,
    min_valid_fraction: float = 0.01,
    with_grad: bool = False,
) -> float | tuple[float, np.ndarray]:
    """Feature reprojection loss for a relative transform; optionally its gradient.

    ``pose_src`` is accepted for interface symmetry but does not enter the
    computation: lifting happens in the source camera's own frame, so the
    absolute pose cancels. With ``with_grad`` the return is (loss, grad) where
    grad is d(loss)/d(quaternion wxyz, translation xyz), a 7-vector.
    """
    del pose_src
    rel_q = torch.from_numpy(transform.rotation.as_array()).requires_grad_(with_grad)
    rel_t = torch.from_numpy(transform.translation.copy()).requires_grad_(with_grad)
    loss = feature_reprojection_loss_t(
        torch.from_numpy(feat_src.data),
        torch.from_numpy(feat_dst.data),
        torch.from_numpy(np.asarray(depth_src, dtype=np.float64)),
        K,
        rel_q,
        rel_t,
        min_valid_fraction,
    )
    if not with_grad:
        return float(loss)
    gq, gt = torch.autograd.grad(loss, [rel_q, rel_t], allow_unused=True)
    grad = np.concatenate(
        [
            gq.numpy() if gq is not None else np.zeros(4),
            gt.numpy() if gt is not None else np.zeros(3),
        ]
    )
    return float(loss), grad
