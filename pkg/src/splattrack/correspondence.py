"""Sparse correspondences between feature maps and coarse pose initialization.

Matches are mutual nearest neighbours ("best buddies") under cosine
similarity, restricted to salient pixels. A short gradient-descent loop on
the matched-pixel reprojection residual provides the coarse relative
transform that seeds the dense pose refinement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import InvalidInputError
from .geometry import Intrinsics, Quaternion, RelativeTransform, quat_to_matrix
from .losses import FeatureMap
from .wavelet import smooth_norm

N_SAMPLES = 20
MIN_PAIRS = 4
MIN_SCORE = 0.6


@dataclass(frozen=True)
class Correspondence:
    """One matched pixel pair with its cosine similarity score."""

    src: tuple[int, int]  # (u, v) in the source map
    dst: tuple[int, int]  # (u, v) in the target map
    score: float


@dataclass(frozen=True)
class InitResult:
    """Outcome of the correspondence-based initialization stage.

    ``fallback`` is set when too few usable pairs remained and the transform
    is the untouched identity. ``residuals`` is the objective value per
    iteration; ``used`` lists the sampled pairs the loop optimized over.
    """

    transform: RelativeTransform
    fallback: bool = False
    residuals: np.ndarray = field(default_factory=lambda: np.zeros(0))
    used: list[Correspondence] = field(default_factory=list)


def saliency_mask(fmap: FeatureMap, quantile: float = 0.5) -> np.ndarray:
    """Boolean (H, W) mask of the most salient pixels.

    Saliency is the per-pixel feature norm; the mask keeps the top (1 - q)
    fraction, resolving ties inclusively (a uniform map keeps everything).
    """
    if not 0.0 < quantile < 1.0:
        raise InvalidInputError(f"quantile must be in (0, 1), got {quantile}")
    norms = np.linalg.norm(fmap.data, axis=2)
    n = norms.size
    k = max(1, math.ceil((1.0 - quantile) * n))
    threshold = np.sort(norms, axis=None)[n - k]
    return norms >= threshold


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norms, 1e-300)


def best_buddies(
    feat_a: FeatureMap,
    feat_b: FeatureMap,
    mask_a: np.ndarray | None = None,
    mask_b: np.ndarray | None = None,
) -> list[Correspondence]:
    """All mutual nearest-neighbour pairs between two feature maps.

    Similarity is cosine over masked pixels; each side's nearest neighbour
    breaks ties at the lowest linear (row-major) index. Output follows the
    source map's row-major order; scores are the pair cosines.
    """
    if feat_a.channels != feat_b.channels:
        raise InvalidInputError(
            f"channel counts differ: {feat_a.channels} vs {feat_b.channels}"
        )
    ha, wa = feat_a.height, feat_a.width
    hb, wb = feat_b.height, feat_b.width
    mask_a = np.ones((ha, wa), bool) if mask_a is None else np.asarray(mask_a, bool)
    mask_b = np.ones((hb, wb), bool) if mask_b is None else np.asarray(mask_b, bool)
    if mask_a.shape != (ha, wa) or mask_b.shape != (hb, wb):
        raise InvalidInputError("mask shapes must match their feature maps")

    ia = np.flatnonzero(mask_a.ravel())
    ib = np.flatnonzero(mask_b.ravel())
    if len(ia) == 0 or len(ib) == 0:
        raise InvalidInputError("saliency masks left no candidate pixels")
    va = _unit_rows(feat_a.data.reshape(-1, feat_a.channels)[ia])
    vb = _unit_rows(feat_b.data.reshape(-1, feat_b.channels)[ib])

    sim = va @ vb.T
    nn_ab = np.argmax(sim, axis=1)
    nn_ba = np.argmax(sim, axis=0)

    out = []
    for i, j in enumerate(nn_ab):
        if nn_ba[j] == i:
            fa = ia[i]
            fb = ib[j]
            out.append(
                Correspondence(
                    src=(int(fa % wa), int(fa // wa)),
                    dst=(int(fb % wb), int(fb // wb)),
                    score=float(sim[i, j]),
                )
            )
    return out


def reprojection_residual(
    pairs: list[Correspondence],
    depth_src: np.ndarray,
    K: Intrinsics,
    transform: RelativeTransform,
) -> float:
    """Mean pixel distance between warped source points and their matches.

    Pairs whose source depth is invalid or whose warped point falls behind
    the camera are skipped.
    """
    depth_src = np.asarray(depth_src, dtype=np.float64)
    r = quat_to_matrix(transform.rotation)
    total, count = 0.0, 0
    for p in pairs:
        d = depth_src[p.src[1], p.src[0]]
        if d <= 0:
            continue
        pt = np.array(
            [(p.src[0] - K.cx) * d / K.fx, (p.src[1] - K.cy) * d / K.fy, d]
        )
        moved = r.T @ (pt - transform.translation)
        if moved[2] <= 0:
            continue
        u = K.fx * moved[0] / moved[2] + K.cx
        v = K.fy * moved[1] / moved[2] + K.cy
        total += math.hypot(u - p.dst[0], v - p.dst[1])
        count += 1
    if count == 0:
        return float("inf")
    return total / count


def init_relative_pose(
    pairs: list[Correspondence],
    depth_src: np.ndarray,
    K: Intrinsics,
    iters: int = 200,
    lr_start: float = 1e-4,
    lr_end: float = 1e-5,
    n_samples: int = N_SAMPLES,
    min_score: float = MIN_SCORE,
    rng: np.random.Generator | None = None,
) -> InitResult:
    """Coarse relative transform from sparse matches by gradient descent.

    Low-score and invalid-depth pairs are dropped, then at most ``n_samples``
    survivors are randomly drawn. With fewer than 4 usable pairs the identity
    transform is returned with the fallback flag set. Each source pixel is
    lifted with its depth, moved into the next camera's frame and projected;
    the objective is the mean smoothed pixel residual against the matched
    target pixels. Plain gradient descent starts from identity and decays its
    step size exponentially from ``lr_start`` to ``lr_end``, renormalizing
    the quaternion after every step.
    """
    from .splat import quat_to_matrix_t

    rng = rng or np.random.default_rng(0)
    depth_src = np.asarray(depth_src, dtype=np.float64)
    usable = [
        p
        for p in pairs
        if p.score >= min_score and depth_src[p.src[1], p.src[0]] > 0
    ]
    if len(usable) > n_samples:
        chosen = rng.choice(len(usable), size=n_samples, replace=False)
        usable = [usable[i] for i in sorted(chosen)]
    if len(usable) < MIN_PAIRS:
        return InitResult(RelativeTransform(), fallback=True, used=usable)

    src = np.array([p.src for p in usable], dtype=np.float64)
    dst = np.array([p.dst for p in usable], dtype=np.float64)
    d = np.array([depth_src[p.src[1], p.src[0]] for p in usable])

    pts = np.stack(
        [(src[:, 0] - K.cx) * d / K.fx, (src[:, 1] - K.cy) * d / K.fy, d], axis=1
    )
    pts_t = torch.from_numpy(pts)
    dst_t = torch.from_numpy(dst)

    q = torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=torch.float64, requires_grad=True)
    t = torch.zeros(3, dtype=torch.float64, requires_grad=True)

    def objective() -> torch.Tensor:
        r = quat_to_matrix_t(q)
        moved = (pts_t - t) @ r  # rows: R^T (X - t)
        z = moved[:, 2]
        in_front = z > 0
        zs = torch.where(in_front, z, torch.ones_like(z))
        u = K.fx * moved[:, 0] / zs + K.cx
        v = K.fy * moved[:, 1] / zs + K.cy
        resid = smooth_norm(torch.stack([u, v], dim=1) - dst_t, dim=1)
        mask = in_front.to(resid.dtype)
        return (resid * mask).sum() / torch.clamp(mask.sum(), min=1.0)

    decay = (lr_end / lr_start) ** (1.0 / max(iters - 1, 1)) if iters > 1 else 1.0
    lr = lr_start
    trace = np.zeros(iters)
    for k in range(iters):
        loss = objective()
        trace[k] = float(loss.detach())
        gq, gt = torch.autograd.grad(loss, [q, t])
        with torch.no_grad():
            q -= lr * gq
            t -= lr * gt
            q /= torch.linalg.norm(q)
        lr *= decay

    q_final = Quaternion.from_array(q.detach().numpy()).normalized()
    transform = RelativeTransform(q_final, t.detach().numpy().copy())
    return InitResult(transform, fallback=False, residuals=trace, used=usable)
