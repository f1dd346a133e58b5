"""Single-level 2D wavelet decomposition and the annealed frequency loss.

The default filter pair is orthonormal Haar, which gives exact reconstruction
and Parseval energy balance. Band layout follows the separable convention
LL=(low rows, low cols), LH=(low rows, high cols), HL=(high rows, low cols),
HH=(high rows, high cols), so LH picks up horizontal detail and HL vertical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import InvalidInputError

# Shift inside the smoothed Frobenius norm; keeps the loss exactly 0 for
# identical inputs while avoiding the NaN gradient of sqrt at the origin.
_NORM_EPS = 1e-12

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class FilterPair:
    """Low-pass / high-pass analysis filter taps."""

    h: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "h", np.asarray(self.h, dtype=np.float64))
        object.__setattr__(self, "g", np.asarray(self.g, dtype=np.float64))

    @staticmethod
    def haar() -> "FilterPair":
        s = 1.0 / np.sqrt(2.0)
        return FilterPair(h=np.array([s, s]), g=np.array([s, -s]))

    def is_orthonormal(self, tol: float = 1e-12) -> bool:
        return (
            abs(np.sum(self.h**2) - 1.0) < tol
            and abs(np.sum(self.g**2) - 1.0) < tol
            and abs(np.dot(self.h, self.g)) < tol
        )


@dataclass(frozen=True)
class AnnealSchedule:
    """Iteration breakpoints for blending low- into high-frequency bands."""

    n0: int = 100
    n1: int = 200

    def __post_init__(self):
        if not (0 < self.n0 < self.n1):
            raise InvalidInputError(f"need 0 < n0 < n1, got n0={self.n0}, n1={self.n1}")


@dataclass(frozen=True)
class BandWeights:
    w_ll: float = 1.0
    w_lh: float = 1.0
    w_hl: float = 1.0
    w_hh: float = 1.0

    def __post_init__(self):
        if min(self.w_ll, self.w_lh, self.w_hl, self.w_hh) < 0:
            raise InvalidInputError("band weights must be nonnegative")


@dataclass(frozen=True)
class WaveletBands:
    """The four half-resolution subbands of one decomposition level."""

    ll: np.ndarray
    lh: np.ndarray
    hl: np.ndarray
    hh: np.ndarray


def smooth_norm(
    x: torch.Tensor, dim: int | None = None, eps: float = _NORM_EPS
) -> torch.Tensor:
    """L2 norm smoothed at the origin: sqrt(|x|^2 + eps^2) - eps.

    Exactly zero for a zero input, with a finite gradient there; ``dim``
    reduces along one axis instead of the whole tensor.
    """
    sq = torch.sum(x * x) if dim is None else torch.sum(x * x, dim=dim)
    return torch.sqrt(sq + eps * eps) - eps


def _analysis_1d(x: torch.Tensor, taps: torch.Tensor, axis: int) -> torch.Tensor:
    """Correlate ``x`` with ``taps`` along ``axis`` (periodic), downsample by 2."""
    x = x.movedim(axis, 0)
    n = x.shape[0]
    taps_len = taps.shape[0]
    starts = torch.arange(0, n, 2, dtype=torch.long)
    idx = (starts[:, None] + torch.arange(taps_len, dtype=torch.long)[None, :]) % n
    windows = x[idx]  # (n//2, taps_len, ...)
    out = torch.tensordot(taps, windows, dims=([0], [1]))
    return out.movedim(0, axis)


def dwt2_t(
    image: torch.Tensor, h: torch.Tensor, g: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Differentiable single-level DWT of an (H, W) or (H, W, C) tensor."""
    if image.shape[0] % 2 or image.shape[1] % 2:
        raise InvalidInputError(
            f"image dimensions must be even, got {tuple(image.shape[:2])}"
        )
    lo_r = _analysis_1d(image, h, axis=0)
    hi_r = _analysis_1d(image, g, axis=0)
    ll = _analysis_1d(lo_r, h, axis=1)
    lh = _analysis_1d(lo_r, g, axis=1)
    hl = _analysis_1d(hi_r, h, axis=1)
    hh = _analysis_1d(hi_r, g, axis=1)
    return ll, lh, hl, hh


def dwt2(image: np.ndarray, filters: FilterPair | None = None) -> WaveletBands:
    """Decompose an even-sized image into LL/LH/HL/HH subbands."""
    filters = filters or FilterPair.haar()
    x = torch.from_numpy(np.asarray(image, dtype=np.float64))
    h = torch.from_numpy(filters.h)
    g = torch.from_numpy(filters.g)
    ll, lh, hl, hh = dwt2_t(x, h, g)
    return WaveletBands(ll.numpy(), lh.numpy(), hl.numpy(), hh.numpy())


def _synthesis_1d(y_lo: np.ndarray, y_hi: np.ndarray, filters: FilterPair, axis: int) -> np.ndarray:
    """Transpose of the analysis step (exact inverse for orthonormal filters)."""
    y_lo = np.moveaxis(y_lo, axis, 0)
    y_hi = np.moveaxis(y_hi, axis, 0)
    n = y_lo.shape[0] * 2
    out = np.zeros((n,) + y_lo.shape[1:], dtype=np.float64)
    for m, (hm, gm) in enumerate(zip(filters.h, filters.g)):
        pos = (2 * np.arange(n // 2) + m) % n
        np.add.at(out, pos, hm * y_lo + gm * y_hi)
    return np.moveaxis(out, 0, axis)


def idwt2(bands: WaveletBands, filters: FilterPair | None = None) -> np.ndarray:
    """Reconstruct the image from its subbands."""
    filters = filters or FilterPair.haar()
    lo_r = _synthesis_1d(bands.ll, bands.lh, filters, axis=1)
    hi_r = _synthesis_1d(bands.hl, bands.hh, filters, axis=1)
    return _synthesis_1d(lo_r, hi_r, filters, axis=0)


def to_luminance_t(image: torch.Tensor) -> torch.Tensor:
    """Collapse an (H, W, 3) tensor to luminance; pass single-channel through."""
    if image.dim() == 3 and image.shape[-1] == 3:
        w = torch.tensor(LUMA_WEIGHTS, dtype=image.dtype)
        return image @ w
    if image.dim() == 3 and image.shape[-1] == 1:
        return image[..., 0]
    return image


def band_discrepancy_t(
    image: torch.Tensor,
    rendered: torch.Tensor,
    h: torch.Tensor,
    g: torch.Tensor,
    weights: BandWeights,
    per_channel: bool = False,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Weighted per-band discrepancy; returns (d_ll, d_h, d_total).

    Each band contributes its Frobenius norm of the difference, divided by the
    band element count so values are resolution independent.
    """
    if image.shape != rendered.shape:
        raise InvalidInputError(f"shape mismatch: {tuple(image.shape)} vs {tuple(rendered.shape)}")
    if not per_channel:
        image = to_luminance_t(image)
        rendered = to_luminance_t(rendered)
    bands_a = dwt2_t(image, h, g)
    bands_b = dwt2_t(rendered, h, g)
    w = (weights.w_ll, weights.w_lh, weights.w_hl, weights.w_hh)
    d = [
        wx * smooth_norm(a - b) / a.numel()
        for wx, a, b in zip(w, bands_a, bands_b)
    ]
    d_ll = d[0]
    d_h = d[1] + d[2] + d[3]
    return d_ll, d_h, d_ll + d_h


def band_discrepancy(
    image: np.ndarray,
    rendered: np.ndarray,
    filters: FilterPair | None = None,
    weights: BandWeights | None = None,
    per_channel: bool = False,
) -> dict[str, float]:
    filters = filters or FilterPair.haar()
    weights = weights or BandWeights()
    d_ll, d_h, d_total = band_discrepancy_t(
        torch.from_numpy(np.asarray(image, dtype=np.float64)),
        torch.from_numpy(np.asarray(rendered, dtype=np.float64)),
        torch.from_numpy(filters.h),
        torch.from_numpy(filters.g),
        weights,
        per_channel=per_channel,
    )
    return {"d_ll": float(d_ll), "d_h": float(d_h), "d_total": float(d_total)}


def anneal_weight(n: int, schedule: AnnealSchedule | None = None) -> float:
    """High-frequency blend weight at iteration ``n`` (1-based)."""
    schedule = schedule or AnnealSchedule()
    if n <= schedule.n0:
        return 0.0
    if n >= schedule.n1:
        return 1.0
    return (n - schedule.n0) / (schedule.n1 - schedule.n0)


def frequency_loss_t(
    image: torch.Tensor,
    rendered: torch.Tensor,
    n: int,
    schedule: AnnealSchedule,
    h: torch.Tensor,
    g: torch.Tensor,
    weights: BandWeights,
    per_channel: bool = False,
) -> torch.Tensor:
    """Annealed frequency loss: pure LL early, blended, then pure high bands."""
    d_ll, d_h, _ = band_discrepancy_t(image, rendered, h, g, weights, per_channel)
    if n <= schedule.n0:
        return d_ll
    if n > schedule.n1:
        return d_h
    w_h = anneal_weight(n, schedule)
    return (1.0 - w_h) * d_ll + w_h * d_h


def frequency_loss(
    image: np.ndarray,
    rendered: np.ndarray,
    n: int,
    schedule: AnnealSchedule | None = None,
    filters: FilterPair | None = None,
    weights: BandWeights | None = None,
    per_channel: bool = False,
) -> tuple[float, np.ndarray]:
    """Scalar loss plus its gradient with respect to the rendered image."""
    schedule = schedule or AnnealSchedule()
    filters = filters or FilterPair.haar()
    weights = weights or BandWeights()
    rendered_t = torch.from_numpy(np.asarray(rendered, dtype=np.float64)).requires_grad_(True)
    loss = frequency_loss_t(
        torch.from_numpy(np.asarray(image, dtype=np.float64)),
        rendered_t,
        n,
        schedule,
        torch.from_numpy(filters.h),
        torch.from_numpy(filters.g),
        weights,
        per_channel=per_channel,
    )
    (grad,) = torch.autograd.grad(loss, rendered_t)
    return float(loss), grad.numpy()
