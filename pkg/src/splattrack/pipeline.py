"""Sequential pose estimation over an image sequence.

For each adjacent frame pair: fit a Gaussian set to the current frame, seed
the relative transform from sparse feature matches, then refine it against
the next frame with the mixed photometric / feature-reprojection / frequency
objective. Absolute poses accumulate by composition from an identity first
pose; per-pair failures fall back to identity and are flagged rather than
aborting the run.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .correspondence import (
    InitResult,
    best_buddies,
    init_relative_pose,
    reprojection_residual,
    saliency_mask,
)
from .errors import DegenerateOverlapError, InvalidInputError, NumericalError
from .geometry import CameraPose, Intrinsics, Quaternion, RelativeTransform, Trajectory, compose
from .io import SequenceDataset
from .losses import (
    LossWeights,
    feature_reprojection_loss_t,
    photometric_loss_t,
)
from .splat import GaussianSet, fit_gaussians, pack_gaussians, render_t
from .wavelet import AnnealSchedule, BandWeights, FilterPair, anneal_weight, frequency_loss_t


@dataclass(frozen=True)
class PipelineConfig:
    """Every knob of the sequential pipeline; all fields are config-file keys."""

    lambda_dssim: float = 0.2
    w_rgb: float = 0.6
    w_feat: float = 0.2
    w_freq: float = 0.2
    n0: int = 100
    n1: int = 200
    fit_iters: int = 300
    fit_loss_threshold: float = 0.0
    pose_iters: int = 300
    pose_lr: float = 1e-3
    pose_loss_threshold: float = 1e-8
    init_iters: int = 200
    init_lr_start: float = 1e-4
    init_lr_end: float = 1e-5
    gaussian_budget: int = 400
    saliency_quantile: float = 0.5
    min_match_score: float = 0.6
    num_matches: int = 20
    per_channel_freq: bool = False
    test_pose_iters: int = 300
    test_pose_lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        for name in ("fit_iters", "pose_iters", "init_iters", "test_pose_iters"):
            if getattr(self, name) <= 0:
                raise InvalidInputError(f"{name} must be positive")
        self.loss_weights()  # validates weight ranges
        AnnealSchedule(self.n0, self.n1)

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            lambda_dssim=self.lambda_dssim,
            photometric=self.w_rgb,
            feature=self.w_feat,
            frequency=self.w_freq,
        )

    def schedule(self) -> AnnealSchedule:
        return AnnealSchedule(self.n0, self.n1)

    @staticmethod
    def from_dict(raw: dict[str, str]) -> "PipelineConfig":
        fields = {f.name: f for f in dataclasses.fields(PipelineConfig)}
        kwargs = {}
        for key, value in raw.items():
            if key not in fields:
                raise InvalidInputError(f"unknown config key {key!r}")
            ftype = fields[key].type
            try:
                if ftype == "bool":
                    low = value.lower()
                    if low in ("true", "1", "yes"):
                        kwargs[key] = True
                    elif low in ("false", "0", "no"):
                        kwargs[key] = False
                    else:
                        raise ValueError(value)
                elif ftype == "int":
                    kwargs[key] = int(value)
                else:
                    kwargs[key] = float(value)
            except ValueError as exc:
                raise InvalidInputError(
                    f"config key {key!r}: cannot parse {value!r} as {ftype}"
                ) from exc
        return PipelineConfig(**kwargs)

    def to_dict(self) -> dict[str, str]:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = repr(v) if isinstance(v, float) else str(v)
        return out


@dataclass(frozen=True)
class PoseEstimate:
    """Refined relative transform plus its per-iteration loss trace."""

    transform: RelativeTransform
    trace: list[dict]
    iterations: int


@dataclass
class SequenceState:
    """Accumulated per-frame results while a sequence run is in flight."""

    trajectory: Trajectory
    gaussians: list[GaussianSet] = field(default_factory=list)
    diagnostics: list[dict] = field(default_factory=list)


@dataclass(frozen=True)
class SequenceResult:
    trajectory: Trajectory
    gaussians: list[GaussianSet]
    diagnostics: list[dict]
    config: PipelineConfig


def _freq_branch(n: int, schedule: AnnealSchedule) -> str:
    if n <= schedule.n0:
        return "low"
    if n <= schedule.n1:
        return "blend"
    return "high"


def estimate_relative_pose(
    gaussians: GaussianSet,
    K: Intrinsics,
    image_next: np.ndarray,
    feat_src: np.ndarray | None,
    feat_next: np.ndarray | None,
    depth_src: np.ndarray,
    t_init: RelativeTransform,
    config: PipelineConfig,
) -> PoseEstimate:
    """Refine a relative transform against the next frame.

    The Gaussian set is frozen; only the 7 pose coordinates move. The
    objective mixes the photometric term on the render under the candidate
    transform, the feature reprojection term, and the annealed frequency
    term whose counter is the in-stage iteration (reset per pair). Terms
    with zero weight are skipped entirely.
    """
    weights = config.loss_weights()
    schedule = config.schedule()
    use_feat = weights.feature > 0.0
    use_freq = weights.frequency > 0.0
    if use_feat and (feat_src is None or feat_next is None):
        raise InvalidInputError("feature maps required when the feature weight is nonzero")

    params = pack_gaussians(gaussians)  # no grads: frozen
    target = torch.from_numpy(np.asarray(image_next, dtype=np.float64))
    depth_t = torch.from_numpy(np.asarray(depth_src, dtype=np.float64))
    fs = None if feat_src is None else torch.from_numpy(np.asarray(feat_src, np.float64))
    fn = None if feat_next is None else torch.from_numpy(np.asarray(feat_next, np.float64))
    haar = FilterPair.haar()
    h_t = torch.from_numpy(haar.h)
    g_t = torch.from_numpy(haar.g)
    band_weights = BandWeights()

    q = torch.from_numpy(t_init.rotation.normalized().as_array()).requires_grad_(True)
    t = torch.from_numpy(t_init.translation.copy()).requires_grad_(True)
    opt = torch.optim.Adam([q, t], lr=config.pose_lr, betas=(0.9, 0.999), eps=1e-8)

    trace: list[dict] = []
    iterations = 0
    for n in range(1, config.pose_iters + 1):
        for group in opt.param_groups:
            group["lr"] = config.pose_lr * 0.5 * (
                1.0 + math.cos(math.pi * (n - 1) / config.pose_iters)
            )
        opt.zero_grad()
        color, _, _ = render_t(params, q, t, K)
        l_rgb = photometric_loss_t(target, color, config.lambda_dssim)
        l_feat = (
            feature_reprojection_loss_t(fs, fn, depth_t, K, q, t)
            if use_feat
            else torch.zeros((), dtype=torch.float64)
        )
        l_freq = (
            frequency_loss_t(
                target, color, n, schedule, h_t, g_t, band_weights, config.per_channel_freq
            )
            if use_freq
            else torch.zeros((), dtype=torch.float64)
        )
        total = weights.photometric * l_rgb + weights.feature * l_feat + weights.frequency * l_freq
        if not torch.isfinite(total):
            raise NumericalError(
                f"non-finite pose objective at iteration {n}: "
                f"rgb={l_rgb.item()}, feat={l_feat.item()}, freq={l_freq.item()}"
            )
        total_val = float(total.detach())
        trace.append(
            {
                "n": n,
                "total": total_val,
                "l_rgb": float(l_rgb.detach()),
                "l_feat": float(l_feat.detach()),
                "l_freq": float(l_freq.detach()),
                "w_h": anneal_weight(n, schedule),
                "freq_branch": _freq_branch(n, schedule),
            }
        )
        iterations = n
        if total_val < config.pose_loss_threshold:
            break
        total.backward()
        opt.step()
        with torch.no_grad():
            q /= torch.linalg.norm(q)

    transform = RelativeTransform(
        Quaternion.from_array(q.detach().numpy()).normalized(),
        t.detach().numpy().copy(),
    )
    return PoseEstimate(transform=transform, trace=trace, iterations=iterations)


def _fit_stride(K: Intrinsics, budget: int) -> int:
    return max(1, math.ceil(math.sqrt(K.width * K.height / max(budget, 1))))


def run_sequence(dataset: SequenceDataset, config: PipelineConfig) -> SequenceResult:
    """Run the full sequential pipeline over a dataset.

    The first pose is the identity by convention; every subsequent pose is
    the composition of the previous one with the estimated relative
    transform. A failing pair (degenerate overlap, non-finite objective)
    contributes an identity step and a flagged diagnostic instead of
    aborting.
    """
    K = dataset.intrinsics
    rng = np.random.default_rng(config.seed)
    stride = _fit_stride(K, config.gaussian_budget)

    state = SequenceState(trajectory=Trajectory())
    state.trajectory.append(dataset.frames[0].index, CameraPose())

    for i in range(len(dataset)):
        image = dataset.image(i)
        depth = dataset.depth(i)
        fitted = fit_gaussians(
            image,
            depth,
            K,
            iters=config.fit_iters,
            stride=stride,
            lambda_dssim=config.lambda_dssim,
            loss_threshold=config.fit_loss_threshold,
        )
        state.gaussians.append(fitted)
        if i == len(dataset) - 1:
            break

        diag: dict = {"pair": [dataset.frames[i].index, dataset.frames[i + 1].index]}
        have_feats = (
            dataset.frames[i].feature_path is not None
            and dataset.frames[i + 1].feature_path is not None
        )
        if have_feats:
            feat_src = dataset.features(i)
            feat_next = dataset.features(i + 1)
            mask_src = saliency_mask(feat_src, config.saliency_quantile)
            mask_next = saliency_mask(feat_next, config.saliency_quantile)
            pairs = best_buddies(feat_src, feat_next, mask_src, mask_next)
            init = init_relative_pose(
                pairs,
                depth,
                K,
                iters=config.init_iters,
                lr_start=config.init_lr_start,
                lr_end=config.init_lr_end,
                n_samples=config.num_matches,
                min_score=config.min_match_score,
                rng=rng,
            )
        else:
            pairs = []
            init = InitResult(RelativeTransform(), fallback=True)
        diag["n_matches"] = len(pairs)
        diag["init_fallback"] = init.fallback
        diag["init_residual_first"] = (
            float(init.residuals[0]) if len(init.residuals) else None
        )
        diag["init_residual_last"] = (
            float(init.residuals[-1]) if len(init.residuals) else None
        )

        frozen = state.gaussians[i].state_bytes()
        try:
            estimate = estimate_relative_pose(
                fitted,
                K,
                dataset.image(i + 1),
                feat_src.data if have_feats else None,
                feat_next.data if have_feats else None,
                depth,
                init.transform,
                config,
            )
            transform = estimate.transform
            diag["failed"] = False
            diag["iterations"] = estimate.iterations
            diag["final_losses"] = {
                k: estimate.trace[-1][k] for k in ("total", "l_rgb", "l_feat", "l_freq")
            }
        except (DegenerateOverlapError, NumericalError) as exc:
            transform = RelativeTransform()
            diag["failed"] = True
            diag["message"] = str(exc)
        assert state.gaussians[i].state_bytes() == frozen

        residual = reprojection_residual(init.used, depth, K, transform)
        diag["final_residual_px"] = residual if math.isfinite(residual) else None
        prev = state.trajectory.entries[-1][1]
        state.trajectory.append(dataset.frames[i + 1].index, compose(prev, transform))
        state.diagnostics.append(diag)

    return SequenceResult(
        trajectory=state.trajectory,
        gaussians=state.gaussians,
        diagnostics=state.diagnostics,
        config=config,
    )


def predict_test_pose(
    gaussians: GaussianSet,
    K: Intrinsics,
    image: np.ndarray,
    start_pose: CameraPose,
    iters: int = 300,
    lr: float = 1e-3,
    lambda_dssim: float = 0.2,
) -> CameraPose:
    """Photometric-only pose fit of a held-out frame, Gaussians frozen.

    Starts from the nearest training pose and optimizes the 7 pose
    coordinates with the same Adam + cosine schedule as the pose stage.
    """
    params = pack_gaussians(gaussians)
    target = torch.from_numpy(np.asarray(image, dtype=np.float64))
    q = torch.from_numpy(start_pose.rotation.normalized().as_array()).requires_grad_(True)
    t = torch.from_numpy(start_pose.translation.copy()).requires_grad_(True)
    opt = torch.optim.Adam([q, t], lr=lr, betas=(0.9, 0.999), eps=1e-8)

    for n in range(iters):
        for group in opt.param_groups:
            group["lr"] = lr * 0.5 * (1.0 + math.cos(math.pi * n / iters))
        opt.zero_grad()
        color, _, _ = render_t(params, q, t, K)
        loss = photometric_loss_t(target, color, lambda_dssim)
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite photometric loss at iteration {n}")
        loss.backward()
        opt.step()
        with torch.no_grad():
            q /= torch.linalg.norm(q)

    return CameraPose(
        Quaternion.from_array(q.detach().numpy()).normalized(),
        t.detach().numpy().copy(),
    )
