"""Rendering-quality and trajectory-accuracy metrics.

Trajectory metrics follow the visual-odometry convention: ATE is the RMSE of
camera positions after a closed-form similarity (Umeyama) alignment, RPE
compares adjacent relative motions and is invariant to any global rigid
transform of the estimate. RPE uses mean aggregation; translation is reported
x100 to match the usual table magnitudes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, DegenerateGeometryError
from .geometry import CameraPose, Trajectory, compose, inverse, relative_pose

PSNR_CAP_DB = 99.0


def psnr(image: np.ndarray, rendered: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0,1] images, capped at 99."""
    image = np.asarray(image, dtype=np.float64)
    rendered = np.asarray(rendered, dtype=np.float64)
    if image.shape != rendered.shape:
        raise InvalidInputError(f"shape mismatch: {image.shape} vs {rendered.shape}")
    mse = float(np.mean((image - rendered) ** 2))
    if mse <= 0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, float(10.0 * np.log10(1.0 / mse)))


@dataclass(frozen=True)
class Similarity:
    """Similarity transform x -> scale * rotation @ x + translation."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * (np.asarray(points) @ self.rotation.T) + self.translation


def umeyama_align(est: Trajectory, gt: Trajectory) -> Similarity:
    """Least-squares similarity mapping estimated positions onto ground truth.

    Closed form via the SVD of the cross-covariance (Umeyama 1991).
    """
    src = est.positions()
    dst = gt.positions()
    if len(src) != len(dst):
        raise InvalidInputError(f"trajectory length mismatch: {len(src)} vs {len(dst)}")
    if len(src) < 3:
        raise DegenerateGeometryError("need at least 3 poses for similarity alignment")

    mu_src = src.mean(axis=0)
    mu_dst = dst.mean(axis=0)
    src_c = src - mu_src
    dst_c = dst - mu_dst
    var_src = float(np.mean(np.sum(src_c**2, axis=1)))
    if var_src < 1e-18:
        raise DegenerateGeometryError("estimated positions are coincident")

    cov = dst_c.T @ src_c / len(src)
    u, d, vt = np.linalg.svd(cov)
    if np.linalg.matrix_rank(cov, tol=1e-12) < 2:
        raise DegenerateGeometryError("position configuration is collinear or coincident")
    s = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[2, 2] = -1.0
    rotation = u @ s @ vt
    scale = float(np.trace(np.diag(d) @ s) / var_src)
    translation = mu_dst - scale * rotation @ mu_src
    return Similarity(scale, rotation, translation)


def ate(est: Trajectory, gt: Trajectory) -> float:
    """RMSE of positions after similarity alignment, in ground-truth units."""
    if len(est) != len(gt):
        raise InvalidInputError(f"trajectory length mismatch: {len(est)} vs {len(gt)}")
    sim = umeyama_align(est, gt)
    aligned = sim.apply(est.positions())
    err = aligned - gt.positions()
    return float(np.sqrt(np.mean(np.sum(err**2, axis=1))))


def rpe(est: Trajectory, gt: Trajectory) -> dict[str, float]:
    """Mean relative-pose errors over adjacent pairs.

    Returns RPE_t (translation norm of the error motion, x100) and RPE_r
    (rotation angle of the error motion, degrees).
    """
    if len(est) != len(gt):
        raise InvalidInputError(f"trajectory length mismatch: {len(est)} vs {len(gt)}")
    if len(est) < 2:
        raise InvalidInputError("need at least 2 poses for RPE")
    t_errs, r_errs = [], []
    est_poses, gt_poses = est.poses(), gt.poses()
    for i in range(len(est_poses) - 1):
        rel_est = relative_pose(est_poses[i], est_poses[i + 1])
        rel_gt = relative_pose(gt_poses[i], gt_poses[i + 1])
        err = compose(inverse(rel_gt), rel_est)
        t_errs.append(np.linalg.norm(err.translation))
        r_errs.append(err.rotation.angle_deg())
    return {
        "rpe_t": float(np.mean(t_errs) * 100.0),
        "rpe_r": float(np.mean(r_errs)),
    }


def trajectory_arc_length(traj: Trajectory) -> float:
    """Sum of adjacent position distances."""
    pos = traj.positions()
    return float(np.sum(np.linalg.norm(np.diff(pos, axis=0), axis=1)))
