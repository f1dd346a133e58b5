"""Run reports: JSON + markdown tables, with matplotlib figures alongside.

JSON files are written with sorted keys and no timestamps so identical runs
produce identical bytes; figures are rendered with the Agg backend.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from .geometry import Trajectory  # noqa: E402
from .io import SequenceDataset, save_image  # noqa: E402
from .metrics import ate, rpe, trajectory_arc_length, umeyama_align  # noqa: E402
from .pipeline import SequenceResult  # noqa: E402
from .splat import save_gaussians  # noqa: E402


def _write_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _md_table(headers: list[str], rows: list[list[str]]) -> str:
    lines = [
        "| " + " | ".join(headers) + " |",
        "| " + " | ".join("---" for _ in headers) + " |",
    ]
    lines += ["| " + " | ".join(row) + " |" for row in rows]
    return "\n".join(lines) + "\n"


def _fmt(x) -> str:
    if x is None:
        return "-"
    if isinstance(x, bool):
        return "yes" if x else "no"
    if isinstance(x, float):
        return f"{x:.4g}"
    return str(x)


def _plot_trajectory(est: Trajectory, gt: Trajectory | None, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(5, 5))
    p = est.positions()
    ax.plot(p[:, 0], p[:, 2], "o-", label="estimated", ms=4)
    if gt is not None:
        g = gt.positions()
        ax.plot(g[:, 0], g[:, 2], "s--", label="ground truth", ms=4, alpha=0.7)
    ax.set_xlabel("x")
    ax.set_ylabel("z")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend()
    ax.set_title("camera positions (top view)")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _plot_losses(diagnostics: list[dict], path: Path) -> None:
    pairs = list(range(len(diagnostics)))
    fig, ax = plt.subplots(figsize=(6, 4))
    for key in ("l_rgb", "l_feat", "l_freq", "total"):
        ys = [
            d.get("final_losses", {}).get(key, np.nan) if not d.get("failed") else np.nan
            for d in diagnostics
        ]
        ax.plot(pairs, ys, "o-", label=key, ms=3)
    ax.set_xlabel("frame pair")
    ax.set_ylabel("final loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def write_sequence_report(
    result: SequenceResult, dataset: SequenceDataset, out_dir: str | Path
) -> dict:
    """Write trajectory, per-frame Gaussian sets, JSON/markdown report, figures."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.trajectory.save(out / "trajectory.txt")

    gdir = out / "gaussians"
    gdir.mkdir(exist_ok=True)
    for record, gs in zip(dataset.frames, result.gaussians):
        save_gaussians(gs, gdir / f"{record.index:03d}.gspt")

    report = {
        "config": result.config.to_dict(),
        "frames": len(dataset),
        "diagnostics": result.diagnostics,
    }

    gt = None
    if all(fr.gt_pose is not None for fr in dataset.frames):
        gt = dataset.gt_trajectory()
        est = result.trajectory
        pose_metrics = rpe(est, gt)
        pose_metrics["ate"] = ate(est, gt)
        arc = trajectory_arc_length(gt)
        pose_metrics["gt_arc_length"] = arc
        if arc > 0:
            pose_metrics["ate_fraction_of_arc"] = pose_metrics["ate"] / arc
        report["pose_metrics"] = pose_metrics

    _write_json(report, out / "report.json")

    rows = []
    for d in result.diagnostics:
        losses = d.get("final_losses", {})
        rows.append(
            [
                f"{d['pair'][0]}-{d['pair'][1]}",
                _fmt(d.get("n_matches")),
                _fmt(d.get("init_fallback")),
                _fmt(d.get("init_residual_last")),
                _fmt(d.get("final_residual_px")),
                _fmt(d.get("iterations")),
                _fmt(losses.get("l_rgb")),
                _fmt(losses.get("l_feat")),
                _fmt(losses.get("l_freq")),
                _fmt(d.get("failed")),
            ]
        )
    md = "# Sequence run\n\n" + _md_table(
        [
            "pair",
            "matches",
            "init fallback",
            "init resid (px)",
            "final resid (px)",
            "iters",
            "L_rgb",
            "L_feat",
            "L_freq",
            "failed",
        ],
        rows,
    )
    if "pose_metrics" in report:
        pm = report["pose_metrics"]
        md += "\n" + _md_table(
            ["RPE_t (x100)", "RPE_r (deg)", "ATE"],
            [[_fmt(pm["rpe_t"]), _fmt(pm["rpe_r"]), _fmt(pm["ate"])]],
        )
    (out / "report.md").write_text(md)

    _plot_trajectory(result.trajectory, gt, out / "trajectory.png")
    _plot_losses(result.diagnostics, out / "losses.png")
    return report


def write_pose_metrics(
    est: Trajectory, gt: Trajectory, out_dir: str | Path, scene: str = "scene"
) -> dict:
    """Trajectory metrics JSON + markdown table + aligned-trajectory figure."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    metrics = rpe(est, gt)
    metrics["ate"] = ate(est, gt)
    arc = trajectory_arc_length(gt)
    metrics["gt_arc_length"] = arc
    if arc > 0:
        metrics["ate_fraction_of_arc"] = metrics["ate"] / arc
    metrics["frames"] = len(est)
    metrics["rpe_t_unit"] = "scene units x100, mean over adjacent pairs"
    metrics["rpe_r_unit"] = "degrees, mean over adjacent pairs"
    _write_json(metrics, out / "pose_metrics.json")

    md = "# Pose metrics\n\n" + _md_table(
        ["scene", "RPE_t (x100)", "RPE_r (deg)", "ATE"],
        [[scene, _fmt(metrics["rpe_t"]), _fmt(metrics["rpe_r"]), _fmt(metrics["ate"])]],
    )
    (out / "pose_metrics.md").write_text(md)

    sim = umeyama_align(est, gt)
    aligned_positions = sim.apply(est.positions())
    fig, ax = plt.subplots(figsize=(5, 5))
    g = gt.positions()
    ax.plot(g[:, 0], g[:, 2], "s--", label="ground truth", ms=4, alpha=0.7)
    ax.plot(
        aligned_positions[:, 0], aligned_positions[:, 2], "o-", label="aligned estimate", ms=4
    )
    ax.set_xlabel("x")
    ax.set_ylabel("z")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend()
    ax.set_title("similarity-aligned trajectories (top view)")
    fig.tight_layout()
    fig.savefig(out / "alignment.png", dpi=110)
    plt.close(fig)
    return metrics


def write_nvs_metrics(
    metrics: dict,
    test_image: np.ndarray,
    render_opt: np.ndarray,
    render_nearest: np.ndarray,
    out_dir: str | Path,
) -> None:
    """Novel-view metrics JSON + markdown + side-by-side comparison figure."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(metrics, out / "nvs_metrics.json")

    md = "# Novel-view synthesis\n\n" + _md_table(
        ["view", "PSNR (dB)", "SSIM"],
        [
            ["optimized pose", _fmt(metrics["psnr"]), _fmt(metrics["ssim"])],
            [
                "nearest train pose",
                _fmt(metrics["psnr_nearest"]),
                _fmt(metrics["ssim_nearest"]),
            ],
        ],
    )
    (out / "nvs_metrics.md").write_text(md)

    fig, axes = plt.subplots(1, 3, figsize=(9, 3.2))
    for ax, img, title in zip(
        axes,
        (test_image, render_opt, render_nearest),
        ("held-out frame", "optimized pose", "nearest train pose"),
    ):
        ax.imshow(np.clip(img, 0, 1))
        ax.set_title(title, fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(out / "comparison.png", dpi=110)
    plt.close(fig)
    save_image(render_opt, out / "render_optimized.png")
    save_image(render_nearest, out / "render_nearest.png")
