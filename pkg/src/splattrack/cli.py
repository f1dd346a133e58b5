"""Command-line entry points.

Exit codes: 0 success, 1 bad input (missing files, malformed config, unknown
flags), 2 numerical failure during optimization.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from .errors import (
    BehindCameraError,
    DegenerateGeometryError,
    DegenerateOverlapError,
    FormatError,
    InvalidInputError,
    NumericalError,
)
from .geometry import CameraPose, Intrinsics, Quaternion, Trajectory
from .io import (
    SyntheticSceneSpec,
    generate_synthetic,
    load_image,
    load_kv,
    load_sequence,
    save_depth_map,
    save_image,
)
from .pipeline import PipelineConfig, predict_test_pose, run_sequence
from .splat import load_gaussians, render
from .wavelet import dwt2


def _parse_scene_spec(raw: dict[str, str], seed: int | None) -> SyntheticSceneSpec:
    fields = {f.name: f for f in dataclasses.fields(SyntheticSceneSpec)}
    kwargs = {}
    for key, value in raw.items():
        if key not in fields:
            raise InvalidInputError(f"unknown scene key {key!r}")
        ftype = fields[key].type
        try:
            if ftype == "int":
                kwargs[key] = int(value)
            elif ftype.startswith("float"):
                kwargs[key] = float(value)
            else:
                kwargs[key] = value
        except ValueError as exc:
            raise InvalidInputError(
                f"scene key {key!r}: cannot parse {value!r} as {ftype}"
            ) from exc
    spec = SyntheticSceneSpec(**kwargs)
    if seed is not None:
        spec = dataclasses.replace(spec, seed=seed)
    return spec


def _load_pipeline_config(path: str | None, seed: int | None) -> PipelineConfig:
    config = PipelineConfig.from_dict(load_kv(path)) if path else PipelineConfig()
    if seed is not None:
        config = dataclasses.replace(config, seed=seed)
    return config


def _parse_pose(text: str) -> CameraPose:
    parts = text.split()
    if len(parts) != 7:
        raise InvalidInputError(
            f"pose must be 'tx ty tz qx qy qz qw' (7 numbers), got {len(parts)}"
        )
    tx, ty, tz, qx, qy, qz, qw = (float(p) for p in parts)
    return CameraPose(Quaternion(qw, qx, qy, qz).normalized(), np.array([tx, ty, tz]))


def _cmd_synth(args) -> int:
    raw = load_kv(args.config) if args.config else {}
    spec = _parse_scene_spec(raw, args.seed)
    generate_synthetic(spec, args.out)
    print(f"wrote synthetic sequence ({spec.num_frames} frames) to {args.out}")
    return 0


def _cmd_fit(args) -> int:
    from .report import write_sequence_report

    dataset = load_sequence(args.dataset)
    config = _load_pipeline_config(args.config, args.seed)
    result = run_sequence(dataset, config)
    write_sequence_report(result, dataset, args.out)
    failures = sum(1 for d in result.diagnostics if d.get("failed"))
    print(f"estimated {len(result.trajectory)} poses ({failures} failed pairs); "
          f"report in {args.out}")
    return 0


def _cmd_eval_pose(args) -> int:
    from .report import write_pose_metrics

    dataset = load_sequence(args.dataset)
    est = Trajectory.load(args.trajectory)
    gt = dataset.gt_trajectory()
    metrics = write_pose_metrics(est, gt, args.out, scene=Path(args.dataset).name)
    print(
        f"ATE {metrics['ate']:.6g}  RPE_t {metrics['rpe_t']:.6g}  "
        f"RPE_r {metrics['rpe_r']:.6g} deg; report in {args.out}"
    )
    return 0


def _cmd_eval_nvs(args) -> int:
    from .losses import ssim
    from .metrics import psnr
    from .report import write_nvs_metrics

    dataset = load_sequence(args.dataset)
    fit_dir = Path(args.fit_dir)
    traj_path = fit_dir / "trajectory.txt"
    if not traj_path.exists():
        raise InvalidInputError(f"{fit_dir}: missing trajectory.txt (run fit first)")
    traj = Trajectory.load(traj_path)
    train = {idx: pose for idx, pose in traj}
    k = args.test
    if k in train:
        raise InvalidInputError(f"frame {k} is part of the training trajectory")
    positions = {fr.index: i for i, fr in enumerate(dataset.frames)}
    if k not in positions:
        raise InvalidInputError(f"frame {k} is not in the dataset")

    nearest = min(train, key=lambda i: (abs(i - k), i))
    gs_path = fit_dir / "gaussians" / f"{nearest:03d}.gspt"
    if not gs_path.exists():
        raise InvalidInputError(f"{gs_path}: missing fitted Gaussians")
    gaussians = load_gaussians(gs_path)
    config = _load_pipeline_config(args.config, args.seed)

    K = dataset.intrinsics
    test_image = dataset.image(positions[k])
    pose = predict_test_pose(
        gaussians,
        K,
        test_image,
        train[nearest],
        iters=config.test_pose_iters,
        lr=config.test_pose_lr,
        lambda_dssim=config.lambda_dssim,
    )
    render_opt = render(gaussians, pose, K).color
    render_near = render(gaussians, train[nearest], K).color
    metrics = {
        "test_frame": k,
        "nearest_train_frame": nearest,
        "psnr": psnr(test_image, render_opt),
        "ssim": ssim(test_image, render_opt),
        "psnr_nearest": psnr(test_image, render_near),
        "ssim_nearest": ssim(test_image, render_near),
    }
    write_nvs_metrics(metrics, test_image, render_opt, render_near, args.out)
    print(
        f"frame {k}: PSNR {metrics['psnr']:.2f} dB (optimized) vs "
        f"{metrics['psnr_nearest']:.2f} dB (nearest train); report in {args.out}"
    )
    return 0


def _cmd_render(args) -> int:
    gaussians = load_gaussians(args.gaussians)
    K = Intrinsics.simple(args.size, args.focal)
    pose = _parse_pose(args.pose) if args.pose else CameraPose()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = render(gaussians, pose, K)
    save_image(result.color, out / "render.png")
    save_depth_map(np.where(result.alpha > 0.5, result.depth, 0.0), out / "depth.dmap")
    print(f"rendered {len(gaussians)} Gaussians to {out / 'render.png'}")
    return 0


def _cmd_dwt_dump(args) -> int:
    image = load_image(args.image)
    luma = image @ np.array([0.299, 0.587, 0.114])
    bands = dwt2(luma)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, band in (("ll", bands.ll), ("lh", bands.lh), ("hl", bands.hl), ("hh", bands.hh)):
        span = np.ptp(band)
        normed = (band - band.min()) / span if span > 0 else np.zeros_like(band)
        save_image(np.repeat(normed[:, :, None], 3, axis=2), out / f"{name}.png")
    print(f"wrote 4 band images to {out}")
    return 0


def _cmd_match_dump(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .correspondence import best_buddies, saliency_mask

    dataset = load_sequence(args.dataset)
    i = args.pair
    if not 0 <= i < len(dataset) - 1:
        raise InvalidInputError(f"pair index {i} out of range for {len(dataset)} frames")
    fa = dataset.features(i)
    fb = dataset.features(i + 1)
    pairs = best_buddies(
        fa, fb, saliency_mask(fa, args.quantile), saliency_mask(fb, args.quantile)
    )
    img_a = dataset.image(i)
    img_b = dataset.image(i + 1)
    w = img_a.shape[1]
    side = np.concatenate([img_a, img_b], axis=1)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.imshow(np.clip(side, 0, 1))
    for p in pairs:
        ax.plot(
            [p.src[0], p.dst[0] + w], [p.src[1], p.dst[1]], "-", lw=0.6, alpha=0.7
        )
    ax.set_title(f"{len(pairs)} mutual matches (frames {i} / {i + 1})")
    ax.axis("off")
    fig.tight_layout()
    fig.savefig(out / "matches.png", dpi=130)
    plt.close(fig)
    print(f"{len(pairs)} matches; wrote {out / 'matches.png'}")
    return 0


class _Parser(argparse.ArgumentParser):
    """Argparse that exits with code 1 (not 2) on bad usage."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="splattrack", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic sequence with ground truth")
    p.add_argument("--config", help="scene spec as key = value text")
    p.add_argument("--seed", type=int, help="override the scene seed")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("fit", help="estimate camera poses over a sequence")
    p.add_argument("dataset", help="sequence directory")
    p.add_argument("--config", help="pipeline config as key = value text")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", required=True, help="output report directory")
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("eval-pose", help="trajectory metrics against ground truth")
    p.add_argument("dataset", help="sequence directory with ground truth")
    p.add_argument("trajectory", help="estimated trajectory file")
    p.add_argument("--out", required=True, help="output metrics directory")
    p.set_defaults(func=_cmd_eval_pose)

    p = sub.add_parser("eval-nvs", help="held-out novel-view metrics")
    p.add_argument("dataset", help="sequence directory")
    p.add_argument("fit_dir", help="fit output directory")
    p.add_argument("--test", type=int, required=True, help="held-out frame index")
    p.add_argument("--config", help="pipeline config as key = value text")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", required=True, help="output metrics directory")
    p.set_defaults(func=_cmd_eval_nvs)

    p = sub.add_parser("render", help="render a Gaussian set file")
    p.add_argument("gaussians", help="Gaussian set file")
    p.add_argument("--size", type=int, default=64, help="square image size")
    p.add_argument("--focal", type=float, default=None, help="focal length in pixels")
    p.add_argument("--pose", help="camera pose: 'tx ty tz qx qy qz qw'")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("dwt-dump", help="dump wavelet subbands of an image as PNGs")
    p.add_argument("image", help="input PNG (even dimensions)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_dwt_dump)

    p = sub.add_parser("match-dump", help="visualize mutual feature matches")
    p.add_argument("dataset", help="sequence directory with feature maps")
    p.add_argument("--pair", type=int, default=0, help="source frame of the pair")
    p.add_argument("--quantile", type=float, default=0.5, help="saliency quantile")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_match_dump)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (InvalidInputError, FormatError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (
        NumericalError,
        DegenerateOverlapError,
        DegenerateGeometryError,
        BehindCameraError,
    ) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
