"""Pose-free 3D Gaussian splatting for short image sequences.

Fits per-frame Gaussian sets and estimates the camera trajectory without any
pose input, co-regularizing the photometric objective with dense feature
reprojection and annealed wavelet-band discrepancies.
"""

from .correspondence import (
    Correspondence,
    InitResult,
    best_buddies,
    init_relative_pose,
    reprojection_residual,
    saliency_mask,
)
from .errors import (
    BehindCameraError,
    DegenerateGeometryError,
    DegenerateOverlapError,
    FormatError,
    InvalidInputError,
    NumericalError,
    SplattrackError,
)
from .geometry import (
    CameraPose,
    Intrinsics,
    Quaternion,
    RelativeTransform,
    Trajectory,
    compose,
    inverse,
    pose_distance,
    project,
    relative_pose,
    unproject,
)
from .io import (
    FrameRecord,
    SequenceDataset,
    SyntheticSceneSpec,
    generate_synthetic,
    load_depth_map,
    load_feature_map,
    load_image,
    load_sequence,
    parse_kv,
    save_depth_map,
    save_feature_map,
    save_image,
)
from .losses import (
    FeatureMap,
    LossWeights,
    bilinear_sample,
    feature_reprojection_loss,
    photometric_loss,
    ssim,
)
from .metrics import Similarity, ate, psnr, rpe, trajectory_arc_length, umeyama_align
from .pipeline import (
    PipelineConfig,
    PoseEstimate,
    SequenceResult,
    estimate_relative_pose,
    predict_test_pose,
    run_sequence,
)
from .splat import (
    Gaussian,
    GaussianSet,
    RenderOutput,
    Splat2D,
    fit_gaussians,
    load_gaussians,
    project_gaussian,
    render,
    render_with_gradients,
    save_gaussians,
)
from .wavelet import (
    AnnealSchedule,
    BandWeights,
    FilterPair,
    WaveletBands,
    anneal_weight,
    band_discrepancy,
    dwt2,
    frequency_loss,
    idwt2,
)

__version__ = "0.1.0"

__all__ = [
    "AnnealSchedule",
    "BandWeights",
    "BehindCameraError",
    "CameraPose",
    "Correspondence",
    "DegenerateGeometryError",
    "DegenerateOverlapError",
    "FeatureMap",
    "FilterPair",
    "FormatError",
    "FrameRecord",
    "Gaussian",
    "GaussianSet",
    "InitResult",
    "Intrinsics",
    "InvalidInputError",
    "LossWeights",
    "NumericalError",
    "PipelineConfig",
    "PoseEstimate",
    "Quaternion",
    "RelativeTransform",
    "RenderOutput",
    "SequenceDataset",
    "SequenceResult",
    "Similarity",
    "Splat2D",
    "SplattrackError",
    "SyntheticSceneSpec",
    "Trajectory",
    "WaveletBands",
    "anneal_weight",
    "ate",
    "band_discrepancy",
    "best_buddies",
    "bilinear_sample",
    "compose",
    "dwt2",
    "estimate_relative_pose",
    "feature_reprojection_loss",
    "fit_gaussians",
    "frequency_loss",
    "generate_synthetic",
    "idwt2",
    "init_relative_pose",
    "inverse",
    "load_depth_map",
    "load_feature_map",
    "load_gaussians",
    "load_image",
    "load_sequence",
    "parse_kv",
    "photometric_loss",
    "pose_distance",
    "predict_test_pose",
    "project",
    "project_gaussian",
    "psnr",
    "relative_pose",
    "render",
    "render_with_gradients",
    "reprojection_residual",
    "rpe",
    "run_sequence",
    "save_depth_map",
    "save_feature_map",
    "save_gaussians",
    "save_image",
    "saliency_mask",
    "ssim",
    "trajectory_arc_length",
    "umeyama_align",
    "unproject",
]
