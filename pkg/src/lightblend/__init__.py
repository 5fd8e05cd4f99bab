"""Lighting-aware portrait harmonization at desk scale.

A verifiable three-stage pipeline: a synthetic light-stage renderer
produces relighting tuples; a conditioned pixel-space diffusion model
learns to harmonize composites; an alignment network lets the
environment-trained model run from a plain background image; and a
synthesis pass manufactures finetuning pairs whose targets are untouched
renders.
"""

from .conditioning import (
    AlignmentNet,
    ConditionedDenoiser,
    ConditioningBranch,
    ExtractorConfig,
    FeatureExtractor,
    feature_norm_map,
)
from .dataset import TupleRecord, load_arrays, read_manifest, validate_dataset
from .diffusion import (
    DenoiserConfig,
    NoiseSchedule,
    UNet,
    make_schedule,
    q_sample,
    sample,
)
from .envmap import (
    CropSpec,
    EnvMap,
    irradiance,
    load_envmap,
    project_to_background,
    rotate_envmap,
    save_envmap,
    tonemap_ldr,
)
from .harmonize import (
    EvalReport,
    HarmonizeRequest,
    InferenceModel,
    evaluate,
    flip_consistency,
    harmonize,
    light_azimuth_probe,
)
from .imgio import composite
from .metrics import mse, psnr, ssim
from .simulate import (
    DataConfig,
    SubjectSpec,
    build_dataset,
    render_subject,
    render_tuple,
)
from .synthesis import build_synth_dataset, make_clean_background, relight_input
from .training import (
    Checkpoint,
    LossRecord,
    StageConfig,
    assemble_final,
    default_config,
    load_checkpoint,
    load_config,
    train_align,
    train_finetune,
    train_stage1,
)

__version__ = "0.1.0"

__all__ = [
    "AlignmentNet",
    "Checkpoint",
    "ConditionedDenoiser",
    "ConditioningBranch",
    "CropSpec",
    "DataConfig",
    "DenoiserConfig",
    "EnvMap",
    "EvalReport",
    "ExtractorConfig",
    "FeatureExtractor",
    "HarmonizeRequest",
    "InferenceModel",
    "LossRecord",
    "NoiseSchedule",
    "StageConfig",
    "SubjectSpec",
    "TupleRecord",
    "UNet",
    "assemble_final",
    "build_dataset",
    "build_synth_dataset",
    "composite",
    "default_config",
    "evaluate",
    "feature_norm_map",
    "flip_consistency",
    "harmonize",
    "irradiance",
    "light_azimuth_probe",
    "load_arrays",
    "load_checkpoint",
    "load_config",
    "load_envmap",
    "make_clean_background",
    "make_schedule",
    "mse",
    "project_to_background",
    "psnr",
    "q_sample",
    "read_manifest",
    "relight_input",
    "render_subject",
    "render_tuple",
    "rotate_envmap",
    "sample",
    "save_envmap",
    "ssim",
    "tonemap_ldr",
    "train_align",
    "train_finetune",
    "train_stage1",
    "validate_dataset",
    "__version__",
]
