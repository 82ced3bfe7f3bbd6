"""Time-informed non-contrastive pretraining for longitudinal 3D volumes."""

from .augment3d import AugmentConfig, View, derive_rng, make_view
from .config import RunConfig, load_run_config
from .evaluate import (
    EquivarianceReport,
    EvalConfig,
    MetricsReport,
    balanced_accuracy,
    concordance_index,
    equivariance_report,
    fine_tune,
    linear_eval,
    pr_auc,
    roc_auc,
)
from .losses import (
    LossConfig,
    barlow_twins_loss,
    combined_loss,
    covariance_term,
    invariance_term,
    tinc_term,
    variance_term,
)
from .model import EncoderConfig, ProjectorConfig, SiameseModel, build_model, encode, project
from .pairs import SamplerConfig, eligible_pairs, sample_batch
from .pretrain import PretrainConfig, load_model, pretrain, with_method
from .synthgen import SynthConfig, generate_cohort, severity_trace
from .voldata import Cohort, Label, assign_labels, glcm_contrast, load_manifest, preprocess

__all__ = [
    "AugmentConfig", "View", "derive_rng", "make_view",
    "RunConfig", "load_run_config",
    "EquivarianceReport", "EvalConfig", "MetricsReport", "balanced_accuracy",
    "concordance_index", "equivariance_report", "fine_tune", "linear_eval", "pr_auc", "roc_auc",
    "LossConfig", "barlow_twins_loss", "combined_loss", "covariance_term", "invariance_term",
    "tinc_term", "variance_term",
    "EncoderConfig", "ProjectorConfig", "SiameseModel", "build_model", "encode", "project",
    "SamplerConfig", "eligible_pairs", "sample_batch",
    "PretrainConfig", "load_model", "pretrain", "with_method",
    "SynthConfig", "generate_cohort", "severity_trace",
    "Cohort", "Label", "assign_labels", "glcm_contrast", "load_manifest", "preprocess",
]
