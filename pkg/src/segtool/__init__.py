"""Volumetric brain-tumour segmentation toolkit: Wasserstein Dice losses,
patch-fusion and test-time-augmented inference, and BraTS-style metrics."""

from .volume import (
    ChannelVolume, GeometryError, LabelSchema, LabelVolume, PatchSpec, ScalarVolume, SchemaError, ShapeError,
    argmax_labels, crop, one_hot, paste,
)
from .losses import (
    combined_loss, cross_entropy, finite_difference_gradient, gwdl, loss_gradient, mean_class_dice_loss,
    softmax, wasserstein_map,
)
from .augment import AugmentConfig, apply_augment, gamma_transform, resample
from .patches import fuse_patches, gaussian_kernel, plan_tiling, sliding_window_predict
from .ensemble import EnsembleConfig, center_of_gravity, clamp_patch, two_step_ensemble
from .metrics import dice_score, evaluate_cohort, hausdorff95, region_masks, summarize
from .formats import LabelCoding, read_nifti, read_raw_tensor, remap_labels, write_nifti, write_raw_tensor

__version__ = "0.1.0"

__all__ = [
    "ChannelVolume",
    "GeometryError",
    "LabelSchema",
    "LabelVolume",
    "PatchSpec",
    "ScalarVolume",
    "SchemaError",
    "ShapeError",
    "argmax_labels",
    "crop",
    "one_hot",
    "paste",
    "combined_loss",
    "cross_entropy",
    "finite_difference_gradient",
    "gwdl",
    "loss_gradient",
    "mean_class_dice_loss",
    "softmax",
    "wasserstein_map",
    "AugmentConfig",
    "apply_augment",
    "gamma_transform",
    "resample",
    "fuse_patches",
    "gaussian_kernel",
    "plan_tiling",
    "sliding_window_predict",
    "EnsembleConfig",
    "center_of_gravity",
    "clamp_patch",
    "two_step_ensemble",
    "dice_score",
    "evaluate_cohort",
    "hausdorff95",
    "region_masks",
    "summarize",
    "LabelCoding",
    "read_nifti",
    "read_raw_tensor",
    "remap_labels",
    "write_nifti",
    "write_raw_tensor",
]
