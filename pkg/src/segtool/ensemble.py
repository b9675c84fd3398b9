"""Two-step, tumor-centred ensemble inference with flip/zoom test-time augmentation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .augment import flip_x, resample
from .losses import softmax
from .patches import DEFAULT_PATCH_SIZE, ordered_map, predict_patch, sliding_window_predict
from .predictors import PatchContext, Predictor
from .volume import ChannelVolume, GeometryError, LabelSchema, LabelVolume, PatchSpec, argmax_labels

DEFAULT_ZOOM = 1.125


class EmptyMaskError(ValueError):
    pass


def center_of_gravity(mask) -> tuple[int, int, int]:
    """Mean foreground coordinate, rounded to the nearest voxel (halves go down)."""
    data = mask.data if isinstance(mask, LabelVolume) else np.asarray(mask)
    coords = np.nonzero(data)
    if len(coords[0]) == 0:
        raise EmptyMaskError("mask has no foreground voxels")
    return tuple(int(np.ceil(c.mean(dtype=np.float64) - 0.5)) for c in coords)


def clamp_patch(center: Sequence[int], patch_size: Sequence[int], image_dims: Sequence[int]) -> PatchSpec:
    """Patch of ``patch_size`` centred as close to ``center`` as the image allows."""
    if any(p > d for p, d in zip(patch_size, image_dims)):
        raise GeometryError(f"patch size {tuple(patch_size)} larger than image dims {tuple(image_dims)}")
    origin = tuple(min(max(int(c) - p // 2, 0), d - p) for c, p, d in zip(center, patch_size, image_dims))
    return PatchSpec(origin, tuple(patch_size))


@dataclass
class EnsembleConfig:
    predictors: list[Predictor]
    patch_size: tuple[int, int, int] = DEFAULT_PATCH_SIZE
    tta: tuple[str, ...] = ("flip", "zoom")
    zoom_ratio: float = DEFAULT_ZOOM
    schema: LabelSchema = field(default_factory=LabelSchema.brats)
    jobs: int = 1

    def __post_init__(self):
        if not self.predictors:
            raise ValueError("an ensemble needs at least one predictor")
        if self.zoom_ratio <= 0:
            raise ValueError("zoom ratio must be positive")
        unknown = set(self.tta) - {"flip", "zoom"}
        if unknown:
            raise ValueError(f"unknown test-time augmentations {sorted(unknown)}")

    def combinations(self) -> list[tuple[bool, float | None]]:
        """(flip, zoom) pairs in the order no/no, flip/no, no/zoom, flip/zoom."""
        flips = [False, True] if "flip" in self.tta else [False]
        zooms = [None, self.zoom_ratio] if "zoom" in self.tta else [None]
        return [(f, z) for z in zooms for f in flips]


@dataclass
class EnsembleResult:
    labels: LabelVolume
    probabilities: ChannelVolume
    patch: PatchSpec
    center: tuple[int, int, int]
    used_fallback: bool


def tta_softmax(predictor: Predictor, patch: np.ndarray, origin, flip: bool, zoom: float | None,
                num_classes: int) -> np.ndarray:
    """Softmax prediction for one transformed copy of ``patch``, mapped back to the patch grid."""
    x = flip_x(patch) if flip else patch
    if zoom is not None:
        x = resample(x, zoom, "trilinear", mode="nearest")
    logits = predict_patch(predictor, x, PatchContext(tuple(origin), flip=flip, zoom=zoom), num_classes)
    probs = softmax(logits)
    if zoom is not None:
        probs = resample(probs, 1.0 / zoom, "trilinear", mode="nearest")
    return flip_x(probs) if flip else probs


def patch_ensemble(image: np.ndarray, spec: PatchSpec, cfg: EnsembleConfig) -> np.ndarray:
    """Average softmax over every predictor and test-time transform on the cropped patch."""
    patch = image[(slice(None),) + spec.slices].astype(np.float64)
    jobs_list = [(p, f, z) for p in cfg.predictors for f, z in cfg.combinations()]
    L = cfg.schema.num_classes

    def run(job):
        pred, flip, zoom = job
        return tta_softmax(pred, patch, spec.origin, flip, zoom, L)

    # TTA mean per predictor, then a running mean over predictors: identical
    # predictors leave the running mean unchanged bit for bit
    combos = len(cfg.combinations())
    mean = tta_sum = None
    for k, probs in enumerate(ordered_map(run, jobs_list, cfg.jobs)):
        tta_sum = probs if k % combos == 0 else tta_sum + probs
        if k % combos == combos - 1:
            member = tta_sum / combos
            n = k // combos + 1
            mean = member if mean is None else mean + (member - mean) / n
    return mean


def two_step_ensemble(image: ChannelVolume, cfg: EnsembleConfig) -> EnsembleResult:
    """Locate the tumour with the first predictor, then ensemble on one centred patch.

    Voxels outside the patch are labelled background.
    """
    schema = cfg.schema
    dims = image.dims
    if any(p > d for p, d in zip(cfg.patch_size, dims)):
        raise GeometryError(f"patch size {cfg.patch_size} larger than image dims {dims}")
    first = sliding_window_predict(cfg.predictors[0], image, schema, flip_tta=True,
                                   patch_size=cfg.patch_size, jobs=cfg.jobs)
    coarse = argmax_labels(first).data
    del first
    wt = np.isin(coarse, schema.regions.get("WT", tuple(i for i in range(schema.num_classes) if i != schema.background)))
    try:
        center, fallback = center_of_gravity(wt), False
    except EmptyMaskError:
        center, fallback = tuple(d // 2 for d in dims), True
    spec = clamp_patch(center, cfg.patch_size, dims)

    probs_patch = patch_ensemble(image.data, spec, cfg)
    probs = np.zeros((schema.num_classes,) + dims, dtype=np.float64)
    probs[schema.background] = 1.0
    probs[(slice(None),) + spec.slices] = probs_patch
    labels = np.full(dims, schema.background, dtype=np.uint8)
    labels[spec.slices] = np.argmax(probs_patch, axis=0)
    return EnsembleResult(
        LabelVolume(labels, image.spacing),
        ChannelVolume(probs, image.spacing, is_probability=True),
        spec, center, fallback,
    )
