"""Overlapping-patch tiling, Gaussian fusion weights and sliding-window inference."""

from __future__ import annotations

from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .augment import flip_x
from .losses import softmax
from .predictors import PatchContext, Predictor, PredictorError
from .volume import ChannelVolume, GeometryError, LabelSchema, PatchSpec, ShapeError

DEFAULT_PATCH_SIZE = (128, 192, 128)
SIGMA_FRACTION = 0.125


@dataclass(frozen=True)
class TilingPlan:
    image_dims: tuple[int, int, int]
    patch_size: tuple[int, int, int]
    patches: tuple[PatchSpec, ...]

    def __len__(self):
        return len(self.patches)


def axis_origins(dim: int, patch: int) -> list[int]:
    """Evenly spread origins with a stride of at most ``patch // 2``."""
    if dim == patch:
        return [0]
    stride = max(patch // 2, 1)
    n = -(-(dim - patch) // stride) + 1
    span = dim - patch
    # round-half-up of k * span / (n - 1), in exact integer arithmetic
    return [(2 * k * span + (n - 1)) // (2 * (n - 1)) for k in range(n)]


def plan_tiling(image_dims: Sequence[int], patch_size: Sequence[int]) -> TilingPlan:
    dims, size = tuple(int(d) for d in image_dims), tuple(int(p) for p in patch_size)
    if any(d <= 0 for d in dims) or any(p <= 0 for p in size):
        raise GeometryError(f"dims {dims} and patch size {size} must be positive")
    if any(p > d for p, d in zip(size, dims)):
        raise GeometryError(f"patch size {size} larger than image dims {dims}; pad the image first")
    per_axis = [axis_origins(d, p) for d, p in zip(dims, size)]
    specs = tuple(PatchSpec((x, y, z), size) for x in per_axis[0] for y in per_axis[1] for z in per_axis[2])
    return TilingPlan(dims, size, specs)


@dataclass(frozen=True, eq=False)
class FusionKernel:
    """Separable Gaussian weights peaking at 1 at the geometric patch center.

    The center of an axis of length P sits at ``(P - 1) / 2``, between two
    voxels when P is even; ``sigma = 0.125 * P``.
    """

    size: tuple[int, int, int]
    sigmas: tuple[float, float, float]
    weights: np.ndarray

    def weight(self, offsets) -> float:
        """Weight at a (possibly fractional) offset from the center, per axis."""
        d = np.asarray(offsets, dtype=np.float64)
        s = np.asarray(self.sigmas)
        return float(np.exp(-np.sum(d**2 / (2 * s**2))))


def gaussian_kernel(patch_size: Sequence[int], sigma_fraction: float = SIGMA_FRACTION) -> FusionKernel:
    size = tuple(int(p) for p in patch_size)
    if any(p <= 0 for p in size):
        raise GeometryError(f"patch size {size} must be positive")
    sigmas = tuple(sigma_fraction * p for p in size)
    axes = []
    for p, s in zip(size, sigmas):
        d = np.arange(p, dtype=np.float64) - (p - 1) / 2.0
        axes.append(np.exp(-(d**2) / (2 * s * s)))
    w = axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]
    w.setflags(write=False)
    return FusionKernel(size, sigmas, w)


class PatchFuser:
    """Accumulates per-patch logits into a weighted average over the image.

    The per-voxel weight total is computed up front from the patch layout,
    so each patch contributes ``(w / total) * logits``. A voxel covered by
    a single patch therefore receives exactly that patch's value.
    """

    def __init__(self, specs: Iterable[PatchSpec], kernel: FusionKernel, image_dims: Sequence[int], channels: int):
        self.specs = sorted(specs, key=lambda s: s.origin)
        self.kernel = kernel
        self.dims = tuple(int(d) for d in image_dims)
        total = np.zeros(self.dims, dtype=np.float64)
        for spec in self.specs:
            spec.check(self.dims)
            if spec.size != kernel.size:
                raise ShapeError(f"patch size {spec.size} differs from kernel size {kernel.size}")
            total[spec.slices] += kernel.weights
        if not np.all(total > 0):
            idx = tuple(int(i[0]) for i in np.nonzero(total <= 0))
            raise GeometryError(f"voxel {idx} is not covered by any patch")
        self.total = total
        self.acc = np.zeros((channels,) + self.dims, dtype=np.float64)

    def add(self, spec: PatchSpec, logits: np.ndarray) -> None:
        if logits.shape != self.acc.shape[:1] + spec.size:
            raise ShapeError(f"patch logits shape {logits.shape} != {self.acc.shape[:1] + spec.size}")
        frac = self.kernel.weights / self.total[spec.slices]
        self.acc[(slice(None),) + spec.slices] += frac * logits

    def result(self) -> np.ndarray:
        return self.acc


def fuse_patches(patch_logits: Sequence[tuple[PatchSpec, np.ndarray]], kernel: FusionKernel,
                 image_dims: Sequence[int]) -> np.ndarray:
    """Gaussian-weighted average of patch logits; returns ``(C, nx, ny, nz)`` float64."""
    if not patch_logits:
        raise GeometryError("no patches to fuse")
    items = sorted(patch_logits, key=lambda item: item[0].origin)
    channels = np.asarray(items[0][1]).shape[0]
    fuser = PatchFuser([s for s, _ in items], kernel, image_dims, channels)
    for spec, logits in items:
        fuser.add(spec, np.asarray(logits, dtype=np.float64))
    return fuser.result()


def _pad_to(image: np.ndarray, size: Sequence[int]):
    dims = image.shape[1:]
    before = [max(p - d, 0) // 2 for d, p in zip(dims, size)]
    after = [max(p - d, 0) - b for d, p, b in zip(dims, size, before)]
    if not any(before) and not any(after):
        return image, before
    return np.pad(image, [(0, 0)] + list(zip(before, after))), before


def predict_patch(predictor: Predictor, patch: np.ndarray, context: PatchContext, channels: int) -> np.ndarray:
    try:
        out = predictor.predict(patch, context)
    except PredictorError:
        raise
    except Exception as e:
        raise PredictorError(f"{type(e).__name__}: {e}", getattr(predictor, "name", "?"), context.origin) from e
    out = np.asarray(out, dtype=np.float64)
    if out.shape != (channels,) + patch.shape[1:]:
        raise PredictorError(f"returned shape {out.shape}, expected {(channels,) + patch.shape[1:]}",
                             getattr(predictor, "name", "?"), context.origin)
    return out


def ordered_map(fn, items, jobs: int):
    """Ordered map with at most ``jobs`` calls in flight."""
    if jobs <= 1:
        yield from map(fn, items)
        return
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        pending = deque()
        for item in items:
            pending.append(pool.submit(fn, item))
            if len(pending) >= jobs:
                yield pending.popleft().result()
        while pending:
            yield pending.popleft().result()


def sliding_window_logits(predictor: Predictor, image: np.ndarray, num_classes: int,
                          patch_size: Sequence[int], flip: bool, jobs: int = 1,
                          offset: Sequence[int] = (0, 0, 0)) -> np.ndarray:
    """Fused logits for one test-time branch (``flip`` mirrors each patch along x)."""
    plan = plan_tiling(image.shape[1:], patch_size)
    kernel = gaussian_kernel(patch_size)
    fuser = PatchFuser(plan.patches, kernel, plan.image_dims, num_classes)

    def run(spec: PatchSpec):
        patch = image[(slice(None),) + spec.slices]
        origin = tuple(o - p for o, p in zip(spec.origin, offset))
        if flip:
            patch = flip_x(patch)
        out = predict_patch(predictor, patch, PatchContext(origin, flip=flip), num_classes)
        return flip_x(out) if flip else out

    for spec, logits in zip(fuser.specs, ordered_map(run, fuser.specs, jobs)):
        fuser.add(spec, logits)
    return fuser.result()


def sliding_window_predict(predictor: Predictor, image: ChannelVolume, schema: LabelSchema | None = None,
                           flip_tta: bool = True, patch_size: Sequence[int] = DEFAULT_PATCH_SIZE,
                           jobs: int = 1) -> ChannelVolume:
    """Single-model inference: tile, fuse logits per branch, softmax, average branches."""
    schema = schema or LabelSchema.brats()
    data = image.data if isinstance(image, ChannelVolume) else np.asarray(image)
    spacing = image.spacing if isinstance(image, ChannelVolume) else (1.0, 1.0, 1.0)
    dims = data.shape[1:]
    padded, before = _pad_to(data, patch_size)
    probs = softmax(sliding_window_logits(predictor, padded, schema.num_classes, patch_size, False, jobs, before))
    if flip_tta:
        flipped = softmax(sliding_window_logits(predictor, padded, schema.num_classes, patch_size, True, jobs, before))
        probs += flipped
        del flipped
        probs *= 0.5
    crop = (slice(None),) + tuple(slice(b, b + d) for b, d in zip(before, dims))
    return ChannelVolume(np.ascontiguousarray(probs[crop]), spacing, is_probability=True)


def _check_stride(plan: TilingPlan) -> bool:
    for axis in range(3):
        origins = sorted({s.origin[axis] for s in plan.patches})
        if any(b - a > plan.patch_size[axis] // 2 for a, b in zip(origins, origins[1:])):
            return False
    return True


def coverage_ok(plan: TilingPlan) -> bool:
    """True when every voxel is covered, all patches fit and strides are at most half a patch."""
    covered = np.zeros(plan.image_dims, dtype=bool)
    for s in plan.patches:
        if not s.fits(plan.image_dims):
            return False
        covered[s.slices] = True
    return bool(covered.all()) and _check_stride(plan)

