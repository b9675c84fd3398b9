"""Dense volume types, crop/paste geometry and the label schema.

Arrays are indexed ``[x, y, z]`` (``[c, x, y, z]`` for channel volumes).
Whenever a volume is flattened for storage, the x index varies fastest,
i.e. ``flat = x + nx * (y + ny * z)``, which is numpy's Fortran order on
the spatial axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class SchemaError(ValueError):
    """A label value or schema definition is inconsistent."""


class GeometryError(ValueError):
    """A patch or region does not fit the volume it is applied to."""


class ShapeError(ValueError):
    """Two arrays that must agree in shape do not."""


Triple = tuple[int, int, int]


def _spacing(spacing) -> tuple[float, float, float]:
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3 or any(s <= 0 or not np.isfinite(s) for s in sp):
        raise GeometryError(f"spacing must be three positive numbers, got {spacing!r}")
    return sp


@dataclass(frozen=True, eq=False)
class ScalarVolume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ShapeError(f"scalar volume must be 3D, got shape {self.data.shape}")
        object.__setattr__(self, "spacing", _spacing(self.spacing))

    @property
    def dims(self) -> Triple:
        return tuple(int(d) for d in self.data.shape)


@dataclass(frozen=True, eq=False)
class LabelVolume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ShapeError(f"label volume must be 3D, got shape {self.data.shape}")
        if not np.issubdtype(self.data.dtype, np.integer):
            raise SchemaError(f"label volume needs an integer dtype, got {self.data.dtype}")
        object.__setattr__(self, "spacing", _spacing(self.spacing))

    @property
    def dims(self) -> Triple:
        return tuple(int(d) for d in self.data.shape)

    def check(self, num_classes: int) -> None:
        if self.data.size and (self.data.min() < 0 or self.data.max() >= num_classes):
            bad = np.unique(self.data[(self.data < 0) | (self.data >= num_classes)])
            raise SchemaError(f"label values {bad.tolist()} outside 0..{num_classes - 1}")


@dataclass(frozen=True, eq=False)
class ChannelVolume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    is_probability: bool = False

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[0] < 1:
            raise ShapeError(f"channel volume must be (C, nx, ny, nz), got {self.data.shape}")
        object.__setattr__(self, "spacing", _spacing(self.spacing))

    @property
    def channels(self) -> int:
        return int(self.data.shape[0])

    @property
    def dims(self) -> Triple:
        return tuple(int(d) for d in self.data.shape[1:])

    def check_probability(self, atol: float = 1e-5) -> bool:
        d = self.data
        return bool(np.all(d >= 0) and np.allclose(d.sum(axis=0), 1.0, rtol=0, atol=atol))


@dataclass(frozen=True)
class PatchSpec:
    origin: Triple
    size: Triple

    def __post_init__(self):
        origin = tuple(int(o) for o in self.origin)
        size = tuple(int(s) for s in self.size)
        if len(origin) != 3 or len(size) != 3:
            raise GeometryError("patch origin and size must have three components")
        if any(o < 0 for o in origin) or any(s <= 0 for s in size):
            raise GeometryError(f"invalid patch origin={origin} size={size}")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "size", size)

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(o, o + s) for o, s in zip(self.origin, self.size))

    def fits(self, dims: Sequence[int]) -> bool:
        return all(o + s <= d for o, s, d in zip(self.origin, self.size, dims))

    def check(self, dims: Sequence[int]) -> None:
        if not self.fits(dims):
            raise GeometryError(f"patch origin={self.origin} size={self.size} exceeds dims {tuple(dims)}")


# class indices: 0 background, 1 enhancing tumor, 2 edema, 3 non-enhancing tumor core
BRATS_DISTANCE_MATRIX = np.array(
    [
        [0.0, 1.0, 1.0, 1.0],
        [1.0, 0.0, 0.7, 0.5],
        [1.0, 0.7, 0.0, 0.6],
        [1.0, 0.5, 0.6, 0.0],
    ]
)


@dataclass(frozen=True, eq=False)
class LabelSchema:
    class_names: tuple[str, ...]
    distance_matrix: np.ndarray
    regions: dict[str, tuple[int, ...]] = field(default_factory=dict)
    background: int = 0

    def __post_init__(self):
        m = np.asarray(self.distance_matrix, dtype=np.float64)
        n = len(self.class_names)
        if m.shape != (n, n):
            raise SchemaError(f"distance matrix shape {m.shape} does not match {n} classes")
        if not np.array_equal(m, m.T):
            raise SchemaError("distance matrix must be symmetric")
        if np.any(np.diag(m) != 0):
            raise SchemaError("distance matrix must have a zero diagonal")
        if np.any(m < 0) or np.any(m > 1):
            raise SchemaError("distance matrix entries must lie in [0, 1]")
        if not 0 <= self.background < n:
            raise SchemaError(f"background index {self.background} outside 0..{n - 1}")
        regions = {}
        for name, idx in self.regions.items():
            idx = tuple(int(i) for i in idx)
            if any(not 0 <= i < n for i in idx):
                raise SchemaError(f"region {name} refers to classes outside 0..{n - 1}")
            regions[name] = idx
        m.setflags(write=False)
        object.__setattr__(self, "distance_matrix", m)
        object.__setattr__(self, "class_names", tuple(self.class_names))
        object.__setattr__(self, "regions", regions)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @classmethod
    def brats(cls) -> "LabelSchema":
        return cls(
            class_names=("background", "enhancing", "edema", "non-enhancing"),
            distance_matrix=BRATS_DISTANCE_MATRIX,
            regions={"ET": (1,), "TC": (1, 3), "WT": (1, 2, 3)},
            background=0,
        )

    def to_dict(self) -> dict:
        return {
            "class_names": list(self.class_names),
            "background": self.background,
            "distance_matrix": self.distance_matrix.tolist(),
            "regions": {k: list(v) for k, v in self.regions.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LabelSchema":
        return cls(
            class_names=tuple(d["class_names"]),
            distance_matrix=np.array(d["distance_matrix"], dtype=np.float64),
            regions={k: tuple(v) for k, v in d.get("regions", {}).items()},
            background=int(d.get("background", 0)),
        )


def one_hot(labels: LabelVolume, num_classes: int) -> ChannelVolume:
    labels.check(num_classes)
    classes = np.arange(num_classes).reshape(-1, 1, 1, 1)
    data = (labels.data[None] == classes).astype(np.float64)
    return ChannelVolume(data, labels.spacing, is_probability=True)


def argmax_labels(probs: ChannelVolume) -> LabelVolume:
    # np.argmax returns the first maximal index, i.e. ties go to the lowest class
    lab = np.argmax(probs.data, axis=0).astype(np.uint8 if probs.channels <= 256 else np.int32)
    return LabelVolume(lab, probs.spacing)


def crop(vol, spec: PatchSpec):
    """Return the sub-grid of ``vol`` covered by ``spec`` as a new volume of the same kind."""
    spec.check(vol.dims)
    if isinstance(vol, ChannelVolume):
        return ChannelVolume(vol.data[(slice(None),) + spec.slices].copy(), vol.spacing, vol.is_probability)
    return type(vol)(vol.data[spec.slices].copy(), vol.spacing)


def paste(dst, src, spec: PatchSpec):
    """Write ``src`` into ``dst`` at ``spec.origin`` in place and return ``dst``."""
    spec.check(dst.dims)
    if tuple(src.dims) != spec.size:
        raise GeometryError(f"source dims {src.dims} differ from patch size {spec.size}")
    if isinstance(dst, ChannelVolume):
        if src.channels != dst.channels:
            raise ShapeError(f"channel mismatch {src.channels} vs {dst.channels}")
        dst.data[(slice(None),) + spec.slices] = src.data
    else:
        dst.data[spec.slices] = src.data
    return dst
