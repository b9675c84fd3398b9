"""Synthetic multi-modal brain tumour phantoms for end-to-end checks."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .formats import MODALITIES, CaseManifest, LabelCoding, remap_labels, write_nifti
from .rng import make_generator
from .volume import ChannelVolume, LabelVolume, ScalarVolume

# mean intensity per internal class (rows) and modality (t1, t1ce, t2, flair)
CLASS_INTENSITY = np.array(
    [
        [0.60, 0.55, 0.40, 0.45],  # healthy tissue
        [0.45, 1.00, 0.70, 0.75],  # enhancing
        [0.50, 0.50, 0.90, 0.95],  # edema
        [0.30, 0.35, 1.00, 0.60],  # non-enhancing core
    ]
)


def make_phantom(dims=(240, 240, 155), seed: int = 0, lobes: int = 3, spacing=(1.0, 1.0, 1.0),
                 noise: float = 0.05) -> tuple[ChannelVolume, LabelVolume]:
    """A brain-shaped ellipsoid holding a tumour made of overlapping spherical lobes.

    Each lobe is edema around a core whose outer 3-voxel shell enhances.
    Returns the four-channel image and the internal-coded labels.
    """
    gen = make_generator(seed)
    dims = tuple(int(d) for d in dims)
    c0 = np.array(dims, dtype=np.float64) / 2 + gen.uniform(-0.06, 0.06, 3) * np.array(dims)
    scale = min(dims) / 155.0
    x, y, z = np.ogrid[: dims[0], : dims[1], : dims[2]]
    rank = np.zeros(dims, dtype=np.uint8)  # 0 none, 1 edema, 2 enhancing, 3 necrotic core
    for _ in range(lobes):
        c = c0 + gen.uniform(-10, 10, 3) * scale
        r_ed = gen.uniform(20, 28) * scale
        r_core = r_ed * gen.uniform(0.5, 0.65)
        shell = max(3.0 * scale, 1.0)
        d = np.sqrt((x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2)
        lobe = np.where(d < r_core - shell, 3, np.where(d < r_core, 2, np.where(d < r_ed, 1, 0))).astype(np.uint8)
        np.maximum(rank, lobe, out=rank)
        del d, lobe
    labels = np.array([0, 2, 1, 3], dtype=np.uint8)[rank]
    del rank

    half = np.array(dims, dtype=np.float64) / 2
    brain = ((x - half[0]) / (0.42 * dims[0])) ** 2 + ((y - half[1]) / (0.46 * dims[1])) ** 2 + \
        ((z - half[2]) / (0.45 * dims[2])) ** 2 < 1.0
    brain |= labels > 0
    image = np.empty((4,) + dims, dtype=np.float32)
    for m in range(4):
        ch = CLASS_INTENSITY[labels, m].astype(np.float32)
        ch += gen.standard_normal(dims, dtype=np.float32) * np.float32(noise)
        ch[~brain] = 0.0
        image[m] = ch
    return ChannelVolume(image, spacing), LabelVolume(labels, spacing)


def write_phantom_case(root, case_id: str, image: ChannelVolume, labels: LabelVolume | None,
                       coding: LabelCoding | None = None, suffix: str = ".nii") -> CaseManifest:
    """Write modalities to ``root/images`` and the disk-coded labels to ``root/gt/<case>.nii.gz``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    paths = {}
    for m, ch in zip(MODALITIES, image.data):
        p = root / "images" / f"{case_id}_{m}{suffix}"
        write_nifti(ScalarVolume(ch, image.spacing), p, np.float32)
        paths[m] = p
    seg = None
    if labels is not None:
        (root / "gt").mkdir(exist_ok=True)
        seg = root / "gt" / f"{case_id}.nii.gz"
        write_nifti(remap_labels(labels, coding, "to_disk"), seg, np.uint8)
    return CaseManifest(case_id, seg=seg, **paths)
