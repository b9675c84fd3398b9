"""Stochastic training-time augmentation.

Transforms run in a fixed order (zoom, rotation, noise, smoothing, gamma,
flip). For each one a uniform coin is drawn first; its parameters are
drawn only if it fires. The additive noise field is generated from a
64-bit sub-seed drawn from the main stream, so the scalar draw sequence
does not depend on the volume size.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .rng import make_generator
from .volume import ChannelVolume, LabelVolume, ScalarVolume, ShapeError

TRANSFORM_ORDER = ("zoom", "rotation", "noise", "smoothing", "gamma", "flip")


@dataclass
class AugmentConfig:
    zoom_prob: float = 0.3
    zoom_min: float = 0.7
    zoom_max: float = 1.5
    rotation_prob: float = 0.3
    rotation_min_deg: float = -15.0
    rotation_max_deg: float = 15.0
    noise_prob: float = 0.3
    noise_mean: float = 0.0
    noise_std: float = 0.1
    smooth_prob: float = 0.2
    smooth_min: float = 0.5
    smooth_max: float = 1.5
    gamma_prob: float = 0.3
    gamma_min: float = 0.7
    gamma_max: float = 1.5
    flip_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if f.name.endswith("_prob") and not 0.0 <= getattr(self, f.name) <= 1.0:
                raise ValueError(f"{f.name} must lie in [0, 1]")

    @classmethod
    def disabled(cls, **overrides) -> "AugmentConfig":
        """All probabilities zero, except those given in ``overrides``."""
        probs = {f.name: 0.0 for f in dataclasses.fields(cls) if f.name.endswith("_prob")}
        probs.update(overrides)
        return cls(**probs)

    @classmethod
    def from_text(cls, text: str) -> "AugmentConfig":
        """Parse ``key = value`` lines; keys are field names, ``#`` starts a comment."""
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"line {lineno}: unknown augmentation key {key!r}")
            values[key] = int(val, 0) if key == "seed" else float(val)
        return cls(**values)

    def to_text(self) -> str:
        return "".join(f"{k} = {v!r}\n" for k, v in dataclasses.asdict(self).items())


@dataclass
class AppliedRecord:
    seed: int
    entries: list[tuple[str, bool, dict]] = field(default_factory=list)

    def fired(self, name: str) -> bool:
        return any(n == name and f for n, f, _ in self.entries)

    def params(self, name: str) -> dict:
        for n, _, p in self.entries:
            if n == name:
                return p
        raise KeyError(name)

    def to_text(self) -> str:
        lines = [f"seed = {self.seed}"]
        for name, fired, params in self.entries:
            lines.append(f"{name}.fired = {int(fired)}")
            for k, v in params.items():
                if isinstance(v, (list, tuple)):
                    v = " ".join(repr(float(x)) for x in v)
                else:
                    v = repr(v)
                lines.append(f"{name}.{k} = {v}")
        return "\n".join(lines) + "\n"


def _as_array(vol):
    if isinstance(vol, (ChannelVolume, ScalarVolume, LabelVolume)):
        return vol.data
    return np.asarray(vol)


def _rewrap(like, data):
    if isinstance(like, ChannelVolume):
        return ChannelVolume(data, like.spacing, like.is_probability)
    if isinstance(like, (ScalarVolume, LabelVolume)):
        return type(like)(data, like.spacing)
    return data


def _affine_about_center(arr: np.ndarray, matrix: np.ndarray, order: int, mode: str) -> np.ndarray:
    """Pull-back resampling ``out[o] = in[matrix @ (o - c) + c]`` for 3D or channel-first 4D arrays."""
    spatial = arr.shape[-3:]
    c = (np.array(spatial, dtype=np.float64) - 1.0) / 2.0
    offset = c - matrix @ c
    if order == 0:
        work = arr
    else:
        work = arr.astype(np.float64, copy=False)

    def one(a):
        return ndimage.affine_transform(a, matrix, offset=offset, order=order, mode=mode, cval=0.0)

    if arr.ndim == 3:
        out = one(work)
    else:
        out = np.stack([one(ch) for ch in work])
    return out.astype(arr.dtype, copy=False) if order == 0 else out


_ORDER = {"trilinear": 1, "nearest": 0}


def resample(vol, zoom_ratio: float, interpolation: str = "trilinear", mode: str = "constant"):
    """Zoom about the volume center, keeping the input dims.

    ``zoom_ratio > 1`` magnifies (the borders are cropped away); ``< 1``
    shrinks, and samples falling outside the input are filled according
    to ``mode`` (``'constant'`` fills zeros, ``'nearest'`` repeats edges).
    """
    if zoom_ratio <= 0:
        raise ValueError("zoom ratio must be positive")
    arr = _as_array(vol)
    matrix = np.eye(3) / float(zoom_ratio)
    return _rewrap(vol, _affine_about_center(arr, matrix, _ORDER[interpolation], mode))


def rotation_matrix(angles_deg) -> np.ndarray:
    """Rotation about x, then y, then z (angles in degrees)."""
    ax, ay, az = np.deg2rad(np.asarray(angles_deg, dtype=np.float64))
    rx = np.array([[1, 0, 0], [0, np.cos(ax), -np.sin(ax)], [0, np.sin(ax), np.cos(ax)]])
    ry = np.array([[np.cos(ay), 0, np.sin(ay)], [0, 1, 0], [-np.sin(ay), 0, np.cos(ay)]])
    rz = np.array([[np.cos(az), -np.sin(az), 0], [np.sin(az), np.cos(az), 0], [0, 0, 1]])
    return rz @ ry @ rx


def rotate(vol, angles_deg, interpolation: str = "trilinear"):
    arr = _as_array(vol)
    # pull-back uses the inverse rotation, i.e. the transpose
    matrix = rotation_matrix(angles_deg).T
    return _rewrap(vol, _affine_about_center(arr, matrix, _ORDER[interpolation], "constant"))


def gaussian_smooth(image, sigma: float):
    arr = _as_array(image).astype(np.float64)
    out = np.stack([ndimage.gaussian_filter(ch, sigma, truncate=4.0, mode="nearest") for ch in arr])
    return _rewrap(image, out)


def gamma_transform(image, gamma: float):
    """Per-channel ``((x - min) / (max - min)) ** gamma`` mapped back to the original range."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    arr = _as_array(image).astype(np.float64)
    out = arr.copy()
    for c, ch in enumerate(arr):
        lo, hi = ch.min(), ch.max()
        if hi > lo:
            out[c] = ((ch - lo) / (hi - lo)) ** gamma * (hi - lo) + lo
    return _rewrap(image, out)


def flip_x(vol):
    arr = _as_array(vol)
    return _rewrap(vol, np.ascontiguousarray(np.flip(arr, axis=-3)))


def apply_augment(image: ChannelVolume, labels: LabelVolume | None, cfg: AugmentConfig, seed: int | None = None):
    """Apply the randomized transforms; returns ``(image, labels, record)``.

    Spatial transforms resample the image trilinearly and the labels by
    nearest neighbour, both with zero fill; intensity transforms touch the
    image only. ``labels`` may be None.
    """
    seed = cfg.seed if seed is None else seed
    if labels is not None and labels.dims != image.dims:
        raise ShapeError(f"image dims {image.dims} != label dims {labels.dims}")
    gen = make_generator(seed)
    img = image.data.astype(np.float64)
    lab = None if labels is None else labels.data
    record = AppliedRecord(seed)

    def coin(p):
        return bool(gen.random() < p)

    if coin(cfg.zoom_prob):
        ratio = float(gen.uniform(cfg.zoom_min, cfg.zoom_max))
        img = resample(img, ratio, "trilinear")
        if lab is not None:
            lab = resample(lab, ratio, "nearest")
        record.entries.append(("zoom", True, {"ratio": ratio}))
    else:
        record.entries.append(("zoom", False, {}))

    if coin(cfg.rotation_prob):
        angles = [float(gen.uniform(cfg.rotation_min_deg, cfg.rotation_max_deg)) for _ in range(3)]
        img = rotate(img, angles, "trilinear")
        if lab is not None:
            lab = rotate(lab, angles, "nearest")
        record.entries.append(("rotation", True, {"angles_deg": angles}))
    else:
        record.entries.append(("rotation", False, {}))

    if coin(cfg.noise_prob):
        sub = int(gen.integers(0, 2**64, dtype=np.uint64))
        noise = make_generator(sub).normal(cfg.noise_mean, cfg.noise_std, size=img.shape)
        img = img + noise
        record.entries.append(("noise", True, {"subseed": sub, "std": cfg.noise_std}))
    else:
        record.entries.append(("noise", False, {}))

    if coin(cfg.smooth_prob):
        sigma = float(gen.uniform(cfg.smooth_min, cfg.smooth_max))
        img = gaussian_smooth(img, sigma)
        record.entries.append(("smoothing", True, {"sigma": sigma}))
    else:
        record.entries.append(("smoothing", False, {}))

    if coin(cfg.gamma_prob):
        gamma = float(gen.uniform(cfg.gamma_min, cfg.gamma_max))
        img = gamma_transform(img, gamma)
        record.entries.append(("gamma", True, {"gamma": gamma}))
    else:
        record.entries.append(("gamma", False, {}))

    if coin(cfg.flip_prob):
        img = flip_x(img)
        if lab is not None:
            lab = flip_x(lab)
        record.entries.append(("flip", True, {"axis": 0}))
    else:
        record.entries.append(("flip", False, {}))

    dtype = image.data.dtype if np.issubdtype(image.data.dtype, np.floating) else np.float32
    out_img = ChannelVolume(img.astype(dtype, copy=False), image.spacing)
    out_lab = None if lab is None else LabelVolume(np.ascontiguousarray(lab), labels.spacing)
    return out_img, out_lab, record
