"""Segmentation losses with analytic gradients.

All functions take ``pred`` and ``gt`` as ``(L, nx, ny, nz)`` arrays (or
:class:`~segtool.volume.ChannelVolume`). ``pred`` holds predicted class
probabilities, ``gt`` the (one-hot) ground-truth probability map.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .volume import ChannelVolume, LabelSchema, SchemaError, ShapeError

LOG_CLAMP = 1e-12
DICE_SMOOTH = 1e-5

LOSS_KINDS = ("CE", "DL", "GWDL", "DL+CE", "GWDL+CE")


@dataclass
class LossValue:
    value: float
    per_voxel_aux: np.ndarray | None = None

    def __float__(self):
        return self.value


def _arr(x) -> np.ndarray:
    if isinstance(x, ChannelVolume):
        x = x.data
    return np.asarray(x, dtype=np.float64)


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p, g = _arr(pred), _arr(gt)
    if p.shape != g.shape:
        raise ShapeError(f"prediction shape {p.shape} != ground truth shape {g.shape}")
    return p, g


def _distance_matrix(m, num_classes: int) -> np.ndarray:
    if isinstance(m, LabelSchema):
        m = m.distance_matrix
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (num_classes, num_classes):
        raise SchemaError(f"distance matrix {m.shape} incompatible with {num_classes} classes")
    return m


def softmax(logits, axis: int = 0):
    """Numerically stable softmax over the channel axis.

    Accepts an array or a :class:`ChannelVolume`; returns the same kind.
    """
    if isinstance(logits, ChannelVolume):
        return ChannelVolume(softmax(logits.data, axis), logits.spacing, is_probability=True)
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy(pred, gt, reduction: str = "sum") -> LossValue:
    """``-sum_i sum_l gt log(pred)``; ``reduction='mean'`` divides by the voxel count."""
    p, g = _pair(pred, gt)
    per_voxel = -(g * np.log(np.maximum(p, LOG_CLAMP))).sum(axis=0)
    total = float(per_voxel.sum())
    if reduction == "mean":
        total /= per_voxel.size
    elif reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return LossValue(total, per_voxel)


def mean_class_dice_loss(pred, gt, eps: float = DICE_SMOOTH) -> LossValue:
    p, g = _pair(pred, gt)
    axes = tuple(range(1, p.ndim))
    inter = (g * p).sum(axis=axes)
    denom = g.sum(axis=axes) + p.sum(axis=axes)
    dice = (2 * inter + eps) / (denom + eps)
    return LossValue(float(1.0 - dice.mean()))


def wasserstein_map(pred, gt, m) -> np.ndarray:
    """Per-voxel Wasserstein distance ``W_i = sum_l gt_il sum_l' M_ll' pred_il'``."""
    p, g = _pair(pred, gt)
    mat = _distance_matrix(m, p.shape[0])
    # (M @ pred) per voxel, then dotted with gt
    mp = np.tensordot(mat, p, axes=([1], [0]))
    return (g * mp).sum(axis=0)


def _gwdl_terms(p, g, mat, background, eps):
    w = wasserstein_map(p, g, mat)
    fg = np.delete(g, background, axis=0).sum(axis=0)
    tp = (fg * (1.0 - w)).sum()
    num = 2 * tp + eps
    den = 2 * tp + w.sum() + eps
    return w, fg, num, den


def gwdl(pred, gt, schema: LabelSchema, eps: float = DICE_SMOOTH) -> LossValue:
    """Generalized Wasserstein Dice loss under ``schema.distance_matrix``."""
    p, g = _pair(pred, gt)
    mat = _distance_matrix(schema, p.shape[0])
    w, _, num, den = _gwdl_terms(p, g, mat, schema.background, eps)
    return LossValue(float(1.0 - num / den), w)


def combined_loss(kind: str, pred, gt, schema: LabelSchema) -> LossValue:
    """``DL+CE`` or ``GWDL+CE``; the CE term is the per-voxel mean."""
    ce = cross_entropy(pred, gt, reduction="mean").value
    if kind == "DL+CE":
        return LossValue(mean_class_dice_loss(pred, gt).value + ce)
    if kind == "GWDL+CE":
        g = gwdl(pred, gt, schema)
        return LossValue(g.value + ce, g.per_voxel_aux)
    raise ValueError(f"unknown combined loss {kind!r}")


def loss_value(kind: str, pred, gt, schema: LabelSchema) -> float:
    if kind == "CE":
        return cross_entropy(pred, gt).value
    if kind == "DL":
        return mean_class_dice_loss(pred, gt).value
    if kind == "GWDL":
        return gwdl(pred, gt, schema).value
    if kind in ("DL+CE", "GWDL+CE"):
        return combined_loss(kind, pred, gt, schema).value
    raise ValueError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")


# -- gradients with respect to the predicted probabilities ------------------


def _ce_grad(p, g, reduction="sum"):
    grad = np.where(p > LOG_CLAMP, -g / np.maximum(p, LOG_CLAMP), 0.0)
    if reduction == "mean":
        grad /= p[0].size
    return grad


def _dice_grad(p, g, eps=DICE_SMOOTH):
    axes = tuple(range(1, p.ndim))
    expand = (slice(None),) + (None,) * (p.ndim - 1)
    inter = (g * p).sum(axis=axes)[expand]
    s = (g.sum(axis=axes) + p.sum(axis=axes))[expand] + eps
    d_dice = (2 * g * s - (2 * inter + eps)) / s**2
    return -d_dice / p.shape[0]


def _gwdl_grad(p, g, mat, background, eps=DICE_SMOOTH):
    w, fg, num, den = _gwdl_terms(p, g, mat, background, eps)
    # d num/dW_i = -2 fg_i, d den/dW_i = 1 - 2 fg_i
    d_w = -((-2 * fg) * den - num * (1 - 2 * fg)) / den**2
    # dW_i/dpred_il' = (M^T gt_i)_l'
    mtg = np.tensordot(mat.T, g, axes=([1], [0]))
    return d_w[None] * mtg


def probability_gradient(kind: str, p, g, schema: LabelSchema) -> np.ndarray:
    mat = _distance_matrix(schema, p.shape[0])
    if kind == "CE":
        return _ce_grad(p, g)
    if kind == "DL":
        return _dice_grad(p, g)
    if kind == "GWDL":
        return _gwdl_grad(p, g, mat, schema.background)
    if kind == "DL+CE":
        return _dice_grad(p, g) + _ce_grad(p, g, "mean")
    if kind == "GWDL+CE":
        return _gwdl_grad(p, g, mat, schema.background) + _ce_grad(p, g, "mean")
    raise ValueError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")


def loss_gradient(kind: str, pred, gt, schema: LabelSchema, through_softmax: bool = False) -> np.ndarray:
    """Analytic gradient of loss ``kind``.

    With ``through_softmax`` the input is interpreted as logits and the
    gradient is taken with respect to them.
    """
    x, g = _pair(pred, gt)
    if not through_softmax:
        return probability_gradient(kind, x, g, schema)
    p = softmax(x)
    dp = probability_gradient(kind, p, g, schema)
    return p * (dp - (dp * p).sum(axis=0, keepdims=True))


def finite_difference_gradient(loss_fn: Callable[[np.ndarray], float], x, step: float) -> np.ndarray:
    """Central-difference gradient of a scalar function, one component at a time."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        up = loss_fn(x)
        flat[k] = orig - step
        down = loss_fn(x)
        flat[k] = orig
        gflat[k] = (up - down) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max over components of ``|a - n| / max(|a|, |n|, floor)``."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / scale).max())
