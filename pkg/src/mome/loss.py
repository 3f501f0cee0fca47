"""Soft Dice + cross-entropy with deep supervision over resolution levels."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor

DICE_SMOOTH = 1e-5
PROB_CLIP = 1e-7


def deep_supervision_weights(levels: int) -> np.ndarray:
    """Halving weight per coarser level, normalised to sum to one.

    >>> deep_supervision_weights(3) * 7
    array([4., 2., 1.])
    """
    if levels < 1:
        raise ContractError("need at least one supervised level")
    k = 0.5 ** np.arange(levels)
    return k / k.sum()


def _check_weights(k: Sequence[float], levels: int) -> np.ndarray:
    k = np.asarray(k, dtype=np.float64)
    if k.shape != (levels,):
        raise ContractError(f"{k.size} deep-supervision weights for {levels} levels")
    if np.any(k < 0):
        raise ContractError("deep-supervision weights must be non-negative")
    return k


def downsample_label(y: np.ndarray, level: int, levels: int | None = None) -> np.ndarray:
    """Nearest-neighbour label at ``level`` (1 = full resolution), keeping the
    (0,0,0) corner voxel of every 2^(level-1) block."""
    if level < 1 or (levels is not None and level > levels):
        raise ContractError(f"level {level} outside [1, {levels}]")
    step = 2 ** (level - 1)
    y = np.asarray(y)
    if any(n % step for n in y.shape):
        raise DimensionError(f"label dims {y.shape} not divisible by {step}")
    return y[::step, ::step, ::step]


def dice_ce(prob: Tensor, target: np.ndarray) -> Tensor:
    """Soft Dice loss on the foreground channel plus mean voxel cross-entropy.

    ``prob`` is ``[2, D, H, W]`` softmax output, ``target`` a 0/1 mask.
    """
    target = np.asarray(target)
    if prob.ndim != 4 or prob.shape[0] != 2:
        raise ContractError(f"expected [2, D, H, W] probabilities, got {prob.shape}")
    if prob.shape[1:] != target.shape:
        raise ContractError(f"probability dims {prob.shape[1:]} != target dims {target.shape}")
    if np.abs(prob.data.sum(axis=0) - 1.0).max() > 1e-5:
        raise ContractError("probabilities do not sum to one over the class axis")
    t = target.astype(prob.dtype)
    fg = prob[1]
    inter = T.sum(T.mul(fg, t))
    denom = T.add(T.sum(fg), float(t.sum()) + DICE_SMOOTH)
    dice = T.div(T.add(T.mul(inter, 2.0), DICE_SMOOTH), denom)
    dice_loss = T.add(T.neg(dice), 1.0)

    onehot = np.stack([1 - t, t])
    p_true = T.sum(T.mul(T.clip(prob, PROB_CLIP, 1 - PROB_CLIP), onehot), axis=0)
    ce = T.neg(T.mean(T.log(p_true)))
    return T.add(dice_loss, ce)


def deep_supervised_loss(levels: Sequence[Tensor], y: np.ndarray, k: Sequence[float]) -> Tensor:
    """sum_l k[l] * dice_ce(softmax(levels[l]), downsample(y, l))."""
    k = _check_weights(k, len(levels))
    total = None
    for l, logits in enumerate(levels):
        if k[l] == 0:
            continue
        term = T.mul(dice_ce(T.softmax(logits, axis=0), downsample_label(y, l + 1)), float(k[l]))
        total = term if total is None else T.add(total, term)
    if total is None:
        # all weights zero: keep the graph so the result is still a tensor
        total = T.mul(T.sum(levels[0]), 0.0)
    return total


def specialisation_loss(e, y: np.ndarray, k: Sequence[float]) -> Tensor:
    """Deep-supervised loss of one expert's multi-resolution logits."""
    return deep_supervised_loss(e.levels, y, k)


def mome_loss(o, y: np.ndarray, k: Sequence[float]) -> Tensor:
    """Deep-supervised loss of the gated aggregate."""
    return deep_supervised_loss(o.levels, y, k)
