"""Channel-wise structural sparsification by refilling.

Output channels (rows of the c_out x n mask) are scored, the top-k rows are
fully refilled to all-ones, and the remaining rows are emptied.  k is chosen
so the layerwise sparsity is preserved to within one channel.  Refill+
additionally revives an extra fraction of channels to soften capacity loss.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import SparseMask, WeightTensor, check_congruent
from .errors import CriterionError, ParameterError

CRITERIA = ("l1_weight", "remaining_count")


@dataclass(frozen=True)
class ChannelScore:
    """Per-output-channel importance under a named criterion."""

    layer_name: str
    criterion: str
    scores: np.ndarray = field(repr=False)

    def __post_init__(self):
        scores = np.ascontiguousarray(np.asarray(self.scores, dtype=np.float64))
        scores.flags.writeable = False
        object.__setattr__(self, "scores", scores)


def score_channels(
    mask: SparseMask, weights: WeightTensor, criterion: str
) -> ChannelScore:
    """Score each output channel.

    l1_weight sums |mask * weight| over the row; remaining_count counts the
    row's set bits.
    """
    check_congruent(weights, mask)
    if criterion == "l1_weight":
        scores = np.abs(weights.values * mask.bits).sum(axis=1, dtype=np.float64)
    elif criterion == "remaining_count":
        scores = mask.bits.sum(axis=1, dtype=np.float64)
    else:
        raise CriterionError(
            f"unknown criterion {criterion!r}; expected one of {CRITERIA}"
        )
    return ChannelScore(mask.layer_name, criterion, scores)


def _top_rows(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k best-scored rows; ties prefer the lower row index."""
    order = np.lexsort((np.arange(scores.size), -scores))
    return order[:k]


def _rows_to_mask(mask: SparseMask, keep_rows: np.ndarray) -> SparseMask:
    bits = np.zeros_like(mask.bits)
    bits[keep_rows] = True
    return mask.with_bits(bits)


def refill(mask: SparseMask, weights: WeightTensor, criterion: str) -> SparseMask:
    """Promote the top-k channels to fully dense rows, drop the rest.

    k = round(density * c_out), clamped to at least 1 whenever the mask has
    any set bit, so the result's sparsity stays within 1/c_out of the input's.
    A mask with no set bits refills nothing and is returned all-zero.
    """
    score = score_channels(mask, weights, criterion)
    c_out = mask.shape.c_out
    if mask.set_count == 0:
        warnings.warn(
            f"layer {mask.layer_name}: no set bits, refill returns an empty mask"
        )
        return mask.with_bits(np.zeros_like(mask.bits))
    k = int(math.floor((mask.set_count / mask.size) * c_out + 0.5))
    k = min(max(k, 1), c_out)
    return _rows_to_mask(mask, _top_rows(score.scores, k))


def refill_plus(
    mask: SparseMask,
    weights: WeightTensor,
    criterion: str,
    extra_fraction: float = 0.1,
) -> SparseMask:
    """Refill, then revive the next ceil(extra_fraction * c_out) channels by score."""
    if not 0.0 <= extra_fraction < 1.0:
        raise ParameterError(
            f"extra_fraction must be in [0, 1), got {extra_fraction}"
        )
    base = refill(mask, weights, criterion)
    kept = int(np.flatnonzero(base.bits.any(axis=1)).size)
    if kept == 0:
        return base
    extra = math.ceil(extra_fraction * mask.shape.c_out)
    k = min(kept + extra, mask.shape.c_out)
    score = score_channels(mask, weights, criterion)
    return _rows_to_mask(mask, _top_rows(score.scores, k))
