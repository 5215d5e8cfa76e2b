"""Core mask/weight representations and magnitude pruning.

A convolution layer's weights are viewed as a dense ``c_out x n`` matrix
with ``n = c_in * k_h * k_w`` (row = output channel, columns ordered
input-channel major, then kernel row, then kernel column).  A mask is a
binary matrix of the same shape; set bits mark trainable weights.

All values are immutable after construction: the numpy buffers are made
read-only, and every operation returns new objects.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import CongruenceError, ParameterError


@dataclass(frozen=True)
class LayerShape:
    """Static description of one convolution layer."""

    c_out: int
    c_in: int
    k_h: int
    k_w: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        for name in ("c_out", "c_in", "k_h", "k_w", "stride"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.padding < 0:
            raise ParameterError(f"padding must be >= 0, got {self.padding}")

    @property
    def n(self) -> int:
        """Kernel volume: c_in * k_h * k_w (the column count of the weight matrix)."""
        return self.c_in * self.k_h * self.k_w

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        """Output spatial dims for an ``h x w`` input."""
        h_out = (h + 2 * self.padding - self.k_h) // self.stride + 1
        w_out = (w + 2 * self.padding - self.k_w) // self.stride + 1
        return h_out, w_out


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class SparseMask:
    """Binary pruning mask for one layer; True marks a trainable weight."""

    layer_name: str
    shape: LayerShape
    bits: np.ndarray = field(repr=False)

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.shape != (self.shape.c_out, self.shape.n):
            raise CongruenceError(
                f"mask {self.layer_name}: bits shape {bits.shape} != "
                f"({self.shape.c_out}, {self.shape.n})"
            )
        object.__setattr__(self, "bits", _freeze(bits))

    @classmethod
    def ones(cls, layer_name: str, shape: LayerShape) -> "SparseMask":
        return cls(layer_name, shape, np.ones((shape.c_out, shape.n), dtype=bool))

    @classmethod
    def zeros(cls, layer_name: str, shape: LayerShape) -> "SparseMask":
        return cls(layer_name, shape, np.zeros((shape.c_out, shape.n), dtype=bool))

    def with_bits(self, bits: np.ndarray) -> "SparseMask":
        return replace(self, bits=bits)

    @property
    def set_count(self) -> int:
        return int(self.bits.sum())

    @property
    def size(self) -> int:
        return self.bits.size


@dataclass(frozen=True)
class WeightTensor:
    """Real-valued weights for one layer, congruent with its mask."""

    layer_name: str
    shape: LayerShape
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.shape != (self.shape.c_out, self.shape.n):
            raise CongruenceError(
                f"weights {self.layer_name}: shape {values.shape} != "
                f"({self.shape.c_out}, {self.shape.n})"
            )
        object.__setattr__(self, "values", _freeze(values))


@dataclass(frozen=True)
class ImpState:
    """Weight snapshots and the current mask set of an IMP run.

    ``theta_0`` are the weights at initialization, ``theta_i`` the rewound
    snapshot taken at rewinding step i.  Masks only ever lose bits from one
    round to the next.
    """

    theta_0: dict[str, WeightTensor]
    theta_i: dict[str, WeightTensor]
    masks: dict[str, SparseMask]
    round: int = 0

    def __post_init__(self):
        if self.round < 0:
            raise ParameterError(f"round must be >= 0, got {self.round}")


def check_congruent(weights: WeightTensor, mask: SparseMask) -> None:
    """Raise CongruenceError unless weights and mask share a shape."""
    if weights.values.shape != mask.bits.shape:
        raise CongruenceError(
            f"layer {mask.layer_name}: weights {weights.values.shape} vs "
            f"mask {mask.bits.shape}"
        )


def density(mask: SparseMask) -> float:
    """Fraction of set bits, in [0, 1]."""
    return mask.set_count / mask.size


def _floor_count(fraction: float, total: int) -> int:
    # tiny epsilon guards against 0.488 * 1000 -> 487.999... artifacts
    return int(math.floor(fraction * total + 1e-9))


def _gather_candidates(
    weights: list[WeightTensor], masks: list[SparseMask]
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Magnitudes and (layer, flat-index) coordinates of all set bits."""
    mags, layer_ids, flat_ids = [], [], []
    for li, (w, m) in enumerate(zip(weights, masks)):
        check_congruent(w, m)
        flat = np.flatnonzero(m.bits.ravel())
        mags.append(np.abs(w.values.ravel()[flat]))
        layer_ids.append(np.full(flat.size, li, dtype=np.int64))
        flat_ids.append(flat)
    if not mags:
        return (np.empty(0), np.empty(0, np.int64), np.empty(0, np.int64))
    return np.concatenate(mags), np.concatenate(layer_ids), np.concatenate(flat_ids)


def _clear_smallest(
    weights: list[WeightTensor], masks: list[SparseMask], count: int
) -> list[SparseMask]:
    """Clear the ``count`` globally smallest-magnitude set bits.

    Ties break by (layer order, row-major index) ascending.
    """
    for w, m in zip(weights, masks):
        check_congruent(w, m)
    if count <= 0:
        return list(masks)
    mags, layer_ids, flat_ids = _gather_candidates(weights, masks)
    order = np.lexsort((flat_ids, layer_ids, mags))
    victims = order[:count]
    out_bits = [m.bits.copy() for m in masks]
    for li in range(len(masks)):
        sel = victims[layer_ids[victims] == li]
        if sel.size:
            out_bits[li].ravel()[flat_ids[sel]] = False
    return [m.with_bits(b) for m, b in zip(masks, out_bits)]


def global_magnitude_prune(
    weights: list[WeightTensor], masks: list[SparseMask], fraction: float
) -> list[SparseMask]:
    """One IMP pruning step: clear ``floor(fraction * remaining)`` bits.

    Bits are chosen as the globally smallest ``|weight|`` among currently set
    bits across all given (candidate) layers.  Classification heads must be
    excluded by the caller, per the layer ``prunable`` flags.
    """
    if not 0.0 <= fraction < 1.0:
        raise ParameterError(f"fraction must be in [0, 1), got {fraction}")
    remaining = sum(m.set_count for m in masks)
    return _clear_smallest(weights, masks, _floor_count(fraction, remaining))


def one_shot_magnitude_prune(
    weights: list[WeightTensor], masks: list[SparseMask], target_sparsity: float
) -> list[SparseMask]:
    """Single global prune to the target sparsity (within one bit)."""
    if not 0.0 <= target_sparsity < 1.0:
        raise ParameterError(f"target_sparsity must be in [0, 1), got {target_sparsity}")
    total = sum(m.size for m in masks)
    cleared = total - sum(m.set_count for m in masks)
    want_cleared = _floor_count(target_sparsity, total)
    return _clear_smallest(weights, masks, want_cleared - cleared)


def random_prune(
    masks: list[SparseMask], target_sparsity: float, seed: int
) -> list[SparseMask]:
    """Clear a uniformly random subset of set bits to reach the target sparsity."""
    if not 0.0 <= target_sparsity < 1.0:
        raise ParameterError(f"target_sparsity must be in [0, 1), got {target_sparsity}")
    total = sum(m.size for m in masks)
    cleared = total - sum(m.set_count for m in masks)
    count = _floor_count(target_sparsity, total) - cleared
    if count <= 0:
        return list(masks)
    layer_ids, flat_ids = [], []
    for li, m in enumerate(masks):
        flat = np.flatnonzero(m.bits.ravel())
        layer_ids.append(np.full(flat.size, li, dtype=np.int64))
        flat_ids.append(flat)
    layer_ids = np.concatenate(layer_ids)
    flat_ids = np.concatenate(flat_ids)
    rng = np.random.default_rng(seed)
    victims = rng.permutation(layer_ids.size)[:count]
    out_bits = [m.bits.copy() for m in masks]
    for li in range(len(masks)):
        sel = victims[layer_ids[victims] == li]
        if sel.size:
            out_bits[li].ravel()[flat_ids[sel]] = False
    return [m.with_bits(b) for m, b in zip(masks, out_bits)]
