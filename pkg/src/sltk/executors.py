"""Reference CPU convolution executors and the benchmark reporter.

All executors compute the same bias-free convolution of a (c_out x n) weight
matrix against an im2col'd input and must agree within tolerance; they differ
only in which weights they touch (and hence in MACs executed).  Summation
order is fixed per executor, so repeated runs are bit-identical.
"""

from __future__ import annotations

import platform
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .core import LayerShape, SparseMask, WeightTensor
from .errors import ConsistencyError, ParameterError, ShapeError
from .regroup import BlockLayout

GEMM_ROW_ALIGN = 32
AGREEMENT_RTOL = 1e-4
AGREEMENT_ATOL = 1e-7


@dataclass(frozen=True)
class FeatureMap:
    """A (channels, height, width) activation tensor, 32-bit floats."""

    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.values, dtype=np.float32))
        if v.ndim != 3 or min(v.shape) < 1:
            raise ShapeError(f"feature map must be (C, H, W) with dims >= 1, got {v.shape}")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


def im2col_batch(x: np.ndarray, shape: LayerShape) -> np.ndarray:
    """Unroll a (B, C, H, W) batch into (B, n, H_out*W_out) patch matrices.

    Column j of each matrix is the receptive field of output position j,
    ordered (input channel, kernel row, kernel col) to match the weight
    matrix's column axis.
    """
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 4:
        raise ShapeError(f"expected (B, C, H, W), got {x.shape}")
    b, c, h, w = x.shape
    if c != shape.c_in:
        raise ShapeError(f"input has {c} channels, layer expects {shape.c_in}")
    h_out, w_out = shape.out_hw(h, w)
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"kernel {shape.k_h}x{shape.k_w} does not fit {h}x{w} input")
    p = shape.padding
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    s = x.strides
    view = np.lib.stride_tricks.as_strided(
        x,
        shape=(b, c, shape.k_h, shape.k_w, h_out, w_out),
        strides=(s[0], s[1], s[2], s[3], s[2] * shape.stride, s[3] * shape.stride),
        writeable=False,
    )
    return view.reshape(b, shape.n, h_out * w_out)


def im2col(fm: FeatureMap, shape: LayerShape) -> np.ndarray:
    """Single-image im2col: (n, H_out*W_out)."""
    return im2col_batch(fm.values[None], shape)[0]


def _check_weights(weights: WeightTensor, shape: LayerShape) -> None:
    if weights.values.shape != (shape.c_out, shape.n):
        raise ShapeError(
            f"weights {weights.values.shape} incompatible with "
            f"({shape.c_out}, {shape.n})"
        )


def _as_feature_map(out_flat: np.ndarray, shape: LayerShape, h: int, w: int) -> FeatureMap:
    h_out, w_out = shape.out_hw(h, w)
    return FeatureMap(out_flat.reshape(shape.c_out, h_out, w_out))


def dense_conv(weights: WeightTensor, fm: FeatureMap, shape: LayerShape) -> FeatureMap:
    """GEMM convolution over the full weight matrix."""
    _check_weights(weights, shape)
    cols = im2col(fm, shape)
    return _as_feature_map(weights.values @ cols, shape, fm.height, fm.width)


def _csr(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Compressed sparse rows of a dense matrix: (indptr, indices, data)."""
    nz_rows, nz_cols = np.nonzero(matrix)
    indptr = np.zeros(matrix.shape[0] + 1, dtype=np.int64)
    np.add.at(indptr, nz_rows + 1, 1)
    indptr = np.cumsum(indptr)
    return indptr, nz_cols.astype(np.int64), matrix[nz_rows, nz_cols]


def masked_conv_csr(
    weights: WeightTensor, mask: SparseMask, fm: FeatureMap, shape: LayerShape
) -> FeatureMap:
    """Convolution over masked weights held in compressed-sparse-row form."""
    _check_weights(weights, shape)
    if mask.bits.shape != weights.values.shape:
        raise ShapeError(
            f"mask {mask.bits.shape} incompatible with weights {weights.values.shape}"
        )
    cols = im2col(fm, shape)
    indptr, indices, data = _csr(np.where(mask.bits, weights.values, 0.0))
    out = np.zeros((shape.c_out, cols.shape[1]), dtype=np.float32)
    for r in range(shape.c_out):
        lo, hi = indptr[r], indptr[r + 1]
        if lo != hi:
            out[r] = data[lo:hi] @ cols[indices[lo:hi]]
    return _as_feature_map(out, shape, fm.height, fm.width)


def row_split(row_count: int) -> tuple[int, int]:
    """Split r rows into a 32-aligned part and a remainder: (floor(r/32)*32, r mod 32)."""
    if row_count < 0:
        raise ParameterError(f"row_count must be >= 0, got {row_count}")
    return (row_count // GEMM_ROW_ALIGN) * GEMM_ROW_ALIGN, row_count % GEMM_ROW_ALIGN


def block_conv(
    layout: BlockLayout, weights: WeightTensor, fm: FeatureMap, shape: LayerShape
) -> FeatureMap:
    """Convolution executing only the layout's dense blocks.

    Blocks run in index order.  Each block's rows are split at a multiple of
    32: the aligned part uses one GEMM call (shared-input tiling analogue),
    the remainder another (kernel-and-output-cached analogue); the split
    changes loop order only, never results.
    """
    _check_weights(weights, shape)
    if layout.shape.c_out != shape.c_out or layout.shape.n != shape.n:
        raise ShapeError(
            f"layout for {layout.shape.c_out}x{layout.shape.n} used with "
            f"{shape.c_out}x{shape.n} weights"
        )
    cols = im2col(fm, shape)
    out = np.zeros((shape.c_out, cols.shape[1]), dtype=np.float32)
    for block in layout.blocks:
        sub = weights.values[np.ix_(block.rows, block.cols)]
        rhs = cols[block.cols]
        aligned, remainder = row_split(block.rows.size)
        if aligned:
            out[block.rows[:aligned]] += sub[:aligned] @ rhs
        if remainder:
            out[block.rows[aligned:]] += sub[aligned:] @ rhs
    return _as_feature_map(out, shape, fm.height, fm.width)


@dataclass(frozen=True)
class BenchCase:
    """One layer's inputs to the benchmark."""

    name: str
    shape: LayerShape
    weights: WeightTensor
    mask: SparseMask
    input: FeatureMap
    layout: BlockLayout | None = None


@dataclass(frozen=True)
class BenchRow:
    layer: str
    executor: str
    wall_ms_median: float
    macs: int
    checksum: float


@dataclass(frozen=True)
class BenchReport:
    rows: tuple
    notes: str

    def to_csv(self) -> str:
        lines = ["layer,executor,wall_ms_median,macs,checksum"]
        for r in self.rows:
            lines.append(
                f"{r.layer},{r.executor},{r.wall_ms_median:.3f},{r.macs},"
                f"{r.checksum:.6e}"
            )
        return "\n".join(lines) + "\n"


def outputs_agree(a: np.ndarray, b: np.ndarray, rtol: float = AGREEMENT_RTOL) -> bool:
    """Agreement relative to the layer's output scale.

    Element-wise relative error is meaningless on near-zero outputs of a
    float32 GEMM (summation-order noise is proportional to the magnitude of
    the terms, not of the result), so the bound is rtol * max|output| with a
    small absolute floor for all-zero layers.
    """
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), 0.0)
    return bool(np.max(np.abs(a - b)) <= rtol * scale + AGREEMENT_ATOL)


def bench(
    cases: list[BenchCase],
    executors: tuple[str, ...] = ("dense", "csr", "block"),
    repeats: int = 3,
) -> BenchReport:
    """Time each executor on each layer; verify they agree on outputs.

    One warm-up run per (layer, executor) is excluded; the median of
    ``repeats`` timed runs is reported.  MAC counts are analytic (derived
    from mask/layout structure), never measured.  Wall time on CPU is
    indicative only.
    """
    if repeats < 3:
        raise ParameterError(f"repeats must be >= 3, got {repeats}")
    rows = []
    for case in cases:
        h_out, w_out = case.shape.out_hw(case.input.height, case.input.width)
        spatial = h_out * w_out
        masked = WeightTensor(
            case.weights.layer_name,
            case.weights.shape,
            np.where(case.mask.bits, case.weights.values, 0.0),
        )
        runs: list[tuple[str, object, int]] = []
        for name in executors:
            if name == "dense":
                runs.append(
                    (
                        "dense",
                        lambda c=case, m=masked: dense_conv(m, c.input, c.shape),
                        case.shape.c_out * case.shape.n * spatial,
                    )
                )
            elif name == "csr":
                runs.append(
                    (
                        "csr",
                        lambda c=case: masked_conv_csr(
                            c.weights, c.mask, c.input, c.shape
                        ),
                        case.mask.set_count * spatial,
                    )
                )
            elif name == "block":
                if case.layout is None:
                    continue
                runs.append(
                    (
                        "block",
                        lambda c=case: block_conv(c.layout, c.weights, c.input, c.shape),
                        case.layout.cells * spatial,
                    )
                )
            else:
                raise ParameterError(f"unknown executor {name!r}")

        reference: np.ndarray | None = None
        for exec_name, fn, macs in runs:
            out = fn()  # warm-up, also the output consistency sample
            if reference is None:
                reference = out.values
            elif not outputs_agree(out.values, reference):
                raise ConsistencyError(
                    f"layer {case.name}: executor {exec_name} disagrees with "
                    f"{runs[0][0]} beyond rtol {AGREEMENT_RTOL}"
                )
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                fn()
                times.append((time.perf_counter() - t0) * 1e3)
            rows.append(
                BenchRow(
                    case.name,
                    exec_name,
                    statistics.median(times),
                    macs,
                    float(np.sum(out.values, dtype=np.float64)),
                )
            )
    notes = (
        f"python={platform.python_version()} numpy={np.__version__} "
        f"machine={platform.machine()}; wall time indicative, MACs analytic"
    )
    return BenchReport(tuple(rows), notes)
