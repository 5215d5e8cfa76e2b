"""MAC accounting for convolution chains.

Counts one multiply-accumulate as one FLOP unit and covers prunable layers
only (classification heads are excluded, mirroring how pruning treats them).
Layers form a chain: spatial dims propagate through strides/padding, and for
channel-pure masks the retained input channels are inherited from the
previous layer's retained output channels.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import LayerShape, SparseMask
from .errors import ParameterError, WiringError
from .regroup import BlockLayout

MAC_CONVENTION = "1 MAC = 1 FLOP unit (multiply-accumulate)"


@dataclass(frozen=True)
class LayerReport:
    name: str
    sparsity: float
    macs: int
    counted: bool  # False for non-prunable layers (heads)


@dataclass(frozen=True)
class SparsityReport:
    """Per-layer sparsity and MAC counts for a given input resolution."""

    layers: tuple
    global_sparsity: float
    total_macs: int
    input_hw: tuple[int, int]

    def to_text(self) -> str:
        lines = [
            f"mac_convention={MAC_CONVENTION}",
            f"input_hw={self.input_hw[0]}x{self.input_hw[1]}",
            f"global_sparsity={self.global_sparsity:.6f}",
            f"total_macs={self.total_macs}",
        ]
        for lr in self.layers:
            suffix = "" if lr.counted else " (not counted: non-prunable)"
            lines.append(
                f"layer.{lr.name}.sparsity={lr.sparsity:.6f} "
                f"macs={lr.macs}{suffix}"
            )
        return "\n".join(lines) + "\n"


def _channel_pure_rows(mask: SparseMask) -> np.ndarray | None:
    """Retained-row flags if every row is all-ones or all-zeros, else None."""
    row_sums = mask.bits.sum(axis=1)
    full = row_sums == mask.shape.n
    empty = row_sums == 0
    if np.all(full | empty):
        return full
    return None


def flops(
    shapes: list[LayerShape],
    input_hw: tuple[int, int],
    structures: list | None = None,
    names: list[str] | None = None,
    prunable: list[bool] | None = None,
) -> SparsityReport:
    """MACs and sparsity for a chain of convolution layers.

    ``structures[i]`` is None (dense), a SparseMask, or a BlockLayout.
    Dense MACs are c_out * n * H_out * W_out.  Channel-pure masks scale by
    retained output channels and by retained input channels inherited from
    the previous counted layer; other masks count set bits; block layouts
    count sum(|rows| * |cols|) per output position.
    """
    if structures is None:
        structures = [None] * len(shapes)
    if names is None:
        names = [f"layer{i}" for i in range(len(shapes))]
    if prunable is None:
        prunable = [True] * len(shapes)
    if not (len(shapes) == len(structures) == len(names) == len(prunable)):
        raise ParameterError("shapes/structures/names/prunable lengths differ")

    h, w = input_hw
    if h < 1 or w < 1:
        raise ParameterError(f"input_hw must be >= 1, got {input_hw}")

    layer_reports = []
    total_macs = 0
    total_bits = 0
    total_set = 0
    prev_retained_out: int | None = None
    prev_c_out: int | None = None

    for shape, structure, name, is_prunable in zip(shapes, structures, names, prunable):
        if not is_prunable:
            sparsity = 0.0
            if isinstance(structure, SparseMask):
                sparsity = 1.0 - structure.set_count / structure.size
            layer_reports.append(LayerReport(name, sparsity, 0, counted=False))
            continue

        if prev_c_out is not None and shape.c_in != prev_c_out:
            raise WiringError(
                f"layer {name}: c_in {shape.c_in} != previous c_out {prev_c_out}"
            )
        h_out, w_out = shape.out_hw(h, w)
        if h_out < 1 or w_out < 1:
            raise ParameterError(f"layer {name}: output dims collapse to zero")
        spatial = h_out * w_out

        retained_in = prev_retained_out if prev_retained_out is not None else shape.c_in
        retained_out = shape.c_out
        if structure is None:
            macs = shape.c_out * shape.n * spatial
            sparsity = 0.0
        elif isinstance(structure, BlockLayout):
            macs = structure.cells * spatial
            sparsity = 1.0 - structure.cells / (shape.c_out * shape.n)
        elif isinstance(structure, SparseMask):
            sparsity = 1.0 - structure.set_count / structure.size
            rows = _channel_pure_rows(structure)
            if rows is not None:
                retained_out = int(rows.sum())
                macs = retained_out * retained_in * shape.k_h * shape.k_w * spatial
            else:
                macs = structure.set_count * spatial
        else:
            raise ParameterError(
                f"layer {name}: unsupported structure {type(structure).__name__}"
            )

        layer_reports.append(LayerReport(name, sparsity, int(macs), counted=True))
        total_macs += int(macs)
        total_bits += shape.c_out * shape.n
        if isinstance(structure, SparseMask):
            total_set += structure.set_count
        elif isinstance(structure, BlockLayout):
            total_set += structure.cells
        else:
            total_set += shape.c_out * shape.n

        prev_retained_out = retained_out if isinstance(structure, SparseMask) else None
        prev_c_out = shape.c_out
        h, w = h_out, w_out

    global_sparsity = 1.0 - total_set / total_bits if total_bits else 0.0
    return SparsityReport(
        tuple(layer_reports), global_sparsity, total_macs, tuple(input_hw)
    )


def load_shapes(path: str | Path) -> tuple[list[str], list[LayerShape], list[bool]]:
    """Parse an architecture-shape text file.

    One layer per line: name c_out c_in k_h k_w stride padding prunable.
    Blank lines and '#' comments are skipped.
    """
    names, shapes, prunable = [], [], []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 8:
            raise ParameterError(
                f"{path}:{lineno}: expected 8 fields, got {len(parts)}"
            )
        name = parts[0]
        try:
            c_out, c_in, k_h, k_w, stride, padding, flag = (int(p) for p in parts[1:])
        except ValueError as exc:
            raise ParameterError(f"{path}:{lineno}: non-integer field") from exc
        names.append(name)
        shapes.append(LayerShape(c_out, c_in, k_h, k_w, stride, padding))
        prunable.append(bool(flag))
    return names, shapes, prunable


def bundled_shape_file(preset: str) -> Path:
    """Path to a shape file shipped with the package (e.g. 'vgg16-cifar')."""
    data_dir = Path(__file__).parent / "data"
    path = data_dir / f"{preset.replace('-', '_')}.shapes"
    if not path.exists():
        available = sorted(p.stem.replace("_", "-") for p in data_dir.glob("*.shapes"))
        raise ParameterError(f"unknown shape preset {preset!r}; available: {available}")
    return path
