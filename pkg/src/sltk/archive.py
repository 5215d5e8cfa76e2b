"""Mask-archive persistence: bit-exact container for masks, weights, layouts.

Layout of an archive file (all integers little-endian):

    magic ``SLTK`` | version u16 (= 1) | layer count u32
    per layer:
        name length u16, UTF-8 name
        c_out, c_in, k_h, k_w, stride, padding  (six u32)
        prunable u8
        mask bitset: row-major, each row packed LSB-first and padded to a
        whole byte boundary; padding bits must be zero
        c_out * n float32 weights
    optional block-layout section: per layer, u32 block count; per block,
        u32 row count + sorted u32 row indices, u32 col count + sorted u32
        col indices
    optional trailing metadata: u32 byte length + UTF-8 text manifest

The two optional sections carry no tags; the loader first attempts a
layout-section parse and falls back to metadata-only when that cannot
account for the remaining bytes exactly.  The writer is canonical: the
layout section appears iff layouts are attached, metadata iff nonempty.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import LayerShape, SparseMask, WeightTensor
from .errors import ArchiveFormatError, LayoutError
from .regroup import BlockLayout, DenseBlock

MAGIC = b"SLTK"
VERSION = 1


@dataclass(frozen=True)
class ArchiveLayer:
    name: str
    shape: LayerShape
    prunable: bool
    mask: SparseMask
    weights: WeightTensor


@dataclass(frozen=True)
class Archive:
    """In-memory image of an archive file.

    ``layouts`` is None when the file carries no layout section; otherwise it
    maps every layer name to a (possibly empty) BlockLayout.
    """

    layers: tuple
    metadata: str = ""
    layouts: dict | None = None

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.layouts is not None:
            normalized = {}
            for layer in self.layers:
                layout = self.layouts.get(layer.name)
                if layout is None:
                    layout = BlockLayout(layer.name, (), layer.shape)
                normalized[layer.name] = layout
            object.__setattr__(self, "layouts", normalized)

    def layer(self, name: str) -> ArchiveLayer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)


def _pack_mask(bits: np.ndarray) -> bytes:
    return b"".join(
        np.packbits(row, bitorder="little").tobytes() for row in bits
    )


def to_bytes(archive: Archive) -> bytes:
    out = bytearray()
    out += MAGIC
    out += struct.pack("<HI", VERSION, len(archive.layers))
    for layer in archive.layers:
        name_bytes = layer.name.encode("utf-8")
        out += struct.pack("<H", len(name_bytes))
        out += name_bytes
        s = layer.shape
        out += struct.pack("<6I", s.c_out, s.c_in, s.k_h, s.k_w, s.stride, s.padding)
        out += struct.pack("<B", 1 if layer.prunable else 0)
        out += _pack_mask(layer.mask.bits)
        out += layer.weights.values.astype("<f4").tobytes()
    if archive.layouts is not None:
        for layer in archive.layers:
            layout = archive.layouts[layer.name]
            out += struct.pack("<I", len(layout.blocks))
            for block in layout.blocks:
                out += struct.pack("<I", block.rows.size)
                out += block.rows.astype("<u4").tobytes()
                out += struct.pack("<I", block.cols.size)
                out += block.cols.astype("<u4").tobytes()
    if archive.metadata:
        md = archive.metadata.encode("utf-8")
        out += struct.pack("<I", len(md))
        out += md
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.off = 0
        self.source = source

    @property
    def remaining(self) -> int:
        return len(self.data) - self.off

    def fail(self, message: str, offset: int | None = None):
        raise ArchiveFormatError(
            f"{self.source}: {message}",
            self.off if offset is None else offset,
        )

    def take(self, count: int, what: str) -> bytes:
        if self.off + count > len(self.data):
            self.fail(f"truncated while reading {what}")
        chunk = self.data[self.off : self.off + count]
        self.off += count
        return chunk

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def _read_layer(r: _Reader) -> ArchiveLayer:
    name_len = r.u16("layer name length")
    name_off = r.off
    try:
        name = r.take(name_len, "layer name").decode("utf-8")
    except UnicodeDecodeError:
        r.fail("layer name is not valid UTF-8", name_off)
    c_out, c_in, k_h, k_w, stride, padding = struct.unpack(
        "<6I", r.take(24, f"shape of layer {name!r}")
    )
    shape_off = r.off - 24
    try:
        shape = LayerShape(c_out, c_in, k_h, k_w, stride, padding)
    except Exception:
        r.fail(f"invalid shape for layer {name!r}", shape_off)
    prunable = r.u8(f"prunable flag of layer {name!r}") != 0
    row_bytes = (shape.n + 7) // 8
    mask_off = r.off
    raw = np.frombuffer(
        r.take(shape.c_out * row_bytes, f"mask of layer {name!r}"), dtype=np.uint8
    ).reshape(shape.c_out, row_bytes)
    unpacked = np.unpackbits(raw, axis=1, bitorder="little")
    if unpacked[:, shape.n :].any():
        r.fail(f"nonzero padding bits in mask of layer {name!r}", mask_off)
    bits = unpacked[:, : shape.n].astype(bool)
    weights = np.frombuffer(
        r.take(4 * shape.c_out * shape.n, f"weights of layer {name!r}"), dtype="<f4"
    ).reshape(shape.c_out, shape.n)
    return ArchiveLayer(
        name,
        shape,
        prunable,
        SparseMask(name, shape, bits),
        WeightTensor(name, shape, weights),
    )


def _read_layout_section(r: _Reader, layers: tuple) -> dict:
    layouts = {}
    for layer in layers:
        blocks = []
        count_off = r.off
        count = r.u32(f"block count of layer {layer.name!r}")
        if count > r.remaining // 16:  # each block needs >= 16 bytes
            r.fail(
                f"implausible block count {count} for layer {layer.name!r}", count_off
            )
        for bi in range(count):
            block_off = r.off
            n_rows = r.u32("block row count")
            rows = np.frombuffer(r.take(4 * n_rows, "block rows"), dtype="<u4")
            n_cols = r.u32("block col count")
            cols = np.frombuffer(r.take(4 * n_cols, "block cols"), dtype="<u4")
            try:
                blocks.append(DenseBlock(rows.astype(np.int64), cols.astype(np.int64)))
            except LayoutError as exc:
                r.fail(f"bad block {bi} of layer {layer.name!r}: {exc}", block_off)
        try:
            layouts[layer.name] = BlockLayout(layer.name, tuple(blocks), layer.shape)
        except LayoutError as exc:
            r.fail(f"bad layout of layer {layer.name!r}: {exc}", count_off)
    return layouts


def _read_metadata(r: _Reader) -> str:
    if r.remaining == 0:
        return ""
    md_off = r.off
    length = r.u32("metadata length")
    raw = r.take(length, "metadata")
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError:
        r.fail("metadata is not valid UTF-8", md_off)
    if r.remaining:
        r.fail("trailing bytes after metadata")
    return text


def from_bytes(data: bytes, source: str = "<bytes>") -> Archive:
    r = _Reader(data, source)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        r.fail(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    version = r.u16("version")
    if version != VERSION:
        r.fail(f"unsupported version {version}, expected {VERSION}", 4)
    layer_count = r.u32("layer count")
    layers = tuple(_read_layer(r) for _ in range(layer_count))
    if r.remaining == 0:
        return Archive(layers)
    tail_off = r.off
    try:
        layouts = _read_layout_section(r, layers)
        metadata = _read_metadata(r)
        return Archive(layers, metadata, layouts)
    except ArchiveFormatError:
        r.off = tail_off
        metadata = _read_metadata(r)
        return Archive(layers, metadata, None)


def save_archive(path: str | Path, archive: Archive) -> None:
    Path(path).write_bytes(to_bytes(archive))


def load_archive(path: str | Path) -> Archive:
    return from_bytes(Path(path).read_bytes(), source=str(path))
