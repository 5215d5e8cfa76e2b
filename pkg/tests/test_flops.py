import numpy as np
import pytest

from sltk import (
    BlockLayout,
    DenseBlock,
    LayerShape,
    SparseMask,
    WiringError,
    bundled_shape_file,
    flops,
    load_shapes,
)

from conftest import flat_shape


def test_single_3x3_layer_at_32x32():
    shape = LayerShape(1, 1, 3, 3, stride=1, padding=1)
    report = flops([shape], (32, 32))
    assert report.total_macs == 9216  # 9 * 32 * 32


def test_dense_vgg16_anchor():
    names, shapes, prunable = load_shapes(bundled_shape_file("vgg16-cifar"))
    report = flops(shapes, (32, 32), names=names, prunable=prunable)
    assert report.total_macs == pytest.approx(0.314e9, rel=0.05)


def test_halving_output_channels_halves_macs():
    shape = LayerShape(8, 4, 3, 3, stride=1, padding=1)
    dense = flops([shape], (16, 16))
    bits = np.zeros((8, shape.n), dtype=bool)
    bits[:4] = True
    half = flops([shape], (16, 16), [SparseMask("l", shape, bits)])
    assert half.total_macs * 2 == dense.total_macs


def test_additivity():
    shapes = [
        LayerShape(4, 1, 3, 3, padding=1),
        LayerShape(8, 4, 3, 3, padding=1),
        LayerShape(8, 8, 3, 3, stride=2, padding=1),
    ]
    report = flops(shapes, (16, 16))
    assert report.total_macs == sum(lr.macs for lr in report.layers)


def test_channel_inheritance_scales_input_channels():
    # layer 0 keeps 2 of 4 output channels; layer 1 is dense-masked
    s0 = LayerShape(4, 1, 3, 3, padding=1)
    s1 = LayerShape(6, 4, 3, 3, padding=1)
    bits0 = np.zeros((4, s0.n), dtype=bool)
    bits0[:2] = True
    m0 = SparseMask("a", s0, bits0)
    m1 = SparseMask("b", s1, np.ones((6, s1.n), dtype=bool))
    report = flops([s0, s1], (8, 8), [m0, m1])
    # layer 1 runs 6 out-channels against the 2 surviving inputs
    assert report.layers[1].macs == 6 * 2 * 9 * 64


def test_unstructured_mask_counts_set_bits():
    shape = LayerShape(4, 2, 3, 3, padding=1)
    rng = np.random.default_rng(0)
    bits = rng.random((4, shape.n)) < 0.5
    bits[0, 0] = True
    bits[0, 1] = False  # ensure not channel-pure
    mask = SparseMask("l", shape, bits)
    report = flops([shape], (10, 10), [mask])
    assert report.total_macs == mask.set_count * 100


def test_block_layout_counts_cells():
    shape = flat_shape(8, 16)
    layout = BlockLayout(
        "l",
        (
            DenseBlock(np.arange(4), np.arange(8)),
            DenseBlock(np.arange(4, 8), np.arange(8, 12)),
        ),
        shape,
    )
    report = flops([shape], (5, 5), [layout])
    assert report.total_macs == (4 * 8 + 4 * 4) * 25
    assert report.layers[0].sparsity == pytest.approx(1 - 48 / 128)


def test_wiring_error():
    s0 = LayerShape(4, 1, 3, 3, padding=1)
    s1 = LayerShape(6, 5, 3, 3, padding=1)  # expects 5 inputs, gets 4
    with pytest.raises(WiringError):
        flops([s0, s1], (8, 8))


def test_non_prunable_layers_excluded():
    s0 = LayerShape(4, 1, 3, 3, padding=1)
    head = LayerShape(2, 4, 1, 1)
    report = flops([s0, head], (8, 8), prunable=[True, False])
    assert report.layers[1].macs == 0
    assert not report.layers[1].counted
    assert report.total_macs == 4 * 9 * 64


def test_report_text_contains_totals():
    shape = LayerShape(1, 1, 3, 3, padding=1)
    text = flops([shape], (4, 4)).to_text()
    assert "total_macs=144" in text
    assert "global_sparsity=0.000000" in text
