import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sltk import (
    CongruenceError,
    LayerShape,
    ParameterError,
    SparseMask,
    WeightTensor,
    density,
    global_magnitude_prune,
    one_shot_magnitude_prune,
    random_prune,
)

from conftest import flat_shape, random_mask, random_weights


class TestDensity:
    def test_all_ones(self):
        assert density(SparseMask.ones("a", flat_shape(3, 5))) == 1.0

    def test_all_zeros(self):
        assert density(SparseMask.zeros("a", flat_shape(3, 5))) == 0.0

    def test_half(self, rng):
        bits = np.zeros((4, 8), dtype=bool)
        flat = rng.permutation(32)[:16]
        bits.ravel()[flat] = True
        assert density(SparseMask("a", flat_shape(4, 8), bits)) == 0.5


def _single_layer(values):
    values = np.asarray(values, dtype=np.float32).reshape(1, -1)
    shape = flat_shape(1, values.shape[1])
    w = WeightTensor("l0", shape, values)
    m = SparseMask.ones("l0", shape)
    return w, m


class TestGlobalMagnitudePrune:
    def test_smallest_magnitude_cleared(self):
        w, m = _single_layer([0.5, -0.1, 0.3, 0.2])
        (out,) = global_magnitude_prune([w], [m], 0.25)
        assert out.bits.tolist() == [[True, False, True, True]]

    def test_fraction_zero_is_identity(self, rng):
        w = random_weights(rng, 6, 9)
        m = random_mask(rng, 6, 9, 0.7)
        (out,) = global_magnitude_prune([w], [m], 0.0)
        assert np.array_equal(out.bits, m.bits)

    def test_three_rounds_leave_51_20_percent(self):
        # 20% of remaining, three times: 0.8^3 = 51.20% exactly on 1000 bits
        rng = np.random.default_rng(0)
        w = random_weights(rng, 10, 100)
        masks = [SparseMask.ones("l0", w.shape)]
        for _ in range(3):
            masks = global_magnitude_prune([w], masks, 0.2)
        assert masks[0].set_count == 512  # 51.20% of 1000

    def test_schedule_follows_floor_recurrence(self, rng):
        # 91 bits: fractional counts every round; floor drift stays under
        # one bit per completed round
        w = random_weights(rng, 7, 13)
        masks = [SparseMask.ones("l0", w.shape)]
        remaining = 91
        for r in range(1, 6):
            masks = global_magnitude_prune([w], masks, 0.2)
            remaining -= int(0.2 * remaining)
            assert masks[0].set_count == remaining
            assert abs(masks[0].set_count - 91 * 0.8**r) <= r

    def test_monotone_nested_masks(self, rng):
        w = random_weights(rng, 8, 12)
        masks = [random_mask(rng, 8, 12, 0.9)]
        for _ in range(4):
            nxt = global_magnitude_prune([w], masks, 0.3)
            assert not np.any(nxt[0].bits & ~masks[0].bits)
            masks = nxt

    def test_global_selection_across_layers(self):
        wa, ma = _single_layer([1.0, 2.0, 3.0, 4.0])
        vb = np.array([[0.1, 0.2, 0.3, 0.4]], dtype=np.float32)
        wb = WeightTensor("l1", flat_shape(1, 4), vb)
        mb = SparseMask.ones("l1", wb.shape)
        out_a, out_b = global_magnitude_prune([wa, wb], [ma, mb], 0.5)
        # the four smallest magnitudes all live in layer 1
        assert out_a.set_count == 4
        assert out_b.set_count == 0

    def test_tie_break_layer_then_row_major(self):
        w1, m1 = _single_layer([1.0, 1.0, 1.0])
        values = np.ones((1, 3), dtype=np.float32)
        w2 = WeightTensor("l1", flat_shape(1, 3), values)
        m2 = SparseMask.ones("l1", w2.shape)
        out1, out2 = global_magnitude_prune([w1, w2], [m1, m2], 0.67)
        # floor(0.67 * 6) = 4 bits, all magnitudes equal: first layer first,
        # row-major within it
        assert out1.bits.tolist() == [[False, False, False]]
        assert out2.bits.tolist() == [[False, True, True]]

    def test_bad_fraction(self, rng):
        w = random_weights(rng, 2, 2)
        m = SparseMask.ones("l0", w.shape)
        with pytest.raises(ParameterError):
            global_magnitude_prune([w], [m], 1.0)

    def test_congruence_error(self):
        w = WeightTensor("a", flat_shape(2, 4), np.zeros((2, 4), dtype=np.float32))
        m = SparseMask.ones("a", flat_shape(4, 2))
        with pytest.raises(CongruenceError):
            global_magnitude_prune([w], [m], 0.1)

    @given(
        c_out=st.integers(1, 8),
        n=st.integers(1, 16),
        fraction=st.floats(0.0, 0.99),
        seed=st.integers(0, 2**16),
    )
    @settings(max_examples=60, deadline=None)
    def test_exact_count_property(self, c_out, n, fraction, seed):
        rng = np.random.default_rng(seed)
        w = random_weights(rng, c_out, n)
        m = random_mask(rng, c_out, n, 0.8)
        before = m.set_count
        (out,) = global_magnitude_prune([w], [m], fraction)
        assert before - out.set_count == int(np.floor(fraction * before + 1e-9))


class TestOneShotMagnitudePrune:
    def test_target_zero_is_identity(self, rng):
        w = random_weights(rng, 4, 4)
        m = random_mask(rng, 4, 4, 0.6)
        (out,) = one_shot_magnitude_prune([w], [m], 0.0)
        assert np.array_equal(out.bits, m.bits)

    def test_two_smallest_cleared(self):
        w, m = _single_layer([0.5, -0.1, 0.3, 0.2])
        (out,) = one_shot_magnitude_prune([w], [m], 0.5)
        assert out.bits.tolist() == [[True, False, True, False]]

    def test_matches_iterated_imp_on_frozen_weights(self, rng):
        # oracle: three 20% IMP steps with no weight updates in between
        w = random_weights(rng, 25, 40)
        imp_masks = [SparseMask.ones("l0", w.shape)]
        for _ in range(3):
            imp_masks = global_magnitude_prune([w], imp_masks, 0.2)
        achieved = 1.0 - imp_masks[0].set_count / imp_masks[0].size
        assert achieved == pytest.approx(0.488, abs=1e-3)
        (omp,) = one_shot_magnitude_prune(
            [w], [SparseMask.ones("l0", w.shape)], achieved
        )
        assert np.array_equal(omp.bits, imp_masks[0].bits)


class TestRandomPrune:
    def test_target_zero_is_identity(self, rng):
        m = random_mask(rng, 4, 4, 0.5)
        (out,) = random_prune([m], 0.0, seed=1)
        assert np.array_equal(out.bits, m.bits)

    def test_same_seed_same_masks(self, rng):
        m = random_mask(rng, 16, 32, 0.9)
        (a,) = random_prune([m], 0.4, seed=7)
        (b,) = random_prune([m], 0.4, seed=7)
        assert np.array_equal(a.bits, b.bits)

    def test_different_seed_differs(self, rng):
        m = SparseMask.ones("l0", flat_shape(16, 32))
        (a,) = random_prune([m], 0.5, seed=7)
        (b,) = random_prune([m], 0.5, seed=8)
        assert not np.array_equal(a.bits, b.bits)

    def test_density_within_one_bit_of_target(self, rng):
        for target in (0.1, 0.33, 0.71):
            m = SparseMask.ones("l0", flat_shape(9, 17))
            (out,) = random_prune([m], target, seed=3)
            assert abs(density(out) - (1 - target)) <= 1 / (9 * 17)

    def test_subset_of_input(self, rng):
        m = random_mask(rng, 10, 10, 0.8)
        (out,) = random_prune([m], 0.5, seed=11)
        assert not np.any(out.bits & ~m.bits)


class TestLayerShape:
    def test_n_derived(self):
        assert LayerShape(4, 3, 5, 7).n == 105

    def test_invalid_counts(self):
        with pytest.raises(ParameterError):
            LayerShape(0, 1, 1, 1)
        with pytest.raises(ParameterError):
            LayerShape(1, 1, 1, 1, padding=-1)

    def test_immutability(self):
        m = SparseMask.ones("a", flat_shape(2, 2))
        with pytest.raises(ValueError):
            m.bits[0, 0] = False
