import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from quantlab.quantcore import (
    PER_CHANNEL,
    PER_GROUP,
    PER_TENSOR,
    PER_TOKEN,
    QuantSpec,
    dequantize,
    fake_quant,
    fit_params,
    pack_codes,
    quantize,
    unpack_codes,
)
from quantlab.rng import make_rng


def spec_pg(bits, group_size=128, symmetric=False, **kw):
    return QuantSpec(bits=bits, symmetric=symmetric, granularity=PER_GROUP,
                     axis=1, group_size=group_size, **kw)


class TestFitParams:
    def test_all_zero_group_degenerate(self):
        p = fit_params(np.zeros((1, 8)), spec_pg(4, 8))
        assert p.scales[0, 0] == 1.0
        assert p.zero_points[0, 0] == 0

    def test_grid_aligned_0_to_15(self):
        p = fit_params(np.arange(16.0)[None, :], spec_pg(4, 16))
        assert p.scales[0, 0] == 1.0
        assert p.zero_points[0, 0] == 0

    def test_hand_evaluated_3bit(self):
        # min -3, max 5 at 3 bits: s = 8/7, z = round(3 * 7 / 8) = 3
        p = fit_params(np.array([[-3.0, 5.0]]), spec_pg(3, 2))
        assert p.scales[0, 0] == pytest.approx(8.0 / 7.0)
        assert p.zero_points[0, 0] == 3

    def test_nonzero_constant_group_exact(self):
        x = np.full((1, 4), 2.7)
        assert np.allclose(fake_quant(x, spec_pg(4, 4)), x)
        assert np.allclose(fake_quant(-x, spec_pg(4, 4, symmetric=True)), -x)

    def test_clip_ratio_shrinks_scale(self):
        x = make_rng(0).standard_normal((4, 16))
        s_full = fit_params(x, spec_pg(4, 16)).scales
        s_clip = fit_params(x, spec_pg(4, 16, clip_ratio=0.5)).scales
        assert np.all(s_clip <= s_full)
        assert np.any(s_clip < s_full)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            QuantSpec(bits=1)
        with pytest.raises(ValueError):
            QuantSpec(bits=4, granularity="per_row")
        with pytest.raises(ValueError):
            QuantSpec(bits=4, clip_ratio=0.0)


class TestQuantizeDequantize:
    def test_on_grid_exact(self):
        p = fit_params(np.array([[-3.0, 5.0]]), spec_pg(3, 2))
        s, z = float(p.scales[0, 0]), int(p.zero_points[0, 0])
        x = s * (np.arange(8.0)[None, :] - z)
        p2 = fit_params(x, spec_pg(3, 8))
        assert np.max(np.abs(dequantize(quantize(x, p2)) - x)) < 1e-12

    def test_hand_codes(self):
        x = np.array([[-3.0, 5.0]])
        qt = quantize(x, fit_params(x, spec_pg(3, 2)))
        assert qt.codes[0, 0] == 0 and qt.codes[0, 1] == 7

    def test_symmetric_saturation(self):
        x = make_rng(1).standard_normal((1, 16))
        qt = quantize(x, fit_params(x, spec_pg(8, 16, symmetric=True)))
        peak = np.argmax(np.abs(x[0]))
        assert abs(qt.codes[0, peak]) == 127

    def test_all_zero_codes_decode_to_minus_sz(self):
        x = make_rng(2).standard_normal((2, 8))
        qt = quantize(x, fit_params(x, spec_pg(4, 8)))
        qt.codes[:] = 0
        s, z = qt.params.expand()
        assert np.allclose(dequantize(qt), -s * z)

    def test_round_trip_bound_scan(self):
        x = make_rng(3).standard_normal((6, 256))
        for spec in (spec_pg(4, 128), spec_pg(8, 128),
                     QuantSpec(bits=4, granularity=PER_TENSOR),
                     QuantSpec(bits=4, granularity=PER_TOKEN),
                     QuantSpec(bits=4, granularity=PER_CHANNEL, axis=1)):
            p = fit_params(x, spec)
            err = np.abs(dequantize(quantize(x, p)) - x)
            s, _ = p.expand()
            assert np.all(err <= s / 2 + 1e-6), spec.granularity

    def test_passthrough_sentinel(self):
        x = make_rng(4).standard_normal((3, 7))
        assert fake_quant(x, QuantSpec(bits=16)) is x

    def test_ragged_final_group(self):
        x = make_rng(5).standard_normal((2, 300))
        p = fit_params(x, spec_pg(4, 128))
        assert p.scales.shape == (2, 3)
        err = np.abs(dequantize(quantize(x, p)) - x)
        s, _ = p.expand()
        assert np.all(err <= s / 2 + 1e-6)


class TestProperties:
    @given(arrays(np.float64, (4, 32),
                  elements=st.floats(-1e6, 1e6, allow_nan=False)))
    @settings(max_examples=50, deadline=None)
    def test_idempotence(self, x):
        spec = spec_pg(4, 16)
        once = fake_quant(x, spec)
        assert np.array_equal(fake_quant(once, spec), once)

    @given(arrays(np.float64, (2, 16),
                  elements=st.floats(-1e30, 1e30, allow_nan=False,
                                     allow_subnormal=True)),
           st.integers(2, 8), st.booleans())
    @settings(max_examples=100, deadline=None)
    def test_code_range_safety(self, x, bits, symmetric):
        qt = quantize(x, fit_params(x, spec_pg(bits, 8, symmetric=symmetric)))
        if symmetric:
            lim = 2 ** (bits - 1) - 1
            assert qt.codes.min() >= -lim and qt.codes.max() <= lim
        else:
            assert qt.codes.min() >= 0 and qt.codes.max() <= 2**bits - 1
        assert np.all(np.isfinite(dequantize(qt)))

    def test_bound_halves_with_extra_bit(self):
        x = make_rng(6).standard_normal((4, 64))
        for bits in (3, 4, 7):
            s_lo = fit_params(x, spec_pg(bits, 32)).scales
            s_hi = fit_params(x, spec_pg(bits + 1, 32)).scales
            assert np.all(s_hi / 2 <= s_lo / 2 / 2 + 1e-6)

    def test_granularity_refinement(self):
        x = make_rng(7).standard_normal((4, 256)) * np.exp(
            make_rng(8).uniform(-3, 3, size=(4, 256)))
        err_pt = np.sum((fake_quant(x, QuantSpec(bits=4, granularity=PER_TENSOR))
                         - x) ** 2)
        err_pg = np.sum((fake_quant(x, spec_pg(4, 128)) - x) ** 2)
        assert err_pg <= err_pt


class TestCodePacking:
    @pytest.mark.parametrize("bits", [2, 3, 4, 5, 8])
    @pytest.mark.parametrize("symmetric", [False, True])
    def test_round_trip(self, bits, symmetric):
        rng = make_rng(bits)
        if symmetric:
            lim = 2 ** (bits - 1) - 1
            codes = rng.integers(-lim, lim + 1, size=(3, 37)).astype(np.int32)
        else:
            codes = rng.integers(0, 2**bits, size=(3, 37)).astype(np.int32)
        raw = pack_codes(codes, bits, symmetric)
        back = unpack_codes(raw, codes.size, bits, symmetric).reshape(codes.shape)
        assert np.array_equal(back, codes)

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            pack_codes(np.array([[16]]), 4, False)

    def test_short_buffer_rejected(self):
        with pytest.raises(ValueError):
            unpack_codes(b"\x00", 100, 4, False)
