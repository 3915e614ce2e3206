"""Quantizer core: grids, rounding ties, fake-quant properties, blending."""

import numpy as np
import pytest

from qtlab.engine import Tensor, backward, mul, sum_all
from qtlab.quant import (QuantParams, Rounding, asymmetric_qparams, blend, dequantize,
                         derive_qrange, fake_quantize, quantize, scale_floor,
                         symmetric_qparams)


def sym8(scale):
    return symmetric_qparams(8, scale)


class TestQRange:
    def test_symmetric_int8(self):
        assert derive_qrange(8, True) == (-128, 127)

    def test_asymmetric_uint8(self):
        assert derive_qrange(8, False) == (0, 255)

    def test_symmetric_int4(self):
        assert derive_qrange(4, True) == (-8, 7)

    def test_unsupported_bits(self):
        with pytest.raises(ValueError, match="bit-width"):
            derive_qrange(16, True)


class TestQuantizeDequantize:
    def test_basic_rounding(self):
        assert quantize(np.array(0.123), sym8(0.01)) == 12

    def test_saturation(self):
        assert quantize(np.array(2.0), sym8(0.01)) == 127

    def test_tie_breaking_modes(self):
        qp = sym8(1.0)
        assert quantize(np.array(0.5), qp, Rounding.HALF_TO_EVEN) == 0
        assert quantize(np.array(0.5), qp, Rounding.HALF_AWAY_FROM_ZERO) == 1

    def test_dequantize_symmetric(self):
        assert dequantize(np.array(12), sym8(0.01)) == pytest.approx(0.12)

    def test_dequantize_asymmetric_offset(self):
        qp = asymmetric_qparams(8, 0.01, 100)
        assert dequantize(np.array(0), qp) == pytest.approx(-1.0)

    def test_dequantize_endpoint(self):
        assert dequantize(np.array(127), sym8(0.01)) == pytest.approx(1.27)

    def test_dequantize_range_check(self):
        with pytest.raises(ValueError, match="outside"):
            dequantize(np.array(128), sym8(0.01))

    def test_per_channel_axis_mismatch(self):
        qp = symmetric_qparams(8, [0.1, 0.2], channel_axis=0)
        with pytest.raises(ValueError, match="per-channel"):
            quantize(np.zeros((3, 2)), qp)


class TestQuantParamsValidation:
    def test_symmetric_nonzero_zero_point_rejected(self):
        with pytest.raises(ValueError, match="zero_point"):
            QuantParams(8, 0.1, 5, -128, 127, True)

    def test_asymmetric_zero_point_range(self):
        with pytest.raises(ValueError, match="zero_point"):
            QuantParams(8, 0.1, 300, 0, 255, False)

    def test_wrong_range_rejected(self):
        with pytest.raises(ValueError, match="qrange"):
            QuantParams(8, 0.1, 0, -127, 127, True)

    def test_scale_below_floor_rejected(self):
        with pytest.raises(ValueError, match="floor"):
            QuantParams(8, 0.0, 0, -128, 127, True)

    def test_factories_floor_degenerate_scales(self):
        assert symmetric_qparams(8, 0.0).scale == pytest.approx(scale_floor(8, True))
        assert asymmetric_qparams(8, 0.0, 0).scale == pytest.approx(scale_floor(8, False))


class TestFakeQuantize:
    def test_simple(self):
        assert fake_quantize(np.array(0.123), sym8(0.01)) == pytest.approx(0.12)

    def test_exactly_representable_asymmetric(self):
        qp = asymmetric_qparams(8, 0.01, 100)
        assert fake_quantize(np.array(-1.0), qp) == pytest.approx(-1.0, abs=1e-15)

    def test_per_channel_rows_within_half_scale(self):
        # elementwise oracle over both rows with their own scales
        x = np.array([[1.0, 0.0], [0.0, 10.0]])
        scales = np.array([1.0 / 127.0, 10.0 / 127.0])
        qp = symmetric_qparams(8, scales, channel_axis=0)
        out = fake_quantize(x, qp)
        for row, s in enumerate(scales):
            assert np.all(np.abs(out[row] - x[row]) <= s / 2 + 1e-15)


class TestProperties:
    """Vectorized random-case sweeps of the quantizer contract."""

    def _random_cases(self, seed, n):
        rng = np.random.default_rng(seed)
        cases = []
        for bits in (4, 8):
            for symmetric in (True, False):
                for rounding in Rounding:
                    scale = float(rng.uniform(1e-4, 0.3))
                    if symmetric:
                        qp = symmetric_qparams(bits, scale)
                    else:
                        q_min, q_max = derive_qrange(bits, False)
                        qp = asymmetric_qparams(bits, scale, int(rng.integers(q_min, q_max + 1)))
                    x = rng.uniform(-1.5, 1.5, n // 16)
                    cases.append((x, qp, rounding))
        return cases

    def test_range_bounded_error_and_saturation(self):
        for x, qp, rounding in self._random_cases(1, 40_000):
            lo = qp.scale * (qp.q_min - qp.zero_point)
            hi = qp.scale * (qp.q_max - qp.zero_point)
            out = fake_quantize(x, qp, rounding)
            in_range = (x >= lo) & (x <= hi)
            assert np.all(np.abs(out[in_range] - x[in_range]) <= qp.scale / 2 + 1e-12)
            assert np.all(out[x < lo] == lo)
            assert np.all(out[x > hi] == hi)

    def test_monotonicity(self):
        for x, qp, rounding in self._random_cases(2, 40_000):
            xs = np.sort(x)
            out = fake_quantize(xs, qp, rounding)
            assert np.all(np.diff(out) >= 0)

    def test_idempotence(self):
        for x, qp, rounding in self._random_cases(3, 40_000):
            once = fake_quantize(x, qp, rounding)
            assert np.array_equal(fake_quantize(once, qp, rounding), once)

    def test_grid_membership(self):
        for x, qp, rounding in self._random_cases(4, 40_000):
            q = quantize(x * 100, qp, rounding)  # exercise saturation too
            assert q.min() >= qp.q_min and q.max() <= qp.q_max


class TestBlend:
    def test_lambda_zero_bitwise(self):
        x = Tensor(np.array([0.123, -0.5, 0.0]))
        out = blend(x, sym8(0.01), 0.0)
        assert np.array_equal(out.data, x.data)

    def test_lambda_one_equals_fake_quantize(self):
        x = Tensor(np.array([0.123, -0.456]))
        out = blend(x, sym8(0.01), 1.0)
        assert np.array_equal(out.data, fake_quantize(x.data, sym8(0.01)))

    def test_midpoint_value(self):
        out = blend(Tensor(np.array([0.123])), sym8(0.01), 0.5)
        assert out.data == pytest.approx([0.1215], abs=1e-15)

    def test_lambda_domain_checked(self):
        with pytest.raises(ValueError, match="blend"):
            blend(Tensor([0.1]), sym8(0.01), 1.5)

    def test_gradient_path_is_identity(self):
        x = Tensor(np.array([0.3, -0.8]), requires_grad=True)
        out = blend(x, sym8(0.1), 0.9)
        backward(sum_all(mul(out, Tensor(np.array([2.0, 3.0])))))
        assert x.grad.tolist() == [2.0, 3.0]
