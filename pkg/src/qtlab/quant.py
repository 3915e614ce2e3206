"""Uniform affine quantizer: integer grids, rounding modes, fake-quant, blending.

The core map is q = clip(round(x/s + z), q_min, q_max) with dequantization
x_hat = s*(q - z). Symmetric grids force z = 0; per-channel grids carry one
scale per output channel (axis 0 of weight tensors).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import engine
from .engine import Tensor

SUPPORTED_BITS = (4, 8)

# Floor applied to dynamic ranges before division, and to resulting scales.
RANGE_EPS = 1e-6


class Rounding(Enum):
    HALF_TO_EVEN = "half-to-even"
    HALF_AWAY_FROM_ZERO = "half-away-from-zero"


def round_values(x: np.ndarray, mode: Rounding) -> np.ndarray:
    if mode is Rounding.HALF_TO_EVEN:
        return np.rint(x)
    if mode is Rounding.HALF_AWAY_FROM_ZERO:
        return np.copysign(np.floor(np.abs(x) + 0.5), x)
    raise ValueError(f"unknown rounding mode {mode!r}")


def derive_qrange(bits: int, symmetric: bool) -> tuple[int, int]:
    """Integer grid endpoints: signed for symmetric, unsigned for asymmetric."""
    if bits not in SUPPORTED_BITS:
        raise ValueError(f"unsupported bit-width {bits}; expected one of {SUPPORTED_BITS}")
    if symmetric:
        return -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    return 0, (1 << bits) - 1


def scale_floor(bits: int, symmetric: bool) -> float:
    q_min, q_max = derive_qrange(bits, symmetric)
    return RANGE_EPS / (q_max if symmetric else q_max - q_min)


@dataclass
class QuantParams:
    """Scale/zero-point description of one integer grid.

    ``scale`` is a python float for per-tensor grids or a 1-D float64 vector
    (one entry per channel along ``channel_axis``) for per-channel grids.
    """

    bits: int
    scale: float | np.ndarray
    zero_point: int | np.ndarray
    q_min: int
    q_max: int
    symmetric: bool
    channel_axis: int | None = None

    def __post_init__(self):
        expected = derive_qrange(self.bits, self.symmetric)
        if (self.q_min, self.q_max) != expected:
            raise ValueError(f"qrange {(self.q_min, self.q_max)} does not match "
                             f"{'symmetric' if self.symmetric else 'asymmetric'} {self.bits}-bit grid {expected}")
        scale = np.asarray(self.scale, dtype=np.float64)
        if self.channel_axis is None:
            if scale.ndim != 0:
                raise ValueError("per-tensor QuantParams requires a scalar scale")
        else:
            if scale.ndim != 1 or scale.size == 0:
                raise ValueError("per-channel QuantParams requires a 1-D scale vector")
        if np.any(scale < scale_floor(self.bits, self.symmetric)):
            raise ValueError(f"scale {self.scale} below floor {scale_floor(self.bits, self.symmetric)}")
        zp = np.asarray(self.zero_point)
        if self.symmetric:
            if np.any(zp != 0):
                raise ValueError("symmetric QuantParams requires zero_point == 0")
        else:
            if np.any(zp < self.q_min) or np.any(zp > self.q_max):
                raise ValueError(f"zero_point {self.zero_point} outside [{self.q_min}, {self.q_max}]")

    @property
    def per_channel(self) -> bool:
        return self.channel_axis is not None


def symmetric_qparams(bits: int, scale, channel_axis: int | None = None) -> QuantParams:
    """Symmetric grid from a raw scale (floored to keep division safe)."""
    q_min, q_max = derive_qrange(bits, True)
    floor = scale_floor(bits, True)
    if channel_axis is None:
        return QuantParams(bits, max(float(scale), floor), 0, q_min, q_max, True)
    scale = np.maximum(np.asarray(scale, dtype=np.float64), floor)
    return QuantParams(bits, scale, 0, q_min, q_max, True, channel_axis)


def asymmetric_qparams(bits: int, scale: float, zero_point: int) -> QuantParams:
    q_min, q_max = derive_qrange(bits, False)
    return QuantParams(bits, max(float(scale), scale_floor(bits, False)),
                       int(zero_point), q_min, q_max, False)


def _per_channel_view(values, qp: QuantParams, ndim: int) -> np.ndarray:
    shape = [1] * ndim
    shape[qp.channel_axis] = -1
    return np.asarray(values, dtype=np.float64).reshape(shape)


def quantize(x, qp: QuantParams, rounding: Rounding = Rounding.HALF_TO_EVEN) -> np.ndarray:
    """Map real values onto the integer grid; output dtype is int64."""
    x = np.asarray(x, dtype=np.float64)
    if qp.per_channel:
        scale = np.asarray(qp.scale)
        if x.ndim <= qp.channel_axis or x.shape[qp.channel_axis] != scale.size:
            raise ValueError(f"per-channel quantize: axis {qp.channel_axis} of shape {x.shape} "
                             f"does not match {scale.size} scales")
        s = _per_channel_view(scale, qp, x.ndim)
        z = _per_channel_view(qp.zero_point, qp, x.ndim) if np.ndim(qp.zero_point) else qp.zero_point
    else:
        s, z = qp.scale, qp.zero_point
    q = round_values(x / s + z, rounding)
    return np.clip(q, qp.q_min, qp.q_max).astype(np.int64)


def dequantize(q, qp: QuantParams) -> np.ndarray:
    q = np.asarray(q)
    if np.any(q < qp.q_min) or np.any(q > qp.q_max):
        raise ValueError(f"quantized values outside [{qp.q_min}, {qp.q_max}]")
    if qp.per_channel:
        s = _per_channel_view(qp.scale, qp, q.ndim)
        z = _per_channel_view(qp.zero_point, qp, q.ndim) if np.ndim(qp.zero_point) else qp.zero_point
    else:
        s, z = qp.scale, qp.zero_point
    return s * (q.astype(np.float64) - z)


def fake_quantize(x, qp: QuantParams, rounding: Rounding = Rounding.HALF_TO_EVEN) -> np.ndarray:
    """Quantize-dequantize round trip; idempotent on its own output."""
    return dequantize(quantize(x, qp, rounding), qp)


def blend(x: Tensor, qp: QuantParams, lam: float,
          rounding: Rounding = Rounding.HALF_TO_EVEN) -> Tensor:
    """Progressive fake quantization: x + lam*(fake_quantize(x) - x) with STE.

    lam = 0 returns x bitwise (pure FP warmup); lam = 1 is full fake-quant in
    the forward pass. The backward pass is identity to x at every lam.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"blend strength {lam} outside [0, 1]")
    fq = fake_quantize(x.data, qp, rounding)
    return engine.ste_blend(x, fq, lam)
