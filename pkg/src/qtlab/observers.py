"""Robust quantile statistics driving quantizer parameters.

Weight observers track the high quantile of |w| (symmetric grids); activation
observers track a low/high quantile pair (asymmetric grids). Both smooth the
raw statistics with an exponential moving average and subsample large tensors
before sorting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .quant import QuantParams, asymmetric_qparams, derive_qrange, round_values, Rounding, symmetric_qparams


def empirical_quantile(samples, p: float) -> float:
    """The ceil(p*n)-th order statistic (1-indexed) of the sorted samples."""
    samples = np.asarray(samples, dtype=np.float64).reshape(-1)
    if samples.size == 0:
        raise ValueError("empirical_quantile: empty sample")
    if not 0.0 < p < 1.0:
        raise ValueError(f"empirical_quantile: p={p} outside (0, 1)")
    order = np.sort(samples)
    return float(order[math.ceil(p * samples.size) - 1])


def subsample(values, s_max: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform sample without replacement when the input exceeds s_max."""
    values = np.asarray(values).reshape(-1)
    if s_max < 1:
        raise ValueError("subsample: s_max must be >= 1")
    if values.size <= s_max:
        return values
    idx = rng.choice(values.size, size=s_max, replace=False)
    return values[idx]


def _ema(old, new, mu: float):
    return (1.0 - mu) * old + mu * new


@dataclass
class ObserverState:
    """EMA quantile tracker for one quantization point.

    kind "weight" keeps the high quantile of magnitudes (per channel when
    ``per_channel``); kind "activation" keeps a low/high quantile pair. The
    first update initializes the EMA directly to avoid a cold-start bias.
    """

    kind: str
    per_channel: bool = False
    mu: float = 1e-3
    p_hi: float = 0.999
    p_lo: float = 0.001
    s_max: int = 100_000
    epsilon: float = 1e-6
    seed: int = 0
    m_ema: float | np.ndarray | None = None
    a_ema: float | None = None
    b_ema: float | None = None
    updates: int = 0
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if self.kind not in ("weight", "activation"):
            raise ValueError(f"unknown observer kind {self.kind!r}")
        if self.per_channel and self.kind != "weight":
            raise ValueError("per-channel observers are weights-only")
        for name in ("mu", "p_hi", "p_lo"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name}={v} must lie strictly inside (0, 1)")
        if self.s_max < 1:
            raise ValueError("s_max must be >= 1")
        self.rng = np.random.default_rng(self.seed)


def update_weight_stats(state: ObserverState, w) -> ObserverState:
    """Fold one view of the master weights into the magnitude quantile EMA."""
    if state.kind != "weight":
        raise ValueError("update_weight_stats: observer kind is not 'weight'")
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        raise ValueError("update_weight_stats: empty tensor")
    if state.per_channel:
        mags = np.abs(w.reshape(w.shape[0], -1))
        m_t = np.array([empirical_quantile(subsample(row, state.s_max, state.rng), state.p_hi)
                        for row in mags])
        if state.updates and np.shape(state.m_ema) != m_t.shape:
            raise ValueError("update_weight_stats: channel count changed between updates")
    else:
        m_t = empirical_quantile(subsample(np.abs(w), state.s_max, state.rng), state.p_hi)
    state.m_ema = m_t if state.updates == 0 else _ema(state.m_ema, m_t, state.mu)
    state.updates += 1
    return state


def update_activation_stats(state: ObserverState, x) -> ObserverState:
    """Fold one batch of activations into the low/high quantile EMAs."""
    if state.kind != "activation":
        raise ValueError("update_activation_stats: observer kind is not 'activation'")
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("update_activation_stats: empty tensor")
    view = subsample(x, state.s_max, state.rng)
    a_t = empirical_quantile(view, state.p_lo)
    b_t = empirical_quantile(view, state.p_hi)
    if state.updates == 0:
        state.a_ema, state.b_ema = a_t, b_t
    else:
        state.a_ema = _ema(state.a_ema, a_t, state.mu)
        state.b_ema = _ema(state.b_ema, b_t, state.mu)
    state.updates += 1
    return state


def weight_qparams(state: ObserverState, bits: int) -> QuantParams:
    """Symmetric grid with scale max(m_ema, eps) / (2^(b-1) - 1), z = 0."""
    if state.kind != "weight":
        raise ValueError("weight_qparams: observer kind is not 'weight'")
    if state.updates == 0:
        raise ValueError("weight_qparams: observer has no updates yet")
    _, q_max = derive_qrange(bits, True)
    if state.per_channel:
        scale = np.maximum(np.asarray(state.m_ema, dtype=np.float64), state.epsilon) / q_max
        return symmetric_qparams(bits, scale, channel_axis=0)
    return symmetric_qparams(bits, max(float(state.m_ema), state.epsilon) / q_max)


def activation_qparams(state: ObserverState, bits: int) -> QuantParams:
    """Asymmetric grid covering [a_ema, b_ema] with a clipped integer zero-point."""
    if state.kind != "activation":
        raise ValueError("activation_qparams: observer kind is not 'activation'")
    if state.updates == 0:
        raise ValueError("activation_qparams: observer has no updates yet")
    return range_to_asymmetric_qparams(state.a_ema, state.b_ema, bits, state.epsilon)


def range_to_asymmetric_qparams(lo: float, hi: float, bits: int,
                                epsilon: float = 1e-6) -> QuantParams:
    """Shared range -> (scale, zero_point) map for the asymmetric grid.

    The raw zero-point -lo/s is rounded half-to-even and clipped into the
    unsigned range before use.
    """
    q_min, q_max = derive_qrange(bits, False)
    scale = max(hi - lo, epsilon) / (q_max - q_min)
    z = float(round_values(np.asarray(-lo / scale), Rounding.HALF_TO_EVEN))
    z = int(min(max(z, q_min), q_max))
    return asymmetric_qparams(bits, scale, z)
