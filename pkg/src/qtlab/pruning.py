"""Per-layer tail pinning: robust magnitude thresholds with EMA, periodic clipping.

Extreme weights inflate the symmetric quantization scale. Clipping the master
weights to a high quantile of |w| every few epochs contracts the integer step
size, spending more representational levels on the bulk of the distribution.
Values are clipped at the threshold, never zeroed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .observers import empirical_quantile, subsample


def robust_threshold(w, p_clip: float, s_max: int | None = None,
                     rng: np.random.Generator | None = None) -> float:
    """The p_clip empirical quantile of |w|, optionally over a subsample."""
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if w.size == 0:
        raise ValueError("robust_threshold: empty weight tensor")
    mags = np.abs(w)
    if s_max is not None and rng is not None:
        mags = subsample(mags, s_max, rng)
    return empirical_quantile(mags, p_clip)


@dataclass
class PruneState:
    """EMA thresholds tau per layer plus the clipping policy knobs."""

    p_clip: float = 0.95
    beta: float = 0.5
    period_k: int = 5
    warmup_end: int = 10
    tau: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.p_clip < 1.0:
            raise ValueError(f"p_clip={self.p_clip} outside (0, 1)")
        if not 0.0 < self.beta <= 1.0:
            raise ValueError(f"beta={self.beta} outside (0, 1]")
        if self.period_k < 1:
            raise ValueError("period_k must be >= 1")


def update_threshold(state: PruneState, layer: str, tau_hat: float) -> PruneState:
    """First observation initializes tau; later ones apply the EMA recurrence."""
    if tau_hat < 0:
        raise ValueError(f"update_threshold: negative threshold {tau_hat}")
    if layer not in state.tau:
        state.tau[layer] = float(tau_hat)
    else:
        state.tau[layer] = (1.0 - state.beta) * state.tau[layer] + state.beta * float(tau_hat)
    return state


def pin_weights(w, tau: float) -> np.ndarray:
    """Elementwise clip to [-tau, tau]; in-range values pass through bitwise."""
    if tau < 0:
        raise ValueError(f"pin_weights: negative threshold {tau}")
    return np.clip(np.asarray(w, dtype=np.float64), -tau, tau)


def pin_due(epoch: int, warmup_end: int, period_k: int) -> bool:
    """True on warmup_end and every period_k epochs thereafter."""
    if period_k < 1:
        raise ValueError("pin_due: period_k must be >= 1")
    return epoch >= warmup_end and (epoch - warmup_end) % period_k == 0


def step_size_contraction(w_before, tau: float, bits: int) -> tuple[float, float]:
    """(step size from max |w|, step size from tau) for a symmetric b-bit grid."""
    w = np.asarray(w_before, dtype=np.float64).reshape(-1)
    if w.size == 0:
        raise ValueError("step_size_contraction: empty weight tensor")
    denom = (1 << (bits - 1)) - 1
    return float(np.max(np.abs(w)) / denom), float(tau / denom)
