"""Global blend-strength schedule: FP warmup, quartic ramp to 0.5, quadratic to full.

A single blend coefficient is shared by every quantization point within an
epoch, so all points see the same interpolation between FP and fake-quant
forwards.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class Schedule:
    """warmup_end and ramp_end delimit the quartic ramp; horizon is the number
    of epochs the final quadratic ramp takes to reach its terminal value."""

    warmup_end: int
    ramp_end: int
    horizon: int
    final_cap: float = 1.0

    def __post_init__(self):
        if not 0 <= self.warmup_end < self.ramp_end:
            raise ValueError(f"schedule requires 0 <= warmup_end < ramp_end, "
                             f"got ({self.warmup_end}, {self.ramp_end})")
        if self.horizon < 1:
            raise ValueError(f"schedule horizon must be >= 1, got {self.horizon}")
        if not 0.5 <= self.final_cap <= 1.0:
            raise ValueError(f"final_cap={self.final_cap} outside [0.5, 1.0]")


def lambda_at(t: float, sched: Schedule) -> float:
    """Blend strength at epoch t (defined for real t >= 0 as well).

    Piecewise: 0 during warmup; min(0.5, frac^4 * 0.5) on the quartic ramp;
    then 0.5 + min(1, (t - ramp_end)/horizon)^2 * (final_cap - 0.5). With the
    default cap 1.0 the last branch is exactly 0.5 + frac^2 * 0.5 and reaches
    1 at t = ramp_end + horizon.
    """
    if t < 0:
        raise ValueError(f"epoch {t} must be non-negative")
    if t < sched.warmup_end:
        return 0.0
    if t < sched.ramp_end:
        frac = (t - sched.warmup_end) / (sched.ramp_end - sched.warmup_end)
        return min(0.5, 0.5 * frac ** 4)
    frac = min(1.0, (t - sched.ramp_end) / sched.horizon)
    return 0.5 + frac * frac * (sched.final_cap - 0.5)
