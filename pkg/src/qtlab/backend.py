"""Simulated integer backends: compiler personalities executing quantized checkpoints.

Each profile fixes weight granularity, activation-scaling policy, rounding
mode, and bit-width. Dense/conv layers run in pure integer arithmetic with
32-bit accumulators; accumulators are requantized to the next activation grid
through a float64 multiplier and the profile's rounding mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .checkpoint import INT32_MAX, INT32_MIN, QuantizedCheckpoint
from .metrics import MetricsReport, report_from_logits
from .observers import empirical_quantile, range_to_asymmetric_qparams
from .quant import (QuantParams, Rounding, derive_qrange, quantize, round_values,
                    symmetric_qparams)


class BackendError(RuntimeError):
    """Profile/checkpoint combination cannot execute (overflow, bad shapes)."""


@dataclass(frozen=True)
class BackendProfile:
    """One compiler personality. act_scaling is one of static-trained,
    static-minmax, static-percentile, static-histogram, or dynamic."""

    profile_id: str
    weight_granularity: str = "per-tensor"
    act_scaling: str = "static-trained"
    percentile: float = 0.999
    hist_bins: int = 256
    hist_coverage: float = 1.0
    rounding: Rounding = Rounding.HALF_TO_EVEN
    bits: int = 8

    def __post_init__(self):
        if self.weight_granularity not in ("per-tensor", "per-channel"):
            raise ValueError(f"unknown weight granularity {self.weight_granularity!r}")
        if self.act_scaling not in ("static-trained", "static-minmax",
                                    "static-percentile", "static-histogram", "dynamic"):
            raise ValueError(f"unknown activation scaling {self.act_scaling!r}")

    @property
    def needs_calibration(self) -> bool:
        return self.act_scaling in ("static-minmax", "static-percentile", "static-histogram")


@dataclass
class CalibrationSet:
    """Representative inputs used to pre-calibrate static activation ranges."""

    inputs: np.ndarray
    name: str = "calib"
    seed: int = 0

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)


def default_profiles(bits: int = 8) -> list[BackendProfile]:
    """The six-personality sweep: {per-tensor, per-channel} x {static-trained,
    dynamic}, plus per-tensor minmax and percentile recalibration."""
    return [
        BackendProfile("pt-static-trained", "per-tensor", "static-trained", bits=bits),
        BackendProfile("pc-static-trained", "per-channel", "static-trained", bits=bits),
        BackendProfile("pt-dynamic", "per-tensor", "dynamic", bits=bits),
        BackendProfile("pc-dynamic", "per-channel", "dynamic", bits=bits),
        BackendProfile("pt-static-minmax", "per-tensor", "static-minmax", bits=bits),
        BackendProfile("pt-static-percentile", "per-tensor", "static-percentile",
                       percentile=0.999, bits=bits),
    ]


DEFAULT_PROFILE = default_profiles()[0]


# ---------------------------------------------------------------------------
# FP reference path (dequantized payload weights, float64 arithmetic)


def _fp_conv(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    n, c, h, width = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((n, w.shape[0], h, width))
    for di in range(3):
        for dj in range(3):
            out += np.einsum("oc,bchw->bohw", w[:, :, di, dj],
                             xp[:, :, di:di + h, dj:dj + width], optimize=True)
    return out


def _batched(ckpt: QuantizedCheckpoint, inputs: np.ndarray) -> tuple[np.ndarray, bool]:
    first = next(e for e in ckpt.topology if e["kind"] in ("dense", "conv"))
    rank = 1 if first["kind"] == "dense" else 3
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == rank:
        return x[None], True
    if x.ndim == rank + 1:
        return x, False
    raise BackendError(f"input rank {x.ndim} does not match topology (expected {rank} or {rank + 1})")


def fp_forward_capture(ckpt: QuantizedCheckpoint, inputs) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Float forward over dequantized weights; returns logits and the values
    seen at each activation site (network input and every ReLU output)."""
    x, unbatch = _batched(ckpt, inputs)
    sites = {"input": x}
    h = x
    for entry in ckpt.topology:
        kind, name = entry["kind"], entry["name"]
        if kind == "dense":
            h = h @ ckpt.fp_weight(name).T + ckpt.fp_bias(name)[None, :]
        elif kind == "conv":
            h = _fp_conv(h, ckpt.fp_weight(name)) + ckpt.fp_bias(name)[None, :, None, None]
        elif kind == "relu":
            h = np.maximum(h, 0.0)
            sites[name] = h
        elif kind == "flatten":
            h = h.reshape(h.shape[0], -1)
    return (h[0] if unbatch else h), sites


def fp_reference_logits(ckpt: QuantizedCheckpoint, inputs) -> np.ndarray:
    logits, _ = fp_forward_capture(ckpt, inputs)
    return logits


# ---------------------------------------------------------------------------
# calibration


def _range_from_pool(pool: np.ndarray, profile: BackendProfile) -> tuple[float, float]:
    if profile.act_scaling == "static-minmax":
        return float(pool.min()), float(pool.max())
    if profile.act_scaling == "static-percentile":
        p = profile.percentile
        return empirical_quantile(pool, 1.0 - p), empirical_quantile(pool, p)
    if profile.act_scaling == "static-histogram":
        lo, hi = float(pool.min()), float(pool.max())
        if lo == hi:
            return lo, hi
        counts, edges = np.histogram(pool, bins=profile.hist_bins, range=(lo, hi))
        needed = profile.hist_coverage * pool.size
        best = (profile.hist_bins, 0, profile.hist_bins - 1)
        left = 0
        running = 0
        for right in range(profile.hist_bins):
            running += counts[right]
            while running - counts[left] >= needed and left < right:
                running -= counts[left]
                left += 1
            if running >= needed and (right - left) < best[0]:
                best = (right - left, left, right)
        _, left, right = best
        return float(edges[left]), float(edges[right + 1])
    raise ValueError(f"profile {profile.profile_id} does not use range calibration")


def calibrate(ckpt: QuantizedCheckpoint, profile: BackendProfile,
              calib: CalibrationSet) -> dict[str, QuantParams]:
    """Offline activation ranges from a representative dataset."""
    if not profile.needs_calibration:
        raise ValueError(f"profile {profile.profile_id} does not require recalibration")
    if calib is None or len(calib.inputs) == 0:
        raise ValueError("empty calibration set")
    _, sites = fp_forward_capture(ckpt, calib.inputs)
    out = {}
    for site, values in sites.items():
        lo, hi = _range_from_pool(values.reshape(-1), profile)
        out[site] = range_to_asymmetric_qparams(lo, hi, profile.bits)
    return out


# ---------------------------------------------------------------------------
# integer execution


def _axis1_view(v, ndim: int) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim == 0:
        return arr
    return arr.reshape((1, -1) + (1,) * (ndim - 2))


def _check_acc(acc: np.ndarray, layer: str, profile: BackendProfile) -> None:
    if acc.min() < INT32_MIN or acc.max() > INT32_MAX:
        raise BackendError(f"32-bit accumulator overflow in layer {layer} under "
                           f"profile {profile.profile_id}")


def _resolve_weights(ckpt: QuantizedCheckpoint, profile: BackendProfile):
    """Weight payloads for this profile; re-derived from the dequantized
    checkpoint weights (symmetric max-abs) when granularity or bits differ."""
    reuse = (profile.weight_granularity == ckpt.granularity and profile.bits == ckpt.bits)
    _, q_max = derive_qrange(profile.bits, True)
    plan = {}
    for entry in ckpt.topology:
        if entry["kind"] not in ("dense", "conv"):
            continue
        name = entry["name"]
        rec = ckpt.layers[name]
        if reuse:
            q_w = rec.weight_q.astype(np.int64)
            s_w = np.asarray(rec.weight_scale, dtype=np.float64)
        else:
            w_fp = ckpt.fp_weight(name)
            if profile.weight_granularity == "per-channel":
                scale = np.abs(w_fp.reshape(w_fp.shape[0], -1)).max(axis=1) / q_max
                qp = symmetric_qparams(profile.bits, scale, channel_axis=0)
            else:
                qp = symmetric_qparams(profile.bits, float(np.max(np.abs(w_fp))) / q_max)
            q_w = quantize(w_fp, qp, profile.rounding)
            s_w = np.asarray(qp.scale, dtype=np.float64)
        plan[name] = (q_w, s_w, ckpt.fp_bias(name))
    return plan


def _static_site_qparams(ckpt: QuantizedCheckpoint, profile: BackendProfile,
                         calib: CalibrationSet | None) -> dict[str, QuantParams] | None:
    if profile.act_scaling == "dynamic":
        return None
    if profile.act_scaling == "static-trained":
        if profile.bits != ckpt.bits:
            return {site: _rescale_site(ckpt, site, profile.bits) for site in ckpt.act_sites}
        return {site: ckpt.act_qparams(site) for site in ckpt.act_sites}
    if calib is None:
        raise ValueError(f"profile {profile.profile_id} requires a calibration set")
    return calibrate(ckpt, profile, calib)


def _rescale_site(ckpt: QuantizedCheckpoint, site: str, bits: int) -> QuantParams:
    qp = ckpt.act_qparams(site)
    lo = float(qp.scale) * (qp.q_min - qp.zero_point)
    hi = float(qp.scale) * (qp.q_max - qp.zero_point)
    return range_to_asymmetric_qparams(lo, hi, bits)


def _dynamic_qparams(values: np.ndarray, bits: int) -> QuantParams:
    # nudge the range to include zero so the clipped zero-point stays exact and
    # per-input ranges always cover the tensor
    lo = min(float(values.min()), 0.0)
    hi = max(float(values.max()), 0.0)
    return range_to_asymmetric_qparams(lo, hi, bits)


def _requant_bias(bias_fp: np.ndarray, s_w, s_x: float, layer: str,
                  profile: BackendProfile) -> np.ndarray:
    scale = np.asarray(s_w, dtype=np.float64) * s_x
    q = np.rint(bias_fp / scale)
    if q.min() < INT32_MIN or q.max() > INT32_MAX:
        raise BackendError(f"bias overflow in layer {layer} under profile {profile.profile_id}")
    return q.astype(np.int64)


def _int_conv(q_x: np.ndarray, q_w: np.ndarray) -> np.ndarray:
    n, c, h, width = q_x.shape
    xp = np.pad(q_x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((n, q_w.shape[0], h, width), dtype=np.int64)
    for di in range(3):
        for dj in range(3):
            out += np.einsum("oc,bchw->bohw", q_w[:, :, di, dj],
                             xp[:, :, di:di + h, dj:dj + width], optimize=True)
    return out


def _integer_forward(ckpt: QuantizedCheckpoint, x: np.ndarray, profile: BackendProfile,
                     plan, site_qp: dict[str, QuantParams] | None) -> np.ndarray:
    dynamic = site_qp is None
    qp_in = _dynamic_qparams(x, profile.bits) if dynamic else site_qp["input"]
    q = quantize(x, qp_in, profile.rounding)
    s_x, z_x = float(qp_in.scale), int(qp_in.zero_point)
    acc = None
    s_acc = None
    for entry in ckpt.topology:
        kind, name = entry["kind"], entry["name"]
        if kind in ("dense", "conv"):
            q_w, s_w, bias_fp = plan[name]
            centered = q - z_x
            if kind == "dense":
                acc = centered @ q_w.T
            else:
                acc = _int_conv(centered, q_w)
            acc += _axis1_view(_requant_bias(bias_fp, s_w, s_x, name, profile),
                               acc.ndim).astype(np.int64)
            _check_acc(acc, name, profile)
            s_acc = np.asarray(s_w, dtype=np.float64) * s_x
        elif kind == "relu":
            acc = np.maximum(acc, 0)
            real = acc * _axis1_view(s_acc, acc.ndim)
            qp = _dynamic_qparams(real, profile.bits) if dynamic else site_qp[name]
            multiplier = _axis1_view(s_acc, acc.ndim) / float(qp.scale)
            q = round_values(acc * multiplier, profile.rounding) + qp.zero_point
            q = np.clip(q, qp.q_min, qp.q_max).astype(np.int64)
            s_x, z_x = float(qp.scale), int(qp.zero_point)
        elif kind == "flatten":
            q = q.reshape(q.shape[0], -1)
    if acc is None:
        raise BackendError("topology has no dense/conv layer")
    return acc * _axis1_view(s_acc, acc.ndim)


def integer_infer(ckpt: QuantizedCheckpoint, inputs, profile: BackendProfile,
                  calib: CalibrationSet | None = None) -> np.ndarray:
    """Execute the checkpoint on a simulated integer backend.

    Accepts one input or a batch; dynamic profiles derive activation ranges per
    input, static profiles share trained or recalibrated ranges.
    """
    x, unbatch = _batched(ckpt, inputs)
    plan = _resolve_weights(ckpt, profile)
    site_qp = _static_site_qparams(ckpt, profile, calib)
    if site_qp is None:
        logits = np.stack([_integer_forward(ckpt, x[i:i + 1], profile, plan, None)[0]
                           for i in range(len(x))])
    else:
        logits = _integer_forward(ckpt, x, profile, plan, site_qp)
    return logits[0] if unbatch else logits


# ---------------------------------------------------------------------------
# profile sweeps


@dataclass
class SweepRow:
    profile_id: str
    metrics: MetricsReport


SWEEP_CSV_HEADER = "profile_id,top1,top5,logit_mse,snr_db,brier,ece"


def profile_sweep(ckpt: QuantizedCheckpoint, profiles: list[BackendProfile], dataset,
                  calib: CalibrationSet | None = None) -> tuple[list[SweepRow], MetricsReport]:
    """Run every profile over the dataset against a single FP logits reference.

    Returns (rows, fp_reference_metrics).
    """
    if not profiles:
        raise ValueError("profile_sweep: need at least one profile")
    ref_logits = fp_reference_logits(ckpt, dataset.inputs)
    ref_report = report_from_logits(ref_logits, dataset.labels, ref_logits)
    rows = []
    for profile in profiles:
        logits = integer_infer(ckpt, dataset.inputs, profile, calib)
        rows.append(SweepRow(profile.profile_id,
                             report_from_logits(logits, dataset.labels, ref_logits)))
    return rows, ref_report


def sweep_csv(rows: list[SweepRow], ref_report: MetricsReport | None = None) -> str:
    lines = [SWEEP_CSV_HEADER]
    if ref_report is not None:
        m = ref_report
        lines.append(f"fp32-reference,{m.top1!r},{m.top5!r},{m.logit_mse!r},"
                     f"{m.snr_db!r},{m.brier!r},{m.ece!r}")
    for row in rows:
        m = row.metrics
        lines.append(f"{row.profile_id},{m.top1!r},{m.top5!r},{m.logit_mse!r},"
                     f"{m.snr_db!r},{m.brier!r},{m.ece!r}")
    return "\n".join(lines) + "\n"
