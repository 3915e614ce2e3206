"""The training procedure end to end: FP warmup, EMA observers, periodic tail
pinning, blended fake-quant forwards with STE backwards on full-precision
master weights, and checkpoint export.

Ordering within an epoch: thresholds refresh (and weights pin when due) before
any step; within a step, observers fold in the current masters/batch before
quantizer parameters are derived, so scales never look ahead.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import backend as backend_mod
from .checkpoint import QuantizedCheckpoint, export_checkpoint
from .datasets import Dataset, iterate_batches
from .engine import Tensor, backward, softmax_cross_entropy
from .metrics import MetricsReport, cross_entropy, report_from_logits, top_k
from .models import Model
from .observers import (ObserverState, activation_qparams, update_activation_stats,
                        update_weight_stats, weight_qparams)
from .optim import SGD, AdamW, lr_at
from .pruning import PruneState, pin_due, pin_weights, robust_threshold, update_threshold
from .quant import Rounding, blend
from .schedule import Schedule, lambda_at


class TrainingDiverged(RuntimeError):
    """Non-finite training loss; carries a diagnostic snapshot dict."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class QuantPoint:
    """One quantization point: a weight tensor or a designated activation site."""

    id: str
    kind: str          # "weight" | "activation"
    owner: str         # layer name for weights, site name for activations
    observer: ObserverState


@dataclass
class TrainConfig:
    schedule: Schedule = field(default_factory=lambda: Schedule(10, 30, 20))
    epochs: int = 60
    batch_size: int = 32
    seed: int = 0
    bits: int = 8
    granularity: str = "per-tensor"
    rounding: Rounding = Rounding.HALF_TO_EVEN
    optimizer: str = "adamw"            # "adamw" | "sgd"
    lr: float = 3e-3
    weight_decay: float = 0.01
    momentum: float = 0.9               # sgd only
    lr_schedule: str = "cosine"         # "cosine" | "constant"
    enable_fake_quant: bool = True
    enable_reverse_prune: bool = True
    p_clip: float = 0.95
    prune_beta: float = 0.5
    prune_period: int = 5
    mu: float = 1e-2
    p_hi: float = 0.999
    p_lo: float = 0.001
    s_max: int = 100_000
    epsilon: float = 1e-6
    weight_observer_cadence: str = "step"    # "step" | "epoch"
    act_observer_cadence: str = "step"       # "step" | "epoch"

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.granularity not in ("per-tensor", "per-channel"):
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if self.optimizer not in ("adamw", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        for name in ("weight_observer_cadence", "act_observer_cadence"):
            if getattr(self, name) not in ("epoch", "step"):
                raise ValueError(f"{name} must be 'epoch' or 'step'")
        if self.enable_fake_quant and self.epochs < self.schedule.ramp_end:
            warnings.warn(f"epochs={self.epochs} ends before the ramp "
                          f"(ramp_end={self.schedule.ramp_end}); the blend never reaches 0.5",
                          stacklevel=2)


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def attach_quant_points(model: Model, config: TrainConfig | None = None) -> list[QuantPoint]:
    """One weight point per dense/conv layer; activation points at the network
    input and after every ReLU. Ids and observer seeds are deterministic."""
    config = config or TrainConfig()
    if not model.layers:
        raise ValueError("empty model")
    points: list[QuantPoint] = []

    def observer(kind: str, per_channel: bool) -> ObserverState:
        return ObserverState(kind, per_channel=per_channel, mu=config.mu,
                             p_hi=config.p_hi, p_lo=config.p_lo, s_max=config.s_max,
                             epsilon=config.epsilon,
                             seed=_derived_seed(config.seed, 2, len(points)))

    points.append(QuantPoint("input.act", "activation", "input",
                             observer("activation", False)))
    per_channel = config.granularity == "per-channel"
    for layer in model.layers:
        if layer.kind in ("dense", "conv"):
            points.append(QuantPoint(f"{layer.name}.weight", "weight", layer.name,
                                     observer("weight", per_channel)))
        elif layer.kind == "relu":
            points.append(QuantPoint(f"{layer.name}.act", "activation", layer.name,
                                     observer("activation", False)))
        elif layer.kind != "flatten":
            raise ValueError(f"unsupported layer kind {layer.kind!r} ({layer.name})")
    ids = [p.id for p in points]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate quant point ids")
    return points


class Quantizer:
    """Routes forward tensors through observers and the progressive blend."""

    def __init__(self, points: list[QuantPoint], bits: int, rounding: Rounding,
                 lam: float, blend_enabled: bool = True, update: bool = False,
                 weight_update_due: bool = False, act_update_due: bool = False):
        self._points = {p.id: p for p in points}
        self.bits = bits
        self.rounding = rounding
        self.lam = lam
        self.blend_enabled = blend_enabled
        self.update = update
        self.weight_update_due = weight_update_due
        self.act_update_due = act_update_due

    def weight(self, layer_name: str, w: Tensor) -> Tensor:
        point = self._points[f"{layer_name}.weight"]
        if self.update and self.weight_update_due:
            update_weight_stats(point.observer, w.data)
        if not self.blend_enabled:
            return w
        return blend(w, weight_qparams(point.observer, self.bits), self.lam, self.rounding)

    def activation(self, site: str, x: Tensor) -> Tensor:
        point = self._points[f"{site}.act"]
        if self.update and self.act_update_due:
            update_activation_stats(point.observer, x.data)
        if not self.blend_enabled:
            return x
        return blend(x, activation_qparams(point.observer, self.bits), self.lam, self.rounding)


@dataclass
class EpochRecord:
    epoch: int
    lam: float
    lr: float
    train_loss: float
    val_loss: float
    val_top1: float
    pin_event: bool
    pin_taus: dict[str, float]
    pin_premax: dict[str, float]
    pin_postmax: dict[str, float]
    point_scales: dict[str, float | list]


REPORT_CSV_HEADER = ("epoch,lambda,lr,train_loss,val_loss,val_top1,"
                     "pin_event,pin_taus,pin_premax,pin_postmax,point_scales")


def _fmt_map(d: dict) -> str:
    parts = []
    for key in d:
        value = d[key]
        if isinstance(value, list):
            parts.append(f"{key}=[" + "|".join(repr(v) for v in value) + "]")
        else:
            parts.append(f"{key}={value!r}")
    return ";".join(parts)


@dataclass
class TrainReport:
    records: list[EpochRecord]
    checkpoint_path: str | None = None

    @property
    def final_val_top1(self) -> float:
        return self.records[-1].val_top1

    def val_top1_trace(self) -> list[float]:
        return [r.val_top1 for r in self.records]

    def pin_epochs(self) -> list[int]:
        return [r.epoch for r in self.records if r.pin_event]

    def csv_text(self) -> str:
        lines = [REPORT_CSV_HEADER]
        for r in self.records:
            lines.append(f"{r.epoch},{r.lam!r},{r.lr!r},{r.train_loss!r},"
                         f"{r.val_loss!r},{r.val_top1!r},{int(r.pin_event)},"
                         f"{_fmt_map(r.pin_taus)},{_fmt_map(r.pin_premax)},"
                         f"{_fmt_map(r.pin_postmax)},{_fmt_map(r.point_scales)}")
        return "\n".join(lines) + "\n"

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.csv_text())


def _make_optimizer(config: TrainConfig, params: list[Tensor]):
    if config.optimizer == "sgd":
        return SGD(params, config.lr, momentum=config.momentum,
                   weight_decay=config.weight_decay)
    return AdamW(params, config.lr, weight_decay=config.weight_decay)


def _point_scale_snapshot(points: list[QuantPoint], bits: int) -> dict:
    scales: dict[str, float | list] = {}
    for p in points:
        if p.observer.updates == 0:
            continue
        if p.kind == "weight":
            qp = weight_qparams(p.observer, bits)
            scales[p.id] = ([float(s) for s in np.asarray(qp.scale)]
                            if qp.per_channel else float(qp.scale))
        else:
            scales[p.id] = float(activation_qparams(p.observer, bits).scale)
    return scales


def train(model: Model, train_ds: Dataset, val_ds: Dataset, config: TrainConfig,
          meta: dict | None = None) -> tuple[TrainReport, QuantizedCheckpoint]:
    """Run the full curriculum and export a frozen-scale checkpoint.

    The per-epoch validation columns use the plain FP forward on the master
    weights, matching evaluate(mode="fp")."""
    config.validate()
    points = attach_quant_points(model, config)
    sched = config.schedule
    prune = PruneState(p_clip=config.p_clip, beta=config.prune_beta,
                       period_k=config.prune_period, warmup_end=sched.warmup_end)
    prune_rng = np.random.default_rng([config.seed, 3])
    opt = _make_optimizer(config, [t for _, t in model.parameters()])

    records: list[EpochRecord] = []
    for epoch in range(config.epochs):
        lam = lambda_at(epoch, sched)
        blend_lam = lam if config.enable_fake_quant else 0.0

        pin_event = False
        pin_taus: dict[str, float] = {}
        pin_premax: dict[str, float] = {}
        pin_postmax: dict[str, float] = {}
        if config.enable_reverse_prune and epoch >= sched.warmup_end:
            for layer in model.weight_layers():
                tau_hat = robust_threshold(layer.weight.data, config.p_clip,
                                           config.s_max, prune_rng)
                update_threshold(prune, layer.name, tau_hat)
            if pin_due(epoch, sched.warmup_end, config.prune_period):
                pin_event = True
                for layer in model.weight_layers():
                    tau = prune.tau[layer.name]
                    pin_premax[layer.name] = float(np.max(np.abs(layer.weight.data)))
                    layer.weight.data = pin_weights(layer.weight.data, tau)
                    pin_taus[layer.name] = tau
                    pin_postmax[layer.name] = float(np.max(np.abs(layer.weight.data)))

        opt.lr = lr_at(config.lr, config.lr_schedule, epoch, config.epochs)
        losses = []
        for step, (xb, yb) in enumerate(iterate_batches(train_ds, config.batch_size,
                                                        config.seed, epoch)):
            quantizer = Quantizer(
                points, config.bits, config.rounding, blend_lam,
                blend_enabled=config.enable_fake_quant, update=True,
                weight_update_due=(config.weight_observer_cadence == "step" or step == 0),
                act_update_due=(config.act_observer_cadence == "step" or step == 0))
            logits = model.forward(Tensor(xb), quantizer)
            loss = softmax_cross_entropy(logits, yb)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {step}",
                    {"epoch": epoch, "step": step, "loss": float(loss.data),
                     "lambda": blend_lam, "lr": opt.lr})
            losses.append(float(loss.data))
            opt.zero_grad()
            backward(loss)
            opt.step()

        val_logits = collect_logits(model, val_ds)
        records.append(EpochRecord(
            epoch=epoch, lam=lam, lr=opt.lr, train_loss=float(np.mean(losses)),
            val_loss=cross_entropy(val_logits, val_ds.labels),
            val_top1=top_k(val_logits, val_ds.labels, 1),
            pin_event=pin_event, pin_taus=pin_taus, pin_premax=pin_premax,
            pin_postmax=pin_postmax,
            point_scales=_point_scale_snapshot(points, config.bits)))

    export_meta = {"seed": config.seed,
                   "terminal_lambda": lambda_at(config.epochs - 1, sched),
                   "fake_quant": config.enable_fake_quant,
                   "reverse_prune": config.enable_reverse_prune}
    export_meta.update(meta or {})
    ckpt = export_checkpoint(model, points, config.bits, config.granularity, export_meta)
    return TrainReport(records), ckpt


def collect_logits(target, dataset: Dataset, mode: str = "fp", *, lam: float | None = None,
                   profile=None, calib=None, points: list[QuantPoint] | None = None,
                   bits: int = 8, rounding: Rounding = Rounding.HALF_TO_EVEN,
                   batch_size: int = 256) -> np.ndarray:
    """Pre-softmax logits for every sample under the requested numerics."""
    if len(dataset) == 0:
        raise ValueError("collect_logits: empty dataset")
    if isinstance(target, QuantizedCheckpoint):
        if mode == "fp":
            return backend_mod.fp_reference_logits(target, dataset.inputs)
        if mode == "integer-sim":
            return backend_mod.integer_infer(target, dataset.inputs,
                                             profile or backend_mod.DEFAULT_PROFILE, calib)
        if mode == "fake-quant":
            return fake_quant_checkpoint_logits(target, dataset.inputs,
                                                0.0 if lam is None else lam, rounding)
        raise ValueError(f"unknown mode {mode!r}")
    if not isinstance(target, Model):
        raise TypeError(f"expected Model or QuantizedCheckpoint, got {type(target)!r}")
    if mode == "integer-sim":
        raise ValueError("integer-sim evaluation requires an exported checkpoint")
    quantizer = None
    if mode == "fake-quant":
        if points is None or lam is None:
            raise ValueError("fake-quant evaluation requires points and lam")
        quantizer = Quantizer(points, bits, rounding, lam, update=False)
    elif mode != "fp":
        raise ValueError(f"unknown mode {mode!r}")
    chunks = []
    for start in range(0, len(dataset), batch_size):
        x = Tensor(dataset.inputs[start:start + batch_size])
        chunks.append(model_forward_data(target, x, quantizer))
    return np.concatenate(chunks)


def model_forward_data(model: Model, x: Tensor, quantizer=None) -> np.ndarray:
    return model.forward(x, quantizer).data


def fake_quant_checkpoint_logits(ckpt: QuantizedCheckpoint, inputs, lam: float,
                                 rounding: Rounding = Rounding.HALF_TO_EVEN) -> np.ndarray:
    """FP forward on dequantized weights with activations blended at lam."""
    from .quant import fake_quantize

    x, unbatch = backend_mod._batched(ckpt, inputs)

    def blend_site(values, site):
        fq = fake_quantize(values, ckpt.act_qparams(site), rounding)
        return values + lam * (fq - values)

    h = blend_site(x, "input")
    for entry in ckpt.topology:
        kind, name = entry["kind"], entry["name"]
        if kind == "dense":
            h = h @ ckpt.fp_weight(name).T + ckpt.fp_bias(name)[None, :]
        elif kind == "conv":
            h = backend_mod._fp_conv(h, ckpt.fp_weight(name)) + ckpt.fp_bias(name)[None, :, None, None]
        elif kind == "relu":
            h = blend_site(np.maximum(h, 0.0), name)
        elif kind == "flatten":
            h = h.reshape(h.shape[0], -1)
    return h[0] if unbatch else h


def evaluate(target, dataset: Dataset, mode: str = "fp", *, ref_logits=None,
             n_bins: int = 15, **kwargs) -> MetricsReport:
    """Metrics for a model or checkpoint under fp / fake-quant / integer-sim
    numerics; logit MSE and SNR are taken against ref_logits when given."""
    logits = collect_logits(target, dataset, mode, **kwargs)
    return report_from_logits(logits, dataset.labels, ref_logits, n_bins)
