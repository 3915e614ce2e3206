"""Flat dotted-key run configuration: strict parsing, overrides, snapshots.

Files are plain ``key = value`` lines (``#`` comments allowed). Every key
belongs to a fixed registry; unknown keys and malformed values are rejected
with the offending line. A canonical snapshot of the effective configuration
serializes every key in sorted order, so its hash names a run reproducibly.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable

from .datasets import make_blobs, make_spiral, read_idx
from .models import ModelSpec
from .quant import Rounding
from .schedule import Schedule
from .trainer import TrainConfig


class ConfigError(Exception):
    """Unknown key, malformed value, or inconsistent configuration."""


def _parse_bool(raw: str) -> bool:
    if raw.lower() in ("true", "1", "yes"):
        return True
    if raw.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {raw!r}")


def _parse_int_list(raw: str) -> tuple[int, ...]:
    return tuple(int(part) for part in raw.split(",") if part.strip() != "")


def _choice(*options: str) -> Callable[[str], str]:
    def parse(raw: str) -> str:
        if raw not in options:
            raise ValueError(f"expected one of {options}, got {raw!r}")
        return raw
    return parse


@dataclass(frozen=True)
class KeySpec:
    parse: Callable[[str], object]
    default: object
    help: str


KEYS: dict[str, KeySpec] = {
    "dataset.kind": KeySpec(_choice("spiral", "blobs", "idx"), "spiral",
                            "dataset family"),
    "dataset.n_per_class": KeySpec(int, 100, "points per class (spiral/blobs)"),
    "dataset.classes": KeySpec(int, 3, "number of classes (spiral/blobs)"),
    "dataset.noise_sigma": KeySpec(float, 0.2, "spiral radial noise sigma"),
    "dataset.dim": KeySpec(int, 2, "blobs input dimension"),
    "dataset.separation": KeySpec(float, 6.0, "blobs minimum center distance"),
    "dataset.seed": KeySpec(int, -1, "dataset seed (-1: reuse trainer.seed)"),
    "dataset.images": KeySpec(str, "", "IDX train images path"),
    "dataset.labels": KeySpec(str, "", "IDX train labels path"),
    "dataset.val_images": KeySpec(str, "", "IDX val images path"),
    "dataset.val_labels": KeySpec(str, "", "IDX val labels path"),
    "model.kind": KeySpec(_choice("mlp", "tiny-cnn"), "mlp", "model family"),
    "model.widths": KeySpec(_parse_int_list, (2, 32, 32, 3),
                            "mlp layer widths incl. input and classes"),
    "model.channels": KeySpec(_parse_int_list, (4, 8), "tiny-cnn conv channels"),
    "model.input_shape": KeySpec(_parse_int_list, (1, 8, 8), "tiny-cnn input C,H,W"),
    "model.classes": KeySpec(int, 3, "tiny-cnn output classes"),
    "schedule.warmup_end": KeySpec(int, 10, "FP warmup end epoch (E_w)"),
    "schedule.ramp_end": KeySpec(int, 30, "quartic ramp end epoch (E_f)"),
    "schedule.horizon": KeySpec(int, 20, "epochs from ramp end to full blend (H)"),
    "schedule.final_cap": KeySpec(float, 1.0, "terminal blend value (<=1)"),
    "trainer.epochs": KeySpec(int, 60, "training epochs"),
    "trainer.batch_size": KeySpec(int, 16, "minibatch size"),
    "trainer.seed": KeySpec(int, 0, "master seed (init, batching, observers)"),
    "trainer.bits": KeySpec(int, 8, "quantization bit-width (8 or 4)"),
    "trainer.granularity": KeySpec(_choice("per-tensor", "per-channel"),
                                   "per-tensor", "weight quantizer granularity"),
    "trainer.rounding": KeySpec(_choice("half-to-even", "half-away-from-zero"),
                                "half-to-even", "fake-quant rounding mode"),
    "trainer.optimizer": KeySpec(_choice("adamw", "sgd"), "adamw", "optimizer"),
    "trainer.lr": KeySpec(float, 1e-2, "base learning rate"),
    "trainer.weight_decay": KeySpec(float, 0.01, "weight decay"),
    "trainer.momentum": KeySpec(float, 0.9, "sgd momentum"),
    "trainer.lr_schedule": KeySpec(_choice("cosine", "constant"), "cosine",
                                   "learning-rate schedule"),
    "trainer.enable_fake_quant": KeySpec(_parse_bool, True,
                                         "blend fake quantization into forwards"),
    "trainer.enable_reverse_prune": KeySpec(_parse_bool, True,
                                            "pin weight tails during training"),
    "trainer.weight_observer_cadence": KeySpec(_choice("step", "epoch"), "step",
                                               "weight statistics update cadence"),
    "trainer.act_observer_cadence": KeySpec(_choice("step", "epoch"), "step",
                                            "activation statistics update cadence"),
    "prune.p_clip": KeySpec(float, 0.95, "pinning quantile of |w|"),
    "prune.beta": KeySpec(float, 0.5, "threshold EMA momentum"),
    "prune.period": KeySpec(int, 5, "epochs between pin events (K)"),
    "observer.mu": KeySpec(float, 1e-2, "observer EMA momentum"),
    "observer.p_hi": KeySpec(float, 0.999, "upper quantile"),
    "observer.p_lo": KeySpec(float, 0.001, "lower quantile"),
    "observer.s_max": KeySpec(int, 100_000, "quantile subsample cap"),
    "observer.epsilon": KeySpec(float, 1e-6, "range floor before division"),
    "sweep.profiles": KeySpec(str, "all", "comma-separated profile ids or 'all'"),
    "sweep.calib_size": KeySpec(int, 64, "calibration samples for recalibrated profiles"),
}


def default_config() -> dict:
    return {key: spec.default for key, spec in KEYS.items()}


def _assign(cfg: dict, key: str, raw: str, where: str) -> None:
    spec = KEYS.get(key)
    if spec is None:
        raise ConfigError(f"{where}: unknown key {key!r}")
    try:
        cfg[key] = spec.parse(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {key!r}: {exc}") from None


def parse_config_text(text: str, source: str = "<config>") -> tuple[dict, set[str]]:
    """Parse a config file body over the defaults; returns (config, set keys)."""
    cfg = default_config()
    assigned: set[str] = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, _, raw = stripped.partition("=")
        _assign(cfg, key.strip(), raw, f"{source}:{lineno}")
        assigned.add(key.strip())
    return cfg, assigned


def parse_config_file(path) -> tuple[dict, set[str]]:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, source=str(path))


def apply_overrides(cfg: dict, overrides: list[str], assigned: set[str] | None = None) -> dict:
    """Apply repeatable ``--set key=value`` pairs on top of a parsed config."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set {item!r}: expected key=value")
        key, _, raw = item.partition("=")
        _assign(cfg, key.strip(), raw, f"--set {item!r}")
        if assigned is not None:
            assigned.add(key.strip())
    return cfg


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def snapshot_text(cfg: dict) -> str:
    """Canonical one-key-per-line dump; parsing it back reproduces cfg."""
    return "\n".join(f"{key} = {_format_value(cfg[key])}" for key in sorted(cfg)) + "\n"


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(snapshot_text(cfg).encode("utf-8")).hexdigest()[:8]


def reference_doc() -> str:
    """Generated key/default/description table for docs and --help."""
    width = max(len(k) for k in KEYS)
    lines = ["Configuration keys (flat 'key = value' lines, dotted sections):", ""]
    for key in sorted(KEYS):
        spec = KEYS[key]
        lines.append(f"  {key.ljust(width)}  default: {_format_value(spec.default)!s:<18} {spec.help}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# object builders


def dataset_pair(cfg: dict):
    seed = cfg["dataset.seed"] if cfg["dataset.seed"] >= 0 else cfg["trainer.seed"]
    kind = cfg["dataset.kind"]
    if kind == "spiral":
        return make_spiral(cfg["dataset.n_per_class"], cfg["dataset.classes"],
                           cfg["dataset.noise_sigma"], seed)
    if kind == "blobs":
        return make_blobs(cfg["dataset.n_per_class"], cfg["dataset.classes"],
                          cfg["dataset.dim"], cfg["dataset.separation"], seed)
    for key in ("dataset.images", "dataset.labels", "dataset.val_images",
                "dataset.val_labels"):
        if not cfg[key]:
            raise ConfigError(f"dataset.kind=idx requires {key}")
    train = read_idx(cfg["dataset.images"], cfg["dataset.labels"], "train", seed=seed)
    val = read_idx(cfg["dataset.val_images"], cfg["dataset.val_labels"], "val", seed=seed)
    return train, val


def model_spec(cfg: dict) -> ModelSpec:
    if cfg["model.kind"] == "mlp":
        return ModelSpec("mlp", widths=tuple(cfg["model.widths"]),
                         seed=cfg["trainer.seed"])
    return ModelSpec("tiny-cnn", channels=tuple(cfg["model.channels"]),
                     input_shape=tuple(cfg["model.input_shape"]),
                     n_classes=cfg["model.classes"], seed=cfg["trainer.seed"])


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        schedule=Schedule(cfg["schedule.warmup_end"], cfg["schedule.ramp_end"],
                          cfg["schedule.horizon"], cfg["schedule.final_cap"]),
        epochs=cfg["trainer.epochs"],
        batch_size=cfg["trainer.batch_size"],
        seed=cfg["trainer.seed"],
        bits=cfg["trainer.bits"],
        granularity=cfg["trainer.granularity"],
        rounding=Rounding(cfg["trainer.rounding"]),
        optimizer=cfg["trainer.optimizer"],
        lr=cfg["trainer.lr"],
        weight_decay=cfg["trainer.weight_decay"],
        momentum=cfg["trainer.momentum"],
        lr_schedule=cfg["trainer.lr_schedule"],
        enable_fake_quant=cfg["trainer.enable_fake_quant"],
        enable_reverse_prune=cfg["trainer.enable_reverse_prune"],
        p_clip=cfg["prune.p_clip"],
        prune_beta=cfg["prune.beta"],
        prune_period=cfg["prune.period"],
        mu=cfg["observer.mu"],
        p_hi=cfg["observer.p_hi"],
        p_lo=cfg["observer.p_lo"],
        s_max=cfg["observer.s_max"],
        epsilon=cfg["observer.epsilon"],
        weight_observer_cadence=cfg["trainer.weight_observer_cadence"],
        act_observer_cadence=cfg["trainer.act_observer_cadence"],
    )
