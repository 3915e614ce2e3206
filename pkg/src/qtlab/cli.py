"""Operator entry point: train, eval, export, simulate backends, run sweeps.

Exit codes: 0 success, 1 runtime failure, 2 configuration error,
3 artifact/IO error (missing or mis-versioned checkpoints, unreadable files).
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .backend import (BackendError, CalibrationSet, default_profiles, profile_sweep,
                      sweep_csv)
from .checkpoint import CheckpointError, checkpoint_bytes, load_checkpoint, save_checkpoint
from .config import (ConfigError, apply_overrides, config_hash, dataset_pair,
                     default_config, model_spec, parse_config_file, reference_doc,
                     snapshot_text, train_config)
from .datasets import IdxFormatError
from .metrics import MetricsReport
from .models import build_model
from .trainer import TrainingDiverged, collect_logits, evaluate, train

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_ARTIFACT = 0, 1, 2, 3

ENV_OUT_DIR = "QTL_OUT_DIR"

# The five-row ablation matrix; rows differ only in quantization settings.
ABLATION_MATRIX = [
    ("fp32_baseline", "", {"trainer.enable_fake_quant": "false",
                           "trainer.enable_reverse_prune": "false"}),
    ("qat_only", "", {"trainer.enable_fake_quant": "true",
                      "trainer.enable_reverse_prune": "false"}),
    ("rp_only_95", "0.95", {"trainer.enable_fake_quant": "false",
                            "trainer.enable_reverse_prune": "true",
                            "prune.p_clip": "0.95"}),
    ("qat_rp_90", "0.90", {"trainer.enable_fake_quant": "true",
                           "trainer.enable_reverse_prune": "true",
                           "prune.p_clip": "0.90"}),
    ("qat_rp_99", "0.99", {"trainer.enable_fake_quant": "true",
                           "trainer.enable_reverse_prune": "true",
                           "prune.p_clip": "0.99"}),
]

# Shared-optimizer preset for ablation runs, applied only where the base
# config left the keys at their defaults.
ABLATION_PRESET = {"trainer.optimizer": "sgd", "trainer.lr": "1e-3",
                   "trainer.weight_decay": "5e-4"}

AGGREGATE_CSV_HEADER = "config,epoch,acc_mean,acc_std,loss_mean,loss_std,lambda"


def _load_config(args) -> tuple[dict, set[str]]:
    if getattr(args, "config", None):
        cfg, assigned = parse_config_file(args.config)
    else:
        cfg, assigned = default_config(), set()
    apply_overrides(cfg, getattr(args, "set", None) or [], assigned)
    if getattr(args, "seed", None) is not None:
        cfg["trainer.seed"] = args.seed
        assigned.add("trainer.seed")
    return cfg, assigned


def _out_root(args) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    return Path(os.environ.get(ENV_OUT_DIR, "runs"))


def run_training(cfg: dict, run_dir: Path) -> dict:
    """One self-describing training run: snapshot, report CSV, checkpoint."""
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.snapshot").write_text(snapshot_text(cfg))
    train_ds, val_ds = dataset_pair(cfg)
    model = build_model(model_spec(cfg))
    config = train_config(cfg)
    report, ckpt = train(model, train_ds, val_ds, config,
                         meta={"config_hash": config_hash(cfg)})
    report.to_csv(run_dir / "report.csv")
    save_checkpoint(ckpt, run_dir / "model.qtck")
    report.checkpoint_path = str(run_dir / "model.qtck")
    return {"records": [(r.epoch, r.lam, r.val_loss, r.val_top1) for r in report.records],
            "final_val_top1": report.final_val_top1,
            "run_dir": str(run_dir)}


def cmd_train(args) -> int:
    cfg, _ = _load_config(args)
    root = _out_root(args)
    stamp = time.strftime("%Y%m%d-%H%M%S", time.gmtime())
    run_dir = root / f"{stamp}-{config_hash(cfg)}"
    result = run_training(cfg, run_dir)
    print(f"run directory: {result['run_dir']}")
    print(f"final val top-1: {result['final_val_top1']:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, _ = _load_config(args)
    ckpt = load_checkpoint(args.checkpoint)
    _, val_ds = dataset_pair(cfg)
    ref = collect_logits(ckpt, val_ds, "fp")
    kwargs = {}
    if args.mode == "integer-sim":
        kwargs["profile"] = _select_profiles(args.profile or "pt-static-trained", ckpt)[0]
        kwargs["calib"] = _calibration_set(cfg)
    elif args.mode == "fake-quant":
        kwargs["lam"] = args.blend
    report = evaluate(ckpt, val_ds, args.mode, ref_logits=ref, **kwargs)
    print(MetricsReport.CSV_HEADER)
    print(report.csv_row())
    return EXIT_OK


def cmd_export(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    out = Path(args.out_file)
    save_checkpoint(ckpt, out)
    if checkpoint_bytes(load_checkpoint(out)) != out.read_bytes():
        raise CheckpointError(f"round-trip mismatch writing {out}")
    print(f"exported: {out}")
    return EXIT_OK


def _select_profiles(spec: str, ckpt) -> list:
    profiles = default_profiles(bits=ckpt.bits)
    if spec == "all":
        return profiles
    by_id = {p.profile_id: p for p in profiles}
    chosen = []
    for pid in spec.split(","):
        pid = pid.strip()
        if pid not in by_id:
            raise ConfigError(f"unknown profile {pid!r}; known: {', '.join(by_id)}")
        chosen.append(by_id[pid])
    return chosen


def _calibration_set(cfg: dict) -> CalibrationSet:
    train_ds, _ = dataset_pair(cfg)
    n = min(cfg["sweep.calib_size"], len(train_ds))
    return CalibrationSet(train_ds.inputs[:n], name=train_ds.name, seed=train_ds.seed)


def cmd_simulate(args) -> int:
    cfg, _ = _load_config(args)
    ckpt = load_checkpoint(args.checkpoint)
    profiles = _select_profiles(cfg["sweep.profiles"] if args.profiles is None
                                else args.profiles, ckpt)
    _, val_ds = dataset_pair(cfg)
    rows, ref = profile_sweep(ckpt, profiles, val_ds, _calibration_set(cfg))
    text = sweep_csv(rows, ref)
    Path(args.out_csv).write_text(text)
    print(text, end="")
    print(f"wrote {args.out_csv}", file=sys.stderr)
    return EXIT_OK


def _seed_list(raw: str) -> list[int]:
    try:
        return [int(part) for part in raw.split(",") if part.strip() != ""]
    except ValueError:
        raise ConfigError(f"bad --seeds value {raw!r}") from None


def _aggregate_rows(name: str, per_seed: list[dict]) -> list[str]:
    rows = []
    n_epochs = len(per_seed[0]["records"])
    for e in range(n_epochs):
        accs = [run["records"][e][3] for run in per_seed]
        losses = [run["records"][e][2] for run in per_seed]
        lam = per_seed[0]["records"][e][1]
        rows.append(f"{name},{e},{np.mean(accs)!r},{np.std(accs)!r},"
                    f"{np.mean(losses)!r},{np.std(losses)!r},{lam!r}")
    return rows


def _run_matrix(base_cfg: dict, matrix, seeds: list[int], root: Path, jobs: int):
    """Run (config row x seed) training jobs, optionally in parallel."""
    jobs_spec = []
    for name, p_clip, overrides in matrix:
        for seed in seeds:
            cfg = dict(base_cfg)
            apply_overrides(cfg, [f"{k}={v}" for k, v in overrides.items()])
            cfg["trainer.seed"] = seed
            jobs_spec.append((name, p_clip, seed, cfg, root / f"{name}-seed{seed}"))

    results: dict[tuple[str, int], dict] = {}
    failures = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {pool.submit(run_training, cfg, run_dir): (name, p_clip, seed)
                       for name, p_clip, seed, cfg, run_dir in jobs_spec}
            for future, (name, p_clip, seed) in futures.items():
                try:
                    results[(name, seed)] = future.result()
                except Exception as exc:  # keep partial results
                    failures.append((name, seed, str(exc)))
    else:
        for name, p_clip, seed, cfg, run_dir in jobs_spec:
            try:
                results[(name, seed)] = run_training(cfg, run_dir)
            except Exception as exc:
                failures.append((name, seed, str(exc)))
    return results, failures


def cmd_ablation(args) -> int:
    cfg, assigned = _load_config(args)
    for key, value in ABLATION_PRESET.items():
        if key not in assigned:
            apply_overrides(cfg, [f"{key}={value}"])
    seeds = _seed_list(args.seeds)
    root = _out_root(args) / f"ablation-{config_hash(cfg)}"
    root.mkdir(parents=True, exist_ok=True)
    results, failures = _run_matrix(cfg, ABLATION_MATRIX, seeds, root, args.jobs)

    lines = [AGGREGATE_CSV_HEADER]
    for name, _, _ in ABLATION_MATRIX:
        per_seed = [results[(name, s)] for s in seeds if (name, s) in results]
        if len(per_seed) == len(seeds):
            lines.extend(_aggregate_rows(name, per_seed))
    (root / "aggregate.csv").write_text("\n".join(lines) + "\n")
    print(f"ablation directory: {root}")
    for name, p_clip, _ in ABLATION_MATRIX:
        finals = [results[(name, s)]["final_val_top1"] for s in seeds if (name, s) in results]
        if finals:
            print(f"  {name:<14} p_clip={p_clip or '-':<5} "
                  f"final top-1 mean={np.mean(finals):.4f} std={np.std(finals):.4f}")
    if failures:
        for name, seed, msg in failures:
            print(f"FAILED {name} seed {seed}: {msg}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg, _ = _load_config(args)
    seeds = _seed_list(args.seeds)
    root = _out_root(args) / f"sweep-{config_hash(cfg)}"
    root.mkdir(parents=True, exist_ok=True)
    results, failures = _run_matrix(cfg, [("base", "", {})], seeds, root, args.jobs)
    per_seed = [results[("base", s)] for s in seeds if ("base", s) in results]
    lines = [AGGREGATE_CSV_HEADER]
    if per_seed and len(per_seed) == len(seeds):
        lines.extend(_aggregate_rows("base", per_seed))
    (root / "aggregate.csv").write_text("\n".join(lines) + "\n")
    print(f"sweep directory: {root}")
    if failures:
        for name, seed, msg in failures:
            print(f"FAILED {name} seed {seed}: {msg}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qtlab",
        description="Desk-scale quantization-aware-training lab and backend simulator.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="config file (flat key = value lines)")
            p.add_argument("--set", action="append", metavar="KEY=VALUE",
                           help="override one config key (repeatable)")
            p.add_argument("--seed", type=int, help="shorthand for trainer.seed")
        p.add_argument("--out", help=f"output root (default: ${ENV_OUT_DIR} or ./runs)")

    p_train = sub.add_parser("train", help="train a model and export its checkpoint",
                             epilog=reference_doc(),
                             formatter_class=argparse.RawDescriptionHelpFormatter)
    common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--mode", choices=["fp", "fake-quant", "integer-sim"], default="fp")
    p_eval.add_argument("--blend", type=float, default=1.0,
                        help="blend strength for fake-quant mode")
    p_eval.add_argument("--profile", help="profile id for integer-sim mode")
    p_eval.set_defaults(func=cmd_eval)

    p_export = sub.add_parser("export", help="validate and re-emit a checkpoint")
    p_export.add_argument("--checkpoint", required=True)
    p_export.add_argument("--out-file", required=True)
    p_export.set_defaults(func=cmd_export)

    p_sim = sub.add_parser("simulate", help="sweep backend profiles over a checkpoint")
    common(p_sim)
    p_sim.add_argument("--checkpoint", required=True)
    p_sim.add_argument("--profiles", help="comma-separated profile ids (default: config)")
    p_sim.add_argument("--out-csv", default="sweep.csv")
    p_sim.set_defaults(func=cmd_simulate)

    p_abl = sub.add_parser("ablation", help="run the 5-row quantization ablation matrix")
    common(p_abl)
    p_abl.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    p_abl.add_argument("--jobs", type=int, default=1, help="parallel sub-runs")
    p_abl.set_defaults(func=cmd_ablation)

    p_sweep = sub.add_parser("sweep", help="repeat one config across seeds and aggregate")
    common(p_sweep)
    p_sweep.add_argument("--seeds", default="0,1,2")
    p_sweep.add_argument("--jobs", type=int, default=1)
    p_sweep.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, IdxFormatError, OSError) as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except TrainingDiverged as exc:
        print(f"training aborted: {exc}; snapshot: {exc.snapshot}", file=sys.stderr)
        return EXIT_RUNTIME
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
