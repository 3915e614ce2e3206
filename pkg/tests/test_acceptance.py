"""Acceptance suite: one test per release criterion, one printed line each.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the PASS lines as
they complete. The desk-scale experiments (criteria 6-8) train 2-layer MLPs
on the 3-class spiral; every run is fully deterministic in its seed.
"""

import math
import time

import numpy as np
import pytest

from qtlab.backend import (BackendProfile, CalibrationSet, default_profiles,
                           fp_reference_logits, integer_infer, profile_sweep)
from qtlab.checkpoint import LayerRecord, QuantizedCheckpoint
from qtlab.datasets import make_spiral
from qtlab.engine import Tensor, add_bias, backward, matmul, relu, softmax_cross_entropy, transpose
from qtlab.metrics import brier, ece, logit_mse, snr_db
from qtlab.models import ModelSpec, build_model
from qtlab.observers import (ObserverState, activation_qparams, empirical_quantile,
                             update_activation_stats, update_weight_stats, weight_qparams)
from qtlab.pruning import step_size_contraction
from qtlab.quant import Rounding, blend, derive_qrange, fake_quantize, quantize, symmetric_qparams, asymmetric_qparams
from qtlab.schedule import Schedule, lambda_at
from qtlab.trainer import TrainConfig, train

SEEDS = (0, 1, 2)
DESK_SCHEDULE = Schedule(warmup_end=10, ramp_end=30, horizon=20)


def announce(n, name, ok, detail=""):
    status = "PASS" if ok else "FAIL"
    print(f"ACCEPTANCE {n:>2} {name}: {status}" + (f"  ({detail})" if detail else ""))
    assert ok, f"criterion {n} failed: {detail}"


def desk_config(seed, fake_quant, reverse_prune):
    return TrainConfig(schedule=DESK_SCHEDULE, epochs=60, batch_size=16, lr=1e-2,
                       seed=seed, enable_fake_quant=fake_quant,
                       enable_reverse_prune=reverse_prune)


@pytest.fixture(scope="module")
def desk_experiment():
    """Paired fake-quant+pinning vs plain-FP runs, 3 seeds, spiral(3, n=300)."""
    out = {}
    for method, fq, rp in (("full", True, True), ("baseline", False, False)):
        for seed in SEEDS:
            train_ds, val_ds = make_spiral(100, 3, 0.2, seed)
            model = build_model(ModelSpec("mlp", widths=(2, 32, 32, 3), seed=seed))
            report, ckpt = train(model, train_ds, val_ds, desk_config(seed, fq, rp))
            ref = fp_reference_logits(ckpt, val_ds.inputs)
            int_logits = integer_infer(ckpt, val_ds.inputs, default_profiles()[0])
            calib = CalibrationSet(train_ds.inputs[:64])
            rows, _ = profile_sweep(ckpt, default_profiles(), val_ds, calib)
            out[(method, seed)] = {
                "trace": np.array(report.val_top1_trace()),
                "final": report.final_val_top1,
                "mse": logit_mse(int_logits, ref),
                "profile_top1": [r.metrics.top1 for r in rows],
            }
    return out


def test_criterion_1_schedule_exactness():
    """lambda_at matches a hand-substituted piecewise oracle on dense grids."""

    def oracle(t, e_w, e_f, h):
        # independent restatement: warmup 0; quartic ((t-Ew)/(Ef-Ew))^4 * 0.5
        # capped at 0.5; then 0.5 + min(1, (t-Ef)/H)^2 * 0.5
        if t < e_w:
            return 0.0
        if t < e_f:
            frac = (t - e_w) / (e_f - e_w)
            return min(0.5, (frac ** 4) * 0.5)
        tail = min(1.0, (t - e_f) / h)
        return 0.5 + (tail ** 2) * 0.5

    rng = np.random.default_rng(101)
    started = time.perf_counter()
    worst = 0.0
    for _ in range(20):
        e_w = int(rng.integers(0, 30))
        e_f = e_w + int(rng.integers(1, 60))
        h = int(rng.integers(1, 40))
        sched = Schedule(e_w, e_f, h)
        ts = rng.uniform(0.0, e_f + h + 15, 10_000)
        for t in ts:
            worst = max(worst, abs(lambda_at(float(t), sched) - oracle(t, e_w, e_f, h)))
    elapsed = time.perf_counter() - started
    announce(1, "schedule exactness", worst <= 1e-12 and elapsed < 1.0,
             f"max abs err {worst:.2e}, {elapsed:.2f}s")


def test_criterion_2_quantizer_property_suite():
    """Range-bounded error, saturation, monotonicity, idempotence, grid
    membership over >= 1e5 random (x, qp, rounding) cases."""
    rng = np.random.default_rng(202)
    started = time.perf_counter()
    cases = 0
    violations = 0
    for _ in range(250):
        bits = int(rng.choice([4, 8]))
        symmetric = bool(rng.integers(0, 2))
        rounding = Rounding.HALF_TO_EVEN if rng.integers(0, 2) else Rounding.HALF_AWAY_FROM_ZERO
        scale = float(rng.uniform(1e-4, 0.5))
        if symmetric:
            qp = symmetric_qparams(bits, scale)
        else:
            q_min, q_max = derive_qrange(bits, False)
            qp = asymmetric_qparams(bits, scale, int(rng.integers(q_min, q_max + 1)))
        x = rng.uniform(-2.0, 2.0, 500)
        cases += x.size

        lo = qp.scale * (qp.q_min - qp.zero_point)
        hi = qp.scale * (qp.q_max - qp.zero_point)
        out = fake_quantize(x, qp, rounding)
        in_range = (x >= lo) & (x <= hi)
        violations += int(np.sum(np.abs(out[in_range] - x[in_range]) > qp.scale / 2 + 1e-12))
        violations += int(np.sum(out[x < lo] != lo)) + int(np.sum(out[x > hi] != hi))

        xs = np.sort(x)
        violations += int(np.sum(np.diff(fake_quantize(xs, qp, rounding)) < 0))

        violations += int(not np.array_equal(fake_quantize(out, qp, rounding), out))

        q = quantize(x, qp, rounding)
        violations += int(np.sum((q < qp.q_min) | (q > qp.q_max)))
    elapsed = time.perf_counter() - started
    announce(2, "quantizer property suite",
             cases >= 100_000 and violations == 0 and elapsed < 30.0,
             f"{cases} cases, {violations} violations, {elapsed:.1f}s")


def test_criterion_3_quantile_oracle_equivalence():
    """empirical_quantile equals the full-sort oracle on random multisets."""
    rng = np.random.default_rng(303)
    started = time.perf_counter()
    mismatches = 0
    for _ in range(100):
        n = int(rng.integers(1, 10_001))
        base = rng.standard_normal(max(n // 4, 1))  # duplicates guaranteed
        samples = rng.choice(base, n)
        for p in (0.001, 0.25, 0.5, 0.75, 0.95, 0.999):
            expected = np.sort(samples)[math.ceil(p * n) - 1]
            if empirical_quantile(samples, p) != expected:
                mismatches += 1
    elapsed = time.perf_counter() - started
    announce(3, "quantile oracle equivalence",
             mismatches == 0 and elapsed < 30.0,
             f"100 multisets x 6 quantiles, {mismatches} mismatches, {elapsed:.1f}s")


def test_criterion_4_ste_contract():
    """Blended-forward parameter gradients: bitwise FP equality at lambda=0,
    and equality with finite differences of the residual-frozen FP loss
    (the lambda=0 path plus constant blend offsets) within relative 1e-4."""
    rng = np.random.default_rng(404)
    xb = rng.uniform(-1.2, 1.2, (16, 2))
    labels = rng.integers(0, 3, 16)
    w1 = rng.uniform(-0.7, 0.7, (16, 2))
    b1 = rng.uniform(-0.3, 0.3, 16)
    w2 = rng.uniform(-0.3, 0.3, (3, 16))
    b2 = rng.uniform(-0.3, 0.3, 3)

    def observed_qparams():
        w_obs1, w_obs2 = ObserverState("weight"), ObserverState("weight")
        update_weight_stats(w_obs1, w1)
        update_weight_stats(w_obs2, w2)
        in_obs, act_obs = ObserverState("activation"), ObserverState("activation")
        update_activation_stats(in_obs, xb)
        h0 = np.maximum(xb @ w1.T + b1, 0.0)
        update_activation_stats(act_obs, h0)
        return (weight_qparams(w_obs1, 8), weight_qparams(w_obs2, 8),
                activation_qparams(in_obs, 8), activation_qparams(act_obs, 8))

    qp_w1, qp_w2, qp_in, qp_act = observed_qparams()

    def blended_grads(lam):
        tw1, tb1 = Tensor(w1.copy(), requires_grad=True), Tensor(b1.copy(), requires_grad=True)
        tw2, tb2 = Tensor(w2.copy(), requires_grad=True), Tensor(b2.copy(), requires_grad=True)
        x = blend(Tensor(xb), qp_in, lam)
        h = relu(add_bias(matmul(x, transpose(blend(tw1, qp_w1, lam))), tb1))
        h = blend(h, qp_act, lam)
        logits = add_bias(matmul(h, transpose(blend(tw2, qp_w2, lam))), tb2)
        backward(softmax_cross_entropy(logits, labels))
        return [tw1.grad, tb1.grad, tw2.grad, tb2.grad]

    def fp_grads():
        tw1, tb1 = Tensor(w1.copy(), requires_grad=True), Tensor(b1.copy(), requires_grad=True)
        tw2, tb2 = Tensor(w2.copy(), requires_grad=True), Tensor(b2.copy(), requires_grad=True)
        h = relu(add_bias(matmul(Tensor(xb), transpose(tw1)), tb1))
        logits = add_bias(matmul(h, transpose(tw2)), tb2)
        backward(softmax_cross_entropy(logits, labels))
        return [tw1.grad, tb1.grad, tw2.grad, tb2.grad]

    bitwise_ok = all(np.array_equal(a, b) for a, b in zip(blended_grads(0.0), fp_grads()))

    def frozen_loss_fn(lam):
        # freeze every blend residual at the base point, then the loss is the
        # plain FP path of shifted parameters/activations
        r_in = lam * (fake_quantize(xb, qp_in) - xb)
        r_w1 = lam * (fake_quantize(w1, qp_w1) - w1)
        r_w2 = lam * (fake_quantize(w2, qp_w2) - w2)
        h0 = np.maximum((xb + r_in) @ (w1 + r_w1).T + b1, 0.0)
        r_act = lam * (fake_quantize(h0, qp_act) - h0)

        def loss(p_w1, p_b1, p_w2, p_b2):
            h = np.maximum((xb + r_in) @ (p_w1 + r_w1).T + p_b1, 0.0) + r_act
            logits = h @ (p_w2 + r_w2).T + p_b2
            z = logits - logits.max(axis=1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            return -logp[np.arange(len(labels)), labels].mean()
        return loss, h0

    worst = 0.0
    for lam in (0.3, 1.0):
        loss, h0 = frozen_loss_fn(lam)
        pre_act = (xb + lam * (fake_quantize(xb, qp_in) - xb)) @ \
            (w1 + lam * (fake_quantize(w1, qp_w1) - w1)).T + b1
        # an h=1e-5 parameter step moves pre-activations by at most
        # h * max|input| ~ 1.2e-5, so a 1e-4 margin keeps FD off the relu kink
        assert np.min(np.abs(pre_act)) > 1e-4
        analytic = blended_grads(lam)
        params = [w1.copy(), b1.copy(), w2.copy(), b2.copy()]
        h = 1e-5
        for pi, p in enumerate(params):
            flat = p.reshape(-1)
            grad = analytic[pi].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                hi_val = loss(*params)
                flat[i] = orig - h
                lo_val = loss(*params)
                flat[i] = orig
                fd = (hi_val - lo_val) / (2 * h)
                worst = max(worst, abs(grad[i] - fd) / (abs(grad[i]) + 1e-8))
    announce(4, "STE gradient contract", bitwise_ok and worst <= 1e-4,
             f"bitwise at lambda=0: {bitwise_ok}, max rel err {worst:.2e}")


def test_criterion_5_reverse_pruning_contract():
    """Pin events at {10, 15, 20, 25, 30}; post-pin max <= tau; strict step
    contraction whenever tau < pre-pin max. Run spans epochs 0..30."""
    train_ds, val_ds = make_spiral(60, 3, 0.2, 0)
    config = TrainConfig(schedule=Schedule(10, 20, 8), epochs=31, batch_size=16,
                         lr=1e-2, seed=0, prune_period=5)
    model = build_model(ModelSpec("mlp", widths=(2, 16, 3), seed=0))
    report, _ = train(model, train_ds, val_ds, config)

    ok = report.pin_epochs() == [10, 15, 20, 25, 30]
    detail = f"pin epochs {report.pin_epochs()}"
    strict_checked = 0
    for record in report.records:
        if not record.pin_event:
            continue
        for layer, tau in record.pin_taus.items():
            if record.pin_postmax[layer] > tau:
                ok = False
                detail = f"epoch {record.epoch} {layer}: post-pin max exceeds tau"
            premax = record.pin_premax[layer]
            if tau < premax:
                before, after = step_size_contraction([premax], tau, config.bits)
                strict_checked += 1
                if not after < before:
                    ok = False
                    detail = f"epoch {record.epoch} {layer}: step size did not contract"
    announce(5, "reverse-pruning contract", ok and strict_checked > 0,
             detail + f"; {strict_checked} strict contractions")


def test_criterion_6_robust_training_vs_baseline(desk_experiment):
    """(a) FP accuracy parity within 2 points; (b) lower integer logit MSE in
    >= 2 of 3 seeds; (c) across-profile top-1 std no larger in >= 2 of 3."""
    r = desk_experiment
    full_mean = np.mean([r[("full", s)]["final"] for s in SEEDS])
    base_mean = np.mean([r[("baseline", s)]["final"] for s in SEEDS])
    parity = abs(full_mean - base_mean) <= 0.02

    mse_wins = sum(r[("full", s)]["mse"] < r[("baseline", s)]["mse"] for s in SEEDS)
    std_wins = sum(np.std(r[("full", s)]["profile_top1"]) <=
                   np.std(r[("baseline", s)]["profile_top1"]) for s in SEEDS)
    announce(6, "robust training vs baseline",
             parity and mse_wins >= 2 and std_wins >= 2,
             f"final {full_mean:.3f} vs {base_mean:.3f}, mse wins {mse_wins}/3, "
             f"profile-std wins {std_wins}/3")


def test_criterion_7_ablation_convergence_similarity():
    """All 5 ablation rows converge with mean final top-1 spread <= 3 points."""
    matrix = [
        ("fp32_baseline", dict(enable_fake_quant=False, enable_reverse_prune=False)),
        ("qat_only", dict(enable_fake_quant=True, enable_reverse_prune=False)),
        ("rp_only_95", dict(enable_fake_quant=False, enable_reverse_prune=True, p_clip=0.95)),
        ("qat_rp_90", dict(enable_fake_quant=True, enable_reverse_prune=True, p_clip=0.90)),
        ("qat_rp_99", dict(enable_fake_quant=True, enable_reverse_prune=True, p_clip=0.99)),
    ]
    started = time.perf_counter()
    means = {}
    for name, kw in matrix:
        finals = []
        for seed in SEEDS:
            train_ds, val_ds = make_spiral(100, 3, 0.2, seed)
            model = build_model(ModelSpec("mlp", widths=(2, 32, 32, 3), seed=seed))
            config = TrainConfig(schedule=DESK_SCHEDULE, epochs=60, batch_size=16,
                                 lr=1e-2, seed=seed, **kw)
            report, _ = train(model, train_ds, val_ds, config)
            finals.append(report.final_val_top1)
        means[name] = float(np.mean(finals))
    spread = max(means.values()) - min(means.values())
    elapsed = time.perf_counter() - started
    announce(7, "ablation convergence similarity",
             spread <= 0.03 and elapsed < 1800.0,
             f"spread {spread * 100:.2f} points over {sorted(means)} in {elapsed:.0f}s")


def test_criterion_8_training_dynamics_shape(desk_experiment):
    """Dip below the pre-ramp plateau near the ramp end, then recovery of the
    final-5-epoch mean to within 2 points of the plateau, in >= 2 of 3 seeds.
    Plateau window: the 10 epochs before the dip window [E_f-5, E_f+5]."""
    e_f = DESK_SCHEDULE.ramp_end
    good = 0
    details = []
    for seed in SEEDS:
        trace = desk_experiment[("full", seed)]["trace"]
        plateau = trace[e_f - 15:e_f - 5].mean()
        dip_min = trace[e_f - 5:e_f + 6].min()
        final5 = trace[-5:].mean()
        dipped = dip_min < plateau
        recovered = final5 >= plateau - 0.02
        good += int(dipped and recovered)
        details.append(f"seed {seed}: plateau {plateau:.3f} dip {dip_min:.3f} final {final5:.3f}")
    announce(8, "training-dynamics shape", good >= 2,
             f"{good}/3 seeds; " + "; ".join(details))


def test_criterion_9_checkpoint_and_metrics_plumbing(desk_experiment, tmp_path):
    """Byte-identical checkpoint round trips plus exact metric unit cases."""
    from qtlab.checkpoint import load_checkpoint, save_checkpoint

    train_ds, val_ds = make_spiral(60, 3, 0.2, 5)
    model = build_model(ModelSpec("mlp", widths=(2, 16, 3), seed=5))
    _, ckpt = train(model, train_ds, val_ds,
                    TrainConfig(schedule=Schedule(2, 6, 4), epochs=10, batch_size=16,
                                lr=1e-2, seed=5))
    path = tmp_path / "model.qtck"
    save_checkpoint(ckpt, path)
    loaded = load_checkpoint(path)
    save_checkpoint(loaded, tmp_path / "again.qtck")
    roundtrip = (tmp_path / "again.qtck").read_bytes() == path.read_bytes()

    snr_exact = abs(snr_db([3.0, 4.0], [3.0, 4.5]) - 20.0) <= 1e-12
    ece_exact = abs(ece([[0.9, 0.1], [0.6, 0.4]], [0, 1], n_bins=2) - 0.25) <= 1e-12
    brier_exact = abs(brier([[0.8, 0.2]], [0]) - 0.08) <= 1e-12
    announce(9, "checkpoint and metrics plumbing",
             roundtrip and snr_exact and ece_exact and brier_exact,
             f"roundtrip {roundtrip}, snr/ece/brier exact {snr_exact}/{ece_exact}/{brier_exact}")


def test_criterion_10_backend_divergence():
    """The two rounding-mode profiles disagree on a crafted tie input."""
    weight = np.asarray([[1]], dtype=np.int8)
    topology = [{"kind": "dense", "name": "dense0", "weight_shape": [1, 1],
                 "input_site": "input"}]
    act_sites = {"input": {"scale": 1.0, "zero_point": 0}}
    layers = {"dense0": LayerRecord("dense0", "dense", weight, 1.0,
                                    np.zeros(1, dtype=np.int32), 1.0, "input")}
    ckpt = QuantizedCheckpoint(1, 8, "per-tensor", topology, act_sites, layers, {})
    x = np.array([0.5])
    even = integer_infer(ckpt, x, BackendProfile("even", rounding=Rounding.HALF_TO_EVEN))
    away = integer_infer(ckpt, x, BackendProfile("away", rounding=Rounding.HALF_AWAY_FROM_ZERO))
    announce(10, "backend rounding divergence",
             even.tolist() == [0.0] and away.tolist() == [1.0],
             f"half-to-even {even.tolist()}, half-away {away.tolist()}")
