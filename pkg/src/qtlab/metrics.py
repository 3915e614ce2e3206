"""Classification quality and numeric-fidelity metrics: Top-k, logit MSE,
Brier, ECE, and output-layer SNR."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def softmax(logits) -> np.ndarray:
    """Row softmax in float64 with max subtraction for stability."""
    logits = np.asarray(logits, dtype=np.float64)
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, labels) -> float:
    """Mean negative log-likelihood of integer labels under row softmax."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return float(-logp[np.arange(len(labels)), labels].mean())


def top_k(logits, labels, k: int) -> float:
    """Fraction of samples whose label ranks in the k largest logits.

    Ties resolve toward the lower class index (stable sort on class order).
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ValueError("top_k: expected a non-empty [samples, classes] array")
    if k > logits.shape[1]:
        raise ValueError(f"top_k: k={k} exceeds class count {logits.shape[1]}")
    order = np.argsort(-logits, axis=1, kind="stable")
    hits = (order[:, :k] == labels[:, None]).any(axis=1)
    return float(hits.mean())


def logit_mse(test_logits, ref_logits) -> float:
    """Mean over samples of the squared L2 distance between logit vectors."""
    test = np.asarray(test_logits, dtype=np.float64)
    ref = np.asarray(ref_logits, dtype=np.float64)
    if test.shape != ref.shape:
        raise ValueError(f"logit_mse: mismatched shapes {test.shape} and {ref.shape}")
    diff = test - ref
    return float(np.mean(np.sum(diff * diff, axis=-1)))


def brier(probabilities, labels) -> float:
    """Multiclass Brier score: mean squared distance to the one-hot truth."""
    probs = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[0] != labels.shape[0]:
        raise ValueError("brier: probabilities must be [samples, classes] matching labels")
    sums = probs.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise ValueError(f"brier: probability vector sums deviate from 1 by up to "
                         f"{np.max(np.abs(sums - 1.0)):.3g}")
    onehot = np.zeros_like(probs)
    onehot[np.arange(len(labels)), labels] = 1.0
    return float(np.mean(np.sum((probs - onehot) ** 2, axis=1)))


def ece(probabilities, labels, n_bins: int = 15) -> float:
    """Expected calibration error over equal-width max-probability bins.

    Bins are left-closed; the last bin is right-closed so confidence 1.0 lands
    in the top bin.
    """
    if n_bins < 1:
        raise ValueError("ece: n_bins must be >= 1")
    probs = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    conf = probs.max(axis=1)
    pred = probs.argmax(axis=1)
    correct = (pred == labels).astype(np.float64)
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    idx = np.clip(np.searchsorted(edges, conf, side="right") - 1, 0, n_bins - 1)
    total = 0.0
    n = len(labels)
    for b in range(n_bins):
        mask = idx == b
        n_b = int(mask.sum())
        if n_b == 0:
            continue
        total += (n_b / n) * abs(correct[mask].mean() - conf[mask].mean())
    return float(total)


def snr_db(ref, test) -> float:
    """10*log10(sum(ref^2) / sum((ref-test)^2)); +inf on zero error."""
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if ref.shape != test.shape:
        raise ValueError(f"snr_db: mismatched shapes {ref.shape} and {test.shape}")
    signal = float(np.sum(ref * ref))
    if signal == 0.0:
        raise ValueError("snr_db: reference signal is all-zero")
    noise = float(np.sum((ref - test) ** 2))
    if noise == 0.0:
        return math.inf
    return 10.0 * math.log10(signal / noise)


@dataclass
class MetricsReport:
    top1: float
    top5: float
    logit_mse: float
    brier: float
    ece: float
    snr_db: float
    n_samples: int

    CSV_HEADER = "top1,top5,logit_mse,snr_db,brier,ece,n_samples"

    def csv_row(self) -> str:
        return (f"{self.top1!r},{self.top5!r},{self.logit_mse!r},{self.snr_db!r},"
                f"{self.brier!r},{self.ece!r},{self.n_samples}")


def report_from_logits(logits, labels, ref_logits=None, n_bins: int = 15) -> MetricsReport:
    """Bundle all metrics for one logit set.

    With fewer than 5 classes, top5 falls back to top-min(5, classes). Without
    a reference, logit_mse is 0 and snr_db is +inf (self-comparison).
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    probs = softmax(logits)
    k5 = min(5, logits.shape[1])
    if ref_logits is None:
        mse, snr = 0.0, math.inf
    else:
        mse = logit_mse(logits, ref_logits)
        snr = snr_db(ref_logits, logits)
    return MetricsReport(
        top1=top_k(logits, labels, 1),
        top5=top_k(logits, labels, k5),
        logit_mse=mse,
        brier=brier(probs, labels),
        ece=ece(probs, labels, n_bins),
        snr_db=snr,
        n_samples=len(labels),
    )
