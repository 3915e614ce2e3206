"""Desk-scale quantization-aware-training lab.

Trains tiny networks under progressive fake quantization with weight tail
pinning, exports frozen-scale integer checkpoints, and replays them through
configurable integer-backend simulators to measure cross-backend robustness.
"""

from .engine import Tensor, backward, finite_difference_check
from .quant import QuantParams, Rounding, blend, dequantize, derive_qrange, fake_quantize, quantize
from .observers import (ObserverState, activation_qparams, empirical_quantile, subsample,
                        update_activation_stats, update_weight_stats, weight_qparams)
from .pruning import (PruneState, pin_due, pin_weights, robust_threshold,
                      step_size_contraction, update_threshold)
from .schedule import Schedule, lambda_at
from .datasets import Dataset, iterate_batches, make_blobs, make_spiral, read_idx
from .models import Model, ModelSpec, build_model
from .metrics import MetricsReport, brier, ece, logit_mse, report_from_logits, snr_db, top_k
from .checkpoint import QuantizedCheckpoint, export_checkpoint, load_checkpoint, save_checkpoint
from .backend import (BackendProfile, CalibrationSet, calibrate, default_profiles,
                      fp_reference_logits, integer_infer, profile_sweep)
from .trainer import (QuantPoint, TrainConfig, TrainReport, TrainingDiverged,
                      attach_quant_points, collect_logits, evaluate, train)

__version__ = "0.1.0"
