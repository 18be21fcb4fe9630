"""Two-tower contrastive training testbed.

Small dual-encoder models trained with a memory-bounded microbatched
gradient procedure, slot-fused optimizer moments, a weight-sharding
simulator with exact memory accounting, and a generalization-gap probe
with a closed-form ceiling. Everything is deterministic: fixed-order
reduction kernels (compiled or pure numpy, bitwise interchangeable) and
named RNG streams make reruns byte-identical.
"""

from .backend import COMPILED, backend_name
from .checkpoint import load_checkpoint, save_checkpoint
from .config import DataSection, ModelConfig, TrainConfig, TrainSection
from .contrastive import (contrastive_loss, grads_to_embeddings,
                          loss_grad_wrt_a, similarity_matrix)
from .data import SyntheticPairSet, as_gap_source, gen_data, mean_pool
from .encoders import (ActivationTape, ClassHead, EncoderNet,
                       classify_loss_grad, save_all, save_none)
from .errors import (CheckpointError, ConfigError, DegenerateEmbeddingError,
                     DivergenceError, NonFiniteError, ShapeError, ShardError,
                     TapeError, TwoTowerError, UpdateSequenceError,
                     VarianceUnestimableError)
from .ledger import MemoryLedger
from .microbatch import (BatchPlan, GradPacket, microbatch_gradients,
                         monolithic_oracle)
from .numerics import Rng
from .optim import (MomentSlots, adafactorw_step, fused_v1_update,
                    fused_v2_update, make_slots)
from .shardsim import (MemReport, ShardedTower, peak_memory, shard,
                       sharded_step, static_residency)
from .theoryprobe import (BoundReport, GapProbeConfig, bound_check_trials,
                          empirical_gap, fit_loglog_slope, gap_and_bound,
                          normalized_test_loss, normalized_train_loss,
                          theorem1_bound)
from .training import (TrainResult, lr_at, scale_batch_experiment, train,
                       verify_gradients, zero_shot_eval)

__version__ = "0.1.0"

__all__ = [
    "ActivationTape", "BatchPlan", "BoundReport", "COMPILED", "CheckpointError",
    "ClassHead", "ConfigError", "DataSection", "DegenerateEmbeddingError",
    "DivergenceError", "EncoderNet", "GapProbeConfig", "GradPacket",
    "MemReport", "MemoryLedger", "ModelConfig", "MomentSlots",
    "NonFiniteError", "Rng", "ShapeError", "ShardError", "ShardedTower",
    "SyntheticPairSet", "TapeError", "TrainConfig", "TrainResult",
    "TrainSection", "TwoTowerError", "UpdateSequenceError",
    "VarianceUnestimableError", "adafactorw_step", "as_gap_source",
    "backend_name", "bound_check_trials", "classify_loss_grad",
    "contrastive_loss", "empirical_gap", "fit_loglog_slope",
    "fused_v1_update", "fused_v2_update", "gap_and_bound", "gen_data",
    "grads_to_embeddings", "load_checkpoint", "loss_grad_wrt_a", "lr_at",
    "make_slots", "mean_pool", "microbatch_gradients", "monolithic_oracle",
    "normalized_test_loss", "normalized_train_loss", "peak_memory",
    "save_all", "save_checkpoint", "save_none", "scale_batch_experiment",
    "shard", "sharded_step", "similarity_matrix", "static_residency",
    "theorem1_bound", "train", "verify_gradients", "zero_shot_eval",
]
