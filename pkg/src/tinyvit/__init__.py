"""Fast pretraining distillation at desk scale.

The pipeline has two independent branches.  The teacher-writer branch
forwards a teacher over seeded augmentations and stores, per sample and
epoch, a 4-byte augmentation seed plus the top-K slice of the teacher's
softmax.  The student branch later reconstructs the exact augmented batches
and dense targets from those records alone, with the teacher absent.  The
model family is a hierarchical windowed-attention transformer parameterized
by contraction factors, plus a constrained local search for shrinking it.
"""

from .augment import (AugParams, EraseBox, MixParams, PIPELINE_VERSION,
                      PipelineSpec, apply, apply_premix, decode,
                      resize_bilinear)
from .cache import (CacheRecord, EpochCacheReader, EpochHeader,
                    StorageEstimate, estimate_storage, inspect, make_record,
                    open_epoch, write_epoch)
from .data import Corpus, EpochPlan, epoch_plan, synth_corpus
from .engine import (AdamW, DistillRunConfig, LossTrace, class_correlation,
                     cosine_lr, distill_loss, distill_loss_grad, evaluate,
                     gradient_check, student_train_replay, teacher_save,
                     train_supervised)
from .labels import (SparseLabel, densify, normalize, quantize_values,
                     sparsify)
from .model import (ContractionConfig, MICRO, ModelStats, TINYVIT_5M,
                    TINYVIT_11M, TINYVIT_21M, TinyViT, adapt_resolution,
                    build, mac_count, param_count, scaled_windows)
from .rng import PcgState, choice, encode, mix64, pcg_next_u32, pcg_seed, uniform
from .search import (CandidateEval, Constraint, SearchStep, neighbors,
                     search, throughput_proxy)

__version__ = "0.1.0"

__all__ = [
    "AdamW", "AugParams", "CacheRecord", "CandidateEval", "Constraint",
    "ContractionConfig", "Corpus", "DistillRunConfig", "EpochCacheReader",
    "EpochHeader", "EpochPlan", "EraseBox", "LossTrace", "MICRO",
    "MixParams", "ModelStats", "PIPELINE_VERSION", "PcgState",
    "PipelineSpec", "SearchStep", "SparseLabel", "StorageEstimate",
    "TINYVIT_11M", "TINYVIT_21M", "TINYVIT_5M", "TinyViT", "adapt_resolution",
    "apply", "apply_premix", "build", "choice", "class_correlation",
    "cosine_lr", "decode", "densify", "distill_loss", "distill_loss_grad",
    "encode", "epoch_plan", "estimate_storage", "evaluate", "gradient_check",
    "inspect", "mac_count", "make_record", "mix64", "neighbors", "normalize",
    "open_epoch", "param_count", "pcg_next_u32", "pcg_seed",
    "quantize_values", "resize_bilinear", "scaled_windows", "search",
    "sparsify", "student_train_replay", "synth_corpus", "teacher_save",
    "throughput_proxy", "train_supervised", "uniform", "write_epoch",
]
