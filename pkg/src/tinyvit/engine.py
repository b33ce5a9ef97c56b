"""Two-phase distillation: a teacher-writer pass that freezes (seed, sparse
label) records per epoch, and a student-replay trainer that reconstructs the
exact augmented batches and targets from those records.

Replay equivalence is the load-bearing property: because batch composition,
augmentation, label math and the optimizer are all pure functions of the run
seed and the stored records, training against the cache is bit-identical to
training against a live teacher.  The live-teacher loop exists only in the
test suite as the oracle for that claim.
"""

from __future__ import annotations

import json
import math
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .augment import (AugParams, PIPELINE_VERSION, PipelineSpec, apply,
                      apply_premix, decode)
from .cache import CacheRecord, EpochHeader, make_record, open_epoch, write_epoch
from .data import Corpus, EpochPlan, epoch_plan
from .labels import densify, normalize, quantize_values, sparsify
from .layers import ForwardContext
from .model import TinyViT
from .rng import encode, shuffle_seed

CACHE_FILENAME = "epoch_{:05d}.bin"


@dataclass(frozen=True)
class DistillRunConfig:
    """Everything a run needs beyond the corpus and the pipeline spec."""

    run_seed: int
    epochs: int
    batch_size: int
    k: int
    temperature: float = 1.0
    value_precision: str = "half"
    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup_epochs: int = 0
    min_lr: float = 0.0
    grad_clip: float | None = None
    use_ground_truth: bool = False
    gt_weight: float = 0.5

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("K must be positive")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


@dataclass(frozen=True)
class TraceEntry:
    epoch: int
    step: int
    loss: float
    batch_checksum: int


@dataclass
class LossTrace:
    entries: list[TraceEntry] = field(default_factory=list)

    def append(self, epoch: int, step: int, loss: float, checksum: int) -> None:
        if not math.isfinite(loss):
            raise ValueError("non-finite loss")
        self.entries.append(TraceEntry(epoch, step, loss, checksum))

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w") as f:
            for e in self.entries:
                f.write(json.dumps({"epoch": e.epoch, "step": e.step,
                                    "loss": e.loss,
                                    "batch_checksum": e.batch_checksum}) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "LossTrace":
        trace = cls()
        with open(path) as f:
            for line in f:
                d = json.loads(line)
                trace.entries.append(TraceEntry(d["epoch"], d["step"],
                                                d["loss"], d["batch_checksum"]))
        return trace


# ---------------------------------------------------------------------------
# Loss


def distill_loss(student_logits: np.ndarray, target: np.ndarray) -> float:
    """Cross entropy of the student's softmax against a dense target,
    via log-sum-exp.  Lower-bounded by the target's entropy."""
    logits = np.asarray(student_logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite logits")
    z = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return float(-(np.asarray(target, dtype=np.float64) * (z - lse)).sum(axis=-1).mean())


def distill_loss_grad(student_logits: np.ndarray, targets: np.ndarray
                      ) -> tuple[float, np.ndarray]:
    """Batched loss and its gradient wrt the logits (mean over the batch)."""
    logits = np.asarray(student_logits, dtype=np.float64)
    if logits.ndim == 1:
        logits = logits[None]
        targets = np.asarray(targets)[None]
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite logits")
    b = logits.shape[0]
    z = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    loss = float(-(targets * logp).sum(axis=-1).mean())
    dlogits = (np.exp(logp) - targets) / b
    return loss, dlogits


# ---------------------------------------------------------------------------
# Optimizer and schedule


class AdamW:
    """Decoupled-weight-decay Adam over the model's named parameters.

    Decay applies only to weight matrices/kernels (leaf name ``*w``); biases,
    norm affines and attention bias tables are excluded.
    """

    def __init__(self, model: TinyViT, config: DistillRunConfig):
        self.model = model
        self.cfg = config
        self.t = 0
        self.m = {n: np.zeros_like(p) for n, p in model.named_params()}
        self.v = {n: np.zeros_like(p) for n, p in model.named_params()}

    @staticmethod
    def decays(name: str) -> bool:
        return name.rsplit(".", 1)[-1].endswith("w")

    def step(self, lr: float) -> None:
        cfg = self.cfg
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        params = dict(self.model.named_params())
        grads = dict(self.model.named_grads())
        if cfg.grad_clip is not None:
            sq = 0.0
            for g in grads.values():
                sq += float((g.astype(np.float64) ** 2).sum())
            norm = math.sqrt(sq)
            if norm > cfg.grad_clip:
                scale = cfg.grad_clip / (norm + 1e-6)
                for g in grads.values():
                    g *= g.dtype.type(scale)
        for name, p in params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= p.dtype.type(cfg.beta1)
            m += p.dtype.type(1.0 - cfg.beta1) * g
            v *= p.dtype.type(cfg.beta2)
            v += p.dtype.type(1.0 - cfg.beta2) * g * g
            if cfg.weight_decay and self.decays(name):
                p *= p.dtype.type(1.0 - lr * cfg.weight_decay)
            mhat = m / p.dtype.type(bc1)
            vhat = v / p.dtype.type(bc2)
            p -= p.dtype.type(lr) * mhat / (np.sqrt(vhat) + p.dtype.type(cfg.adam_eps))


def cosine_lr(config: DistillRunConfig, step: int, total_steps: int,
              warmup_steps: int) -> float:
    """Linear warmup to the base rate, then a cosine decay to ``min_lr``."""
    if warmup_steps > 0 and step < warmup_steps:
        return config.lr * (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = (step - warmup_steps) / span
    return config.min_lr + 0.5 * (config.lr - config.min_lr) * (
        1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# Batch assembly (shared verbatim by both pipeline branches)


def batches_of(plan: EpochPlan, batch_size: int) -> list[np.ndarray]:
    perm = plan.permutation
    return [perm[i:i + batch_size] for i in range(0, len(perm), batch_size)]


def assemble_batch(corpus: Corpus, spec: PipelineSpec, sids: np.ndarray,
                   plan: EpochPlan, d0_of) -> np.ndarray:
    """Augment one batch into an (B, 3, R, R) float32 tensor.

    ``d0_of`` maps sample_id -> stored/encoded seed; mix partners come from
    the epoch plan, and the partner tensor is the partner's own pre-mix
    augmentation.
    """
    rows = []
    for sid in sids:
        sid = int(sid)
        image = corpus.image(sid)
        params = decode(d0_of(sid), spec, image.shape[:2])
        if params.mix is not None:
            pid = int(plan.partner[sid])
            params = params.with_partner(pid)
            pimg = corpus.image(pid)
            pparams = decode(d0_of(pid), spec, pimg.shape[:2])
            partner = apply_premix(pimg, pparams, spec)
            rows.append(apply(image, params, spec, partner=partner))
        else:
            rows.append(apply(image, params, spec))
    batch = np.stack(rows).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(batch, dtype=np.float32)


def batch_checksum(batch: np.ndarray) -> int:
    return zlib.crc32(np.ascontiguousarray(batch).tobytes())


def identity_batch(corpus: Corpus, spec: PipelineSpec,
                   sids: np.ndarray) -> np.ndarray:
    """Evaluation transform: full-image resize and normalize only."""
    rows = []
    for sid in sids:
        image = corpus.image(int(sid))
        h, w = image.shape[:2]
        params = AugParams(crop=(0, 0, w, h), hflip=False,
                           color_jitter=(1.0, 1.0, 1.0), erase=None,
                           randaug_ops=(), mix=None)
        rows.append(apply(image, params, spec))
    batch = np.stack(rows).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(batch, dtype=np.float32)


# ---------------------------------------------------------------------------
# Teacher-writer branch


def save_epoch(teacher: TinyViT, corpus: Corpus, config: DistillRunConfig,
               spec: PipelineSpec, epoch: int, out_dir: str | os.PathLike
               ) -> str:
    """Forward the teacher over one epoch's augmentation stream and write the
    (seed, sparse label) records.  Pure function of its arguments, so any
    number of epochs can run concurrently."""
    n = corpus.num_samples
    plan = epoch_plan(config.run_seed, epoch, n, spec.mix_enabled)
    d0_of = lambda sid: encode(config.run_seed, epoch, sid)
    records: dict[int, CacheRecord] = {}
    ctx = ForwardContext(training=False)
    for sids in batches_of(plan, config.batch_size):
        batch = assemble_batch(corpus, spec, sids, plan, d0_of)
        logits = teacher.forward(batch, ctx)
        probs = normalize(logits, config.temperature)
        for row, sid in enumerate(sids):
            sid = int(sid)
            sparse = sparsify(probs[row], config.k)
            sparse = replace(sparse,
                             values=quantize_values(sparse.values,
                                                    config.value_precision))
            records[sid] = make_record(d0_of(sid), sparse)
    header = EpochHeader(pipeline_version=PIPELINE_VERSION, epoch=epoch,
                         run_seed=config.run_seed, num_samples=n,
                         num_classes=teacher.num_classes, k=config.k,
                         value_precision=config.value_precision,
                         shuffle_seed=shuffle_seed(config.run_seed, epoch))
    path = os.path.join(out_dir, CACHE_FILENAME.format(epoch))
    write_epoch(path, header, (records[sid] for sid in range(n)))
    return path


def teacher_save(teacher: TinyViT, corpus: Corpus, config: DistillRunConfig,
                 spec: PipelineSpec, out_dir: str | os.PathLike,
                 epochs: range | list[int] | None = None,
                 parallel: int = 1) -> list[str]:
    """Write one cache file per epoch, optionally across worker processes."""
    os.makedirs(out_dir, exist_ok=True)
    epoch_list = list(epochs if epochs is not None else range(config.epochs))
    if parallel <= 1 or len(epoch_list) <= 1:
        return [save_epoch(teacher, corpus, config, spec, e, out_dir)
                for e in epoch_list]
    with ProcessPoolExecutor(max_workers=parallel) as pool:
        futures = [pool.submit(save_epoch, teacher, corpus, config, spec, e,
                               out_dir) for e in epoch_list]
        return [f.result() for f in futures]


# ---------------------------------------------------------------------------
# Student-replay branch


def _check_header(header: EpochHeader, student: TinyViT,
                  config: DistillRunConfig, corpus: Corpus, epoch: int) -> None:
    ok = (header.pipeline_version == PIPELINE_VERSION
          and header.run_seed == config.run_seed
          and header.num_samples == corpus.num_samples
          and header.num_classes == student.num_classes
          and header.k == config.k
          and header.epoch == epoch
          and header.value_precision == config.value_precision
          and header.shuffle_seed == shuffle_seed(config.run_seed, epoch))
    if not ok:
        raise ValueError("cache/config mismatch")


def student_train_replay(student: TinyViT, corpus: Corpus,
                         cache_paths: list[str | os.PathLike],
                         config: DistillRunConfig, spec: PipelineSpec
                         ) -> tuple[TinyViT, LossTrace]:
    """Train the student from cache files alone (label-free by default).

    Augmented batches are rebuilt from the stored seeds, targets are the
    densified sparse labels, and the optimizer follows the cosine schedule.
    With ``use_ground_truth`` a weighted one-hot term is added (the only code
    path that reads corpus labels).
    """
    if len(cache_paths) != config.epochs:
        raise ValueError("cache/config mismatch")
    readers = [open_epoch(p) for p in cache_paths]
    readers.sort(key=lambda r: r.header.epoch)
    opt = AdamW(student, config)
    trace = LossTrace()
    n = corpus.num_samples
    steps_per_epoch = -(-n // config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    warmup_steps = config.warmup_epochs * steps_per_epoch
    ctx = ForwardContext(training=True)
    gstep = 0
    try:
        for position, reader in enumerate(readers):
            epoch = position  # replay iterates epochs 0..E-1 in order
            _check_header(reader.header, student, config, corpus, epoch)
            plan = epoch_plan(config.run_seed, epoch, n, spec.mix_enabled)
            recs = {sid: reader.read_record(sid) for sid in range(n)}
            d0_of = lambda sid: recs[sid].d0
            for sids in batches_of(plan, config.batch_size):
                batch = assemble_batch(corpus, spec, sids, plan, d0_of)
                targets = np.stack([
                    densify(recs[int(sid)].to_sparse_label(),
                            student.num_classes) for sid in sids])
                logits = student.forward(batch, ctx)
                loss, dlogits = distill_loss_grad(logits, targets)
                if config.use_ground_truth:
                    onehot = np.zeros_like(targets)
                    for row, sid in enumerate(sids):
                        onehot[row, corpus.label(int(sid))] = 1.0
                    gt_loss, gt_grad = distill_loss_grad(logits, onehot)
                    loss = loss + config.gt_weight * gt_loss
                    dlogits = dlogits + config.gt_weight * gt_grad
                student.zero_grads()
                student.backward(dlogits.astype(student.dtype))
                opt.step(cosine_lr(config, gstep, total_steps, warmup_steps))
                trace.append(epoch, gstep, loss, batch_checksum(batch))
                gstep += 1
    finally:
        for reader in readers:
            reader.close()
    return student, trace


def train_supervised(model: TinyViT, corpus: Corpus,
                     config: DistillRunConfig, spec: PipelineSpec
                     ) -> tuple[TinyViT, LossTrace]:
    """One-hot cross-entropy training under the same augmentation replay and
    optimizer; the scratch baseline and desk-scale teachers come from here."""
    opt = AdamW(model, config)
    trace = LossTrace()
    n = corpus.num_samples
    steps_per_epoch = -(-n // config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    warmup_steps = config.warmup_epochs * steps_per_epoch
    ctx = ForwardContext(training=True)
    gstep = 0
    for epoch in range(config.epochs):
        plan = epoch_plan(config.run_seed, epoch, n, spec.mix_enabled)
        d0_of = lambda sid: encode(config.run_seed, epoch, sid)
        for sids in batches_of(plan, config.batch_size):
            batch = assemble_batch(corpus, spec, sids, plan, d0_of)
            targets = np.zeros((len(sids), model.num_classes))
            for row, sid in enumerate(sids):
                targets[row, corpus.label(int(sid))] = 1.0
            logits = model.forward(batch, ctx)
            loss, dlogits = distill_loss_grad(logits, targets)
            model.zero_grads()
            model.backward(dlogits.astype(model.dtype))
            opt.step(cosine_lr(config, gstep, total_steps, warmup_steps))
            trace.append(epoch, gstep, loss, batch_checksum(batch))
            gstep += 1
    return model, trace


def evaluate(model: TinyViT, corpus: Corpus, spec: PipelineSpec,
             batch_size: int = 32) -> float:
    """Top-1 accuracy under the identity (resize + normalize) transform."""
    ctx = ForwardContext(training=False)
    correct = 0
    ids = np.arange(corpus.num_samples)
    for i in range(0, len(ids), batch_size):
        sids = ids[i:i + batch_size]
        batch = identity_batch(corpus, spec, sids)
        pred = model.forward(batch, ctx).argmax(axis=1)
        correct += sum(int(pred[r]) == corpus.label(int(sid))
                       for r, sid in enumerate(sids))
    return correct / corpus.num_samples


# ---------------------------------------------------------------------------
# Verification utilities


def gradient_check(model, loss_fn, probe_batch: np.ndarray,
                   h: float = 1e-4) -> float:
    """Max relative error between analytic gradients and central finite
    differences over every parameter.  Requires a float64 model small enough
    to brute-force."""
    if model.dtype != np.float64:
        raise ValueError("gradient check requires a float64 model")
    ctx = ForwardContext(training=True, update_stats=False)

    def loss_at() -> float:
        return loss_fn(model.forward(probe_batch, ctx))[0]

    logits = model.forward(probe_batch, ctx)
    _, dlogits = loss_fn(logits)
    model.zero_grads()
    model.backward(dlogits)
    analytic = {n: g.copy() for n, g in model.named_grads()}

    worst = 0.0
    for name, p in model.named_params():
        flat = p.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_at()
            flat[i] = orig - h
            lm = loss_at()
            flat[i] = orig
            numeric = (lp - lm) / (2 * h)
            err = abs(ga[i] - numeric) / (abs(ga[i]) + 1e-8)
            worst = max(worst, err)
    return worst


@dataclass(frozen=True)
class CorrelationResult:
    matrix: np.ndarray
    degenerate: tuple[int, ...]  # classes whose mean vector had no variance


def class_correlation(predictions: np.ndarray, class_ids: np.ndarray,
                      num_classes: int | None = None) -> CorrelationResult:
    """Pearson correlation between per-class mean prediction vectors.

    ``predictions`` is (N, C); rows are grouped by ``class_ids`` and averaged
    first.  Zero-variance mean vectors (including empty classes) correlate as
    0 by convention and are reported; the diagonal is 1 by definition.
    """
    predictions = np.asarray(predictions, dtype=np.float64)
    class_ids = np.asarray(class_ids)
    c = int(num_classes if num_classes is not None
            else (class_ids.max() + 1 if class_ids.size else 0))
    if c < 2:
        raise ValueError("need at least two classes")
    dim = predictions.shape[1]
    means = np.zeros((c, dim))
    for cls in range(c):
        rows = predictions[class_ids == cls]
        if rows.shape[0]:
            means[cls] = rows.mean(axis=0)
    centered = means - means.mean(axis=1, keepdims=True)
    norms = np.sqrt((centered ** 2).sum(axis=1))
    degenerate = tuple(int(i) for i in np.nonzero(norms == 0)[0])
    safe = np.where(norms == 0, 1.0, norms)
    unit = centered / safe[:, None]
    matrix = unit @ unit.T
    for i in degenerate:
        matrix[i, :] = 0.0
        matrix[:, i] = 0.0
    np.fill_diagonal(matrix, 1.0)
    matrix = np.clip(matrix, -1.0, 1.0)
    return CorrelationResult(matrix=matrix, degenerate=degenerate)
