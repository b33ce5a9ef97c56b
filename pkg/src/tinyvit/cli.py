"""Operator command line.

Commands mirror the pipeline: ``save-logits`` runs the teacher-writer
branch, ``train`` replays a cache into a student, ``estimate-storage`` and
``sweep-k`` print the byte economics, ``contract`` runs the model search,
``stats`` prints parameter/MAC accounting, ``correlate`` writes the
class-correlation matrix, and ``init-model``/``synth-corpus`` create the
artifacts the other commands consume.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
``TINYVIT_CACHE_DIR`` provides the default cache directory.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .augment import PipelineSpec
from .cache import estimate_storage, format_inspect, inspect
from .data import Corpus, synth_corpus
from .engine import (DistillRunConfig, class_correlation, identity_batch,
                     student_train_replay, teacher_save)
from .layers import ForwardContext
from .model import (ContractionConfig, TinyViT, build, mac_count,
                    param_count)
from .search import Constraint, save_trajectory, search

CACHE_DIR_ENV = "TINYVIT_CACHE_DIR"


def _spec_from_args(args) -> PipelineSpec:
    mix = getattr(args, "mix", "none")
    return PipelineSpec(image_size=args.image_size,
                        mix_mode=None if mix == "none" else mix)


def _config_from_file(path: str) -> ContractionConfig:
    from .model import parse_config_text
    return ContractionConfig.from_flat_dict(parse_config_text(path))


def _run_config(args, **extra) -> DistillRunConfig:
    fields = dict(run_seed=args.run_seed, epochs=args.epochs,
                  batch_size=args.batch_size, k=args.k,
                  temperature=args.temperature, lr=args.lr,
                  weight_decay=args.weight_decay,
                  warmup_epochs=args.warmup_epochs)
    fields.update(extra)
    return DistillRunConfig(**fields)


def cmd_save_logits(args) -> int:
    teacher = TinyViT.load(args.teacher)
    corpus = Corpus.load(args.corpus)
    spec = _spec_from_args(args)
    if spec.image_size != teacher.resolution:
        raise ValueError("cache/config mismatch")
    config = _run_config(args)
    paths = teacher_save(teacher, corpus, config, spec, args.out_dir,
                         parallel=args.parallel)
    for path in paths:
        summary = inspect(path)
        print(f"{path}: {os.path.getsize(path)} bytes, "
              f"mean top-K mass {summary['mean_topk_mass']:.4f}")
    return 0


def cmd_train(args) -> int:
    student = TinyViT.load(args.student) if os.path.isdir(args.student) \
        else None
    if student is None:
        raise ValueError(f"student model directory not found: {args.student}")
    corpus = Corpus.load(args.corpus)
    spec = _spec_from_args(args)
    config = _run_config(args)
    paths = sorted(
        os.path.join(args.cache_dir, f) for f in os.listdir(args.cache_dir)
        if f.startswith("epoch_") and f.endswith(".bin"))
    student, trace = student_train_replay(student, corpus, paths, config, spec)
    trace.save(args.trace_out)
    if args.model_out:
        student.save(args.model_out)
    print(f"trained {config.epochs} epochs, {len(trace.entries)} steps; "
          f"trace -> {args.trace_out}")
    return 0


def cmd_estimate_storage(args) -> int:
    est = estimate_storage(args.classes, args.k, args.samples, args.epochs,
                           args.precision)
    print(f"bytes_per_record: {est.bytes_per_record}")
    print(f"bytes_total: {est.bytes_total}")
    print(f"gigabytes: {est.bytes_total / 1e9:.3f}")
    return 0


def cmd_sweep_k(args) -> int:
    ks = [int(v) for v in args.k_list.split(",")]
    rows = []
    for k in ks:
        est = estimate_storage(args.classes, k, args.samples, args.epochs,
                               args.precision)
        rows.append((k, est.bytes_per_record, est.bytes_total))
    print(f"{'K':>8} {'bytes/record':>14} {'bytes_total':>16}")
    for k, per, total in rows:
        print(f"{k:>8} {per:>14} {total:>16}")
    # the storage column must be affine in K: constant second differences
    if len(rows) >= 3:
        ks_arr = np.array([r[0] for r in rows], dtype=np.float64)
        tot = np.array([r[2] for r in rows], dtype=np.float64)
        slope = np.diff(tot) / np.diff(ks_arr)
        if not np.allclose(slope, slope[0], rtol=0, atol=1e-9):
            raise RuntimeError("storage is not linear in K")
    if args.out:
        with open(args.out, "w") as f:
            for k, per, total in rows:
                f.write(json.dumps({"k": k, "bytes_per_record": per,
                                    "bytes_total": total}) + "\n")
    return 0


def cmd_inspect(args) -> int:
    print(format_inspect(inspect(args.cache_file)))
    return 0


def cmd_contract(args) -> int:
    seed_config = _config_from_file(args.seed_config)
    constraint = Constraint(max_params=args.max_params,
                            min_throughput=args.min_throughput)
    steps = search(seed_config, constraint, args.target_params,
                   scorer=lambda cfg: -float(param_count(cfg, args.classes)),
                   max_steps=args.steps, num_classes=args.classes)
    save_trajectory(steps, args.out)
    last = steps[-1]
    status = "stuck" if last.stuck else "ok"
    print(f"{len(steps)} steps ({status}); trajectory -> {args.out}")
    for i, step in enumerate(steps):
        chosen = step.candidates[step.chosen] if step.chosen >= 0 else None
        if chosen:
            print(f"step {i}: params {chosen.stats.params}")
    return 0


def cmd_stats(args) -> int:
    config = _config_from_file(args.config)
    params = param_count(config, args.classes)
    windows = config.window_sizes
    if args.base_resolution:
        from .model import scaled_windows
        windows = scaled_windows(windows, args.base_resolution,
                                 args.resolution)
    macs = mac_count(config, args.classes, args.resolution, windows=windows)
    print(f"params: {params} ({params / 1e6:.2f}M)")
    print(f"macs@{args.resolution}: {macs} ({macs / 1e9:.2f}G)")
    if windows != config.window_sizes:
        print(f"windows: {','.join(str(w) for w in windows)} "
              f"(rescaled from {args.base_resolution})")
    return 0


def cmd_correlate(args) -> int:
    model = TinyViT.load(args.model)
    corpus = Corpus.load(args.corpus)
    spec = PipelineSpec(image_size=model.resolution)
    per_class = args.per_class
    by_class: dict[int, list[int]] = {}
    for sid in range(corpus.num_samples):
        by_class.setdefault(corpus.label(sid), []).append(sid)
    sids, ids = [], []
    for cls in sorted(by_class):
        take = by_class[cls][:per_class]
        sids.extend(take)
        ids.extend([cls] * len(take))
    ctx = ForwardContext(training=False)
    preds = []
    for start in range(0, len(sids), 32):
        chunk = np.asarray(sids[start:start + 32])
        logits = model.forward(identity_batch(corpus, spec, chunk), ctx)
        if args.raw_logits:
            preds.append(logits.astype(np.float64))
        else:
            from .labels import normalize
            preds.append(normalize(logits))
    result = class_correlation(np.concatenate(preds), np.asarray(ids),
                               num_classes=corpus.num_classes)
    result.matrix.astype("<f8").tofile(args.out)
    print(f"{result.matrix.shape[0]}x{result.matrix.shape[1]} matrix -> "
          f"{args.out}")
    if result.degenerate:
        print(f"degenerate classes (zero variance): {list(result.degenerate)}")
    if args.heatmap:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        fig, ax = plt.subplots(figsize=(6, 5))
        im = ax.imshow(result.matrix, vmin=-1, vmax=1, cmap="coolwarm")
        fig.colorbar(im, ax=ax)
        ax.set_xlabel("class")
        ax.set_ylabel("class")
        fig.savefig(args.heatmap, dpi=120)
        print(f"heatmap -> {args.heatmap}")
    return 0


def cmd_init_model(args) -> int:
    config = _config_from_file(args.config)
    model = build(config, args.classes, args.resolution,
                  init_seed=args.init_seed)
    model.save(args.out)
    print(f"model ({model.count_params()} params) -> {args.out}")
    return 0


def cmd_synth_corpus(args) -> int:
    corpus = synth_corpus(args.classes, args.per_class, args.size, args.seed)
    corpus.save(args.out)
    print(f"{corpus.num_samples} samples -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tinyvit",
        description="Fast pretraining distillation: sparse-label caches, "
                    "seeded augmentation replay, and model contraction.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_run_flags(p):
        p.add_argument("--run-seed", type=int, default=0,
                       help="seed that drives shuffling and augmentation")
        p.add_argument("--epochs", type=int, required=True,
                       help="number of epochs")
        p.add_argument("--batch-size", type=int, default=8,
                       help="samples per step")
        p.add_argument("--k", type=int, required=True,
                       help="sparse label size (top-K)")
        p.add_argument("--temperature", type=float, default=1.0,
                       help="softmax temperature for teacher labels")
        p.add_argument("--lr", type=float, default=1e-3,
                       help="peak learning rate")
        p.add_argument("--weight-decay", type=float, default=0.01,
                       help="decoupled weight decay")
        p.add_argument("--warmup-epochs", type=int, default=0,
                       help="linear warmup epochs")
        p.add_argument("--image-size", type=int, default=32,
                       help="augmented image resolution")
        p.add_argument("--mix", choices=["none", "mixup", "cutmix"],
                       default="none", help="sample mixing mode")

    p = sub.add_parser("save-logits",
                       help="forward the teacher and write epoch caches")
    p.add_argument("--teacher", required=True, help="teacher model directory")
    p.add_argument("--corpus", required=True, help="corpus directory")
    add_run_flags(p)
    p.add_argument("--out-dir", default=os.environ.get(CACHE_DIR_ENV),
                   required=CACHE_DIR_ENV not in os.environ,
                   help=f"cache output directory (default ${CACHE_DIR_ENV})")
    p.add_argument("--parallel", type=int, default=1,
                   help="concurrent epoch writers")
    p.set_defaults(func=cmd_save_logits)

    p = sub.add_parser("train", help="train a student from cached logits")
    p.add_argument("--student", required=True,
                   help="student model directory (from init-model)")
    p.add_argument("--corpus", required=True, help="corpus directory")
    p.add_argument("--cache-dir", default=os.environ.get(CACHE_DIR_ENV),
                   required=CACHE_DIR_ENV not in os.environ,
                   help=f"cache directory (default ${CACHE_DIR_ENV})")
    add_run_flags(p)
    p.add_argument("--trace-out", required=True, help="loss trace JSONL path")
    p.add_argument("--model-out", default=None,
                   help="where to save the trained student")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("estimate-storage", help="cache size arithmetic")
    p.add_argument("--classes", type=int, required=True, help="class count")
    p.add_argument("--k", type=int, required=True, help="sparse label size")
    p.add_argument("--samples", type=int, required=True, help="corpus size")
    p.add_argument("--epochs", type=int, required=True, help="epoch count")
    p.add_argument("--precision", choices=["half", "single"], default="half",
                   help="stored value precision")
    p.set_defaults(func=cmd_estimate_storage)

    p = sub.add_parser("sweep-k", help="storage table over a grid of K")
    p.add_argument("--classes", type=int, required=True, help="class count")
    p.add_argument("--samples", type=int, required=True, help="corpus size")
    p.add_argument("--epochs", type=int, required=True, help="epoch count")
    p.add_argument("--k-list", required=True,
                   help="comma-separated K values")
    p.add_argument("--precision", choices=["half", "single"], default="half",
                   help="stored value precision")
    p.add_argument("--out", default=None, help="optional JSONL table path")
    p.set_defaults(func=cmd_sweep_k)

    p = sub.add_parser("inspect", help="summarize one epoch cache file")
    p.add_argument("cache_file", help="path to an epoch cache file")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("contract", help="constrained local contraction search")
    p.add_argument("--seed-config", required=True,
                   help="config text file of the starting model")
    p.add_argument("--max-params", type=int, required=True,
                   help="parameter ceiling (constraint)")
    p.add_argument("--min-throughput", type=float, default=0.0,
                   help="throughput-proxy floor (constraint)")
    p.add_argument("--target-params", type=int, required=True,
                   help="stop once the chosen model is at most this size")
    p.add_argument("--steps", type=int, default=50,
                   help="maximum search steps")
    p.add_argument("--classes", type=int, default=1000,
                   help="classifier width used for parameter accounting")
    p.add_argument("--out", required=True, help="trajectory JSONL path")
    p.set_defaults(func=cmd_contract)

    p = sub.add_parser("stats", help="parameter and MAC accounting")
    p.add_argument("--config", required=True, help="config text file")
    p.add_argument("--resolution", type=int, default=224,
                   help="input resolution for MACs")
    p.add_argument("--classes", type=int, default=1000,
                   help="classifier width")
    p.add_argument("--base-resolution", type=int, default=None,
                   help="rescale window sizes from this resolution "
                        "(finetune-style adaptation)")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("correlate",
                       help="class-correlation matrix of model predictions")
    p.add_argument("--model", required=True, help="model directory")
    p.add_argument("--corpus", required=True, help="labelled corpus directory")
    p.add_argument("--per-class", type=int, default=8,
                   help="images sampled per class")
    p.add_argument("--raw-logits", action="store_true",
                   help="correlate raw logits instead of probabilities")
    p.add_argument("--out", required=True, help="binary matrix output path")
    p.add_argument("--heatmap", default=None,
                   help="optional rendered heatmap image path")
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("init-model", help="build and save a fresh model")
    p.add_argument("--config", required=True, help="config text file")
    p.add_argument("--classes", type=int, required=True, help="class count")
    p.add_argument("--resolution", type=int, default=32,
                   help="input resolution")
    p.add_argument("--init-seed", type=int, default=0,
                   help="parameter init seed")
    p.add_argument("--out", required=True, help="model output directory")
    p.set_defaults(func=cmd_init_model)

    p = sub.add_parser("synth-corpus", help="generate a synthetic corpus")
    p.add_argument("--classes", type=int, required=True, help="class count")
    p.add_argument("--per-class", type=int, required=True,
                   help="images per class")
    p.add_argument("--size", type=int, default=40,
                   help="source image side length")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--out", required=True, help="corpus output directory")
    p.set_defaults(func=cmd_synth_corpus)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
