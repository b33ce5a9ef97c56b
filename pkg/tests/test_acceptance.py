"""Acceptance gate: one test per criterion, each printing a PASS line with
its runtime (visible under ``pytest -s``) and asserting its stated budget.

Run:  pytest tests/test_acceptance.py -v -s
"""

import math
import os
import time

import numpy as np
import pytest

import online_oracle
from tinyvit.augment import PipelineSpec
from tinyvit.cache import estimate_storage
from tinyvit.cli import main as cli_main
from tinyvit.data import synth_corpus
from tinyvit.engine import (DistillRunConfig, class_correlation,
                            distill_loss_grad, evaluate, gradient_check,
                            student_train_replay, teacher_save,
                            train_supervised)
from tinyvit.labels import SparseLabel, densify, sparsify
from tinyvit.model import (MICRO, TINYVIT_11M, TINYVIT_21M, TINYVIT_5M,
                           ContractionConfig, adapt_resolution, build,
                           mac_count, param_count, scaled_windows)
from tinyvit.search import Constraint, search

NANO = ContractionConfig((4, 8, 8, 8), (1, 1, 1, 1), (2, 2, 1),
                         mbconv_expansion=1.0, mlp_ratio=1.0, head_dim=4)


class _Budget:
    def __init__(self, name: str, seconds: float):
        self.name = name
        self.seconds = seconds

    def __enter__(self):
        self.start = time.time()
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.time() - self.start
        if exc_type is None:
            assert elapsed < self.seconds, \
                f"{self.name}: {elapsed:.1f}s exceeded {self.seconds}s budget"
            print(f"ACCEPTANCE {self.name}: PASS ({elapsed:.1f}s)")
        return False


def test_eq2_roundtrip_and_mass_conservation():
    with _Budget("eq2-correctness", 10):
        rng = np.random.default_rng(0)
        for _ in range(10_000):
            c = int(rng.integers(1, 257))
            k = int(rng.integers(1, c + 1))
            p = rng.dirichlet(np.full(c, 0.5))
            sp = sparsify(p, k)
            out = densify(sp, c)
            assert abs(out.sum() - 1.0) < 1e-6
            np.testing.assert_array_equal(out[sp.indices], p[sp.indices])
            rest = np.setdiff1d(np.arange(c), sp.indices, assume_unique=False)
            if rest.size:
                assert np.ptp(out[rest]) == 0.0
        worked = densify(SparseLabel(indices=np.array([1, 3]),
                                     values=np.array([0.6, 0.3])), 4)
        np.testing.assert_allclose(worked, [0.05, 0.6, 0.05, 0.3],
                                   rtol=0, atol=1e-15)


@pytest.mark.parametrize("mix", ["none", "mixup"])
def test_replay_equivalence(tmp_path, mix):
    with _Budget(f"replay-equivalence[{mix}]", 120):
        spec = PipelineSpec(image_size=32, crop_scale=(0.6, 1.0),
                            erase_prob=0.25, randaug_count=1,
                            randaug_magnitude=9,
                            mix_mode=None if mix == "none" else mix,
                            mix_alpha=1.0)
        corpus = synth_corpus(8, 8, 40, seed=0)  # 64 samples
        teacher = build(MICRO, 8, 32, init_seed=11)
        cfg = DistillRunConfig(run_seed=99, epochs=2, batch_size=8, k=4,
                               lr=2e-3, warmup_epochs=1)
        paths = teacher_save(teacher, corpus, cfg, spec, tmp_path / mix)

        replayed = build(NANO, 8, 32, init_seed=22)
        replayed, trace_r = student_train_replay(replayed, corpus, paths,
                                                 cfg, spec)
        online = build(NANO, 8, 32, init_seed=22)
        online, trace_o = online_oracle.online_distill(online, teacher,
                                                       corpus, cfg, spec)
        assert len(trace_r.entries) == 16
        assert trace_r.entries == trace_o.entries  # bitwise losses, checksums
        for (n, pr), (_, po) in zip(replayed.named_params(),
                                    online.named_params()):
            assert pr.tobytes() == po.tobytes(), n


def test_storage_economics():
    with _Budget("storage-economics", 10):
        in1k = estimate_storage(1000, 10, 1_281_167, 300, "half")
        assert abs(in1k.bytes_total / 1e9 - 16.0) / 16.0 < 0.20
        in21k = estimate_storage(21841, 100, 14_000_000, 90, "half")
        assert abs(in21k.bytes_total / 1e9 - 481.0) / 481.0 < 0.20
        for0 = [estimate_storage(1000, k, 10_000, 7).bytes_total
                for k in range(1, 40)]
        assert np.all(np.diff(for0, n=2) == 0)  # exactly affine in K
        fore = [estimate_storage(1000, 10, 10_000, e).bytes_total
                for e in range(1, 40)]
        assert np.all(np.diff(fore, n=2) == 0)  # exactly linear in epochs
        assert fore[1] == 2 * fore[0]


def test_architecture_accounting():
    with _Budget("architecture-accounting", 30):
        published = [(TINYVIT_5M, 5.4e6, 1.3e9), (TINYVIT_11M, 11e6, 2.0e9),
                     (TINYVIT_21M, 21e6, 4.3e9)]
        for cfg, want_params, want_macs in published:
            model = build(cfg, 1000, 224)
            params = model.count_params()
            assert params == param_count(cfg, 1000)
            assert abs(params - want_params) / want_params < 0.02
            macs = model.count_macs(224)
            assert abs(macs - want_macs) / want_macs < 0.05
        big = mac_count(TINYVIT_21M, 1000, 384, windows=(12, 24, 12))
        assert abs(big - 13.8e9) / 13.8e9 < 0.05


def test_resolution_adaptation():
    with _Budget("resolution-adaptation", 60):
        assert scaled_windows((7, 7, 14, 7), 224, 384) == (12, 12, 24, 12)
        assert scaled_windows((7, 7, 14, 7), 224, 512) == (16, 16, 32, 16)
        model = build(TINYVIT_5M, 10, 224, init_seed=4)
        rng = np.random.default_rng(1)
        for _, p in model.named_params():
            p[...] = rng.normal(0, 0.1, p.shape).astype(p.dtype)
        same = adapt_resolution(model, 224)
        src = dict(model.named_params())
        for name, p in same.named_params():
            assert p.tobytes() == src[name].tobytes(), name
        big = adapt_resolution(model, 384)
        assert big.windows == (12, 24, 12)
        assert adapt_resolution(model, 512).windows == (16, 32, 16)


def test_gradient_fidelity():
    with _Budget("gradient-fidelity", 300):
        model = build(NANO, 2, 96, init_seed=13, dtype=np.float64)
        assert model.count_params() < 50_000
        rng = np.random.default_rng(23)
        for name, p in model.named_params():
            if name.endswith("bias_table"):
                p[...] = rng.normal(0, 0.3, p.shape)
        batch = rng.normal(size=(4, 3, 96, 96))
        target = rng.dirichlet(np.full(2, 1.0), size=4)
        err = gradient_check(model, lambda lg: distill_loss_grad(lg, target),
                             batch, h=1e-4)
        assert err < 1e-4


def test_contraction_search_properties():
    with _Budget("contraction-search", 60):
        constraint = Constraint(max_params=22_000_000, min_throughput=0.0)
        recorded = {}

        def scorer(cfg):
            val = -param_count(cfg, 1000) / 1e6 + 0.1 * cfg.depths[2]
            recorded[cfg.sort_key()] = val
            return val

        steps = search(TINYVIT_21M, constraint, target_params=5_500_000,
                       scorer=scorer, max_steps=300)
        assert steps and not steps[-1].stuck
        trail = [param_count(s.parent, 1000) for s in steps]
        assert all(b < a for a, b in zip(trail, trail[1:]))
        for s in steps:
            chosen = s.candidates[s.chosen]
            assert chosen.stats.params <= constraint.max_params
        replay = search(TINYVIT_21M, constraint, target_params=5_500_000,
                        scorer=lambda c: recorded[c.sort_key()],
                        max_steps=300)
        assert [s.parent for s in replay] == [s.parent for s in steps]
        assert [s.chosen for s in replay] == [s.chosen for s in steps]


def test_distillation_benefit(tmp_path):
    with _Budget("distillation-benefit", 600):
        train = synth_corpus(10, 24, 40, seed=100)
        val = synth_corpus(10, 8, 40, seed=200)
        spec = PipelineSpec(image_size=32, crop_scale=(0.7, 1.0),
                            hflip_prob=0.5, jitter=(0.2, 0.2, 0.2),
                            erase_prob=0.0, randaug_count=0)
        teacher_cfg = ContractionConfig((12, 16, 32, 32), (1, 1, 2, 1),
                                        (2, 2, 1), mbconv_expansion=2.0,
                                        mlp_ratio=2.0, head_dim=8)
        wins = 0
        for seed in range(5):
            tcfg = DistillRunConfig(run_seed=1000 + seed, epochs=14,
                                    batch_size=24, k=10, lr=4e-3,
                                    warmup_epochs=1)
            teacher = build(teacher_cfg, 10, 32, init_seed=500 + seed)
            teacher, _ = train_supervised(teacher, train, tcfg, spec)
            dcfg = DistillRunConfig(run_seed=2000 + seed, epochs=6,
                                    batch_size=24, k=5, lr=4e-3,
                                    warmup_epochs=1)
            paths = teacher_save(teacher, train, dcfg, spec,
                                 tmp_path / f"s{seed}")
            distilled = build(NANO, 10, 32, init_seed=seed)
            distilled, _ = student_train_replay(distilled, train, paths,
                                                dcfg, spec)
            scratch = build(NANO, 10, 32, init_seed=seed)
            scratch, _ = train_supervised(scratch, train, dcfg, spec)
            wins += evaluate(distilled, val, spec) >= evaluate(scratch, val,
                                                               spec)
        assert wins >= 4, f"distilled won only {wins}/5 seeds"


def test_cli_determinism(tmp_path):
    with _Budget("cli-determinism", 120):
        config_path = tmp_path / "nano.txt"
        config_path.write_text("\n".join(
            f"{k} = {v}" for k, v in NANO.as_flat_dict().items()) + "\n")
        corpus = tmp_path / "corpus"
        assert cli_main(["synth-corpus", "--classes", "4", "--per-class", "6",
                         "--size", "40", "--seed", "7",
                         "--out", str(corpus)]) == 0
        teacher = tmp_path / "teacher"
        assert cli_main(["init-model", "--config", str(config_path),
                         "--classes", "4", "--resolution", "32",
                         "--init-seed", "3", "--out", str(teacher)]) == 0
        base = ["save-logits", "--teacher", str(teacher),
                "--corpus", str(corpus), "--epochs", "2", "--k", "4",
                "--run-seed", "11", "--batch-size", "6", "--image-size", "32"]
        dirs = [tmp_path / "c1", tmp_path / "c2", tmp_path / "cp"]
        assert cli_main(base + ["--out-dir", str(dirs[0])]) == 0
        assert cli_main(base + ["--out-dir", str(dirs[1])]) == 0
        assert cli_main(base + ["--out-dir", str(dirs[2]),
                                "--parallel", "2"]) == 0
        names = sorted(os.listdir(dirs[0]))
        for name in names:
            blob = (dirs[0] / name).read_bytes()
            assert (dirs[1] / name).read_bytes() == blob
            assert (dirs[2] / name).read_bytes() == blob

        student = tmp_path / "student"
        assert cli_main(["init-model", "--config", str(config_path),
                         "--classes", "4", "--resolution", "32",
                         "--init-seed", "5", "--out", str(student)]) == 0
        train_args = ["train", "--student", str(student),
                      "--corpus", str(corpus), "--cache-dir", str(dirs[0]),
                      "--epochs", "2", "--k", "4", "--run-seed", "11",
                      "--batch-size", "6", "--image-size", "32"]
        t1, t2 = tmp_path / "t1.jsonl", tmp_path / "t2.jsonl"
        assert cli_main(train_args + ["--trace-out", str(t1)]) == 0
        assert cli_main(train_args + ["--trace-out", str(t2)]) == 0
        assert t1.read_bytes() == t2.read_bytes()


def test_correlation_analysis():
    with _Budget("correlation-analysis", 30):
        rng = np.random.default_rng(5)
        pred = rng.dirichlet(np.full(6, 1.0), size=32)
        ids = np.repeat(np.arange(4), 8)
        res = class_correlation(pred, ids)
        means = np.stack([pred[ids == c].mean(axis=0) for c in range(4)])
        for i in range(4):
            for j in range(4):
                xm, ym = means[i] - means[i].mean(), means[j] - means[j].mean()
                want = (xm * ym).sum() / math.sqrt(
                    (xm ** 2).sum() * (ym ** 2).sum())
                assert abs(res.matrix[i, j] - want) < 1e-10
        identical = np.tile(np.array([0.6, 0.3, 0.1]), (9, 1))
        res2 = class_correlation(identical, np.repeat(np.arange(3), 3))
        np.testing.assert_allclose(res2.matrix, np.ones((3, 3)), atol=1e-12)
