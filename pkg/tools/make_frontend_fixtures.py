"""Generate the cross-language fixture corpus for the frontend cache reader.

Writes cache files with the primary implementation plus JSON expectation
files (headers, records, dense targets, decoded augmentation parameters)
into frontend/test/fixtures/.  The frontend test suite replays these and
must agree: integers exactly, floats within 1e-6 (they are bit-identical in
practice; the decoder avoids exp/log/pow-with-non-unit-exponents for this
reason).

Run:  python3 tools/make_frontend_fixtures.py
"""

import dataclasses
import json
import shutil
from pathlib import Path

import numpy as np

from tinyvit.augment import PipelineSpec, decode
from tinyvit.cache import EpochHeader, make_record, open_epoch, write_epoch
from tinyvit.labels import SparseLabel, quantize_values, sparsify
from tinyvit.rng import encode, shuffle_seed

ROOT = Path(__file__).resolve().parent.parent
OUT = ROOT / "frontend" / "test" / "fixtures"

SPECS = {
    "plain": PipelineSpec(image_size=32, crop_scale=(0.6, 1.0),
                          erase_prob=0.25, randaug_count=2,
                          randaug_magnitude=9),
    "mixup": PipelineSpec(image_size=32, crop_scale=(0.5, 1.0),
                          erase_prob=0.5, erase_fill="noise",
                          randaug_count=1, randaug_magnitude=20,
                          mix_mode="mixup", mix_alpha=1.0),
    "cutmix": PipelineSpec(image_size=64, crop_scale=(0.3, 0.9),
                           hflip_prob=0.0, jitter=(0.0, 0.3, 0.0),
                           erase_prob=0.0, randaug_count=0,
                           mix_mode="cutmix", mix_alpha=1.0),
    "minimal": PipelineSpec(image_size=16, hflip_prob=0.0,
                            jitter=(0.0, 0.0, 0.0), erase_prob=0.0,
                            randaug_count=0),
}

SOURCE_HW = (40, 40)


def spec_to_json(spec: PipelineSpec) -> dict:
    return {
        "imageSize": spec.image_size,
        "cropScale": list(spec.crop_scale),
        "cropRatio": list(spec.crop_ratio),
        "hflipProb": spec.hflip_prob,
        "jitter": list(spec.jitter),
        "eraseProb": spec.erase_prob,
        "eraseScale": list(spec.erase_scale),
        "eraseRatio": list(spec.erase_ratio),
        "eraseFill": spec.erase_fill,
        "randaugCount": spec.randaug_count,
        "randaugMagnitude": spec.randaug_magnitude,
        "mixMode": spec.mix_mode,
        "mixAlpha": spec.mix_alpha,
    }


def params_to_json(params) -> dict:
    d = dataclasses.asdict(params)
    return {
        "crop": list(d["crop"]),
        "hflip": d["hflip"],
        "colorJitter": list(d["color_jitter"]),
        "erase": None if d["erase"] is None else {
            "x": d["erase"]["x"], "y": d["erase"]["y"],
            "w": d["erase"]["w"], "h": d["erase"]["h"],
            "fill": None if d["erase"]["fill"] is None
            else list(d["erase"]["fill"]),
        },
        "randaugOps": [list(op) for op in d["randaug_ops"]],
        "mix": None if d["mix"] is None else {
            "mode": d["mix"]["mode"], "lam": d["mix"]["lam"],
            "cutBox": None if d["mix"]["cut_box"] is None
            else list(d["mix"]["cut_box"]),
        },
    }


def dense_expectation(record, c: int, probes: int = 16) -> dict:
    total = float(record.values.sum())
    k = len(record.indices)
    residual = max(0.0, 1.0 - total) / (c - k) if k < c else 0.0
    rng = np.random.default_rng(int(record.d0))
    probe_idx = sorted(set(int(i) for i in rng.integers(0, c, size=probes))
                       | set(int(i) for i in record.indices[:4]))
    stored = {int(i): float(v) for i, v in zip(record.indices, record.values)}
    # with k == c there is no residual class: the sum is the stored mass
    return {
        "residual": residual,
        "probes": [{"index": i, "value": stored.get(i, residual)}
                   for i in probe_idx],
        "sum": total + residual * (c - k),
    }


def build_fixture(name: str, run_seed: int, epoch: int, c: int, k: int,
                  n: int, precision: str) -> None:
    rng = np.random.default_rng(run_seed * 7 + epoch)
    records = []
    for sid in range(n):
        p = rng.dirichlet(np.full(min(c, 256), 0.4))
        if c > 256:
            full = np.zeros(c)
            full[rng.choice(c, size=256, replace=False)] = p
            p = full
        sp = sparsify(p, k)
        sp = SparseLabel(indices=sp.indices,
                         values=quantize_values(sp.values, precision))
        records.append(make_record(encode(run_seed, epoch, sid), sp))
    header = EpochHeader(pipeline_version=1, epoch=epoch, run_seed=run_seed,
                         num_samples=n, num_classes=c, k=k,
                         value_precision=precision,
                         shuffle_seed=shuffle_seed(run_seed, epoch))
    path = OUT / f"{name}.bin"
    write_epoch(path, header, records)

    with open_epoch(path) as reader:
        expected = {
            "file": f"{name}.bin",
            "header": {
                "formatVersion": header.format_version,
                "pipelineVersion": header.pipeline_version,
                "epoch": header.epoch,
                "runSeed": header.run_seed,
                "numSamples": header.num_samples,
                "numClasses": header.num_classes,
                "k": header.k,
                "valuePrecision": header.value_precision,
                "shuffleSeed": str(header.shuffle_seed),  # > 2^53: as string
                "recordSize": header.record_size,
            },
            "records": [],
            "dense": {},
            "aug": [],
        }
        for sid in range(n):
            rec = reader.read_record(sid)
            expected["records"].append({
                "d0": rec.d0,
                "indices": [int(i) for i in rec.indices],
                "values": [float(v) for v in rec.values],
            })
            expected["dense"][str(sid)] = dense_expectation(rec, c)
        for sid in range(min(n, 4)):
            rec = reader.read_record(sid)
            for spec_name, spec in SPECS.items():
                params = decode(rec.d0, spec, SOURCE_HW)
                expected["aug"].append({
                    "sampleId": sid,
                    "spec": spec_name,
                    "sourceHw": list(SOURCE_HW),
                    "params": params_to_json(params),
                })
    with open(OUT / f"{name}.expected.json", "w") as f:
        json.dump(expected, f, indent=1)


def main() -> None:
    OUT.mkdir(parents=True, exist_ok=True)
    shutil.copy(ROOT / "tests" / "data" / "golden_epoch0.bin",
                OUT / "golden_epoch0.bin")
    build_fixture("fuzz_small_half", run_seed=11, epoch=0, c=50, k=5, n=12,
                  precision="half")
    build_fixture("fuzz_wide_u32", run_seed=12, epoch=3, c=70_000, k=3, n=6,
                  precision="half")
    build_fixture("fuzz_single", run_seed=13, epoch=1, c=1000, k=16, n=8,
                  precision="single")
    build_fixture("fuzz_full_k", run_seed=14, epoch=0, c=24, k=24, n=6,
                  precision="half")
    with open(OUT / "specs.json", "w") as f:
        json.dump({name: spec_to_json(spec) for name, spec in SPECS.items()},
                  f, indent=1)
    print(f"fixtures -> {OUT}")


if __name__ == "__main__":
    main()
