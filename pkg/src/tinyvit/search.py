"""Progressive model contraction: constrained local search over the factor
space.

Each step generates strictly-smaller neighbours of the current config by
stepping one factor down its grid, filters them by the parameter and
throughput constraints, scores the survivors, and keeps the best (ties go to
fewer parameters, then the lexicographically smallest factor tuple).  The
search stops at the parameter target, at the step limit, or when no feasible
neighbour remains ("stuck" is an outcome, not an error).  The full
trajectory is returned and serializable for audit.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace
from typing import Callable

from .model import (ContractionConfig, ModelStats, mac_count,
                    param_count, stage_grids)

# Factor step grid: one notch per neighbour.
DIM_STEPS = (8, 16, 16, 32)      # embed dims, per stage
RATIO_STEP = 0.5                 # MBConv and MLP expansion ratios
RATIO_FLOOR = 2.0
HEAD_STEP = 8
HEAD_FLOOR = 8
WINDOW_GRID = (7, 14)            # divisor-friendly window sizes

# Throughput proxy constants: images/s ~ 1 / (A_MAC * MACs + B_BYTE * bytes).
A_MAC = 1.0e-9
B_BYTE = 2.0e-8


@dataclass(frozen=True)
class Constraint:
    max_params: int
    min_throughput: float = 0.0

    def __post_init__(self) -> None:
        if self.max_params <= 0:
            raise ValueError("max_params must be positive")


@dataclass(frozen=True)
class CandidateEval:
    config: ContractionConfig
    stats: ModelStats
    score: float


@dataclass(frozen=True)
class SearchStep:
    parent: ContractionConfig
    candidates: tuple[CandidateEval, ...]
    chosen: int          # index into candidates; -1 when stuck
    stuck: bool = False


def _snap_down(value: int, multiple: int, floor: int) -> int:
    snapped = (value // multiple) * multiple
    return max(snapped, floor)


def neighbors(config: ContractionConfig,
              num_classes: int = 1000) -> list[ContractionConfig]:
    """One-notch-smaller configs, deduplicated, each strictly smaller in
    parameter count and individually buildable."""
    base_params = param_count(config, num_classes)
    out: list[ContractionConfig] = []
    seen = set()

    def emit(**changes) -> None:
        try:
            cand = replace(config, **changes)  # validation runs in __init__
        except ValueError:
            return
        key = cand.sort_key()
        if key in seen or key == config.sort_key():
            return
        if param_count(cand, num_classes) >= base_params:
            return
        seen.add(key)
        out.append(cand)

    dims = config.embed_dims
    for i in range(4):
        new = dims[i] - DIM_STEPS[i]
        if i > 0:
            # stages with attention must stay divisible by the head dim
            new = _snap_down(new, config.head_dim, config.head_dim)
        new = max(new, config.head_dim)
        if new < dims[i]:
            emit(embed_dims=dims[:i] + (new,) + dims[i + 1:])

    for i in range(4):
        if config.depths[i] > 1:
            emit(depths=config.depths[:i] + (config.depths[i] - 1,)
                 + config.depths[i + 1:])

    for i in range(3):
        w = config.window_sizes[i]
        smaller = [g for g in WINDOW_GRID if g < w]
        if smaller:
            emit(window_sizes=config.window_sizes[:i] + (max(smaller),)
                 + config.window_sizes[i + 1:])

    if config.mbconv_expansion - RATIO_STEP >= RATIO_FLOOR:
        emit(mbconv_expansion=config.mbconv_expansion - RATIO_STEP)
    if config.mlp_ratio - RATIO_STEP >= RATIO_FLOOR:
        emit(mlp_ratio=config.mlp_ratio - RATIO_STEP)

    new_head = config.head_dim - HEAD_STEP
    if new_head >= HEAD_FLOOR and all(d % new_head == 0
                                      for d in config.embed_dims[1:]):
        emit(head_dim=new_head)

    return out


def memory_traffic(config: ContractionConfig, num_classes: int,
                   resolution: int) -> int:
    """Rough bytes moved per image: parameters once, activations twice."""
    params = param_count(config, num_classes)
    grids = stage_grids(resolution)
    act = 0
    for grid, dim, depth in zip(grids, config.embed_dims, config.depths):
        act += grid * grid * dim * depth
    return 4 * params + 8 * act


def throughput_proxy(config: ContractionConfig, resolution: int = 224,
                     num_classes: int = 1000) -> float:
    """Monotone-decreasing-in-MACs stand-in for measured images/second."""
    macs = mac_count(config, num_classes, resolution)
    bytes_moved = memory_traffic(config, num_classes, resolution)
    return 1.0 / (A_MAC * macs + B_BYTE * bytes_moved)


def search(seed_config: ContractionConfig, constraint: Constraint,
           target_params: int, scorer: Callable[[ContractionConfig], float],
           max_steps: int = 50, num_classes: int = 1000,
           resolution: int = 224) -> list[SearchStep]:
    """Run the contraction loop; deterministic given a deterministic scorer."""

    def stats_of(cfg: ContractionConfig) -> ModelStats:
        return ModelStats(params=param_count(cfg, num_classes),
                          macs=mac_count(cfg, num_classes, resolution),
                          resolution=resolution)

    def feasible(cfg: ContractionConfig) -> bool:
        if param_count(cfg, num_classes) > constraint.max_params:
            return False
        return throughput_proxy(cfg, resolution,
                                num_classes) >= constraint.min_throughput

    if not feasible(seed_config):
        raise ValueError("seed violates constraint")

    steps: list[SearchStep] = []
    current = seed_config
    while (param_count(current, num_classes) > target_params
           and len(steps) < max_steps):
        candidates = [c for c in neighbors(current, num_classes)
                      if feasible(c)]
        if not candidates:
            steps.append(SearchStep(parent=current, candidates=(),
                                    chosen=-1, stuck=True))
            return steps
        evals = tuple(CandidateEval(cfg, stats_of(cfg), float(scorer(cfg)))
                      for cfg in candidates)
        order = sorted(range(len(evals)),
                       key=lambda i: (-evals[i].score, evals[i].stats.params,
                                      evals[i].config.sort_key()))
        chosen = order[0]
        steps.append(SearchStep(parent=current, candidates=evals,
                                chosen=chosen))
        current = evals[chosen].config
    return steps


def save_trajectory(steps: list[SearchStep], path: str | os.PathLike) -> None:
    with open(path, "w") as f:
        for step in steps:
            f.write(json.dumps({
                "parent": step.parent.as_flat_dict(),
                "chosen": step.chosen,
                "stuck": step.stuck,
                "candidates": [
                    {"config": e.config.as_flat_dict(),
                     "params": e.stats.params,
                     "macs": e.stats.macs,
                     "resolution": e.stats.resolution,
                     "score": e.score}
                    for e in step.candidates],
            }) + "\n")


def load_trajectory(path: str | os.PathLike) -> list[SearchStep]:
    steps = []
    with open(path) as f:
        for line in f:
            d = json.loads(line)
            evals = tuple(
                CandidateEval(ContractionConfig.from_flat_dict(e["config"]),
                              ModelStats(params=e["params"], macs=e["macs"],
                                         resolution=e["resolution"]),
                              e["score"])
                for e in d["candidates"])
            steps.append(SearchStep(
                parent=ContractionConfig.from_flat_dict(d["parent"]),
                candidates=evals, chosen=d["chosen"], stuck=d["stuck"]))
    return steps
