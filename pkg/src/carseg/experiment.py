"""Baseline vs. CAR runs across seeds on the synthetic dataset."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence

from .analysis import compute_dependency_map
from .model import ModelConfig, build_model
from .synth import SceneSpec, Sample, generate
from .train import TrainConfig, evaluate_miou, train

logger = logging.getLogger(__name__)

DEFAULT_COUNTS = {"train": 400, "test_common": 100, "test_rare": 100}

BASELINE_WEIGHTS = dict(w_intra=0.0, w_c2c=0.0, w_c2p=0.0)
CAR_WEIGHTS = dict(w_intra=1.0, w_c2c=1.0, w_c2p=1.0)
INTER_ONLY_WEIGHTS = dict(w_intra=0.0, w_c2c=1.0, w_c2p=1.0)


def default_data(spec: Optional[SceneSpec] = None, counts: Optional[Dict[str, int]] = None
                 ) -> Dict[str, List[Sample]]:
    spec = spec or SceneSpec()
    counts = counts or DEFAULT_COUNTS
    return {split: generate(spec, n, split) for split, n in counts.items()}


@dataclass
class RunResult:
    seed: int
    miou_common: float
    miou_rare: float
    dependency: float
    final_total: float


def run_one(data: Dict[str, List[Sample]], tc: TrainConfig, mc: ModelConfig) -> RunResult:
    model = build_model(replace(mc, seed=tc.seed))
    log = train(model, data["train"], tc).log
    return RunResult(
        seed=tc.seed,
        miou_common=evaluate_miou(model, data["test_common"]).miou,
        miou_rare=evaluate_miou(model, data["test_rare"]).miou,
        dependency=compute_dependency_map(model, data["test_common"]).mean_off_diagonal(),
        final_total=log[-1][-1] if log else float("nan"),
    )


@dataclass
class SeedRow:
    seed: int
    baseline: RunResult
    car: RunResult

    @property
    def delta_rare(self) -> float:
        return self.car.miou_rare - self.baseline.miou_rare


def _job(args):
    data, tc, mc = args
    return run_one(data, tc, mc)


def compare(seeds: Sequence[int], data: Dict[str, List[Sample]], tc: TrainConfig = TrainConfig(),
            mc: ModelConfig = ModelConfig(), workers: int = 1) -> List[SeedRow]:
    """Train baseline and +CAR per seed with identical init and data order."""
    jobs = []
    for s in seeds:
        jobs.append((data, replace(tc, seed=s, **BASELINE_WEIGHTS), mc))
        jobs.append((data, replace(tc, seed=s), mc))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_job, jobs))
    else:
        results = [_job(j) for j in jobs]
    return [SeedRow(s, results[2 * i], results[2 * i + 1]) for i, s in enumerate(seeds)]


def seed_table(rows: Sequence[SeedRow], metric: str = "miou_rare") -> str:
    """Methods as rows, seeds as columns, CAR cells carry the delta (percent mIOU)."""
    seeds = [r.seed for r in rows]
    head = "Methods | " + " | ".join(str(s) for s in seeds)
    base = "Baseline | " + " | ".join(f"{100 * getattr(r.baseline, metric):.2f}" for r in rows)
    car = "Baseline + CAR | " + " | ".join(
        f"{100 * getattr(r.car, metric):.2f}({100 * (getattr(r.car, metric) - getattr(r.baseline, metric)):+.2f})"
        for r in rows
    )
    return "\n".join([head, base, car])


COMPARE_FIELDS = (
    "seed", "baseline_miou_rare", "car_miou_rare", "delta_rare",
    "baseline_miou_common", "car_miou_common", "baseline_dependency", "car_dependency",
)


def compare_csv(rows: Sequence[SeedRow]) -> str:
    lines = [",".join(COMPARE_FIELDS)]
    for r in rows:
        vals = (r.baseline.miou_rare, r.car.miou_rare, r.delta_rare,
                r.baseline.miou_common, r.car.miou_common, r.baseline.dependency, r.car.dependency)
        lines.append(",".join([str(r.seed)] + [f"{v:.6f}" for v in vals]))
    return "\n".join(lines) + "\n"
