"""Desk-scale distillation study on a synthetic corpus.

A toy teacher is trained once; toy students are then trained for several
seeds under each distillation strategy and compared on held-out validation
PSNR.  Every run writes its deterministic ``metrics.csv`` under ``out_dir``.
"""

from __future__ import annotations

import json
import logging
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Pair, degrade, synthetic_images
from .model import ModelConfig
from .train import DistillConfig, TrainConfig, train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DeskProtocol:
    n_train: int = 32
    train_size: int = 48
    n_val: int = 8
    val_size: int = 32
    data_seed: int = 0
    scale: int = 4
    patch: int = 32
    batch: int = 8
    lr0: float = 1e-3
    teacher: tuple[int, int, int] = (2, 2, 32)
    student: tuple[int, int, int] = (1, 2, 16)
    teacher_iterations: int = 2000
    student_iterations: int = 1000
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    strategies: tuple[str, ...] = ("none", "end", "mid")

    def model(self, shape: tuple[int, int, int]) -> ModelConfig:
        n_rssb, n_vimm, channels = shape
        return ModelConfig(n_rssb=n_rssb, vimm_per_rssb=n_vimm, channels=channels, scale=self.scale)

    def schedule(self, iterations: int, seed: int) -> TrainConfig:
        # the full-length milestones, shrunk to this run length
        return TrainConfig.scaled(
            iterations / 500_000,
            batch=self.batch,
            patch=self.patch,
            lr0=self.lr0,
            seed=seed,
            scale=self.scale,
        )


@dataclass
class DeskResult:
    teacher_val_psnr: float
    val_psnr: dict[str, list[float]]
    seconds: float
    protocol: dict = field(default_factory=dict)

    def median(self, strategy: str) -> float:
        return statistics.median(self.val_psnr[strategy])

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def corpus(p: DeskProtocol) -> tuple[list[Pair], list[Pair]]:
    rng = np.random.default_rng(p.data_seed)
    train_hr = synthetic_images(p.n_train, p.train_size, rng)
    val_hr = synthetic_images(p.n_val, p.val_size, rng)
    mk = lambda tag, ims: [Pair(f"{tag}{i:02d}", degrade(h, p.scale), h) for i, h in enumerate(ims)]
    return mk("train", train_hr), mk("val", val_hr)


def run_desk_study(p: DeskProtocol = DeskProtocol(), out_dir: Path | str | None = None) -> DeskResult:
    t0 = time.perf_counter()
    out = Path(out_dir) if out_dir is not None else None
    train_pairs, val_pairs = corpus(p)
    sub = lambda name: out / name if out is not None else None

    teacher_cfg = p.model(p.teacher)
    t = train(teacher_cfg, p.schedule(p.teacher_iterations, 1000), DistillConfig(),
              train_pairs, val_pairs, out_dir=sub("teacher"))
    teacher_psnr = t.final_val[0]
    log.info("teacher val PSNR %.3f dB", teacher_psnr)

    student_cfg = p.model(p.student)
    scores: dict[str, list[float]] = {s: [] for s in p.strategies}
    for strategy in p.strategies:
        for seed in p.seeds:
            r = train(student_cfg, p.schedule(p.student_iterations, seed), DistillConfig(strategy=strategy),
                      train_pairs, val_pairs, out_dir=sub(f"student_{strategy}_seed{seed}"),
                      teacher=t.checkpoint if strategy != "none" else None)
            scores[strategy].append(r.final_val[0])
            log.info("student %s seed %d: %.3f dB", strategy, seed, r.final_val[0])
    result = DeskResult(teacher_psnr, scores, time.perf_counter() - t0, asdict(p))
    if out is not None:
        (out / "summary.json").write_text(result.to_json() + "\n")
    return result


if __name__ == "__main__":
    import sys

    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    res = run_desk_study(out_dir=sys.argv[1] if len(sys.argv) > 1 else None)
    print(res.to_json())
    for s in res.val_psnr:
        print(s, res.median(s))
