"""
Teacher, student and distillation at desk scale
===============================================

A tiny teacher is trained with plain L1, then two students: one without a
teacher and one matched to the teacher's output.  Takes a couple of minutes.
"""

import numpy as np

from dvmsr.data import Pair, degrade, synthetic_images
from dvmsr.model import ModelConfig
from dvmsr.train import DistillConfig, TrainConfig, train

rng = np.random.default_rng(0)
mk = lambda ims: [Pair(f"im{i}", degrade(h, 4), h) for i, h in enumerate(ims)]
train_set, val_set = mk(synthetic_images(16, 48, rng)), mk(synthetic_images(4, 32, rng))

schedule = lambda n, seed: TrainConfig.scaled(n / 500_000, batch=8, patch=32, lr0=1e-3, seed=seed)

teacher = train(ModelConfig(2, 2, 24), schedule(400, 100), DistillConfig(), train_set, val_set)
print("teacher   val PSNR %.3f dB" % teacher.final_val[0])

for strategy in ("none", "end"):
    r = train(ModelConfig(1, 2, 12), schedule(300, 0), DistillConfig(strategy), train_set, val_set,
              teacher=teacher.checkpoint if strategy != "none" else None)
    print(f"student {strategy:<4} val PSNR {r.final_val[0]:.3f} dB")
