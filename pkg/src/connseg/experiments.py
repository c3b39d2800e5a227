"""Desk-scale experiments shared by ``scripts/`` and the acceptance suite."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from .data import SyntheticSpec, synth_sample
from .model import PredictorConfig
from .train import TrainRun, probabilities, train
from .metrics import evaluate_dataset


@dataclass
class Split:
    train_images: list
    train_masks: list
    test_images: list
    test_masks: list


def synthetic_split(seed: int, n_train: int = 200, n_test: int = 50, size: int = 64) -> Split:
    """Disjoint train/test draws from one seeded synthetic distribution."""
    spec = SyntheticSpec(count=n_train + n_test, size=size, seed=seed)
    samples = [synth_sample(spec, i) for i in range(spec.count)]
    images = [s[0] for s in samples]
    masks = [s[1] for s in samples]
    return Split(images[:n_train], masks[:n_train], images[n_train:], masks[n_train:])


@dataclass
class HeadResult:
    head: str
    pattern: str
    seed: int
    steps: int
    maxF: float
    maxF_mean_per_image: float
    final_loss: float
    cpu_seconds: float

    def as_dict(self):
        return asdict(self)


def run_head(split: Split, head: str, seed: int, steps: int = 300, pattern: str = "n8",
             batch_size: int = 8, log=None) -> HeadResult:
    """Train from scratch on the split's training half, then score held-out max-F (no TTA)."""
    cfg = PredictorConfig(head=head, pattern=pattern)
    run = TrainRun(model=cfg, seed=seed, epochs=10 ** 6, max_steps=steps, batch_size=batch_size,
                   log_every=max(1, steps // 5))
    start = time.process_time()
    result = train(split.train_images, split.train_masks, run, log=log)
    probs = probabilities(result.model, split.test_images)
    report = evaluate_dataset(probs, split.test_masks)
    return HeadResult(head, pattern, seed, steps, report["maxF"], report["maxF_mean_per_image"],
                      result.losses[-1], time.process_time() - start)


def conn_vs_seg(seeds=(0, 1, 2), steps: int = 300, n_train: int = 200, n_test: int = 50,
                log=None) -> list[dict]:
    """Connectivity head vs segmentation head on identical data and budget, per seed."""
    rows = []
    for seed in seeds:
        split = synthetic_split(seed, n_train, n_test)
        conn = run_head(split, "connectivity", seed, steps, log=log)
        seg = run_head(split, "segmentation", seed, steps, log=log)
        rows.append({"seed": seed, "conn": conn.as_dict(), "seg": seg.as_dict(),
                     "diff": conn.maxF - seg.maxF})
        if log:
            log(f"seed {seed}: CONN {conn.maxF:.4f}  SEG {seg.maxF:.4f}  diff {conn.maxF - seg.maxF:+.4f}")
    return rows


def pattern_ablation(patterns=("n4", "n8", "n12"), seed: int = 0, steps: int = 300,
                     log=None) -> list[dict]:
    split = synthetic_split(seed)
    return [run_head(split, "connectivity", seed, steps, pattern=p, log=log).as_dict()
            for p in patterns]
