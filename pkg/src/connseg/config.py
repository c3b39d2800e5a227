"""Run configuration documents and process-level settings."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

THREADS_ENV = "CONNSEG_THREADS"


def worker_count() -> int:
    """Internal parallelism: ``$CONNSEG_THREADS`` if set, else the number of usable cores."""
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
        if n < 1:
            raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
        return n
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


@dataclass
class MetricOptions:
    grid_steps: int = 256
    beta2: float = 0.3
    k: int = 1

    def __post_init__(self):
        if self.grid_steps < 1 or self.beta2 <= 0 or self.k < 1:
            raise ValueError("grid_steps and k must be >= 1 and beta2 > 0")


def _section(cls, d, name):
    if not isinstance(d, dict):
        raise ValueError(f"config section {name!r} must be an object")
    unknown = set(d) - set(cls.__dataclass_fields__)
    if unknown:
        raise ValueError(f"unknown keys in {name!r}: {sorted(unknown)}")
    return cls(**d)


@dataclass
class RunConfig:
    """Everything needed to repeat a run: model, training, fusion and metric options plus the seed.

    ``train.model`` always mirrors ``model``; the seed also seeds training.
    """

    model: "PredictorConfig" = None
    train: "TrainRun" = None
    fusion: "FusionPlan" = None
    metrics: MetricOptions = field(default_factory=MetricOptions)
    seed: int = 0

    def __post_init__(self):
        from .model import PredictorConfig
        from .train import TrainRun
        from .tta import FusionPlan

        self.model = self.model or PredictorConfig()
        self.fusion = self.fusion or FusionPlan()
        if self.train is None:
            self.train = TrainRun(model=self.model, seed=self.seed)
        self.train.model = self.model
        self.train.seed = self.seed

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        from .model import PredictorConfig
        from .train import TrainRun
        from .tta import FusionPlan

        if not isinstance(d, dict):
            raise ValueError("config must be a JSON object")
        unknown = set(d) - {"model", "train", "fusion", "metrics", "seed"}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        model = _section(PredictorConfig, d.get("model", {}), "model")
        train_d = dict(d.get("train", {}))
        for key in ("model", "seed"):
            if key in train_d:
                raise ValueError(f"set {key!r} at the top level, not inside 'train'")
        train = _section(TrainRun, {**train_d, "model": model}, "train")
        fusion = _section(FusionPlan, d.get("fusion", {}), "fusion")
        metrics = _section(MetricOptions, d.get("metrics", {}), "metrics")
        seed = d.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise ValueError("seed must be an integer")
        return cls(model, train, fusion, metrics, seed)

    def to_dict(self) -> dict:
        train = self.train.to_dict()
        train.pop("model")
        train.pop("seed")
        return {
            "model": self.model.to_dict(),
            "train": train,
            "fusion": self.fusion.to_dict(),
            "metrics": {"grid_steps": self.metrics.grid_steps, "beta2": self.metrics.beta2,
                        "k": self.metrics.k},
            "seed": self.seed,
        }


def load_config(path) -> RunConfig:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError) as e:
        raise OSError(f"cannot read config {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: invalid JSON: {e}") from None
    return RunConfig.from_dict(d)


def save_config(path, config: RunConfig) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2) + "\n", encoding="utf-8")
