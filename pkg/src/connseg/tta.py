"""Test-time fusion over rescaled and mirrored copies of the input."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from .codec import ConnectivityCube, decode, fuse_cubes, hflip_cube
from .config import worker_count
from .model import ConnNetMini
from .tensor import _sigmoid, resize_array

Prediction = Union[ConnectivityCube, np.ndarray]
PredictFn = Callable[[np.ndarray], Prediction]

DEFAULT_SCALES = (0.5, 0.75, 1.0, 1.25, 1.5)


@dataclass
class FusionPlan:
    scales: tuple[float, ...] = DEFAULT_SCALES
    use_flip: bool = True
    t: float = 0.5
    k: int = 1

    def __post_init__(self):
        self.scales = tuple(float(s) for s in self.scales)
        if not self.scales or min(self.scales) <= 0:
            raise ValueError("scales must be a non-empty list of positive factors")
        if not 0 < self.t < 1:
            raise ValueError(f"threshold t must lie in (0, 1), got {self.t}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")

    def views(self) -> list[tuple[float, bool]]:
        """Canonical order: scales ascending, the original before its mirror."""
        flips = (False, True) if self.use_flip else (False,)
        return [(s, f) for s in sorted(self.scales) for f in flips]

    def to_dict(self) -> dict:
        return {"scales": list(self.scales), "use_flip": self.use_flip, "t": self.t, "k": self.k}

    @classmethod
    def from_dict(cls, d) -> "FusionPlan":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown fusion plan keys: {sorted(unknown)}")
        return cls(**d)


def unflip_cube(cube: ConnectivityCube) -> ConnectivityCube:
    """Map a cube predicted on the mirrored image back to the original geometry."""
    return hflip_cube(cube)


def scaled_size(h: int, w: int, scale: float) -> tuple[int, int]:
    return max(1, round(h * scale)), max(1, round(w * scale))


def model_predict_fn(model: ConnNetMini) -> PredictFn:
    """Probability cube (or map, for the segmentation head) of one ``(3, H, W)`` image."""
    def fn(image):
        probs = _sigmoid(model.predict(np.asarray(image, dtype=model.dtype)[None]))[0]
        if model.config.head == "segmentation":
            return probs[0]
        return ConnectivityCube.from_chw(probs, model.config.pattern_kind)
    return fn


def _view(image: np.ndarray, predict_fn: PredictFn, scale: float, flip: bool) -> Prediction:
    h, w = image.shape[-2:]
    x = image[..., ::-1] if flip else image
    x = resize_array(x, scaled_size(h, w, scale))
    pred = predict_fn(x)
    if isinstance(pred, ConnectivityCube):
        back = ConnectivityCube.from_chw(resize_array(pred.to_chw(), (h, w)), pred.pattern)
        return unflip_cube(back) if flip else back
    back = resize_array(np.asarray(pred), (h, w))
    return back[:, ::-1] if flip else back


def fused_prediction(image: np.ndarray, predict_fn: PredictFn, plan: FusionPlan,
                     threads: int | None = None) -> Prediction:
    """Average of all views, aligned to the input geometry, summed in canonical order."""
    views = plan.views()
    threads = worker_count() if threads is None else threads
    if threads > 1 and len(views) > 1:
        with ThreadPoolExecutor(min(threads, len(views))) as pool:
            preds = list(pool.map(lambda v: _view(image, predict_fn, *v), views))
    else:
        preds = [_view(image, predict_fn, *v) for v in views]
    if isinstance(preds[0], ConnectivityCube):
        return fuse_cubes(preds)
    total = preds[0].copy()
    for p in preds[1:]:
        total = total + p
    return total / len(preds)


def fused_predict(image: np.ndarray, predict_fn: PredictFn | ConnNetMini,
                  plan: FusionPlan | None = None, threads: int | None = None) -> np.ndarray:
    """Binary mask from the fused prediction, decoded once after averaging."""
    plan = plan or FusionPlan()
    if isinstance(predict_fn, ConnNetMini):
        predict_fn = model_predict_fn(predict_fn)
    fused = fused_prediction(image, predict_fn, plan, threads)
    if isinstance(fused, ConnectivityCube):
        return decode(fused, plan.t, plan.k)
    return fused > plan.t
