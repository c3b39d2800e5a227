"""Training: BCE objective, augmentation, Adam and the training loop."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .checkpoint import save_weights
from .codec import ConnectivityCube, encode
from .metrics import evaluate_dataset
from .model import ConnNetMini, PredictorConfig
from .tensor import Tensor, resize_array


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


def bce_loss(logits: Tensor, target) -> Tensor:
    """Mean BCE over every element of the batch cube (``1 / (N*C)`` per image)."""
    return T.bce_with_logits(logits, target)


def targets_for(masks: Sequence[np.ndarray], config: PredictorConfig) -> np.ndarray:
    """Ground truth ``(N, C, H, W)``: connectivity cubes, or the mask itself for the SEG head."""
    if config.head == "segmentation":
        return np.stack([np.asarray(m, dtype=np.float32)[None] for m in masks])
    p = config.pattern_kind
    return np.stack([encode(m, p).to_chw().astype(np.float32) for m in masks])


# augmentation -------------------------------------------------------------------

def hflip(image: np.ndarray, mask: np.ndarray):
    return image[..., ::-1].copy(), mask[:, ::-1].copy()


def rescale(image: np.ndarray, mask: np.ndarray, scale: float):
    """Bilinear for the image, nearest neighbour for the mask; sizes rounded, at least 1."""
    h, w = mask.shape
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
    if (nh, nw) == (h, w):
        return image, mask
    rows = np.minimum(((np.arange(nh) + 0.5) * h / nh).astype(int), h - 1)
    cols = np.minimum(((np.arange(nw) + 0.5) * w / nw).astype(int), w - 1)
    return resize_array(image, (nh, nw)).astype(image.dtype), mask[np.ix_(rows, cols)]


def pad_to(image: np.ndarray, mask: np.ndarray, size: int):
    """Zero-pad (background) at the bottom/right up to ``size`` in each dimension."""
    h, w = mask.shape
    ph, pw = max(0, size - h), max(0, size - w)
    if ph == pw == 0:
        return image, mask
    return (np.pad(image, ((0, 0), (0, ph), (0, pw))),
            np.pad(mask, ((0, ph), (0, pw))))


def crop(image, mask, top: int, left: int, size: int):
    h, w = mask.shape
    if size > h or size > w:
        raise ValueError(f"crop of {size}x{size} is larger than the {h}x{w} image")
    if not (0 <= top <= h - size and 0 <= left <= w - size):
        raise ValueError(f"crop window at ({top}, {left}) leaves the {h}x{w} image")
    return image[:, top:top + size, left:left + size], mask[top:top + size, left:left + size]


def random_crop(image, mask, size: int, rng: np.random.Generator):
    h, w = mask.shape
    if size > h or size > w:
        raise ValueError(f"crop of {size}x{size} is larger than the {h}x{w} image")
    top = int(rng.integers(h - size + 1))
    left = int(rng.integers(w - size + 1))
    return crop(image, mask, top, left, size)


def center_crop(image, mask, size: int):
    h, w = mask.shape
    return crop(image, mask, (h - size) // 2, (w - size) // 2, size)


def augment(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator, size: int,
            flip_prob: float = 0.5, scale_range: tuple[float, float] = (0.75, 1.25)):
    """Random horizontal flip, uniform rescale, then pad and random-crop to ``size``.

    The rng is consumed in a fixed order (flip, scale, crop) so runs repeat exactly.
    """
    mask = np.asarray(mask, dtype=bool)
    if rng.random() < flip_prob:
        image, mask = hflip(image, mask)
    image, mask = rescale(image, mask, float(rng.uniform(*scale_range)))
    image, mask = pad_to(image, mask, size)
    return random_crop(image, mask, size, rng)


# optimiser ----------------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, weights: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(w) for w in weights], [np.zeros_like(w) for w in weights])


def adam_step(weights: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              active: Sequence[bool] | None = None) -> None:
    """One bias-corrected Adam update, in place on ``weights`` and ``state``.

    Entries of ``active`` that are False leave that tensor and its moments untouched.
    """
    if not (len(weights) == len(grads) == len(state.m) == len(state.v)):
        raise ValueError("weights, grads and optimiser state differ in length")
    for w, g, m in zip(weights, grads, state.m):
        if w.shape != g.shape or w.shape != m.shape:
            raise ValueError(f"shape mismatch: weight {w.shape}, grad {g.shape}, state {m.shape}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient")
    state.t += 1
    c1 = 1 - beta1 ** state.t
    c2 = 1 - beta2 ** state.t
    for i, (w, g) in enumerate(zip(weights, grads)):
        if active is not None and not active[i]:
            continue
        m, v = state.m[i], state.v[i]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        w -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(w.dtype)


def exponential_lr(step: int, total: int, initial: float = 1e-3, final: float = 1e-5) -> float:
    """Geometric interpolation from ``initial`` at step 0 to ``final`` at the last step."""
    if total <= 1:
        return initial
    return initial * (final / initial) ** (step / (total - 1))


# training loop ------------------------------------------------------------------

@dataclass
class TrainRun:
    model: PredictorConfig = field(default_factory=PredictorConfig)
    seed: int = 0
    epochs: int = 10
    max_steps: int | None = None
    batch_size: int = 8
    lr_initial: float = 1e-3
    lr_final: float = 1e-5
    lr_decay: str = "exponential"
    train_size: int = 64
    augment: bool = True
    flip_prob: float = 0.5
    scale_range: tuple[float, float] = (0.75, 1.25)
    freeze_backbone_steps: int = 0
    log_every: int = 10
    val_every: int = 100

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = PredictorConfig.from_dict(self.model)
        self.scale_range = tuple(float(s) for s in self.scale_range)
        if self.lr_decay not in ("exponential", "constant"):
            raise ValueError(f"lr_decay must be 'exponential' or 'constant', got {self.lr_decay!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.train_size < 1:
            raise ValueError("epochs, batch_size and train_size must be positive")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be positive")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError("scale_range must be an increasing pair of positive factors")
        if not 0 <= self.flip_prob <= 1:
            raise ValueError("flip_prob must lie in [0, 1]")
        if self.lr_initial <= 0 or self.lr_final <= 0:
            raise ValueError("learning rates must be positive")

    def total_steps(self, n_train: int) -> int:
        steps = self.epochs * math.ceil(n_train / self.batch_size)
        return min(steps, self.max_steps) if self.max_steps else steps

    def lr(self, step: int, total: int) -> float:
        if self.lr_decay == "constant":
            return self.lr_initial
        return exponential_lr(step, total, self.lr_initial, self.lr_final)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["model"] = self.model.to_dict()
        d["scale_range"] = list(self.scale_range)
        return d

    @classmethod
    def from_dict(cls, d) -> "TrainRun":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainResult:
    model: ConnNetMini
    losses: list[float]
    val_history: list[tuple[int, float]]
    best_val_maxF: float | None
    best_weights: dict
    seconds: float


def probabilities(model: ConnNetMini, images: Sequence[np.ndarray], batch_size: int = 16):
    """Sigmoid outputs per image: ``(H, W, C)`` cubes for connectivity, ``(H, W)`` maps for SEG."""
    out = []
    cfg = model.config
    for i in range(0, len(images), batch_size):
        batch = np.stack(images[i:i + batch_size]).astype(model.dtype)
        probs = T._sigmoid(model.predict(batch))
        for p in probs:
            if cfg.head == "segmentation":
                out.append(p[0])
            else:
                out.append(ConnectivityCube.from_chw(p, cfg.pattern_kind))
    return out


def validate(model: ConnNetMini, images, masks, k: int = 1) -> dict:
    return evaluate_dataset(probabilities(model, images), masks, k=k)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(n)
        for i in range(0, n, batch_size):
            yield order[i:i + batch_size]


def train(images: Sequence[np.ndarray], masks: Sequence[np.ndarray], run: TrainRun,
          out_dir=None, val_images=None, val_masks=None, log=None) -> TrainResult:
    """Fit ConnNet-mini from scratch.

    Every ``log_every`` steps a row ``step,loss,val_maxF`` is appended to
    ``metrics.csv`` (``val_maxF`` filled on validation steps). The best
    checkpoint by validation max-F (or the final one without validation) is
    written to ``best.cnw1``, the last to ``last.cnw1``, and the run config to
    ``config.json``.
    """
    if len(images) != len(masks) or not images:
        raise ValueError("need a non-empty, equal number of images and masks")
    cfg = run.model
    rng = np.random.default_rng(run.seed)
    model = ConnNetMini(cfg, seed=run.seed)
    names = list(model.params)
    weights = [model.params[n].data for n in names]
    state = AdamState.zeros_like(weights)
    backbone = [n.startswith("backbone.") for n in names]
    has_val = val_images is not None and len(val_images) > 0
    total = run.total_steps(len(images))

    out = Path(out_dir) if out_dir is not None else None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(run.to_dict(), indent=2) + "\n")
        log_file = open(out / "metrics.csv", "w", newline="")
        writer = csv.writer(log_file)
        writer.writerow(["step", "loss", "val_maxF"])

    losses, val_history = [], []
    best_val, best_weights = -1.0, model.state_dict()
    start = time.perf_counter()
    batches = _batches(len(images), run.batch_size, rng)
    try:
        for step in range(total):
            idx = next(batches)
            xs, ms = [], []
            for i in idx:
                img, m = images[i], np.asarray(masks[i], dtype=bool)
                if run.augment:
                    img, m = augment(img, m, rng, run.train_size, run.flip_prob, run.scale_range)
                xs.append(img)
                ms.append(m)
            x = Tensor(np.stack(xs).astype(model.dtype))
            y = targets_for(ms, cfg)
            for p in model.parameters():
                p.zero_grad()
            loss = bce_loss(model(x), y)
            value = float(loss.data)
            if not math.isfinite(value):
                raise DivergenceError(f"loss became {value} at step {step}")
            loss.backward()
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in model.parameters()]
            active = None
            if step < run.freeze_backbone_steps:
                active = [not b for b in backbone]
            try:
                adam_step(weights, grads, state, run.lr(step, total), active=active)
            except DivergenceError as e:
                raise DivergenceError(f"{e} at step {step} (loss {value:.4g})") from None
            losses.append(value)

            last = step == total - 1
            val = None
            if has_val and ((step + 1) % run.val_every == 0 or last):
                val = validate(model, val_images, val_masks)["maxF"]
                val_history.append((step + 1, val))
                if val > best_val:
                    best_val, best_weights = val, model.state_dict()
            if writer is not None and ((step + 1) % run.log_every == 0 or last or val is not None):
                writer.writerow([step + 1, f"{value:.6g}", "" if val is None else f"{val:.6f}"])
            if log is not None and ((step + 1) % run.log_every == 0 or last):
                log(f"step {step + 1}/{total} loss {value:.4f}"
                    + ("" if val is None else f" val_maxF {val:.4f}"))
    finally:
        if writer is not None:
            log_file.close()

    if not has_val:
        best_weights = model.state_dict()
    if out is not None:
        save_weights(out / "best.cnw1", best_weights)
        save_weights(out / "last.cnw1", model.state_dict())
    return TrainResult(model, losses, val_history, best_val if has_val else None, best_weights,
                       time.perf_counter() - start)
