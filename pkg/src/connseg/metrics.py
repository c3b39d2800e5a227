"""Saliency evaluation: precision/recall, F-beta, max-F sweeps and mask AP."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .codec import ConnectivityCube
from .grid import shift

BETA2 = 0.3
DEFAULT_GRID = (np.arange(256) + 0.5) / 256


def threshold_grid(steps: int = 256) -> np.ndarray:
    """``steps`` uniform bin midpoints in (0, 1)."""
    return (np.arange(steps) + 0.5) / steps


@dataclass(frozen=True)
class PRPoint:
    threshold: float
    precision: float
    recall: float
    f_beta: float

    def as_dict(self):
        return asdict(self)


def f_beta(precision, recall, beta2: float = BETA2):
    p = np.asarray(precision, dtype=np.float64)
    r = np.asarray(recall, dtype=np.float64)
    if np.any((p < 0) | (p > 1) | (r < 0) | (r > 1)):
        raise ValueError("precision and recall must lie in [0, 1]")
    num = (1 + beta2) * p * r
    den = beta2 * p + r
    out = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return float(out) if out.ndim == 0 else out


def connectivity_saliency(cube: ConnectivityCube, k: int = 1) -> np.ndarray:
    """Per-pixel level at which the pixel stops being decoded as salient.

    ``decode(cube, t, k)`` equals ``connectivity_saliency(cube, k) > t`` for
    every ``t``: a connection survives threshold ``t`` iff the smaller of its
    two agreeing entries exceeds ``t``, and the pixel needs ``k`` of them.
    """
    v = cube.values.astype(np.float64)
    p = cube.pattern
    pair = np.empty_like(v)
    for c, (dr, dc) in enumerate(p.offsets):
        pair[..., c] = np.minimum(v[..., c], shift(v[..., p.opposite[c]], dr, dc, 0.0))
    # kth largest along channels
    return np.sort(pair, axis=-1)[..., -k]


def _as_score_map(pred, k: int = 1) -> np.ndarray:
    if isinstance(pred, ConnectivityCube):
        return connectivity_saliency(pred, k)
    a = np.asarray(pred, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a connectivity cube or a 2-D saliency map, got shape {a.shape}")
    return a


def precision_recall(score: np.ndarray, gt: np.ndarray, grid=DEFAULT_GRID):
    """Precision and recall of ``score > t`` against ``gt`` for every ``t`` in ``grid``.

    An empty prediction has precision 1 when the ground truth is also empty,
    else 0. An empty ground truth has recall 1.
    """
    gt = np.asarray(gt, dtype=bool)
    if score.shape != gt.shape:
        raise ValueError(f"prediction {score.shape} and ground truth {gt.shape} differ in shape")
    grid = np.asarray(grid, dtype=np.float64)
    all_sorted = np.sort(score, axis=None)
    fg_sorted = np.sort(score[gt], axis=None)
    n_pred = all_sorted.size - np.searchsorted(all_sorted, grid, side="right")
    tp = fg_sorted.size - np.searchsorted(fg_sorted, grid, side="right")
    n_gt = fg_sorted.size
    empty_precision = 1.0 if n_gt == 0 else 0.0
    precision = np.where(n_pred > 0, tp / np.maximum(n_pred, 1), empty_precision)
    recall = tp / n_gt if n_gt else np.ones_like(grid)
    return precision, recall


@dataclass(frozen=True)
class MaxF:
    max_f: float
    best_t: float
    curve: tuple[PRPoint, ...]


def _best(grid, p, r, beta2) -> MaxF:
    f = f_beta(p, r, beta2)
    i = int(np.argmax(f))
    curve = tuple(PRPoint(float(t), float(a), float(b), float(c)) for t, a, b, c in zip(grid, p, r, f))
    return MaxF(float(f[i]), float(grid[i]), curve)


def max_f_measure(pred, gt, grid=DEFAULT_GRID, beta2: float = BETA2, k: int = 1) -> MaxF:
    """Maximum F-beta over a threshold sweep for one image.

    ``pred`` is either a probability cube (decoded at each threshold) or a
    2-D saliency map in [0, 1].
    """
    grid = np.asarray(grid, dtype=np.float64)
    p, r = precision_recall(_as_score_map(pred, k), gt, grid)
    return _best(grid, p, r, beta2)


def evaluate_dataset(preds: Sequence, gts: Sequence, grid=DEFAULT_GRID, beta2: float = BETA2,
                     k: int = 1, names: Sequence[str] | None = None) -> dict:
    """Dataset max-F from precision and recall averaged per threshold.

    Also reports each image's own max-F and the max over thresholds of the
    mean per-image F.
    """
    if len(preds) != len(gts):
        raise ValueError("need one prediction per ground-truth mask")
    if not preds:
        raise ValueError("empty dataset")
    grid = np.asarray(grid, dtype=np.float64)
    ps, rs, fs, per_image = [], [], [], []
    for i, (pred, gt) in enumerate(zip(preds, gts)):
        p, r = precision_recall(_as_score_map(pred, k), gt, grid)
        f = f_beta(p, r, beta2)
        ps.append(p)
        rs.append(r)
        fs.append(f)
        j = int(np.argmax(f))
        per_image.append({
            "name": names[i] if names else str(i),
            "maxF": float(f[j]),
            "best_t": float(grid[j]),
        })
    best = _best(grid, np.mean(ps, axis=0), np.mean(rs, axis=0), beta2)
    mean_f = np.mean(fs, axis=0)
    return {
        "count": len(preds),
        "maxF": best.max_f,
        "best_t": best.best_t,
        "maxF_mean_per_image": float(mean_f.max()),
        "per_threshold": [pt.as_dict() for pt in best.curve],
        "per_image": per_image,
    }


def iou(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def _match(pred_masks, scores, gt_masks, iou_threshold):
    """Greedy matching in descending confidence; returns (scores, is_tp) in that order."""
    order = sorted(range(len(pred_masks)), key=lambda i: (-scores[i], i))
    taken = [False] * len(gt_masks)
    hits = []
    for i in order:
        best_j, best_iou = -1, iou_threshold
        for j, g in enumerate(gt_masks):
            if taken[j]:
                continue
            o = iou(pred_masks[i], g)
            if o >= best_iou and (best_j < 0 or o > best_iou):
                best_j, best_iou = j, o
        if best_j >= 0:
            taken[best_j] = True
        hits.append(best_j >= 0)
    return [scores[i] for i in order], hits


def _average_precision(hits: Sequence[bool], n_gt: int) -> float:
    """Area under the precision-recall staircase with all-point interpolation."""
    if n_gt == 0:
        return 0.0 if hits else 1.0
    if not hits:
        return 0.0
    tp = np.cumsum(hits)
    fp = np.cumsum(np.logical_not(hits))
    recall = np.concatenate([[0.0], tp / n_gt, [1.0]])
    precision = np.concatenate([[0.0], tp / (tp + fp), [0.0]])
    # precision envelope, right to left
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    steps = np.nonzero(recall[1:] != recall[:-1])[0]
    return float(np.sum((recall[steps + 1] - recall[steps]) * precision[steps + 1]))


def map_r(pred_masks: Sequence, scores: Sequence[float], gt_masks: Sequence,
          iou_threshold: float = 0.5) -> float:
    """Mask average precision for a single image at a fixed IoU threshold."""
    if len(pred_masks) != len(scores):
        raise ValueError("need one confidence per predicted mask")
    shapes = {np.shape(m) for m in list(pred_masks) + list(gt_masks)}
    if len(shapes) > 1:
        raise ValueError(f"all masks must share one shape, got {sorted(shapes)}")
    _, hits = _match(list(pred_masks), list(scores), list(gt_masks), iou_threshold)
    return _average_precision(hits, len(gt_masks))


def map_r_dataset(images: Sequence[tuple[Sequence, Sequence[float], Sequence]],
                  iou_threshold: float = 0.5) -> float:
    """AP over a dataset: matches are made per image, then all detections are ranked together."""
    ranked, n_gt = [], 0
    for idx, (pred_masks, scores, gt_masks) in enumerate(images):
        s, hits = _match(list(pred_masks), list(scores), list(gt_masks), iou_threshold)
        ranked.extend((-sc, idx, pos, h) for pos, (sc, h) in enumerate(zip(s, hits)))
        n_gt += len(gt_masks)
    ranked.sort()
    return _average_precision([h for *_, h in ranked], n_gt)
