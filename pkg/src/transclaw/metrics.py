"""Segmentation evaluation: per-class Dice, average Hausdorff distance over
boundary pixels, HD95, and report assembly.

A class absent from both prediction and truth has no defined score; such
entries carry NaN and are excluded from means (the defined-class count is
reported alongside). Distances are in pixel units.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, no_grad


def dice_per_class(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> np.ndarray:
    """Dice coefficient 2|P∩T| / (|P|+|T|) for every class index.

    Returns an array of length ``num_classes``; NaN marks classes absent from
    both masks (excluded from means downstream, never scored as 1).
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"dice: mask extents {pred.shape} and {truth.shape} differ")
    if pred.size and (int(pred.max()) >= num_classes or int(truth.max()) >= num_classes
                      or int(pred.min()) < 0 or int(truth.min()) < 0):
        raise ShapeError(f"dice: class index outside [0, {num_classes})")
    out = np.full(num_classes, np.nan)
    for k in range(num_classes):
        p = pred == k
        t = truth == k
        denom = int(p.sum()) + int(t.sum())
        if denom:
            out[k] = 2.0 * int((p & t).sum()) / denom
    return out


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Coordinates (row, col) of mask pixels 4-adjacent to a non-mask pixel.

    Pixels outside the image count as non-mask, so masks touching the border
    contribute their border pixels.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ShapeError(f"boundary_pixels: expected 2-D mask, got {mask.shape}")
    padded = np.pad(mask, 1)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] &
                padded[1:-1, :-2] & padded[1:-1, 2:])
    return np.argwhere(mask & ~interior)


def _directed_min_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    # min Euclidean distance from every src point to the dst set
    out = np.empty(len(src))
    step = 512
    dst = dst.astype(np.float64)
    for i in range(0, len(src), step):
        block = src[i:i + step].astype(np.float64)
        d2 = ((block[:, None, :] - dst[None, :, :]) ** 2).sum(axis=2)
        out[i:i + step] = np.sqrt(d2.min(axis=1))
    return out


def average_hausdorff(pred_mask: np.ndarray, truth_mask: np.ndarray) -> float:
    """Max over directions of the mean nearest-neighbor boundary distance.

    NaN when either mask is empty.
    """
    bp = boundary_pixels(pred_mask)
    bt = boundary_pixels(truth_mask)
    if len(bp) == 0 or len(bt) == 0:
        return float("nan")
    forward = _directed_min_distances(bp, bt).mean()
    reverse = _directed_min_distances(bt, bp).mean()
    return float(max(forward, reverse))


def hd95(pred_mask: np.ndarray, truth_mask: np.ndarray) -> float:
    """Nearest-rank 95th percentile of the pooled directed boundary distances."""
    bp = boundary_pixels(pred_mask)
    bt = boundary_pixels(truth_mask)
    if len(bp) == 0 or len(bt) == 0:
        return float("nan")
    pooled = np.sort(np.concatenate([
        _directed_min_distances(bp, bt),
        _directed_min_distances(bt, bp),
    ]))
    rank = max(int(np.ceil(0.95 * len(pooled))), 1) - 1
    return float(pooled[rank])


def _nan_mean(values: np.ndarray) -> tuple[float, int]:
    defined = values[~np.isnan(values)]
    if len(defined) == 0:
        return float("nan"), 0
    return float(defined.mean()), int(len(defined))


@dataclass
class EvalReport:
    """Per-class Dice/Hausdorff statistics over foreground classes, plus
    means over the defined classes."""

    class_labels: list[int]
    dice: np.ndarray
    ahd: np.ndarray
    hd95: np.ndarray
    mean_dice: float = field(init=False)
    mean_ahd: float = field(init=False)
    mean_hd95: float = field(init=False)
    defined_dice: int = field(init=False)
    defined_hd: int = field(init=False)

    def __post_init__(self):
        self.mean_dice, self.defined_dice = _nan_mean(self.dice)
        self.mean_ahd, self.defined_hd = _nan_mean(self.ahd)
        self.mean_hd95, _ = _nan_mean(self.hd95)

    @staticmethod
    def _cell(v: float) -> str:
        return "n/a" if np.isnan(v) else f"{v:.6f}"

    def to_csv(self) -> str:
        lines = ["class,dice,ahd,hd95"]
        for i, label in enumerate(self.class_labels):
            lines.append(f"{label},{self._cell(self.dice[i])},"
                         f"{self._cell(self.ahd[i])},{self._cell(self.hd95[i])}")
        lines.append(f"mean,{self._cell(self.mean_dice)},"
                     f"{self._cell(self.mean_ahd)},{self._cell(self.mean_hd95)}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        total = len(self.class_labels)
        lines = [
            f"mean DSC {self._cell(self.mean_dice)}  "
            f"mean AHD {self._cell(self.mean_ahd)}  "
            f"mean HD95 {self._cell(self.mean_hd95)}  "
            f"(defined classes: dice {self.defined_dice}/{total}, "
            f"hd {self.defined_hd}/{total})",
            f"{'class':>6} {'dice':>10} {'ahd':>10} {'hd95':>10}",
        ]
        for i, label in enumerate(self.class_labels):
            lines.append(f"{label:>6} {self._cell(self.dice[i]):>10} "
                         f"{self._cell(self.ahd[i]):>10} {self._cell(self.hd95[i]):>10}")
        return "\n".join(lines) + "\n"


def predict_mask(model, image: np.ndarray) -> np.ndarray:
    """Argmax class map for one (C, H, W) image under a frozen model."""
    return predict_masks(model, image[None])[0]


def predict_masks(model, images: np.ndarray) -> np.ndarray:
    """Argmax class maps for a (B, C, H, W) stack under a frozen model."""
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            logits = model(Tensor(np.asarray(images)))
        return logits.data.argmax(axis=1).astype(np.uint8)
    finally:
        model.train(was_training)


def evaluate(model, samples: Sequence, batch_size: int = 8,
             num_classes: Optional[int] = None) -> EvalReport:
    """Per-class metrics of a frozen model over a dataset, averaged over the
    samples where each class is defined; deterministic iteration order."""
    if not samples:
        raise ShapeError("evaluate: empty sample list")
    K = num_classes if num_classes is not None else model.config.num_classes
    labels = list(range(1, K))  # foreground classes; background is not reported
    per_sample_dice = []
    per_sample_ahd = []
    per_sample_hd95 = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        images = np.stack([s.image for s in chunk])
        preds = predict_masks(model, images)
        for pred, sample in zip(preds, chunk):
            d = dice_per_class(pred, sample.mask, K)
            per_sample_dice.append(d[1:])
            a_row, h_row = [], []
            for k in labels:
                a_row.append(average_hausdorff(pred == k, sample.mask == k))
                h_row.append(hd95(pred == k, sample.mask == k))
            per_sample_ahd.append(a_row)
            per_sample_hd95.append(h_row)

    dice = _column_nanmean(np.asarray(per_sample_dice))
    ahd = _column_nanmean(np.asarray(per_sample_ahd))
    h95 = _column_nanmean(np.asarray(per_sample_hd95))
    return EvalReport(class_labels=labels, dice=dice, ahd=ahd, hd95=h95)


def _column_nanmean(arr: np.ndarray) -> np.ndarray:
    out = np.full(arr.shape[1], np.nan)
    for j in range(arr.shape[1]):
        col = arr[:, j]
        defined = col[~np.isnan(col)]
        if len(defined):
            out[j] = defined.mean()
    return out
