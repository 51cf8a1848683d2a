"""Binary segmentation metrics: MAE, mIoU, S-measure, E-measure, weighted and
plain F-measures, plus dataset-level aggregation.

All per-image functions take a :class:`MaskPair` (float64 prediction in
[0, 1], boolean ground truth). Curves use the 256 thresholds ``k/255`` with a
pixel counted as foreground when ``pred >= threshold``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

log = logging.getLogger(__name__)

THRESHOLDS = np.arange(256, dtype=np.float64) / 255.0
BETA2_F = 0.3
BETA2_WF = 1.0
METRIC_NAMES = (
    "s_measure", "f_weighted", "e_mean", "mae",
    "miou", "e_adaptive", "f_adaptive", "f_mean", "f_max",
)
# headline columns first, optional columns after
CSV_COLUMNS = [("S", "s_measure"), ("Fw", "f_weighted"), ("E", "e_mean"), ("MAE", "mae")]
CSV_EXTENDED = [("mIoU", "miou"), ("E_adp", "e_adaptive"), ("F_adp", "f_adaptive"),
                ("F_mean", "f_mean"), ("F_max", "f_max")]


@dataclass(frozen=True)
class MaskPair:
    pred: np.ndarray
    gt: np.ndarray

    @classmethod
    def from_arrays(cls, pred, gt) -> "MaskPair":
        """Clamp ``pred`` to [0, 1]; binarize ``gt`` (uint8 at 128, otherwise > 0.5)."""
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
        if pred.ndim != 2:
            raise ValueError(f"masks must be 2-d, got {pred.shape}")
        if pred.dtype == np.uint8:
            pred = pred / 255.0
        pred = np.clip(pred.astype(np.float64), 0.0, 1.0)
        if gt.dtype == np.bool_:
            g = gt.copy()
        elif gt.dtype == np.uint8:
            g = gt >= 128
        else:
            g = gt > 0.5
        return cls(pred, g)


def _adaptive_threshold(pred: np.ndarray) -> float:
    return min(2.0 * float(pred.mean()), 1.0)


def mae(pair: MaskPair) -> float:
    return float(np.mean(np.abs(pair.pred - pair.gt)))


def miou(pair: MaskPair, threshold: float = 0.5) -> float:
    p = pair.pred >= threshold
    union = np.count_nonzero(p | pair.gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & pair.gt) / union


# --------------------------------------------------------------------------
# S-measure


def _s_object(values: np.ndarray) -> float:
    if values.size == 0:
        return 0.0
    mean = values.mean()
    std = values.std(ddof=1) if values.size > 1 else 0.0
    return 2.0 * mean / (mean * mean + 1.0 + std)


def _ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    n = pred.size
    x = pred.mean()
    y = gt.mean()
    if n > 1:
        sx = np.sum((pred - x) ** 2) / (n - 1)
        sy = np.sum((gt - y) ** 2) / (n - 1)
        sxy = np.sum((pred - x) * (gt - y)) / (n - 1)
    else:
        sx = sy = sxy = 0.0
    num = 4.0 * x * y * sxy
    den = (x * x + y * y) * (sx + sy)
    if num != 0:
        return num / den
    return 1.0 if den == 0 else 0.0


def s_measure(pair: MaskPair, alpha: float = 0.5) -> float:
    pred, gt = pair.pred, pair.gt
    y = gt.mean()
    if y == 0:
        return float(1.0 - pred.mean())
    if y == 1:
        return float(pred.mean())
    n = gt.size
    n_fg = np.count_nonzero(gt)
    s_obj = (n_fg * _s_object(pred[gt]) + (n - n_fg) * _s_object(1.0 - pred[~gt])) / n

    h, w = gt.shape
    cy, cx = np.argwhere(gt).mean(axis=0).round()
    cy, cx = int(cy) + 1, int(cx) + 1
    gtf = gt.astype(np.float64)
    acc = 0.0
    for rows in (slice(0, cy), slice(cy, h)):
        for cols in (slice(0, cx), slice(cx, w)):
            block = pred[rows, cols]
            if block.size:
                acc += block.size * _ssim(block, gtf[rows, cols])
    s_reg = acc / n
    return float(max(0.0, alpha * s_obj + (1.0 - alpha) * s_reg))


# --------------------------------------------------------------------------
# E-measure


def _enhanced_sum(fg_fg, fg_bg, n_gt, n):
    """Sum of the enhanced alignment matrix given counts (vectorized over thresholds).

    ``fg_fg``: predicted-fg pixels on gt-fg; ``fg_bg``: predicted-fg on gt-bg.
    """
    fg_fg = np.asarray(fg_fg, dtype=np.float64)
    fg_bg = np.asarray(fg_bg, dtype=np.float64)
    n_pred = fg_fg + fg_bg
    if n_gt == 0:
        return n - n_pred
    if n_gt == n:
        return n_pred
    bg_fg = n_gt - fg_fg
    bg_bg = (n - n_pred) - bg_fg
    mu_p = n_pred / n
    mu_g = n_gt / n
    total = np.zeros_like(fg_fg)
    for count, a, b in (
        (fg_fg, 1.0 - mu_p, 1.0 - mu_g),
        (fg_bg, 1.0 - mu_p, 0.0 - mu_g),
        (bg_fg, 0.0 - mu_p, 1.0 - mu_g),
        (bg_bg, 0.0 - mu_p, 0.0 - mu_g),
    ):
        # b is never zero here because 0 < mu_g < 1
        xi = 2.0 * a * b / (a * a + b * b)
        total = total + count * (xi + 1.0) ** 2 / 4.0
    return total


def e_measure_at(pair: MaskPair, threshold: float) -> float:
    fm = pair.pred >= threshold
    n = pair.gt.size
    s = _enhanced_sum(np.count_nonzero(fm & pair.gt), np.count_nonzero(fm & ~pair.gt),
                      np.count_nonzero(pair.gt), n)
    return float(s / n)


def _threshold_counts(pair: MaskPair):
    """Per threshold k: #(pred >= k/255) on gt-fg and on gt-bg."""
    # number of thresholds each pixel clears; exact comparison against k/255
    cleared = np.searchsorted(THRESHOLDS, pair.pred.ravel(), side="right")
    g = pair.gt.ravel()
    fg_hist = np.bincount(cleared[g], minlength=257)
    bg_hist = np.bincount(cleared[~g], minlength=257)
    # pixel with c cleared thresholds is fg for k < c
    fg_fg = np.cumsum(fg_hist[::-1])[::-1][1:]
    fg_bg = np.cumsum(bg_hist[::-1])[::-1][1:]
    return fg_fg, fg_bg


def e_curve(pair: MaskPair) -> np.ndarray:
    fg_fg, fg_bg = _threshold_counts(pair)
    n = pair.gt.size
    return _enhanced_sum(fg_fg, fg_bg, np.count_nonzero(pair.gt), n) / n


def e_measure(pair: MaskPair, mode: str = "mean") -> float:
    if mode == "mean":
        return float(e_curve(pair).mean())
    if mode == "adaptive":
        return e_measure_at(pair, _adaptive_threshold(pair.pred))
    raise ValueError(f"unknown E-measure mode {mode!r}")


# --------------------------------------------------------------------------
# F-measures


def _f_score(precision, recall, beta2):
    precision = np.asarray(precision, dtype=np.float64)
    recall = np.asarray(recall, dtype=np.float64)
    num = (1.0 + beta2) * precision * recall
    den = beta2 * precision + recall
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


@dataclass
class FMeasures:
    f_adaptive: float
    f_mean: float
    f_max: float
    precision: np.ndarray
    recall: np.ndarray


def f_measures(pair: MaskPair, beta2: float = BETA2_F) -> FMeasures:
    fg_fg, fg_bg = _threshold_counts(pair)
    n_gt = np.count_nonzero(pair.gt)
    pp = (fg_fg + fg_bg).astype(np.float64)
    precision = np.divide(fg_fg, pp, out=np.zeros_like(pp), where=pp > 0)
    recall = fg_fg / n_gt if n_gt else np.zeros_like(pp)
    curve = _f_score(precision, recall, beta2)

    b = pair.pred >= _adaptive_threshold(pair.pred)
    tp = np.count_nonzero(b & pair.gt)
    npred = np.count_nonzero(b)
    p_a = tp / npred if npred else 0.0
    r_a = tp / n_gt if n_gt else 0.0
    f_adp = float(_f_score(p_a, r_a, beta2))
    return FMeasures(f_adp, float(curve.mean()), float(curve.max()), precision, recall)


def _gaussian_kernel(size: int = 7, sigma: float = 5.0) -> np.ndarray:
    r = (size - 1) / 2.0
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    k = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    return k / k.sum()


_WF_KERNEL = _gaussian_kernel()


def f_weighted_detail(pair: MaskPair, beta2: float = BETA2_WF) -> tuple[float, bool]:
    """Weighted F-measure and a flag set when the ground truth has no foreground."""
    pred, gt = pair.pred, pair.gt
    if not gt.any():
        return 0.0, True
    # distance from each background pixel to its nearest foreground pixel
    dist, (iy, ix) = ndimage.distance_transform_edt(~gt, return_indices=True)
    err = np.abs(pred - gt)
    et = err.copy()
    bg = ~gt
    et[bg] = err[iy[bg], ix[bg]]
    ea = ndimage.correlate(et, _WF_KERNEL, mode="constant", cval=0.0)
    min_e = np.where(gt & (ea < err), ea, err)
    importance = np.where(gt, 1.0, 2.0 - np.exp(math.log(0.5) / 5.0 * dist))
    ew = min_e * importance
    tp = np.count_nonzero(gt) - ew[gt].sum()
    fp = ew[bg].sum()
    recall = 1.0 - ew[gt].mean()
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    return float(_f_score(precision, recall, beta2)), False


def f_weighted(pair: MaskPair) -> float:
    return f_weighted_detail(pair)[0]


# --------------------------------------------------------------------------
# per-image bundle and datasets


def all_metrics(pair: MaskPair, miou_threshold: float = 0.5) -> dict[str, float]:
    fm = f_measures(pair)
    wf, degenerate = f_weighted_detail(pair)
    return {
        "s_measure": s_measure(pair),
        "f_weighted": wf,
        "e_mean": e_measure(pair, "mean"),
        "mae": mae(pair),
        "miou": miou(pair, miou_threshold),
        "e_adaptive": e_measure(pair, "adaptive"),
        "f_adaptive": fm.f_adaptive,
        "f_mean": fm.f_mean,
        "f_max": fm.f_max,
        "degenerate_gt": degenerate,
    }


@dataclass
class MetricReport:
    name: str
    per_image: list[dict] = field(default_factory=list)
    missing: list[str] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.per_image)

    @property
    def means(self) -> dict[str, float]:
        out = {}
        for m in METRIC_NAMES:
            acc = 0.0
            for rec in self.per_image:  # records are kept in file-name order
                acc += rec[m]
            out[m] = acc / self.n if self.n else math.nan
        return out

    def to_dict(self) -> dict:
        return {
            "dataset": self.name,
            "n": self.n,
            "means": self.means,
            "per_image": self.per_image,
            "missing": self.missing,
            "errors": self.errors,
        }

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def csv_row(self, extended: bool = False) -> dict[str, str]:
        cols = CSV_COLUMNS + (CSV_EXTENDED if extended else [])
        means = self.means
        row = {"dataset": self.name, "n": str(self.n)}
        row.update({label: f"{means[key]:.3f}" for label, key in cols})
        return row


def write_csv(path: str | Path, reports: list[MetricReport], extended: bool = False) -> None:
    cols = ["dataset", "n"] + [label for label, _ in CSV_COLUMNS + (CSV_EXTENDED if extended else [])]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        writer.writeheader()
        for r in reports:
            writer.writerow(r.csv_row(extended))


def _index_dir(d: Path) -> dict[str, Path]:
    exts = {".png", ".jpg", ".jpeg", ".bmp"}
    return {p.stem: p for p in sorted(d.iterdir()) if p.suffix.lower() in exts}


def read_gray(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


def max_workers() -> int:
    try:
        return max(1, int(os.environ.get("UNEXT_THREADS", "1")))
    except ValueError:
        return 1


def evaluate_dataset(pred_dir, gt_dir, name: str | None = None, miou_threshold: float = 0.5,
                     threads: int | None = None) -> MetricReport:
    """Score every same-stem pred/gt pair; aggregates in lexicographic name order."""
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    preds, gts = _index_dir(pred_dir), _index_dir(gt_dir)
    names = sorted(set(preds) & set(gts))
    if not names:
        raise ValueError(f"no common mask names between {pred_dir} and {gt_dir}")
    report = MetricReport(name or gt_dir.parent.name or gt_dir.name)
    report.missing = sorted(set(preds) ^ set(gts))
    if report.missing:
        log.warning("%d files without a counterpart excluded: %s", len(report.missing), report.missing)

    def score(stem):
        p, g = read_gray(preds[stem]), read_gray(gts[stem])
        if p.shape != g.shape:
            return stem, None, f"{stem}: prediction {p.shape} vs ground truth {g.shape}"
        return stem, all_metrics(MaskPair.from_arrays(p, g), miou_threshold), None

    with ThreadPoolExecutor(max_workers=threads or max_workers()) as ex:
        results = list(ex.map(score, names))
    for stem, rec, err in results:
        if err:
            log.warning("size mismatch: %s", err)
            report.errors.append(err)
        else:
            report.per_image.append({"name": stem, **rec})
    return report
