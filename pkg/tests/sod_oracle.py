"""Independent metric oracle built on pysodmetrics plus two numpy one-liners."""

import warnings

import numpy as np
import py_sod_metrics as psm


def oracle_metrics(pred: np.ndarray, gt: np.ndarray, threshold: float = 0.5) -> dict[str, float]:
    """``pred`` float64 in [0, 1], ``gt`` bool; same keys as ``all_metrics``."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        f = psm.Fmeasure()
    s, e, w, m = psm.Smeasure(), psm.Emeasure(), psm.WeightedFmeasure(), psm.MAE()
    for metric in (s, e, f, w, m):
        metric.step(pred, gt, normalize=False)
    em, fm = e.get_results()["em"], f.get_results()["fm"]
    # the reference divides the alignment sum by N - 1 + eps; ours divides by N
    n = gt.size
    scale = (n - 1 + np.spacing(1)) / n
    p = pred >= threshold
    union = np.count_nonzero(p | gt)
    return {
        "s_measure": float(s.get_results()["sm"]),
        "f_weighted": float(w.get_results()["wfm"]),
        "e_mean": float(em["curve"].mean() * scale),
        "mae": float(m.get_results()["mae"]),
        "miou": 1.0 if union == 0 else np.count_nonzero(p & gt) / union,
        "e_adaptive": float(em["adp"] * scale),
        "f_adaptive": float(fm["adp"]),
        "f_mean": float(fm["curve"].mean()),
        "f_max": float(fm["curve"].max()),
    }


def seeded_pair(i: int, size: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Pair ``i`` of the fixed corpus: random gt, uniform pred on even i, gt-correlated on odd i."""
    rng = np.random.default_rng([2024, i])
    gt = rng.random((size, size)) < rng.uniform(0.1, 0.6)
    pred = rng.random((size, size))
    if i % 2:
        pred = np.clip(0.6 * gt + 0.4 * pred, 0.0, 1.0)
    return pred, gt
