"""Anticipation metrics: threshold crossings, time-to-accident, AP and mTTA."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .data_model import POSITIVE


@dataclass
class AnticipationResult:
    video_id: str
    probs: np.ndarray
    label: str
    toa: int
    fps: float

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 1:
            raise ValueError("probs must be one-dimensional")
        if np.any((self.probs < 0) | (self.probs > 1)) or not np.all(np.isfinite(self.probs)):
            raise ValueError(f"{self.video_id}: probabilities outside [0, 1]")

    @property
    def is_positive(self) -> bool:
        return self.label == POSITIVE


@dataclass
class PRPoint:
    threshold: float
    precision: float
    recall: float
    mean_tta: float | None
    tp: int
    fp: int
    fn: int
    tn: int


@dataclass
class MetricsReport:
    ap: float
    mtta: float
    tta_at_best_ap: float
    n_pos: int
    n_neg: int
    pr_curve: list[PRPoint] = field(default_factory=list)

    def to_json(self, pr_curve_path: str | None = None) -> dict:
        return {
            "ap": self.ap,
            "mtta_s": self.mtta,
            "tta_at_best_ap_s": self.tta_at_best_ap,
            "n_pos": self.n_pos,
            "n_neg": self.n_neg,
            "pr_curve_path": pr_curve_path,
        }


def crossing_frame(result: AnticipationResult, threshold: float) -> int | None:
    """First frame with p >= threshold; for accident clips only frames before toa count."""
    p = result.probs[: result.toa] if result.is_positive else result.probs
    hits = np.flatnonzero(p >= threshold)
    return int(hits[0]) if hits.size else None


def tta(result: AnticipationResult, threshold: float) -> float | None:
    if not result.is_positive:
        raise ValueError(f"{result.video_id}: time-to-accident is undefined for negative clips")
    t = crossing_frame(result, threshold)
    return None if t is None else (result.toa - t) / result.fps


def _thresholds(results) -> np.ndarray:
    values = np.unique(np.concatenate([r.probs for r in results] + [np.array([1.0])]))
    return values[::-1]


def evaluate(results: list[AnticipationResult]) -> MetricsReport:
    """Sweep every distinct probability as a threshold, high to low.

    AP is sum_k precision_k * (recall_k - recall_{k-1}) with recall_{-1} = 0.
    mTTA averages, over thresholds with at least one true positive, the mean TTA
    of that threshold's true positives.
    """
    if not results:
        raise ValueError("no results to evaluate")
    pos = [r for r in results if r.is_positive]
    neg = [r for r in results if not r.is_positive]
    if not pos or not neg:
        raise ValueError("evaluation needs at least one positive and one negative clip")
    ths = _thresholds(results)

    # first crossing of threshold th = first index where the running max reaches th
    pos_run = [np.maximum.accumulate(r.probs[: r.toa]) for r in pos]
    neg_max = np.array([r.probs.max() for r in neg])
    pos_toa = np.array([r.toa for r in pos], dtype=np.float64)
    pos_fps = np.array([r.fps for r in pos], dtype=np.float64)
    # [n_pos, n_thresholds] first crossing frame, len(run) when never crossed
    first = np.stack([np.searchsorted(run, ths, side="left") for run in pos_run])
    lengths = np.array([run.size for run in pos_run])[:, None]
    hit = first < lengths
    tta_s = (pos_toa[:, None] - first) / pos_fps[:, None]

    points = []
    ap, prev_recall = 0.0, 0.0
    for k, th in enumerate(ths):
        tp = int(hit[:, k].sum())
        fp = int((neg_max >= th).sum())
        fn, tn = len(pos) - tp, len(neg) - fp
        precision = tp / (tp + fp) if tp + fp else 1.0
        recall = tp / len(pos)
        mean_tta = float(tta_s[hit[:, k], k].mean()) if tp else None
        ap += precision * (recall - prev_recall)
        prev_recall = recall
        points.append(PRPoint(float(th), precision, recall, mean_tta, tp, fp, fn, tn))

    with_tp = [p for p in points if p.tp > 0]
    mtta = float(np.mean([p.mean_tta for p in with_tp])) if with_tp else 0.0
    if with_tp:
        best = max(with_tp, key=lambda p: (p.precision, p.recall))
        tta_best = best.mean_tta
    else:
        tta_best = 0.0
    return MetricsReport(ap=float(ap), mtta=mtta, tta_at_best_ap=float(tta_best), n_pos=len(pos), n_neg=len(neg), pr_curve=points)


def smooth(probs, sigma: float = 2.0) -> np.ndarray:
    """Gaussian smoothing for plotting; truncated at 4 sigma with reflective edges."""
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    return gaussian_filter1d(np.asarray(probs, dtype=np.float64), sigma, mode="reflect", truncate=4.0)


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def export_report(
    report: MetricsReport, results: list[AnticipationResult], out_dir: str | Path, sigma: float = 2.0
) -> dict[str, Path]:
    """Write metrics.json, pr_curve.csv and one curves/<video>.csv per clip."""
    if not results:
        raise ValueError("no results to export")
    out = Path(out_dir)
    (out / "curves").mkdir(parents=True, exist_ok=True)
    pr_path = out / "pr_curve.csv"
    with open(pr_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "precision", "recall", "mean_tta"])
        for p in report.pr_curve:
            w.writerow([_fmt(p.threshold), _fmt(p.precision), _fmt(p.recall), _fmt(p.mean_tta)])
    for r in results:
        with open(out / "curves" / f"{r.video_id}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "p_raw", "p_smoothed"])
            for t, (raw, sm) in enumerate(zip(r.probs, smooth(r.probs, sigma))):
                w.writerow([t, _fmt(raw), _fmt(sm)])
    metrics_path = out / "metrics.json"
    metrics_path.write_text(json.dumps(report.to_json(pr_path.name), indent=2) + "\n", encoding="utf-8")
    return {"metrics": metrics_path, "pr_curve": pr_path, "curves": out / "curves"}
