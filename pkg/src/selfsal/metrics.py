"""Saliency evaluation: MAE, threshold-swept F-score, PR curves.

Predictions are real maps in [0,1]; ground truth is binary. Counts are
taken at 256 uniform thresholds i/256 (i = 0..255), binarizing with
``pred >= threshold``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigurationError

NUM_THRESHOLDS = 256


def thresholds() -> np.ndarray:
    return np.arange(NUM_THRESHOLDS, dtype=np.float64) / NUM_THRESHOLDS


@dataclass
class MetricsReport:
    mae_mean: float
    f_beta_mean: float
    per_image: list           # dicts: id, mae, f_beta
    pr_curve: list            # (threshold, precision, recall)
    beta2: float


def _check_pair(pred, gt):
    if pred.shape != gt.shape:
        raise ConfigurationError(
            f"prediction {tuple(pred.shape)} vs ground truth {tuple(gt.shape)}")


def mae(pred: torch.Tensor, gt: torch.Tensor) -> float:
    """Mean absolute pixel error."""
    _check_pair(pred, gt)
    return float((pred.double() - gt.double()).abs().mean())


def _counts(pred: np.ndarray, gt: np.ndarray) -> tuple:
    """Per-threshold TP/FP/FN for one image, vectorized over thresholds."""
    binary = pred[None] >= thresholds()[:, None]      # (T, N)
    positive = gt[None].astype(bool)
    tp = np.count_nonzero(binary & positive, axis=1)
    fp = np.count_nonzero(binary & ~positive, axis=1)
    fn = np.count_nonzero(~binary & positive, axis=1)
    return tp, fp, fn


def _f_from_counts(tp, fp, fn, beta2: float) -> np.ndarray:
    tp = tp.astype(np.float64)
    prec = np.divide(tp, tp + fp, out=np.zeros_like(tp), where=(tp + fp) > 0)
    rec = np.divide(tp, tp + fn, out=np.zeros_like(tp), where=(tp + fn) > 0)
    num = (1.0 + beta2) * prec * rec
    den = beta2 * prec + rec
    f = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    empty_match = ((tp + fp) == 0) & ((tp + fn) == 0)
    f[empty_match] = 1.0
    return f


def f_beta(pred: torch.Tensor, gt: torch.Tensor, beta2: float = 0.3,
           fixed_threshold: float | None = None) -> float:
    """Weighted F-score, averaged over the threshold sweep.

    With ``fixed_threshold`` the score is evaluated at that single
    binarization instead. Empty prediction on empty ground truth counts
    as a perfect match (F = 1).
    """
    _check_pair(pred, gt)
    p = pred.detach().cpu().numpy().astype(np.float64).ravel()
    g = gt.detach().cpu().numpy().astype(np.float64).ravel()
    if fixed_threshold is not None:
        binary = p >= fixed_threshold
        pos = g.astype(bool)
        tp = np.array([np.count_nonzero(binary & pos)])
        fp = np.array([np.count_nonzero(binary & ~pos)])
        fn = np.array([np.count_nonzero(~binary & pos)])
        return float(_f_from_counts(tp, fp, fn, beta2)[0])
    tp, fp, fn = _counts(p, g)
    return float(_f_from_counts(tp, fp, fn, beta2).mean())


def pr_curve(preds: list, gts: list) -> list:
    """Corpus-aggregated precision/recall per threshold.

    Counts are summed over all images before forming the ratios; empty
    predictions take precision 1, empty ground truth takes recall 0.
    """
    if len(preds) != len(gts):
        raise ConfigurationError("prediction / ground-truth list lengths differ")
    total_tp = np.zeros(NUM_THRESHOLDS, dtype=np.int64)
    total_fp = np.zeros(NUM_THRESHOLDS, dtype=np.int64)
    total_fn = np.zeros(NUM_THRESHOLDS, dtype=np.int64)
    for pred, gt in zip(preds, gts):
        _check_pair(pred, gt)
        p = pred.detach().cpu().numpy().astype(np.float64).ravel()
        g = gt.detach().cpu().numpy().astype(np.float64).ravel()
        tp, fp, fn = _counts(p, g)
        total_tp += tp
        total_fp += fp
        total_fn += fn
    curve = []
    for thr, tp, fp, fn in zip(thresholds(), total_tp, total_fp, total_fn):
        prec = tp / (tp + fp) if tp + fp > 0 else 1.0
        rec = tp / (tp + fn) if tp + fn > 0 else 0.0
        curve.append((float(thr), float(prec), float(rec)))
    return curve


def mean_f_from_curve(curve: list, beta2: float = 0.3) -> float:
    """Mean F over the aggregated curve's thresholds."""
    values = []
    for _, prec, rec in curve:
        den = beta2 * prec + rec
        values.append((1.0 + beta2) * prec * rec / den if den > 0 else 0.0)
    return float(np.mean(values))


def evaluate_corpus(ids: list, preds: list, gts: list, beta2: float = 0.3,
                    fixed_threshold: float | None = None) -> MetricsReport:
    """Corpus metrics: per-image rows plus aggregated means.

    The corpus F-score averages per-threshold F over the aggregated
    curve; with ``fixed_threshold`` it is the single-threshold F on the
    aggregated counts instead.
    """
    per_image = []
    for image_id, pred, gt in zip(ids, preds, gts):
        per_image.append({
            "id": image_id,
            "mae": mae(pred, gt),
            "f_beta": f_beta(pred, gt, beta2, fixed_threshold),
        })
    curve = pr_curve(preds, gts)
    if fixed_threshold is None:
        f_mean = mean_f_from_curve(curve, beta2)
    else:
        tp = fp = fn = 0
        for pred, gt in zip(preds, gts):
            p = pred.detach().cpu().numpy().astype(np.float64).ravel()
            pos = gt.detach().cpu().numpy().astype(bool).ravel()
            binary = p >= fixed_threshold
            tp += int(np.count_nonzero(binary & pos))
            fp += int(np.count_nonzero(binary & ~pos))
            fn += int(np.count_nonzero(~binary & pos))
        f_mean = float(_f_from_counts(np.array([tp]), np.array([fp]),
                                      np.array([fn]), beta2)[0])
    return MetricsReport(
        mae_mean=float(np.mean([r["mae"] for r in per_image])),
        f_beta_mean=f_mean,
        per_image=per_image,
        pr_curve=curve,
        beta2=beta2,
    )


def write_metrics_json(report: MetricsReport, path) -> None:
    payload = {
        "mae_mean": report.mae_mean,
        "f_beta_mean": report.f_beta_mean,
        "beta2": report.beta2,
        "per_image": report.per_image,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def write_pr_csv(curve: list, path) -> None:
    with open(path, "w") as fh:
        fh.write("threshold,precision,recall\n")
        for thr, prec, rec in curve:
            fh.write(f"{thr:.10g},{prec:.10g},{rec:.10g}\n")
