"""Anomaly-ranking metrics (AUROC, AUPR, FPR at 95% recall) and
segmentation IoU reports.

Ranking metrics sweep thresholds over the distinct scores in descending
order with tied scores grouped; AUROC gives half credit to ties
(trapezoidal, equal to the Mann-Whitney statistic) and AUPR is average
precision over the grouped recall steps.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeMismatch

IGNORE_ID = 255


def _validated(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ShapeMismatch("scored pixels", scores.shape, labels.shape)
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be binary (1 = anomalous)")
    return scores, labels.astype(np.int64)


def _grouped_counts(scores, labels):
    """Cumulative TP/FP after each distinct score, descending."""
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    # boundaries where the score changes
    last_in_group = np.nonzero(np.diff(s))[0]
    idx = np.concatenate([last_in_group, [s.size - 1]])
    tp = np.cumsum(y)[idx]
    fp = np.cumsum(1 - y)[idx]
    return s[idx], tp.astype(np.float64), fp.astype(np.float64)


def auroc(scores, labels) -> float:
    """Probability a random anomalous pixel outscores a clean one, ties at
    half credit."""
    scores, labels = _validated(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both classes present")
    _, tp, fp = _grouped_counts(scores, labels)
    tpr = np.concatenate([[0.0], tp]) / n_pos
    fpr = np.concatenate([[0.0], fp]) / n_neg
    return float(np.sum(np.diff(fpr) * (tpr[:-1] + tpr[1:]) / 2.0))


def aupr(scores, labels) -> float:
    """Average precision: sum of precision * recall-step at grouped
    thresholds."""
    scores, labels = _validated(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("AUPR needs at least one anomalous pixel")
    _, tp, fp = _grouped_counts(scores, labels)
    precision = tp / (tp + fp)
    recall = tp / n_pos
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(precision * steps))


def fpr_at_95_tpr(scores, labels, tpr_target: float = 0.95) -> float:
    """False-positive rate at the first grouped threshold whose recall
    reaches the target."""
    scores, labels = _validated(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("FPR@TPR needs both classes present")
    _, tp, fp = _grouped_counts(scores, labels)
    tpr = tp / n_pos
    hit = int(np.argmax(tpr >= tpr_target))
    return float(fp[hit] / n_neg)


@dataclass
class IouReport:
    per_class: dict[int, float | None] = field(default_factory=dict)
    miou: float | None = None
    miou_old: float | None = None
    miou_novel: float | None = None
    miou_harm: float | None = None

    def as_dict(self) -> dict:
        return {
            "per_class": {str(k): v for k, v in self.per_class.items()},
            "miou": self.miou,
            "miou_old": self.miou_old,
            "miou_novel": self.miou_novel,
            "miou_harm": self.miou_harm,
        }


def harmonic_miou(old: float, novel: float) -> float:
    """2ab/(a+b), the balance index between old- and novel-class mIoU."""
    if old + novel == 0.0:
        return 0.0
    return 2.0 * old * novel / (old + novel)


def _mean_defined(values):
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else None


def format_iou_table(report: IouReport, class_names: dict[int, str] | None = None) -> str:
    """Aligned plain-text rendering: one column per class, then the mean
    columns (old / novel / harmonic), IoU values in percent."""
    names = class_names or {}
    cids = sorted(report.per_class)
    headers = [names.get(c, f"c{c}") for c in cids] + ["mIoU", "mIoU_old", "mIoU_novel", "mIoU_harm"]
    values = [report.per_class[c] for c in cids] + [report.miou, report.miou_old,
                                                    report.miou_novel, report.miou_harm]
    cells = ["-" if v is None else f"{100.0 * v:.1f}" for v in values]
    widths = [max(len(h), len(c)) for h, c in zip(headers, cells)]
    header_row = "  ".join(h.rjust(w) for h, w in zip(headers, widths))
    value_row = "  ".join(c.rjust(w) for c, w in zip(cells, widths))
    return header_row + "\n" + value_row + "\n"


def iou_report(pred, gt, old_ids, novel_ids) -> IouReport:
    """Per-class intersection over union, ignoring gt pixels marked 255.

    Classes absent from both maps are undefined and excluded from every
    mean.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeMismatch("iou_report", pred.shape, gt.shape)
    old_ids = [int(c) for c in old_ids]
    novel_ids = [int(c) for c in novel_ids]
    keep = gt != IGNORE_ID
    p = pred[keep]
    g = gt[keep]

    report = IouReport()
    for cid in old_ids + novel_ids:
        in_p = p == cid
        in_g = g == cid
        union = int(np.sum(in_p | in_g))
        if union == 0:
            report.per_class[cid] = None
            continue
        inter = int(np.sum(in_p & in_g))
        report.per_class[cid] = inter / union

    report.miou = _mean_defined([report.per_class[c] for c in old_ids + novel_ids])
    report.miou_old = _mean_defined([report.per_class[c] for c in old_ids])
    report.miou_novel = _mean_defined([report.per_class[c] for c in novel_ids])
    if report.miou_old is not None and report.miou_novel is not None:
        report.miou_harm = harmonic_miou(report.miou_old, report.miou_novel)
    return report
