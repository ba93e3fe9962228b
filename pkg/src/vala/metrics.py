"""Label-based mA and instance/label-based accuracy, precision, recall, F1."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np


def _as_bits(a) -> np.ndarray:
    arr = np.asarray(a)
    if arr.ndim != 2:
        raise ValueError(f"expected an N x K 0/1 matrix, got shape {arr.shape}")
    return arr.astype(bool)


def _check_pair(preds, labels) -> tuple[np.ndarray, np.ndarray]:
    p, y = _as_bits(preds), _as_bits(labels)
    if p.shape != y.shape:
        raise ValueError(f"preds {p.shape} and labels {y.shape} differ in shape")
    return p, y


def attribute_counters(preds, labels) -> dict[str, np.ndarray]:
    p, y = _check_pair(preds, labels)
    return {
        "TP": (p & y).sum(axis=0),
        "TN": (~p & ~y).sum(axis=0),
        "FP": (p & ~y).sum(axis=0),
        "FN": (~p & y).sum(axis=0),
    }


def mean_accuracy_detail(preds, labels) -> tuple[float, list[int]]:
    """mA plus the indices of attributes lacking positives or negatives.

    An attribute with no positives (or no negatives) contributes only its
    defined ratio; the average is taken over defined ratios.
    """
    c = attribute_counters(preds, labels)
    pos = c["TP"] + c["FN"]
    neg = c["TN"] + c["FP"]
    ratios = []
    flagged = []
    for i in range(len(pos)):
        if pos[i] > 0:
            ratios.append(c["TP"][i] / pos[i])
        if neg[i] > 0:
            ratios.append(c["TN"][i] / neg[i])
        if pos[i] == 0 or neg[i] == 0:
            flagged.append(i)
    if not ratios:
        return float("nan"), flagged
    return float(np.mean(ratios)), flagged


def mean_accuracy(preds, labels) -> float:
    return mean_accuracy_detail(preds, labels)[0]


def _ratio(num, den, other_empty) -> np.ndarray:
    # 0/0 -> 1 when the complementary set is also empty, else 0
    safe = np.where(den > 0, den, 1)
    return np.where(den > 0, num / safe, np.where(other_empty, 1.0, 0.0))


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def instance_metrics(preds, labels, mode: str = "example_based") -> tuple[float, float, float, float]:
    """``(accuracy, precision, recall, f1)``.

    ``example_based`` averages set ratios per example; ``label_based``
    averages per-attribute counter ratios.  F1 is taken from the averaged
    precision and recall in both modes.
    """
    p, y = _check_pair(preds, labels)
    if mode == "example_based":
        axis = 1
    elif mode == "label_based":
        axis = 0
    else:
        raise ValueError(f"mode must be 'example_based' or 'label_based', got {mode!r}")
    if p.size == 0:
        return 1.0, 1.0, 1.0, 1.0
    inter = (p & y).sum(axis=axis)
    union = (p | y).sum(axis=axis)
    n_pred = p.sum(axis=axis)
    n_true = y.sum(axis=axis)
    if mode == "example_based":
        acc = _ratio(inter, union, True)
    else:
        acc = ((p == y).sum(axis=0)) / p.shape[0]
    prec = _ratio(inter, n_pred, n_true == 0)
    rec = _ratio(inter, n_true, n_pred == 0)
    P, R = float(prec.mean()), float(rec.mean())
    return float(acc.mean()), P, R, _f1(P, R)


@dataclass
class MetricsReport:
    mA: float
    accuracy: float
    precision: float
    recall: float
    f1: float
    n: int
    counters: dict[str, list[int]] = field(default_factory=dict)
    label_based: dict[str, float] = field(default_factory=dict)
    flagged_attributes: list[int] = field(default_factory=list)
    view_accuracy: float | None = None
    view_confusion: list[list[int]] | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)


def view_confusion(pred_views, true_views, num_classes: int = 4) -> np.ndarray:
    """Rows: true view, columns: predicted view."""
    m = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(m, (np.asarray(true_views, dtype=np.int64), np.asarray(pred_views, dtype=np.int64)), 1)
    return m


def compute_report(preds, labels, pred_views=None, true_views=None) -> MetricsReport:
    p, y = _check_pair(preds, labels)
    ma, flagged = mean_accuracy_detail(p, y)
    acc, prec, rec, f1 = instance_metrics(p, y, "example_based")
    lacc, lprec, lrec, lf1 = instance_metrics(p, y, "label_based")
    counters = {k: v.astype(int).tolist() for k, v in attribute_counters(p, y).items()}
    report = MetricsReport(
        mA=ma,
        accuracy=acc,
        precision=prec,
        recall=rec,
        f1=f1,
        n=int(p.shape[0]),
        counters=counters,
        label_based={"accuracy": lacc, "precision": lprec, "recall": lrec, "f1": lf1},
        flagged_attributes=flagged,
    )
    if pred_views is not None and true_views is not None:
        tv = np.asarray(true_views)
        known = tv >= 0
        if known.any():
            pv = np.asarray(pred_views)[known]
            cm = view_confusion(pv, tv[known])
            report.view_confusion = cm.tolist()
            report.view_accuracy = float(np.trace(cm) / cm.sum())
    return report
