"""Confusion counts, classification metrics and fold aggregation.

The positive class is label ``1`` (patients). A metric whose denominator is
zero is reported as ``None`` rather than 0.
"""

from dataclasses import asdict, dataclass

import numpy as np

METRICS = ("accuracy", "sensitivity", "specificity", "precision", "f1")


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be nonnegative")

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn

    @classmethod
    def from_predictions(cls, y_true, y_pred, positive=1):
        t = np.asarray(y_true) == positive
        p = np.asarray(y_pred) == positive
        return cls(int(np.sum(t & p)), int(np.sum(~t & ~p)), int(np.sum(~t & p)), int(np.sum(t & ~p)))

    def to_dict(self):
        return asdict(self)


def _ratio(num, den):
    return None if den == 0 else num / den


def compute_metrics(cm):
    """Accuracy, sensitivity, specificity, precision and F1 from counts."""
    tp, tn, fp, fn = cm.tp, cm.tn, cm.fp, cm.fn
    return {
        "accuracy": _ratio(tp + tn, cm.total),
        "sensitivity": _ratio(tp, tp + fn),
        "specificity": _ratio(tn, tn + fp),
        "precision": _ratio(tp, tp + fp),
        "f1": _ratio(2 * tp, 2 * tp + fp + fn),
    }


def aggregate_folds(fold_metrics):
    """Mean and population std per metric, skipping undefined folds.

    Returns ``{"mean", "std", "undefined", "best_fold"}``; the best fold has
    the highest accuracy with ties going to the lower index.
    """
    if not fold_metrics:
        raise ValueError("need at least one fold")
    mean, std, undefined = {}, {}, {}
    for name in METRICS:
        vals = np.array([m[name] for m in fold_metrics if m[name] is not None], dtype=np.float64)
        undefined[name] = len(fold_metrics) - len(vals)
        mean[name] = float(vals.mean()) if len(vals) else None
        std[name] = float(vals.std()) if len(vals) else None
    acc = [-np.inf if m["accuracy"] is None else m["accuracy"] for m in fold_metrics]
    return {"mean": mean, "std": std, "undefined": undefined, "best_fold": int(np.argmax(acc))}
