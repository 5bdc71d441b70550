"""Classification metrics.

Multiclass: accuracy, macro precision, macro F1 and micro F1 (0/0 is taken as
0 for per-class precision/recall/F1). Multilabel: example-based accuracy
(mean Jaccard overlap, 1 when both sets are empty), label-based macro accuracy
and label-based micro F1.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

SCHEMA_VERSION = 1


@dataclass
class MetricsReport:
    task: str
    n_examples: int
    accuracy: float | None = None
    macro_precision: float | None = None
    macro_f1: float | None = None
    micro_f1: float | None = None
    example_acc: float | None = None
    label_macro_acc: float | None = None
    label_micro_f1: float | None = None
    loss: float | None = None
    confusion: list | None = None
    per_class: list = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self):
        return asdict(self)

    def headline(self):
        if self.task == "multiclass":
            keys = ("accuracy", "macro_precision", "macro_f1", "micro_f1")
        else:
            keys = ("example_acc", "label_macro_acc", "label_micro_f1")
        return {k: getattr(self, k) for k in keys}

    def table(self, class_names=None):
        """Aligned plain-text rendering."""
        lines = [f"{k:<16} {v:.4f}" for k, v in self.headline().items()]
        if self.per_class:
            lines.append("")
            lines.append(f"{'class':<16} {'prec':>7} {'recall':>7} {'f1':>7} {'support':>8}")
            for i, row in enumerate(self.per_class):
                name = class_names[i] if class_names else str(i)
                lines.append(f"{name:<16} {row['precision']:7.4f} {row['recall']:7.4f} "
                             f"{row['f1']:7.4f} {row['support']:8d}")
        return "\n".join(lines)


def _div(a, b):
    return np.divide(a, b, out=np.zeros(np.shape(a), dtype=np.float64), where=np.asarray(b) > 0)


def _f1(p, r):
    return _div(2 * p * r, p + r)


def confusion_matrix(y_true, y_pred, num_classes):
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def multiclass_metrics(y_true, y_pred, num_classes=None) -> MetricsReport:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.size == 0:
        raise ValueError("cannot evaluate an empty split")
    if num_classes is None:
        num_classes = int(max(y_true.max(), y_pred.max())) + 1
    cm = confusion_matrix(y_true, y_pred, num_classes)
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    precision = _div(tp, tp + fp)
    recall = _div(tp, tp + fn)
    f1 = _f1(precision, recall)
    # micro F1 from pooled counts; equals accuracy for single-label predictions
    micro_p = _div(tp.sum(), tp.sum() + fp.sum())
    micro_r = _div(tp.sum(), tp.sum() + fn.sum())
    per_class = [
        {"precision": float(precision[c]), "recall": float(recall[c]),
         "f1": float(f1[c]), "support": int(cm[c].sum())}
        for c in range(num_classes)
    ]
    return MetricsReport(
        task="multiclass",
        n_examples=int(y_true.size),
        accuracy=float(tp.sum() / y_true.size),
        macro_precision=float(precision.mean()),
        macro_f1=float(f1.mean()),
        micro_f1=float(_f1(micro_p, micro_r)),
        confusion=cm.tolist(),
        per_class=per_class,
    )


def multilabel_metrics(y_true, y_pred) -> MetricsReport:
    """``y_true``/``y_pred`` are 0/1 arrays of shape (N, C)."""
    t = np.asarray(y_true).astype(bool)
    p = np.asarray(y_pred).astype(bool)
    if t.shape[0] == 0:
        raise ValueError("cannot evaluate an empty split")
    if t.shape != p.shape:
        raise ValueError(f"label arrays differ in shape: {t.shape} vs {p.shape}")
    inter = (t & p).sum(axis=1)
    union = (t | p).sum(axis=1)
    jaccard = np.where(union == 0, 1.0, _div(inter, union))
    label_acc = (t == p).mean(axis=0)
    tp = (t & p).sum()
    fp = (~t & p).sum()
    fn = (t & ~p).sum()
    micro = _div(2.0 * tp, 2.0 * tp + fp + fn)
    # an all-empty prediction on all-empty truth is a perfect score
    if tp + fp + fn == 0:
        micro = 1.0
    tp_c = (t & p).sum(axis=0).astype(np.float64)
    prec_c = _div(tp_c, p.sum(axis=0))
    rec_c = _div(tp_c, t.sum(axis=0))
    per_class = [
        {"precision": float(prec_c[c]), "recall": float(rec_c[c]),
         "f1": float(_f1(prec_c[c], rec_c[c])), "support": int(t[:, c].sum())}
        for c in range(t.shape[1])
    ]
    return MetricsReport(
        task="multilabel",
        n_examples=int(t.shape[0]),
        example_acc=float(jaccard.mean()),
        label_macro_acc=float(label_acc.mean()),
        label_micro_f1=float(micro),
        per_class=per_class,
    )
