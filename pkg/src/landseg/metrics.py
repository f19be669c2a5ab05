"""Confusion matrices, precision/recall/F1, overall accuracy and report tables.

Confusion matrices are (K, K) int64 arrays with reference classes along the
rows and predicted classes along the columns.
"""

import csv

import numpy as np
from scipy import ndimage


def confusion(ref, pred, k, ignore_mask=None, ignore_class=None):
    """Count (reference, prediction) pairs over the non-ignored pixels."""
    ref = np.asarray(ref)
    pred = np.asarray(pred)
    if ref.shape != pred.shape:
        raise ValueError(f"reference {ref.shape} and prediction {pred.shape} differ in shape")
    keep = np.ones(ref.shape, dtype=bool)
    if ignore_mask is not None:
        ignore_mask = np.asarray(ignore_mask, dtype=bool)
        if ignore_mask.shape != ref.shape:
            raise ValueError(f"ignore mask {ignore_mask.shape} does not match labels {ref.shape}")
        keep &= ~ignore_mask
    if ignore_class is not None:
        keep &= ref != ignore_class
    r, p = ref[keep].astype(np.int64), pred[keep].astype(np.int64)
    for name, arr in (("reference", r), ("prediction", p)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise ValueError(f"{name} label out of range [0, {k}): found {arr.min()}..{arr.max()}")
    return np.bincount(r * k + p, minlength=k * k).reshape(k, k)


def accumulate(matrices):
    matrices = [np.asarray(m) for m in matrices]
    if not matrices:
        raise ValueError("nothing to accumulate")
    shape = matrices[0].shape
    for m in matrices:
        if m.shape != shape:
            raise ValueError(f"confusion matrix size mismatch: {m.shape} vs {shape}")
    return np.sum(matrices, axis=0)


def _ratio(num, den, present):
    if den > 0:
        return num / den
    return 0.0 if present else 1.0


def prf1(cm, c):
    """Precision, recall and F1 of class `c`.

    A zero denominator gives 0 when the class occurs in the reference or the
    prediction, and 1 when it is absent from both.
    """
    cm = np.asarray(cm)
    tp = cm[c, c]
    fp = cm[:, c].sum() - tp
    fn = cm[c, :].sum() - tp
    present = cm[c, :].sum() + cm[:, c].sum() > 0
    p = _ratio(tp, tp + fp, present)
    r = _ratio(tp, tp + fn, present)
    f1 = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return float(p), float(r), float(f1)


def overall_accuracy(cm):
    """Trace over total; 1 for an empty matrix."""
    cm = np.asarray(cm)
    total = cm.sum()
    return float(np.trace(cm) / total) if total else 1.0


def normalize_rows(cm):
    """Rows scaled to percentages of the reference count; empty rows stay zero."""
    cm = np.asarray(cm, dtype=np.float64)
    sums = cm.sum(axis=1, keepdims=True)
    return np.divide(100.0 * cm, sums, out=np.zeros_like(cm), where=sums > 0)


def erode_boundaries(labels, radius=1):
    """Ignore mask of pixels whose (2r+1)-square neighbourhood holds more than one label."""
    labels = np.asarray(labels)
    if radius < 0:
        raise ValueError(f"radius must be non-negative, got {radius}")
    if radius == 0:
        return np.zeros(labels.shape, dtype=bool)
    size = 2 * radius + 1
    hi = ndimage.maximum_filter(labels, size=size, mode="nearest")
    lo = ndimage.minimum_filter(labels, size=size, mode="nearest")
    return hi != lo


def class_report(cm, names, exclude=()):
    """Per-class rows {class, precision, recall, f1} for classes not in `exclude`."""
    rows = []
    for c, name in enumerate(names):
        if c in exclude:
            continue
        p, r, f1 = prf1(cm, c)
        rows.append({"class": name, "precision": p, "recall": r, "f1": f1})
    return rows


def format_f1_table(cm, names, exclude=(), label="model"):
    """One-row text table: F1 per reported class (in percent) and overall accuracy."""
    rows = class_report(cm, names, exclude)
    heads = [r["class"] for r in rows] + ["OA"]
    vals = [f"{100 * r['f1']:.1f}" for r in rows] + [f"{100 * overall_accuracy(cm):.1f}"]
    widths = [max(len(h), len(v)) for h, v in zip(heads, vals)]
    lw = max(len(label), 5)
    head = " | ".join([" " * lw] + [h.rjust(w) for h, w in zip(heads, widths)])
    line = " | ".join([label.ljust(lw)] + [v.rjust(w) for v, w in zip(vals, widths)])
    return head + "\n" + "-" * len(head) + "\n" + line + "\n"


def format_confusion_table(cm, names, exclude=()):
    """Row-normalized confusion matrix over the reported classes as aligned text."""
    keep = [c for c in range(len(names)) if c not in exclude]
    sub = np.asarray(cm)[np.ix_(keep, keep)]
    pct = normalize_rows(sub)
    labels = [names[c] for c in keep]
    w = max(8, max(len(n) for n in labels))
    out = ["ref \\ pred".ljust(w) + " | " + " | ".join(n.rjust(w) for n in labels)]
    out.append("-" * len(out[0]))
    for name, row in zip(labels, pct):
        out.append(name.ljust(w) + " | " + " | ".join(f"{v:.2f}".rjust(w) for v in row))
    return "\n".join(out) + "\n"


def write_metrics_csv(path, cm, names, exclude=()):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "precision", "recall", "f1"])
        for r in class_report(cm, names, exclude):
            w.writerow([r["class"], f"{r['precision']:.6f}", f"{r['recall']:.6f}", f"{r['f1']:.6f}"])
        w.writerow(["OA", "", "", f"{overall_accuracy(cm):.6f}"])


def write_confusion_csv(path, cm, names):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["reference"] + list(names))
        for name, row in zip(names, np.asarray(cm)):
            w.writerow([name] + [int(v) for v in row])
