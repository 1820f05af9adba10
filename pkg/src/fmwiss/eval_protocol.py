"""Confusion-matrix bookkeeping, per-class IoU, and grouped mIoU reports."""

import json

import numpy as np

from .errors import IdOutOfRange


class ConfusionMatrix:
    """Square count matrix over [background] + foreground class ids.

    Rows are ground truth, columns predictions. Per-image matrices can be
    computed in parallel and merged with `+`.
    """

    def __init__(self, class_ids):
        self.class_ids = [0] + [int(c) for c in class_ids if int(c) != 0]
        self._index = {cid: i for i, cid in enumerate(self.class_ids)}
        n = len(self.class_ids)
        self.counts = np.zeros((n, n), dtype=np.int64)

    def __add__(self, other):
        if other.class_ids != self.class_ids:
            raise ValueError("cannot merge confusion matrices over different classes")
        out = ConfusionMatrix(self.class_ids[1:])
        out.counts = self.counts + other.counts
        return out

    def index_of(self, cid):
        try:
            return self._index[int(cid)]
        except KeyError:
            raise IdOutOfRange(f"class id {cid} not tracked by this matrix")


def confusion_update(cm, gt, pred, ignore_id=None):
    """Accumulate pixel counts; pixels whose ground truth equals
    `ignore_id` are skipped."""
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    if gt.shape != pred.shape:
        raise ValueError(f"shape mismatch: gt {gt.shape} vs pred {pred.shape}")
    keep = np.ones(gt.shape, dtype=bool)
    if ignore_id is not None:
        keep = (gt != ignore_id) & (pred != ignore_id)
    gi = gt[keep].ravel()
    pi = pred[keep].ravel()
    lut = np.full(max(int(gi.max(initial=0)), int(pi.max(initial=0))) + 1, -1, dtype=np.int64)
    for cid, idx in cm._index.items():
        if cid < lut.size:
            lut[cid] = idx
    gmap = lut[gi]
    pmap = lut[pi]
    if (gmap < 0).any() or (pmap < 0).any():
        bad = set(np.concatenate([gi[gmap < 0], pi[pmap < 0]]).tolist())
        raise IdOutOfRange(f"labels {sorted(bad)} not tracked by this matrix")
    n = len(cm.class_ids)
    cm.counts += np.bincount(gmap * n + pmap, minlength=n * n).reshape(n, n)
    return cm


def miou(cm, class_groups):
    """Per-class IoU and group means.

    IoU_c = diag / (row + col - diag); classes with zero union are left
    out of both the per-class table and the mean.
    """
    diag = np.diag(cm.counts).astype(np.float64)
    rows = cm.counts.sum(axis=1).astype(np.float64)
    cols = cm.counts.sum(axis=0).astype(np.float64)
    union = rows + cols - diag
    report = {}
    for name, ids in class_groups.items():
        per_class = {}
        for cid in sorted(ids):
            i = cm.index_of(cid)
            if union[i] > 0:
                per_class[int(cid)] = float(diag[i] / union[i])
        mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
        report[name] = {"per_class": per_class, "mean": mean}
    return report


def format_report(report, order=None):
    """Fixed-width text table: one column per group, means then per-class."""
    names = order or list(report)
    width = max(8, *(len(n) + 2 for n in names))
    lines = ["".join(n.rjust(width) for n in names)]
    lines.append("".join(f"{report[n]['mean'] * 100:{width}.2f}" for n in names))
    lines.append("-" * (width * len(names)))
    for name in names:
        for cid, iou in sorted(report[name]["per_class"].items()):
            lines.append(f"{name}[{cid}]".rjust(width) + f"{iou * 100:{width}.2f}")
    return "\n".join(lines)


def save_report(report, json_path, text_path=None, order=None):
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump({k: {"per_class": {str(c): v for c, v in g["per_class"].items()}, "mean": g["mean"]} for k, g in report.items()}, fh, indent=2, sort_keys=True)
    if text_path:
        with open(text_path, "w", encoding="utf-8") as fh:
            fh.write(format_report(report, order) + "\n")
