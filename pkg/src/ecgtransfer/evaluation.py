"""Binary classification metrics at a threshold, threshold sweeps and
annotator-vs-truth comparisons.

A record is predicted positive iff its score is >= the threshold. Metrics
that are undefined for a degenerate class (no positives or no negatives)
are NaN and named in ``MetricSet.undefined``.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .dataset import TARGETS
from .errors import EmptyDataset, KeyMismatch, LengthMismatch, ShapeMismatch


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


@dataclass
class MetricSet:
    sensitivity: float
    specificity: float
    gmean: float
    f2: float
    threshold: float = 0.5
    undefined: tuple = ()


@dataclass(frozen=True)
class CurvePoint:
    threshold: float
    sensitivity: float
    specificity: float


def _check_lengths(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise LengthMismatch(f"{scores.size} scores vs {labels.size} labels")
    return scores, labels


def confusion(scores, labels, threshold=0.5) -> ConfusionMatrix:
    scores, labels = _check_lengths(scores, labels)
    pred = scores >= threshold
    tp = int(np.sum(pred & labels))
    fp = int(np.sum(pred & ~labels))
    fn = int(np.sum(~pred & labels))
    tn = int(np.sum(~pred & ~labels))
    return ConfusionMatrix(tp, fp, fn, tn)


def gmean(sens, spec):
    return math.sqrt(sens * spec)


def f2_score(precision, recall):
    denom = 4 * precision + recall
    return 0.0 if denom == 0 else 5 * precision * recall / denom


def metrics(cm: ConfusionMatrix, threshold=0.5) -> MetricSet:
    nan = float("nan")
    undefined = []
    if cm.tp + cm.fn > 0:
        sens = cm.tp / (cm.tp + cm.fn)
    else:
        sens = nan
        undefined.append("sensitivity")
    if cm.tn + cm.fp > 0:
        spec = cm.tn / (cm.tn + cm.fp)
    else:
        spec = nan
        undefined.append("specificity")
    g = nan if undefined else gmean(sens, spec)
    if cm.tp + cm.fn == 0:
        f2 = nan
        undefined.append("f2")
    elif cm.tp + cm.fp == 0:
        f2 = 0.0  # recall is 0 as well, so F2 -> 0
    else:
        f2 = f2_score(cm.tp / (cm.tp + cm.fp), sens)
    if undefined:
        undefined.append("gmean")
    return MetricSet(sens, spec, g, f2, threshold, tuple(dict.fromkeys(undefined)))


def predict_scores(model, x, batch_size=64):
    """Sigmoid probabilities from an eval-mode forward pass."""
    x = np.asarray(x, dtype=np.float32)
    if len(x) == 0:
        raise EmptyDataset("no records to score")
    out = []
    for i in range(0, len(x), batch_size):
        z = model.forward(x[i:i + batch_size], mode="eval")
        out.append(ad.sigmoid(z).data.ravel())
    return np.concatenate(out).astype(np.float64)


@dataclass
class EvalResult:
    metrics: MetricSet
    confusion: ConfusionMatrix
    scores: np.ndarray
    labels: np.ndarray
    ids: list = field(default_factory=list)


def evaluate(model, x, y, threshold=0.5, ids=None, batch_size=64) -> EvalResult:
    y = np.asarray(y).ravel()
    if len(x) != len(y):
        raise ShapeMismatch(f"{len(x)} inputs vs {len(y)} labels")
    scores = predict_scores(model, x, batch_size)
    cm = confusion(scores, y, threshold)
    ids = list(ids) if ids is not None else [str(i) for i in range(len(y))]
    return EvalResult(metrics(cm, threshold), cm, scores, y.astype(np.int64), ids)


def evaluate_scores(scores, labels, threshold=0.5) -> MetricSet:
    return metrics(confusion(scores, labels, threshold), threshold)


def sweep(scores, labels, n_points=200):
    """Sensitivity/specificity at score quantiles plus thresholds 0 and 1."""
    scores, labels = _check_lengths(scores, labels)
    if scores.size:
        qs = np.quantile(scores, np.linspace(0.0, 1.0, n_points), method="inverted_cdf")
        thresholds = np.unique(np.concatenate([[0.0, 1.0], qs]))
    else:
        thresholds = np.array([0.0, 1.0])
    pos = np.sort(scores[labels])
    neg = np.sort(scores[~labels])
    npos, nneg = pos.size, neg.size
    points = []
    for t in thresholds:
        tp = npos - np.searchsorted(pos, t, side="left")
        tn = np.searchsorted(neg, t, side="left")
        sens = tp / npos if npos else float("nan")
        spec = tn / nneg if nneg else float("nan")
        points.append(CurvePoint(float(t), float(sens), float(spec)))
    return points


def best_threshold(scores, labels, n_points=200):
    """Threshold maximising G-mean over the sweep (ties: lowest threshold)."""
    best = None
    for p in sweep(scores, labels, n_points):
        if math.isnan(p.sensitivity) or math.isnan(p.specificity):
            continue
        g = gmean(p.sensitivity, p.specificity)
        if best is None or g > best[0]:
            best = (g, p.threshold)
    return 0.5 if best is None else best[1]


# ---------------------------------------------------------------------------
# files

def write_scores(path, ids, scores, labels):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["record_id", "score", "label"])
        for rid, s, y in zip(ids, scores, labels):
            w.writerow([rid, repr(float(s)), int(y)])


def read_scores(path):
    ids, scores, labels = [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            ids.append(row["record_id"])
            scores.append(float(row["score"]))
            labels.append(int(row["label"]))
    return ids, np.array(scores), np.array(labels)


def write_curve(path, points):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "sensitivity", "specificity"])
        for p in points:
            w.writerow([repr(p.threshold), repr(p.sensitivity), repr(p.specificity)])


def write_metrics(path, rows):
    """``rows``: iterable of (name, MetricSet, ConfusionMatrix or None)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", "threshold", "sensitivity", "specificity", "gmean", "f2", "tp", "fp", "fn", "tn", "undefined"])
        for name, m, cm in rows:
            counts = [cm.tp, cm.fp, cm.fn, cm.tn] if cm is not None else ["", "", "", ""]
            w.writerow([name, repr(float(m.threshold)), f"{m.sensitivity:.6f}", f"{m.specificity:.6f}",
                        f"{m.gmean:.6f}", f"{m.f2:.6f}", *counts, ";".join(m.undefined)])


def read_annotations(path):
    """``record_id,target,flag`` rows -> {target: {record_id: bool}}."""
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            target = row["target"].strip()
            flag = row["flag"].strip()
            if flag not in ("0", "1"):
                raise KeyMismatch(f"flag for {row['record_id']} must be 0 or 1, got {flag!r}")
            out.setdefault(target, {})[row["record_id"].strip()] = flag == "1"
    return out


def write_annotations(path, table):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["record_id", "target", "flag"])
        for target in sorted(table, key=lambda t: TARGETS.index(t) if t in TARGETS else len(TARGETS)):
            for rid, flag in table[target].items():
                w.writerow([rid, target, int(flag)])


def compare_annotations(predicted, truth):
    """Score an annotator against reference labels, per target.

    Both arguments are ``{target: {record_id: bool}}`` tables or paths to
    annotation files.
    """
    if not isinstance(predicted, dict):
        predicted = read_annotations(predicted)
    if not isinstance(truth, dict):
        truth = read_annotations(truth)
    if set(predicted) != set(truth):
        raise KeyMismatch(f"targets differ: {sorted(set(predicted) ^ set(truth))}")
    results = {}
    for target, ref in truth.items():
        pred = predicted[target]
        if set(pred) != set(ref):
            diff = sorted(set(pred) ^ set(ref))
            raise KeyMismatch(f"{target}: record ids differ, e.g. {diff[:5]}")
        ids = sorted(ref)
        scores = np.array([1.0 if pred[i] else 0.0 for i in ids])
        labels = np.array([ref[i] for i in ids])
        cm = confusion(scores, labels, 0.5)
        results[target] = (metrics(cm, 0.5), cm)
    return results
