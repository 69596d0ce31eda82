"""Single-operating-point evaluation of one-object-per-image detection.

Each image carries exactly one ground truth. The best detection passing both
the score gate and the IoU gate is matched to it; images with no such
detection count as "not detected" and are left out of the confusion matrix
and of every rate metric. Rates are therefore computed over matched images
only.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import EvaluationError
from .postprocess import detect, iou


@dataclass(frozen=True)
class EvalThresholds:
    score_min: float = 0.7
    iou_min: float = 0.5

    def __post_init__(self):
        for name in ("score_min", "iou_min"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")


@dataclass(frozen=True)
class MatchResult:
    pred_class: int | None = None
    iou: float | None = None

    @property
    def matched(self) -> bool:
        return self.pred_class is not None


NOT_DETECTED = MatchResult()


def match_image(dets, truth, th: EvalThresholds = EvalThresholds()) -> MatchResult:
    """Pick the highest-score detection passing both gates.

    Ties on score go to the higher IoU, then to the earlier detection.
    """
    best = None
    for k, d in enumerate(dets):
        if d.score < th.score_min:
            continue
        overlap = iou(d.box, truth.box)
        if overlap < th.iou_min:
            continue
        key = (d.score, overlap, -k)
        if best is None or key > best[0]:
            best = (key, d.class_id, overlap)
    if best is None:
        return NOT_DETECTED
    return MatchResult(best[1], best[2])


@dataclass
class ConfusionMatrix:
    """Rows are ground-truth classes, columns predicted classes."""

    counts: np.ndarray

    @classmethod
    def zeros(cls, k):
        return cls(np.zeros((k, k), dtype=np.int64))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)


def accumulate(results, truths, n_classes):
    """Fold match results into ``(ConfusionMatrix, average_iou, not_detected)``.

    ``average_iou`` is ``None`` when nothing matched.
    """
    if len(results) != len(truths):
        raise EvaluationError(f"{len(results)} results for {len(truths)} ground truths")
    cm = ConfusionMatrix.zeros(n_classes)
    ious = []
    not_detected = 0
    for r, t in zip(results, truths):
        if not r.matched:
            not_detected += 1
            continue
        cm.counts[t.class_id, r.pred_class] += 1
        ious.append(r.iou)
    average_iou = float(sum(ious) / len(ious)) if ious else None
    return cm, average_iou, not_detected


def compute_metrics(cm: ConfusionMatrix, average="macro"):
    """Return ``(accuracy, precision, recall, f1)``.

    Macro averaging takes the unweighted mean over classes that have at least
    one ground truth; per-class F1 is the harmonic mean of that class's
    precision and recall. Micro averaging pools counts.
    """
    counts = np.asarray(cm.counts, dtype=np.int64)
    total = counts.sum()
    if total == 0:
        raise EvaluationError("no matched images")
    tp = np.diag(counts).astype(float)
    accuracy = float(tp.sum() / total)
    if average == "micro":
        return accuracy, accuracy, accuracy, accuracy
    if average != "macro":
        raise ValueError(f"unknown average '{average}'")
    rows = counts.sum(axis=1)
    cols = counts.sum(axis=0)
    precision = np.divide(tp, cols, out=np.zeros_like(tp), where=cols > 0)
    recall = np.divide(tp, rows, out=np.zeros_like(tp), where=rows > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    present = rows > 0
    return (accuracy, float(precision[present].mean()), float(recall[present].mean()),
            float(f1[present].mean()))


@dataclass
class EvalReport:
    accuracy: float | None
    precision: float | None
    recall: float | None
    f1: float | None
    average_iou: float | None
    not_detected: int
    confusion: ConfusionMatrix
    class_names: tuple = ()

    @property
    def has_metrics(self) -> bool:
        return self.confusion.total > 0

    @property
    def evaluated(self) -> int:
        return self.confusion.total + self.not_detected

    def to_dict(self):
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "average_iou": self.average_iou,
            "not_detected": self.not_detected,
            "confusion": self.confusion.counts.tolist(),
            "class_coding": [f"{i}: {name}" for i, name in enumerate(self.class_names)],
        }

    @classmethod
    def from_dict(cls, d):
        names = tuple(entry.split(": ", 1)[1] for entry in d["class_coding"])
        return cls(d["accuracy"], d["precision"], d["recall"], d["f1"], d["average_iou"],
                   int(d["not_detected"]),
                   ConfusionMatrix(np.array(d["confusion"], dtype=np.int64).reshape(len(names), len(names))),
                   names)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def build_report(results, truths, class_names, average="macro") -> EvalReport:
    cm, average_iou, not_detected = accumulate(results, truths, len(class_names))
    if cm.total:
        acc, prec, rec, f1 = compute_metrics(cm, average)
    else:
        acc = prec = rec = f1 = None
    return EvalReport(acc, prec, rec, f1, average_iou, not_detected, cm, tuple(class_names))


def single_truth(truths, source=""):
    if len(truths) != 1:
        raise EvaluationError(
            f"image {source!r} has {len(truths)} ground truths; evaluation needs exactly one")
    return truths[0]


def evaluate_detections(per_image_dets, per_image_truths, class_names,
                        th: EvalThresholds = EvalThresholds(), average="macro") -> EvalReport:
    truths = [single_truth(t, i) for i, t in enumerate(per_image_truths)]
    results = [match_image(d, t, th) for d, t in zip(per_image_dets, truths)]
    return build_report(results, truths, class_names, average)


def run_detector(network, samples, score_thresh, iou_thresh, class_agnostic=False, batch_size=32):
    """Detections for each sample, in input order."""
    cfg = network.cfg
    out = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        batch = np.concatenate([s.image for s in chunk]).astype(
            network.weights.convs[cfg.conv_layers[0].index].weights.dtype, copy=False)
        heads = network.forward(batch)
        out.extend(detect(heads, (cfg.input_w, cfg.input_h), score_thresh, iou_thresh, class_agnostic))
    return out


def evaluate_model(network, samples, class_names, th: EvalThresholds = EvalThresholds(),
                   nms_iou=None, class_agnostic=False, average="macro", batch_size=32) -> EvalReport:
    """Detector pipeline plus matching over labelled samples.

    NMS uses ``th.iou_min`` unless ``nms_iou`` is given.
    """
    for s in samples:
        single_truth(s.truths, s.source_id)
    dets = run_detector(network, samples, th.score_min,
                        th.iou_min if nms_iou is None else nms_iou, class_agnostic, batch_size)
    return evaluate_detections(dets, [s.truths for s in samples], class_names, th, average)


COLUMNS = ("Accuracy", "Precision", "Recall", "F1-score", "Average IOU", "Label Not detected")


def _fmt(v):
    return "-" if v is None else f"{v:.2f}"


def report_cells(report: EvalReport):
    """Metric cells in table column order; undefined rates render as dashes."""
    if report.has_metrics:
        rates = [report.accuracy, report.precision, report.recall, report.f1, report.average_iou]
    else:
        rates = [None] * 5
    return [_fmt(v) for v in rates] + [str(report.not_detected)]


def render_report(report: EvalReport) -> str:
    """Text table row plus the confusion matrix with numeric class coding."""
    header = " | ".join(COLUMNS)
    row = " | ".join(report_cells(report))
    k = len(report.confusion.counts)
    width = max([len(str(int(v))) for v in report.confusion.counts.ravel()] + [len(str(k - 1)), 1])
    lines = [header, row, "", "Confusion matrix (rows: ground truth, columns: predicted)"]
    lines.append(" " * (width + 3) + " ".join(str(j).rjust(width) for j in range(k)))
    for i, counts in enumerate(report.confusion.counts):
        lines.append(str(i).rjust(width) + " | " + " ".join(str(int(v)).rjust(width) for v in counts))
    if report.class_names:
        lines.append("")
        lines.append(", ".join(f"{i}: {n}" for i, n in enumerate(report.class_names)))
    return "\n".join(lines) + "\n"
