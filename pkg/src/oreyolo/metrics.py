"""Detection evaluation: IoU, precision/recall, all-point AP and mAP over IoU thresholds."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from oreyolo.boxes import box_iou_matrix, iou
from oreyolo.head import Detection

MAP_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))

__all__ = [
    "ClassMetrics",
    "EvalResult",
    "GroundTruth",
    "MAP_THRESHOLDS",
    "average_precision",
    "iou",
    "map_range",
    "match_detections",
]


@dataclass(frozen=True)
class GroundTruth:
    x1: float
    y1: float
    x2: float
    y2: float
    class_id: int

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


def match_detections(dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_thr: float) -> np.ndarray:
    """True-positive flags for one image, visiting ``dets`` in the given order.

    Each detection takes the highest-IoU still-unmatched ground truth of its
    class with IoU >= ``iou_thr``.
    """
    tp = np.zeros(len(dets), dtype=bool)
    if not dets or not gts:
        return tp
    ious = box_iou_matrix(np.array([d.box for d in dets]), np.array([g.box for g in gts]))
    gt_cls = np.array([g.class_id for g in gts])
    used = np.zeros(len(gts), dtype=bool)
    for i, d in enumerate(dets):
        cand = (~used) & (gt_cls == d.class_id) & (ious[i] >= iou_thr)
        if cand.any():
            j = int(np.argmax(np.where(cand, ious[i], -1.0)))
            used[j] = True
            tp[i] = True
    return tp


def _ranked(dets: Sequence[Sequence[Detection]], class_id: int | None):
    """Detections of all images sorted by confidence (stable), with their image index."""
    flat = [(img, d) for img, ds in enumerate(dets) for d in ds if class_id is None or d.class_id == class_id]
    order = sorted(range(len(flat)), key=lambda i: -flat[i][1].confidence)
    return [flat[i] for i in order]


def _tp_flags(ranked, gts: Sequence[Sequence[GroundTruth]], iou_thr: float) -> np.ndarray:
    per_image: dict[int, list[int]] = {}
    for pos, (img, _) in enumerate(ranked):
        per_image.setdefault(img, []).append(pos)
    tp = np.zeros(len(ranked), dtype=bool)
    for img, positions in per_image.items():
        flags = match_detections([ranked[p][1] for p in positions], gts[img], iou_thr)
        tp[positions] = flags
    return tp


def _count_gts(gts: Sequence[Sequence[GroundTruth]], class_id: int | None) -> int:
    return sum(1 for gs in gts for g in gs if class_id is None or g.class_id == class_id)


def ap_from_flags(tp: np.ndarray, n_pos: int) -> float:
    """Area under the monotone precision envelope (all-point interpolation)."""
    if n_pos == 0 or len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_pos
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[1.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def average_precision(dets: Sequence[Sequence[Detection]], gts: Sequence[Sequence[GroundTruth]],
                      iou_thr: float = 0.5, class_id: int | None = None) -> float:
    """AP over a set of images (``dets[i]`` and ``gts[i]`` belong to image ``i``).

    With ``class_id`` set only that class is scored; otherwise detections are
    pooled across classes but still only match same-class ground truths.
    """
    if len(dets) != len(gts):
        raise ValueError("dets and gts must list the same number of images")
    ranked = _ranked(dets, class_id)
    return ap_from_flags(_tp_flags(ranked, gts, iou_thr), _count_gts(gts, class_id))


@dataclass
class ClassMetrics:
    precision: float = 0.0
    recall: float = 0.0
    map50: float = 0.0
    map75: float = 0.0
    map50_95: float = 0.0
    per_threshold: tuple[float, ...] = ()


@dataclass
class EvalResult:
    per_class: dict[int, ClassMetrics] = field(default_factory=dict)
    overall: ClassMetrics = field(default_factory=ClassMetrics)
    class_names: dict[int, str] = field(default_factory=dict)

    COLUMNS = ("Precision", "Recall", "mAP50", "mAP75", "mAP50-95")

    def _name(self, c: int) -> str:
        return self.class_names.get(c, str(c))

    @staticmethod
    def _values(m: ClassMetrics) -> tuple[float, ...]:
        return (m.precision, m.recall, m.map50, m.map75, m.map50_95)

    def to_report(self) -> str:
        """Flat ``key = value`` report, one line per (class, metric)."""
        lines = []
        for label, m in [*((self._name(c), m) for c, m in sorted(self.per_class.items())), ("all", self.overall)]:
            for col, v in zip(self.COLUMNS, self._values(m)):
                lines.append(f"{label}.{col} = {v:.6f}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["Type", *self.COLUMNS])
        for c, m in sorted(self.per_class.items()):
            w.writerow([self._name(c), *(f"{v:.6f}" for v in self._values(m))])
        w.writerow(["all", *(f"{v:.6f}" for v in self._values(self.overall))])
        return buf.getvalue()


def map_range(dets: Sequence[Sequence[Detection]], gts: Sequence[Sequence[GroundTruth]],
              thresholds: Sequence[float] = MAP_THRESHOLDS, conf_thr: float = 0.25,
              num_classes: int | None = None) -> EvalResult:
    """Per-class and class-averaged AP at every threshold plus P/R at IoU 0.5.

    Classes without ground truth are left out of the averages. Precision and
    recall count detections with confidence >= ``conf_thr`` only.
    """
    if len(dets) != len(gts):
        raise ValueError("dets and gts must list the same number of images")
    classes = sorted({g.class_id for gs in gts for g in gs})
    if num_classes is not None:
        classes = [c for c in classes if c < num_classes]
    thresholds = tuple(thresholds)
    result = EvalResult()
    for c in classes:
        ranked = _ranked(dets, c)
        n_pos = _count_gts(gts, c)
        aps = tuple(ap_from_flags(_tp_flags(ranked, gts, t), n_pos) for t in thresholds)
        confident = [(img, d) for img, d in ranked if d.confidence >= conf_thr]
        tp50 = _tp_flags(confident, gts, 0.5)
        n_tp = int(tp50.sum())
        m = ClassMetrics(
            precision=n_tp / len(confident) if confident else 0.0,
            recall=n_tp / n_pos,
            map50=_at(aps, thresholds, 0.5),
            map75=_at(aps, thresholds, 0.75),
            map50_95=float(np.mean(aps)),
            per_threshold=aps,
        )
        result.per_class[c] = m
    if classes:
        ms = list(result.per_class.values())
        per_t = tuple(float(np.mean([m.per_threshold[i] for m in ms])) for i in range(len(thresholds)))
        result.overall = ClassMetrics(
            precision=float(np.mean([m.precision for m in ms])),
            recall=float(np.mean([m.recall for m in ms])),
            map50=float(np.mean([m.map50 for m in ms])),
            map75=float(np.mean([m.map75 for m in ms])),
            map50_95=float(np.mean(per_t)),
            per_threshold=per_t,
        )
    return result


def _at(aps: tuple[float, ...], thresholds: tuple[float, ...], t: float) -> float:
    for a, th in zip(aps, thresholds):
        if abs(th - t) < 1e-9:
            return a
    return float("nan")
