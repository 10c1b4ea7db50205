"""Frame-level average precision.

Detections and annotations are exchanged as comma-separated text, one record
per line:

* detections: ``clip_id,class_id,score,x1,y1,x2,y2``
* annotations: ``clip_id,person_id,x1,y1,x2,y2,label,...`` where a person with
  no action carries the single label ``-1``.
"""
import csv
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import box_areas, iou_matrix


logger = logging.getLogger(__name__)

BACKGROUND_PERSON = -1


@dataclass(frozen=True)
class Annotation:
    clip_id: str
    person_id: int
    box: Tuple[float, float, float, float]
    labels: Tuple[int, ...] = ()

    @property
    def area(self) -> float:
        return float(box_areas(np.asarray(self.box))[0])


@dataclass(frozen=True)
class DetectionRecord:
    clip_id: str
    class_id: int
    score: float
    box: Tuple[float, float, float, float]


def _number(value) -> str:
    return repr(float(value))


def write_annotations(path, annotations: Iterable[Annotation]):
    with open(path, "w", newline="", encoding="utf-8") as stream:
        writer = csv.writer(stream, lineterminator="\n")
        for record in annotations:
            labels = record.labels or (BACKGROUND_PERSON,)
            writer.writerow(
                [record.clip_id, record.person_id]
                + [_number(v) for v in record.box]
                + [int(label) for label in labels]
            )


def read_annotations(path) -> List[Annotation]:
    records = []
    with open(path, newline="", encoding="utf-8") as stream:
        for row in csv.reader(stream):
            if not row:
                continue
            labels = tuple(int(v) for v in row[6:] if int(v) != BACKGROUND_PERSON)
            records.append(Annotation(
                row[0], int(row[1]), tuple(float(v) for v in row[2:6]), labels
            ))
    return records


def write_detections(path, detections: Iterable[DetectionRecord]):
    with open(path, "w", newline="", encoding="utf-8") as stream:
        writer = csv.writer(stream, lineterminator="\n")
        for record in detections:
            writer.writerow(
                [record.clip_id, record.class_id, _number(record.score)]
                + [_number(v) for v in record.box]
            )


def read_detections(path) -> List[DetectionRecord]:
    records = []
    with open(path, newline="", encoding="utf-8") as stream:
        for row in csv.reader(stream):
            if not row:
                continue
            records.append(DetectionRecord(
                row[0], int(row[1]), float(row[2]), tuple(float(v) for v in row[3:7])
            ))
    return records


def match_detections(det_boxes, gt_boxes, iou_threshold: float) -> np.ndarray:
    """True-positive flags for detections already sorted by descending score.

    Each detection takes the highest-IoU ground truth that is still unmatched;
    it is a true positive when that IoU reaches `iou_threshold`.
    """
    det_boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    flags = np.zeros(len(det_boxes), dtype=bool)
    if len(gt_boxes) == 0:
        return flags
    overlaps = iou_matrix(det_boxes, gt_boxes)
    matched = np.zeros(len(gt_boxes), dtype=bool)
    for index in range(len(det_boxes)):
        candidates = np.where(matched, -1.0, overlaps[index])
        best = int(np.argmax(candidates))
        if candidates[best] >= iou_threshold:
            flags[index] = True
            matched[best] = True
    return flags


def voc_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the precision envelope, summed where recall changes."""
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    changes = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[changes + 1] - mrec[changes]) * mpre[changes + 1]))


def _group_gt(annotations: Sequence[Annotation], class_id: int):
    by_clip = defaultdict(list)
    for record in annotations:
        if class_id in record.labels:
            by_clip[record.clip_id].append(record.box)
    return by_clip


def frame_ap(
    detections: Sequence[DetectionRecord], annotations: Sequence[Annotation],
    class_id: int, iou_threshold: float = 0.5,
) -> Optional[float]:
    """AP of one class over all clips, or None when the class has no ground truth."""
    gt_by_clip = _group_gt(annotations, class_id)
    num_gt = sum(len(boxes) for boxes in gt_by_clip.values())
    if num_gt == 0:
        return None

    ranked = sorted(
        (d for d in detections if d.class_id == class_id), key=lambda d: -d.score
    )
    if not ranked:
        return 0.0
    dets_by_clip = defaultdict(list)
    for rank, record in enumerate(ranked):
        dets_by_clip[record.clip_id].append(rank)

    tp = np.zeros(len(ranked), dtype=bool)
    for clip_id, ranks in dets_by_clip.items():
        flags = match_detections(
            [ranked[r].box for r in ranks], gt_by_clip.get(clip_id, []), iou_threshold
        )
        tp[ranks] = flags

    hits = np.cumsum(tp)
    recall = hits / num_gt
    precision = hits / np.arange(1, len(ranked) + 1)
    return voc_ap(recall, precision)


@dataclass
class BinResult:
    low: float
    high: float
    annotation_indices: List[int]
    per_class: Dict[int, float]

    @property
    def mean_ap(self) -> Optional[float]:
        if not self.per_class:
            return None
        return float(np.mean(list(self.per_class.values())))


@dataclass
class EvalReport:
    iou_threshold: float
    per_class: Dict[int, float]
    class_names: Tuple[str, ...] = ()
    num_detections: int = 0
    num_gt: int = 0
    matched: int = 0
    unmatched: int = 0
    area_bins: List[BinResult] = field(default_factory=list)
    count_bins: List[BinResult] = field(default_factory=list)
    class_frequency: Dict[int, int] = field(default_factory=dict)

    @property
    def mean_ap(self) -> Optional[float]:
        if not self.per_class:
            return None
        return float(np.mean(list(self.per_class.values())))

    def subset_map(self, class_ids: Iterable[int]) -> Optional[float]:
        values = [self.per_class[c] for c in class_ids if c in self.per_class]
        return float(np.mean(values)) if values else None

    def as_dict(self):
        def name(class_id):
            if class_id < len(self.class_names):
                return self.class_names[class_id]
            return str(class_id)

        def bins(results):
            return [
                {"low": b.low, "high": b.high, "num_gt": len(b.annotation_indices),
                 "mean_ap": b.mean_ap}
                for b in results
            ]

        return {
            "iou_threshold": self.iou_threshold,
            "mean_ap": self.mean_ap,
            "per_class": {name(c): ap for c, ap in sorted(self.per_class.items())},
            "class_frequency": {name(c): n for c, n in sorted(self.class_frequency.items())},
            "num_detections": self.num_detections,
            "num_gt": self.num_gt,
            "matched": self.matched,
            "unmatched": self.unmatched,
            "area_bins": bins(self.area_bins),
            "count_bins": bins(self.count_bins),
        }


def _per_class(detections, annotations, class_ids, iou_threshold) -> Dict[int, float]:
    results = {}
    for class_id in class_ids:
        ap = frame_ap(detections, annotations, class_id, iou_threshold)
        if ap is not None:
            results[class_id] = ap
    return results


def _bin_boundaries(values: np.ndarray, bins: int) -> np.ndarray:
    ordered = np.sort(values)
    if len(ordered) < bins:
        logger.warning("only %d ground truth values, reducing %d bins", len(ordered), bins)
        bins = max(1, len(ordered))
    cuts = ordered[[len(ordered) * k // bins for k in range(1, bins)]]
    return np.unique(cuts[cuts > ordered[0]])


def binned_report(
    detections: Sequence[DetectionRecord], annotations: Sequence[Annotation],
    mode: str, class_ids: Sequence[int], iou_threshold: float = 0.5, bins: int = 4,
) -> List[BinResult]:
    """Per-bin mAP, bins holding similar numbers of ground-truth boxes.

    ``area`` bins by box area and keeps the detections whose area falls in the
    same bin; ``count`` bins by the number of people in a clip and keeps
    everything from the clips in the bin.
    """
    if mode not in ("area", "count"):
        raise ValueError(f"unknown bin mode {mode!r}")
    if not annotations:
        return []
    people = defaultdict(int)
    for record in annotations:
        people[record.clip_id] += 1

    if mode == "area":
        gt_values = np.array([record.area for record in annotations])
    else:
        gt_values = np.array([people[record.clip_id] for record in annotations], dtype=float)
    boundaries = _bin_boundaries(gt_values, bins)
    gt_bins = np.searchsorted(boundaries, gt_values, side="right")
    edges = np.concatenate(([-np.inf], boundaries, [np.inf]))

    if mode == "area":
        det_values = box_areas(np.array([d.box for d in detections]).reshape(-1, 4))
    else:
        det_values = np.array([people.get(d.clip_id, 0) for d in detections], dtype=float)
    det_bins = np.searchsorted(boundaries, det_values, side="right")

    results = []
    for index in range(len(boundaries) + 1):
        members = np.flatnonzero(gt_bins == index).tolist()
        subset_gt = [annotations[i] for i in members]
        subset_det = [d for d, b in zip(detections, det_bins) if b == index]
        results.append(BinResult(
            float(edges[index]), float(edges[index + 1]), members,
            _per_class(subset_det, subset_gt, class_ids, iou_threshold),
        ))
    return results


def suppress_background(records_with_background, threshold: Optional[float]):
    """Drop ``(record, background_score)`` pairs whose background score exceeds
    `threshold`; no threshold keeps everything.
    """
    return [
        record for record, background in records_with_background
        if threshold is None or background <= threshold
    ]


def evaluate(
    detections: Sequence[DetectionRecord], annotations: Sequence[Annotation],
    class_names: Sequence[str], iou_threshold: float = 0.5, bins: int = 4,
    class_frequency: Optional[Dict[int, int]] = None,
) -> EvalReport:
    class_ids = range(len(class_names))
    per_class = _per_class(detections, annotations, class_ids, iou_threshold)

    matched = 0
    for class_id in class_ids:
        gt_by_clip = _group_gt(annotations, class_id)
        ranked = sorted(
            (d for d in detections if d.class_id == class_id), key=lambda d: -d.score
        )
        by_clip = defaultdict(list)
        for record in ranked:
            by_clip[record.clip_id].append(record.box)
        for clip_id, boxes in by_clip.items():
            matched += int(match_detections(boxes, gt_by_clip.get(clip_id, []),
                                            iou_threshold).sum())

    report = EvalReport(
        iou_threshold=iou_threshold,
        per_class=per_class,
        class_names=tuple(class_names),
        num_detections=len(detections),
        num_gt=len(annotations),
        matched=matched,
        unmatched=len(detections) - matched,
        area_bins=binned_report(detections, annotations, "area", class_ids, iou_threshold, bins),
        count_bins=binned_report(detections, annotations, "count", class_ids, iou_threshold,
                                 bins),
        class_frequency=dict(class_frequency or {}),
    )
    logger.info("mAP@%.2f = %s over %d classes", iou_threshold, report.mean_ap, len(per_class))
    return report
