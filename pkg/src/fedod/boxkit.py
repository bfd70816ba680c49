"""Box geometry and detection post-processing: NMS, Soft-NMS, NWM and WBF.

All boxes use normalized ``(x1, y1, x2, y2)`` coordinates. Processing order
is descending confidence with ties broken by ``(class_id, x1, y1, x2, y2)``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

DEFAULT_NMS_IOU = 0.5
DEFAULT_WBF_IOU = 0.55
DEFAULT_SOFT_SIGMA = 0.5
DEFAULT_SCORE_FLOOR = 0.001

RECORD_FIELDS = ("image_id", "class_id", "x1", "y1", "x2", "y2", "confidence", "model_id")


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float
    class_id: int = 0
    confidence: float = 1.0
    model_id: int = 0

    def __post_init__(self):
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ValueError(f"inverted box {self.coords}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    @property
    def coords(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


class DetectionSet:
    """Column-oriented set of class-labelled, scored boxes."""

    __slots__ = ("boxes", "scores", "labels", "model_ids")

    def __init__(self, boxes=None, scores=None, labels=None, model_ids=None):
        self.boxes = np.zeros((0, 4)) if boxes is None else np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        n = len(self.boxes)
        self.scores = np.ones(n) if scores is None else np.asarray(scores, dtype=np.float64).reshape(n)
        self.labels = np.zeros(n, dtype=np.int64) if labels is None else np.asarray(labels, dtype=np.int64).reshape(n)
        self.model_ids = (
            np.zeros(n, dtype=np.int64) if model_ids is None else np.asarray(model_ids, dtype=np.int64).reshape(n)
        )

    @classmethod
    def from_boxes(cls, boxes: Iterable[BBox]) -> "DetectionSet":
        boxes = list(boxes)
        return cls(
            [b.coords for b in boxes],
            [b.confidence for b in boxes],
            [b.class_id for b in boxes],
            [b.model_id for b in boxes],
        )

    def __len__(self) -> int:
        return len(self.boxes)

    def __iter__(self) -> Iterator[BBox]:
        for i in range(len(self)):
            x1, y1, x2, y2 = (float(v) for v in self.boxes[i])
            yield BBox(x1, y1, x2, y2, int(self.labels[i]), float(self.scores[i]), int(self.model_ids[i]))

    def __repr__(self) -> str:
        return f"DetectionSet(n={len(self)})"

    def __eq__(self, other) -> bool:
        if not isinstance(other, DetectionSet):
            return NotImplemented
        return (
            np.array_equal(self.boxes, other.boxes)
            and np.array_equal(self.scores, other.scores)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.model_ids, other.model_ids)
        )

    def take(self, idx) -> "DetectionSet":
        idx = np.asarray(idx, dtype=np.int64)
        return DetectionSet(self.boxes[idx], self.scores[idx], self.labels[idx], self.model_ids[idx])

    def with_model_id(self, model_id: int) -> "DetectionSet":
        return DetectionSet(self.boxes, self.scores, self.labels, np.full(len(self), model_id))

    @staticmethod
    def concat(sets: Iterable["DetectionSet"]) -> "DetectionSet":
        sets = list(sets)
        if not sets:
            return DetectionSet()
        return DetectionSet(
            np.concatenate([s.boxes for s in sets]),
            np.concatenate([s.scores for s in sets]),
            np.concatenate([s.labels for s in sets]),
            np.concatenate([s.model_ids for s in sets]),
        )

    def ordered(self) -> "DetectionSet":
        return self.take(priority_order(self))


def priority_order(dets: DetectionSet) -> np.ndarray:
    """Indices in descending confidence, ties by (class_id, x1, y1, x2, y2)."""
    if len(dets) == 0:
        return np.zeros(0, dtype=np.int64)
    b = dets.boxes
    return np.lexsort((b[:, 3], b[:, 2], b[:, 1], b[:, 0], dets.labels, -dets.scores))


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------


def iou(a: BBox, b: BBox) -> float:
    return float(iou_matrix(np.array([a.coords]), np.array([b.coords]))[0, 0])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between [n,4] and [m,4] arrays; zero-area boxes give 0."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    valid = (area_a[:, None] > 0) & (area_b[None, :] > 0) & (union > 0)
    return np.where(valid, inter / np.where(valid, union, 1.0), 0.0)


# ---------------------------------------------------------------------------
# suppression / fusion
# ---------------------------------------------------------------------------


def _check_threshold(iou_threshold):
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must be in (0, 1), got {iou_threshold}")


def _nms_clusters(dets: DetectionSet, iou_threshold: float) -> list[list[int]]:
    """Greedy NMS; each cluster is [kept, *suppressed] in input indices."""
    order = priority_order(dets)
    ious = iou_matrix(dets.boxes, dets.boxes)
    alive = np.ones(len(dets), dtype=bool)
    clusters = []
    for i in order:
        if not alive[i]:
            continue
        alive[i] = False
        hit = alive & (dets.labels == dets.labels[i]) & (ious[i] > iou_threshold)
        members = [int(i)] + order[hit[order]].tolist()
        alive[hit] = False
        clusters.append(members)
    return clusters


def nms(boxes: DetectionSet, iou_threshold: float = DEFAULT_NMS_IOU) -> DetectionSet:
    _check_threshold(iou_threshold)
    if len(boxes) == 0:
        return DetectionSet()
    keep = [c[0] for c in _nms_clusters(boxes, iou_threshold)]
    return boxes.take(keep).ordered()


def soft_nms(
    boxes: DetectionSet, sigma: float = DEFAULT_SOFT_SIGMA, score_floor: float = DEFAULT_SCORE_FLOOR
) -> DetectionSet:
    """Gaussian Soft-NMS: scores of same-class neighbours decay by exp(-iou^2 / sigma)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if not 0.0 <= score_floor < 1.0:
        raise ValueError("score_floor must be in [0, 1)")
    if len(boxes) == 0:
        return DetectionSet()
    scores = boxes.scores.copy()
    ious = iou_matrix(boxes.boxes, boxes.boxes)
    alive = np.ones(len(boxes), dtype=bool)
    kept, kept_scores = [], []
    # ties on score fall back to the static (class, x1, y1, x2, y2) order
    b = boxes.boxes
    rank = np.empty(len(boxes), dtype=np.int64)
    rank[np.lexsort((b[:, 3], b[:, 2], b[:, 1], b[:, 0], boxes.labels))] = np.arange(len(boxes))
    while alive.any():
        live = np.flatnonzero(alive)
        top = live[scores[live] == scores[live].max()]
        i = int(top[np.argmin(rank[top])])
        kept.append(i)
        kept_scores.append(scores[i])
        alive[i] = False
        same = alive & (boxes.labels == boxes.labels[i])
        scores[same] *= np.exp(-(ious[i, same] ** 2) / sigma)
        alive &= ~(same & (scores < score_floor))
    out = boxes.take(kept)
    out.scores = np.array(kept_scores)
    return out.ordered()


def nwm(boxes: DetectionSet, iou_threshold: float = DEFAULT_NMS_IOU) -> DetectionSet:
    """NMS-clustered weighted merge.

    Each NMS cluster keeps its top box, whose coordinates become the
    (confidence * IoU-with-top)-weighted mean of the cluster members.
    """
    _check_threshold(iou_threshold)
    if len(boxes) == 0:
        return DetectionSet()
    out_boxes, keep = [], []
    for members in _nms_clusters(boxes, iou_threshold):
        top = members[0]
        overlap = iou_matrix(boxes.boxes[top], boxes.boxes[members])[0]
        overlap[0] = 1.0
        w = boxes.scores[members] * overlap
        if len(members) > 1 and w.sum() > 0:
            out_boxes.append((w[:, None] * boxes.boxes[members]).sum(axis=0) / w.sum())
        else:
            out_boxes.append(boxes.boxes[top])
        keep.append(top)
    out = boxes.take(keep)
    out.boxes = np.array(out_boxes).reshape(-1, 4)
    return out.ordered()


@dataclass
class BoxCluster:
    members: list[BBox]
    fused: BBox


def _fuse_coords(coords: np.ndarray, confs: np.ndarray) -> np.ndarray:
    total = confs.sum()
    if total <= 0:
        return coords.mean(axis=0)
    return (confs[:, None] * coords).sum(axis=0) / total


def _iou_row(box: np.ndarray, others: np.ndarray) -> np.ndarray:
    """IoU of one box against [m,4] boxes."""
    iw = np.minimum(box[2], others[:, 2]) - np.maximum(box[0], others[:, 0])
    ih = np.minimum(box[3], others[:, 3]) - np.maximum(box[1], others[:, 1])
    area_a = (box[2] - box[0]) * (box[3] - box[1])
    area_b = (others[:, 2] - others[:, 0]) * (others[:, 3] - others[:, 1])
    inter = iw * ih
    ok = (iw > 0) & (ih > 0) & (area_a > 0) & (area_b > 0)
    denom = np.where(ok, area_a + area_b - inter, 1.0)
    return np.where(ok, inter / denom, 0.0)


def _wbf_core(boxes: DetectionSet, iou_threshold: float, num_models: int):
    """Greedy clustering against each cluster's current fused box.

    Returns (members, fused [k,4], labels [k], confidences [k]).
    """
    if num_models < 1:
        raise ValueError("num_models must be >= 1")
    _check_threshold(iou_threshold)
    n = len(boxes)
    fused = np.zeros((n, 4))
    labels = np.zeros(n, dtype=np.int64)
    members: list[list[int]] = []
    for i in priority_order(boxes):
        i = int(i)
        k = len(members)
        hit = np.zeros(0, dtype=np.int64)
        if k:
            same = labels[:k] == boxes.labels[i]
            hit = np.flatnonzero(same & (_iou_row(boxes.boxes[i], fused[:k]) > iou_threshold))
        if len(hit) == 0:
            members.append([i])
            fused[k] = boxes.boxes[i]
            labels[k] = boxes.labels[i]
        else:
            c = int(hit[0])
            members[c].append(i)
            fused[c] = _fuse_coords(boxes.boxes[members[c]], boxes.scores[members[c]])
    k = len(members)
    confs = np.empty(k)
    for c, m in enumerate(members):
        t = len(m)
        confs[c] = min(t, num_models) / (num_models * t) * boxes.scores[m].sum()
    return members, fused[:k], labels[:k], np.minimum(confs, 1.0)


def wbf_clusters(
    boxes: DetectionSet, iou_threshold: float = DEFAULT_WBF_IOU, num_models: int = 2
) -> list[BoxCluster]:
    """Cluster boxes greedily against each cluster's current fused box."""
    members, fused, labels, confs = _wbf_core(boxes, iou_threshold, num_models)
    return [
        BoxCluster(
            members=list(boxes.take(m)),
            fused=BBox(*(float(v) for v in fb), int(lab), float(conf), int(boxes.model_ids[m[0]])),
        )
        for m, fb, lab, conf in zip(members, fused, labels, confs)
    ]


def wbf(boxes: DetectionSet, iou_threshold: float = DEFAULT_WBF_IOU, num_models: int = 2) -> DetectionSet:
    """Weighted boxes fusion.

    Cluster confidence is min(T, M) / (M * T) * sum(C_i) and coordinates are
    the confidence-weighted mean of the T members.
    """
    if num_models < 1:
        raise ValueError("num_models must be >= 1")
    if len(boxes) == 0:
        return DetectionSet()
    members, fused, labels, confs = _wbf_core(boxes, iou_threshold, num_models)
    model_ids = boxes.model_ids[[m[0] for m in members]]
    return DetectionSet(fused, confs, labels, model_ids).ordered()


FUSION_METHODS = ("nms", "soft_nms", "nwm", "wbf")


def fuse(boxes: DetectionSet, method: str = "wbf", iou_threshold: float | None = None, num_models: int = 2):
    """Dispatch to one of FUSION_METHODS with its default parameters."""
    if method == "nms":
        return nms(boxes, DEFAULT_NMS_IOU if iou_threshold is None else iou_threshold)
    if method == "soft_nms":
        return soft_nms(boxes)
    if method == "nwm":
        return nwm(boxes, DEFAULT_NMS_IOU if iou_threshold is None else iou_threshold)
    if method == "wbf":
        return wbf(boxes, DEFAULT_WBF_IOU if iou_threshold is None else iou_threshold, num_models)
    raise ValueError(f"unknown fusion method {method!r}; choose from {FUSION_METHODS}")


# ---------------------------------------------------------------------------
# line-oriented records
# ---------------------------------------------------------------------------


def dump_records(per_image: dict[int, DetectionSet], stream) -> None:
    """Write CSV records (image_id, class_id, x1, y1, x2, y2, confidence, model_id)."""
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(RECORD_FIELDS)
    for image_id in sorted(per_image):
        for b in per_image[image_id]:
            w.writerow([image_id, b.class_id, repr(b.x1), repr(b.y1), repr(b.x2), repr(b.y2), repr(b.confidence), b.model_id])


def load_records(stream) -> dict[int, DetectionSet]:
    rows: dict[int, list[BBox]] = {}
    reader = csv.DictReader(stream)
    missing = set(RECORD_FIELDS) - set(reader.fieldnames or ())
    if missing:
        raise ValueError(f"box file missing columns: {sorted(missing)}")
    for r in reader:
        box = BBox(
            float(r["x1"]), float(r["y1"]), float(r["x2"]), float(r["y2"]),
            int(r["class_id"]), float(r["confidence"]), int(r["model_id"]),
        )
        rows.setdefault(int(r["image_id"]), []).append(box)
    return {k: DetectionSet.from_boxes(v) for k, v in rows.items()}


def records_to_text(per_image: dict[int, DetectionSet]) -> str:
    buf = io.StringIO()
    dump_records(per_image, buf)
    return buf.getvalue()
