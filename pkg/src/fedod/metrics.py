"""Per-class AP / mAP and the four federated indicators (A_s, A_p, A_u, A_com)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .boxkit import DetectionSet, iou_matrix, priority_order

DEFAULT_IOU = 0.5
DEFAULT_ALPHAS = (0.1, 0.3, 0.5)


@dataclass
class EvalResult:
    per_class_ap: dict[int, float]
    map_value: float
    num_images: int
    iou_threshold: float = DEFAULT_IOU


def _match_class(predictions, ground_truth, class_id, iou_threshold):
    """Return (scores, is_tp, n_gt) for one class pooled over images."""
    scores, flags = [], []
    n_gt = 0
    for pred, gt in zip(predictions, ground_truth):
        gt_boxes = gt.boxes[gt.labels == class_id]
        n_gt += len(gt_boxes)
        p = pred.take(np.flatnonzero(pred.labels == class_id))
        if len(p) == 0:
            continue
        p = p.ordered()
        ious = iou_matrix(p.boxes, gt_boxes) if len(gt_boxes) else np.zeros((len(p), 0))
        taken = np.zeros(len(gt_boxes), dtype=bool)
        for i in range(len(p)):
            tp = False
            if ious.shape[1]:
                j = int(ious[i].argmax())
                if ious[i, j] >= iou_threshold and not taken[j]:
                    taken[j] = True
                    tp = True
            scores.append(p.scores[i])
            flags.append(tp)
    return np.array(scores), np.array(flags, dtype=bool), n_gt


def average_precision(
    predictions: Sequence[DetectionSet],
    ground_truth: Sequence[DetectionSet],
    class_id: int,
    iou_threshold: float = DEFAULT_IOU,
) -> float:
    """All-point interpolated AP for one class over a list of images.

    Each prediction is matched to its highest-IoU ground-truth box of the same
    class; if that box is already taken the prediction is a false positive.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError("iou_threshold must be in (0, 1)")
    if len(predictions) != len(ground_truth):
        raise ValueError("predictions and ground truth cover different image counts")
    scores, tp, n_gt = _match_class(predictions, ground_truth, class_id, iou_threshold)
    if n_gt == 0 or len(scores) == 0:
        return 0.0
    # stable: equal scores keep (image, in-image priority) order
    order = np.argsort(-scores, kind="stable")
    tp = tp[order]
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(~tp)
    recall = tp_cum / n_gt
    precision = tp_cum / (tp_cum + fp_cum)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def evaluate(
    predictions: Sequence[DetectionSet], ground_truth: Sequence[DetectionSet], iou_threshold: float = DEFAULT_IOU
) -> EvalResult:
    """mAP over the classes that have at least one ground-truth box."""
    present = sorted({int(c) for g in ground_truth for c in g.labels})
    aps = {c: average_precision(predictions, ground_truth, c, iou_threshold) for c in present}
    m = float(np.mean(list(aps.values()))) if aps else 0.0
    return EvalResult(aps, m, len(ground_truth), iou_threshold)


@dataclass
class FedIndicators:
    A_s: float
    A_p: float
    A_u: float
    A_com: dict[float, float]
    per_client: dict[int, dict[str, float]] = field(default_factory=dict)

    def as_row(self) -> dict[str, float]:
        row = {"A_s": self.A_s, "A_p": self.A_p, "A_u": self.A_u}
        for a, v in sorted(self.A_com.items()):
            row[f"A_com@{a:g}"] = v
        return row


def indicators_from_rates(
    r_s: dict[int, float], r_p: dict[int, float], r_u: dict[int, float], alphas=DEFAULT_ALPHAS
) -> FedIndicators:
    clients = sorted(r_p)
    if sorted(r_s) != clients or sorted(r_u) != clients:
        raise ValueError("per-client rates cover different clients")
    n = len(clients)
    a_s = sum(r_s[c] for c in clients) / n
    a_p = sum(r_p[c] for c in clients) / n
    a_u = sum(r_u[c] for c in clients) / n
    a_com = {float(a): sum(a * r_p[c] + (1 - a) * r_u[c] for c in clients) / n for a in alphas}
    per = {c: {"r_s": r_s[c], "r_p": r_p[c], "r_u": r_u[c]} for c in clients}
    return FedIndicators(a_s, a_p, a_u, a_com, per)


Predictor = Callable[[np.ndarray], list]


def compute_indicators(
    predictors: dict[int, Predictor],
    server_test,
    client_tests: dict,
    alphas=DEFAULT_ALPHAS,
    iou_threshold: float = DEFAULT_IOU,
) -> FedIndicators:
    """Evaluate each client's final predictor on its own, the server and the union testset.

    ``predictors[i]`` maps an image batch to a list of DetectionSets. The union
    testset is the server testset followed by every client testset, unweighted.
    Predictors that are the same object are evaluated once.
    """
    if server_test is None:
        raise ValueError("server testset missing")
    missing = set(predictors) - set(client_tests)
    if missing:
        raise ValueError(f"testsets missing for clients {sorted(missing)}")
    order = sorted(client_tests)
    union_gt = list(server_test.ground_truth) + [g for c in order for g in client_tests[c].ground_truth]
    cache: dict[int, tuple[list, dict]] = {}
    r_s, r_p, r_u = {}, {}, {}
    for cid in sorted(predictors):
        fn = predictors[cid]
        if id(fn) not in cache:
            cache[id(fn)] = (fn(server_test.images), {c: fn(client_tests[c].images) for c in order})
        server_preds, client_preds = cache[id(fn)]
        r_s[cid] = evaluate(server_preds, server_test.ground_truth, iou_threshold).map_value
        r_p[cid] = evaluate(client_preds[cid], client_tests[cid].ground_truth, iou_threshold).map_value
        union_preds = list(server_preds) + [p for c in order for p in client_preds[c]]
        r_u[cid] = evaluate(union_preds, union_gt, iou_threshold).map_value
    return indicators_from_rates(r_s, r_p, r_u, alphas)
