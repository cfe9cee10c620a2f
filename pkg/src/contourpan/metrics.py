"""Evaluation: panoptic quality, mean IoU and mask AP.

Single-image functions return the score directly; :class:`Evaluator` pools
tallies over many images the way dataset-level numbers are usually reported
(PQ tallies and the confusion matrix are summed, AP detections are ranked
globally).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from contourpan.panoptic import panoptic_to_instances
from contourpan.raster import (
    PANOPTIC_DIVISOR,
    ClassCatalog,
    InstanceLabelMap,
    InstanceRecord,
    PanopticMap,
    SemanticLabelMap,
    ValidationError,
    check_same_shape,
    instance_geometry,
)

DEFAULT_AP_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


# ------------------------------------------------------------------ PQ


@dataclass
class ClassTally:
    iou_sum: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __iadd__(self, other: ClassTally) -> ClassTally:
        self.iou_sum += other.iou_sum
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        return self

    @property
    def seen(self) -> bool:
        return self.tp + self.fp + self.fn > 0

    def pq_sq_rq(self) -> tuple[float, float, float]:
        denom = self.tp + 0.5 * self.fp + 0.5 * self.fn
        if denom == 0:
            return 0.0, 0.0, 0.0
        sq = self.iou_sum / self.tp if self.tp else 0.0
        rq = self.tp / denom
        return self.iou_sum / denom, sq, rq


@dataclass
class PanopticScores:
    pq: float
    sq: float
    rq: float
    pq_things: float
    sq_things: float
    rq_things: float
    pq_stuff: float
    sq_stuff: float
    rq_stuff: float
    per_class: dict[int, ClassTally] = field(default_factory=dict)

    def to_json(self, catalog: ClassCatalog | None = None) -> dict:
        rows = {}
        for c, t in sorted(self.per_class.items()):
            pq, sq, rq = t.pq_sq_rq()
            rows[str(c)] = {
                "name": catalog.name(c) if catalog else str(c),
                "pq": pq,
                "sq": sq,
                "rq": rq,
                "iou_sum": t.iou_sum,
                "tp": t.tp,
                "fp": t.fp,
                "fn": t.fn,
            }
        return {
            "pq": self.pq,
            "sq": self.sq,
            "rq": self.rq,
            "pq_things": self.pq_things,
            "sq_things": self.sq_things,
            "rq_things": self.rq_things,
            "pq_stuff": self.pq_stuff,
            "sq_stuff": self.sq_stuff,
            "rq_stuff": self.rq_stuff,
            "per_class": rows,
        }


def _segments(enc: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    uniq, inv, area = np.unique(enc, return_inverse=True, return_counts=True)
    return uniq, inv.ravel(), area


def pq_tallies(pred: PanopticMap, gt: PanopticMap, catalog: ClassCatalog) -> dict[int, ClassTally]:
    """Per-class TP/FP/FN and summed IoU for one image.

    A pred and a GT segment of the same class match when IoU > 0.5, which
    makes the matching unique. Pred pixels falling on GT void are left out
    of the union, and a pred segment lying mostly on void is not counted
    as a false positive.
    """
    check_same_shape(pred, gt, names=("pred", "gt"))
    void = catalog.void_id
    for name, pan in (("pred", pred), ("gt", gt)):
        c = pan.class_ids
        if c.size and (c.min() < 0 or c.max() > void):
            raise ValidationError(f"{name} contains class ids outside the catalog")

    g_uniq, g_inv, g_area = _segments(gt.encode().astype(np.int64).ravel())
    p_uniq, p_inv, p_area = _segments(pred.encode().astype(np.int64).ravel())
    g_cls = g_uniq // PANOPTIC_DIVISOR
    p_cls = p_uniq // PANOPTIC_DIVISOR
    n_p = p_uniq.size

    joint, inter = np.unique(g_inv.astype(np.int64) * n_p + p_inv, return_counts=True)
    gi, pi = np.divmod(joint, n_p)
    void_overlap = np.zeros(n_p, dtype=np.int64)
    on_void = g_cls[gi] == void
    np.add.at(void_overlap, pi[on_void], inter[on_void])

    tallies: dict[int, ClassTally] = {}
    g_matched = np.zeros(g_uniq.size, dtype=bool)
    p_matched = np.zeros(n_p, dtype=bool)
    same = (g_cls[gi] == p_cls[pi]) & (g_cls[gi] != void)
    for g, p, i in zip(gi[same], pi[same], inter[same]):
        union = p_area[p] + g_area[g] - i - void_overlap[p]
        iou = i / union
        if iou > 0.5:
            t = tallies.setdefault(int(g_cls[g]), ClassTally())
            t.tp += 1
            t.iou_sum += float(iou)
            g_matched[g] = True
            p_matched[p] = True
    for g in np.flatnonzero(~g_matched):
        if g_cls[g] != void:
            tallies.setdefault(int(g_cls[g]), ClassTally()).fn += 1
    for p in np.flatnonzero(~p_matched):
        if p_cls[p] == void:
            continue
        if void_overlap[p] / p_area[p] > 0.5:
            continue
        tallies.setdefault(int(p_cls[p]), ClassTally()).fp += 1
    return tallies


def scores_from_tallies(tallies: dict[int, ClassTally], catalog: ClassCatalog) -> PanopticScores:
    """Average per-class PQ/SQ/RQ over every class with at least one segment."""
    seen = {c: t for c, t in tallies.items() if t.seen}

    def avg(classes: Iterable[int]) -> tuple[float, float, float]:
        vals = [seen[c].pq_sq_rq() for c in classes if c in seen]
        if not vals:
            return 0.0, 0.0, 0.0
        a = np.array(vals)
        return tuple(float(x) for x in a.mean(axis=0))  # type: ignore[return-value]

    pq, sq, rq = avg(sorted(seen))
    pqt, sqt, rqt = avg(catalog.thing_ids)
    pqs, sqs, rqs = avg(catalog.stuff_ids)
    return PanopticScores(pq, sq, rq, pqt, sqt, rqt, pqs, sqs, rqs, dict(sorted(tallies.items())))


def panoptic_quality(pred: PanopticMap, gt: PanopticMap, catalog: ClassCatalog) -> PanopticScores:
    return scores_from_tallies(pq_tallies(pred, gt, catalog), catalog)


# ------------------------------------------------------------------ mIoU


def confusion_matrix(pred: SemanticLabelMap, gt: SemanticLabelMap, catalog: ClassCatalog) -> np.ndarray:
    """(K+1) x (K+1) counts indexed [gt, pred]; the last row/column is void."""
    check_same_shape(pred, gt, names=("pred", "gt"))
    k = catalog.void_id + 1
    p = np.clip(pred.labels.astype(np.int64).ravel(), 0, k - 1)
    g = np.clip(gt.labels.astype(np.int64).ravel(), 0, k - 1)
    return np.bincount(g * k + p, minlength=k * k).reshape(k, k)


def iou_from_confusion(conf: np.ndarray, catalog: ClassCatalog) -> tuple[float, dict[int, float]]:
    k = catalog.num_classes
    conf = conf[:k]  # pixels whose gt is void are ignored
    inter = np.diag(conf[:, :k]).astype(np.float64)
    gt_count = conf.sum(axis=1)
    pred_count = conf[:, :k].sum(axis=0)
    union = gt_count + pred_count - inter
    per_class = {int(c): float(inter[c] / union[c]) for c in range(k) if union[c] > 0}
    miou = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return miou, per_class


def mean_iou(
    pred: SemanticLabelMap, gt: SemanticLabelMap, catalog: ClassCatalog
) -> tuple[float, dict[int, float]]:
    """Mean over classes that occur in either map of |pred & gt| / |pred | gt|."""
    return iou_from_confusion(confusion_matrix(pred, gt, catalog), catalog)


# ------------------------------------------------------------------ AP


@dataclass
class _Detection:
    class_id: int
    confidence: float
    image: int
    pred_id: int
    tp: np.ndarray  # one flag per threshold


def _instance_ious(pred_ids: np.ndarray, gt_ids: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """IoU matrix indexed [pred_id, gt_id] (row/col 0 unused)."""
    n_p = int(pred_ids.max()) + 1 if pred_ids.size else 1
    n_g = int(gt_ids.max()) + 1 if gt_ids.size else 1
    joint = np.bincount(
        pred_ids.astype(np.int64).ravel() * n_g + gt_ids.astype(np.int64).ravel(),
        minlength=n_p * n_g,
    ).reshape(n_p, n_g)
    pa = joint.sum(axis=1)
    ga = joint.sum(axis=0)
    union = pa[:, None] + ga[None, :] - joint
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, joint / np.maximum(union, 1), 0.0)
    iou[0, :] = 0
    iou[:, 0] = 0
    return iou, pa, ga


def _match_image(
    pred: InstanceLabelMap,
    gt: InstanceLabelMap,
    thresholds: Sequence[float],
    image: int,
) -> list[_Detection]:
    check_same_shape(pred, gt, names=("pred", "gt"))
    iou, _, _ = _instance_ious(pred.ids, gt.ids)
    gt_by_class: dict[int, list[int]] = {}
    for r in gt.records:
        gt_by_class.setdefault(r.class_id, []).append(r.id)
    preds = sorted(pred.records, key=lambda r: (-r.confidence, r.id))
    thr = np.asarray(thresholds, dtype=np.float64)
    taken = {t: set() for t in range(thr.size)}
    dets = []
    for r in preds:
        flags = np.zeros(thr.size, dtype=bool)
        cands = gt_by_class.get(r.class_id, [])
        if cands and r.id < iou.shape[0]:
            cand = np.array(cands)
            cand = cand[cand < iou.shape[1]]
            vals = iou[r.id, cand] if cand.size else np.zeros(0)
            # highest IoU first, smaller gt id on ties
            order = np.lexsort((cand, -vals))
            for t in range(thr.size):
                for j in order:
                    g = int(cand[j])
                    if g in taken[t]:
                        continue
                    if vals[j] >= thr[t]:
                        taken[t].add(g)
                        flags[t] = True
                    break
        dets.append(_Detection(r.class_id, r.confidence, image, r.id, flags))
    return dets


def _average_precision(flags: np.ndarray, n_gt: int) -> float:
    """Area under the PR curve with precision made non-increasing from the right."""
    if n_gt == 0:
        return math.nan
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    interp = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(((recall - prev) * interp).sum())


@dataclass
class APResult:
    ap: float
    per_threshold: dict[float, float]
    per_class: dict[int, float]

    def to_json(self) -> dict:
        return {
            "ap": _nan_to_none(self.ap),
            "per_threshold": {f"{t:.2f}": _nan_to_none(v) for t, v in self.per_threshold.items()},
            "per_class": {str(c): _nan_to_none(v) for c, v in self.per_class.items()},
        }


def _nan_to_none(v: float) -> float | None:
    return None if v is None or (isinstance(v, float) and math.isnan(v)) else v


def _ap_from_detections(
    dets: list[_Detection], n_gt: dict[int, int], thresholds: Sequence[float]
) -> APResult:
    classes = sorted(c for c, n in n_gt.items() if n > 0)
    table = np.full((len(classes), len(thresholds)), math.nan)
    for ci, c in enumerate(classes):
        mine = sorted(
            (d for d in dets if d.class_id == c),
            key=lambda d: (-d.confidence, d.image, d.pred_id),
        )
        flags = np.array([d.tp for d in mine], dtype=bool).reshape(len(mine), len(thresholds))
        for t in range(len(thresholds)):
            table[ci, t] = _average_precision(flags[:, t], n_gt[c])
    if not classes:
        return APResult(math.nan, {float(t): math.nan for t in thresholds}, {})
    per_thr = {float(t): float(table[:, i].mean()) for i, t in enumerate(thresholds)}
    per_cls = {c: float(table[i].mean()) for i, c in enumerate(classes)}
    return APResult(float(table.mean(axis=1).mean()), per_thr, per_cls)


def mask_ap(
    pred: InstanceLabelMap,
    gt: InstanceLabelMap,
    thresholds: Sequence[float] = DEFAULT_AP_THRESHOLDS,
) -> APResult:
    """Mask AP for one image. NaN when the GT has no instances."""
    dets = _match_image(pred, gt, thresholds, 0)
    n_gt: dict[int, int] = {}
    for r in gt.records:
        n_gt[r.class_id] = n_gt.get(r.class_id, 0) + 1
    return _ap_from_detections(dets, n_gt, thresholds)


# ------------------------------------------------------------------ pooled


def panoptic_instances(
    pan: PanopticMap, catalog: ClassCatalog, confidences: dict[int, float] | None = None
) -> InstanceLabelMap:
    """Thing segments of a panoptic map as an InstanceLabelMap.

    ``confidences`` is keyed by encoded segment id (class*1000 + instance);
    segments without an entry get confidence 1.
    """
    ids, cls = panoptic_to_instances(pan, catalog)
    if not cls:
        return InstanceLabelMap(ids)
    area, cent = instance_geometry(ids)
    enc_of = {}
    enc = pan.encode().astype(np.int64)
    flat_ids = ids.ravel()
    first = np.unique(flat_ids, return_index=True)
    for i, pos in zip(*first):
        if i:
            enc_of[int(i)] = int(enc.ravel()[pos])
    conf = confidences or {}
    recs = [
        InstanceRecord(
            i,
            c,
            int(area[i]),
            (float(cent[i, 0]), float(cent[i, 1])),
            float(conf.get(enc_of[i], 1.0)),
        )
        for i, c in cls.items()
    ]
    return InstanceLabelMap(ids, tuple(recs))


class Evaluator:
    """Accumulates PQ, mIoU and AP over a sequence of images."""

    def __init__(self, catalog: ClassCatalog, ap_thresholds: Sequence[float] = DEFAULT_AP_THRESHOLDS):
        self.catalog = catalog
        self.ap_thresholds = tuple(ap_thresholds)
        self.tallies: dict[int, ClassTally] = {}
        k = catalog.void_id + 1
        self.confusion = np.zeros((k, k), dtype=np.int64)
        self._dets: list[_Detection] = []
        self._n_gt: dict[int, int] = {}
        self.images = 0

    def add(
        self,
        pred: PanopticMap,
        gt: PanopticMap,
        pred_semantic: SemanticLabelMap | None = None,
        gt_semantic: SemanticLabelMap | None = None,
        confidences: dict[int, float] | None = None,
    ) -> None:
        for c, t in pq_tallies(pred, gt, self.catalog).items():
            self.tallies.setdefault(c, ClassTally())
            self.tallies[c] += t
        ps = pred_semantic or SemanticLabelMap(pred.class_ids)
        gs = gt_semantic or SemanticLabelMap(gt.class_ids)
        self.confusion += confusion_matrix(ps, gs, self.catalog)
        pi = panoptic_instances(pred, self.catalog, confidences)
        gi = panoptic_instances(gt, self.catalog)
        self._dets.extend(_match_image(pi, gi, self.ap_thresholds, self.images))
        for r in gi.records:
            self._n_gt[r.class_id] = self._n_gt.get(r.class_id, 0) + 1
        self.images += 1

    def panoptic(self) -> PanopticScores:
        return scores_from_tallies(self.tallies, self.catalog)

    def miou(self) -> tuple[float, dict[int, float]]:
        return iou_from_confusion(self.confusion, self.catalog)

    def ap(self) -> APResult:
        return _ap_from_detections(self._dets, self._n_gt, self.ap_thresholds)

    def report(self) -> dict:
        pan = self.panoptic()
        miou, per_iou = self.miou()
        ap = self.ap()
        return {
            "images": self.images,
            "summary": {
                "mIoU": miou,
                "PQ_St": pan.pq_stuff,
                "AP": _nan_to_none(ap.ap),
                "PQ_Th": pan.pq_things,
                "SQ_Th": pan.sq_things,
                "RQ_Th": pan.rq_things,
                "PQ": pan.pq,
                "SQ": pan.sq,
                "RQ": pan.rq,
            },
            "panoptic": pan.to_json(self.catalog),
            "iou_per_class": {str(c): v for c, v in per_iou.items()},
            "ap": ap.to_json(),
        }
