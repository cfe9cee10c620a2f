"""Instances from semantic labels and contour probabilities.

Thing pixels minus thresholded contours form the boundary-aware mask; its
connected components become instances. Contour pixels are then handed back
to the instance whose centroid is nearest to their predicted center (or, with
no offsets, to the nearest instance by BFS over the thing mask).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components as _graph_components

from contourpan.raster import (
    ClassCatalog,
    ContourProbMap,
    InstanceLabelMap,
    InstanceRecord,
    OffsetField,
    SemanticLabelMap,
    SemanticProbMap,
    ValidationError,
    argmax_semantic,
    check_same_shape,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DeriveParams:
    contour_threshold: float = 0.5
    connectivity: int = 4

    def __post_init__(self) -> None:
        if not 0.0 < self.contour_threshold < 1.0:
            raise ValidationError(f"contour_threshold must lie in (0, 1), got {self.contour_threshold}")
        if self.connectivity not in (4, 8):
            raise ValidationError(f"connectivity must be 4 or 8, got {self.connectivity}")


def instance_class_mask(labels: SemanticLabelMap, catalog: ClassCatalog) -> np.ndarray:
    lut = catalog.thing_lut()
    lab = labels.labels
    if lab.size and (lab.min() < 0 or lab.max() > catalog.void_id):
        raise ValidationError("semantic labels outside the catalog")
    return lut[lab]


def boundary_aware_mask(
    class_mask: np.ndarray, contour_probs: ContourProbMap, params: DeriveParams = DeriveParams()
) -> np.ndarray:
    if class_mask.shape != contour_probs.probs.shape:
        raise ValidationError(
            f"dimension mismatch: class mask {class_mask.shape} vs contours {contour_probs.probs.shape}"
        )
    return class_mask & ~(contour_probs.probs > params.contour_threshold)


def _row_runs(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Horizontal runs of True pixels, in row-major order: (row, start, stop)."""
    h, w = mask.shape
    padded = np.zeros((h, w + 2), dtype=np.int8)
    padded[:, 1:-1] = mask
    d = np.diff(padded, axis=1).ravel()
    starts = np.flatnonzero(d == 1)
    stops = np.flatnonzero(d == -1)
    # each row of d has w+1 entries
    row = starts // (w + 1)
    return row, starts - row * (w + 1), stops - row * (w + 1)


def connected_components(mask: np.ndarray, connectivity: int = 4) -> InstanceLabelMap:
    """Label connected regions of ``mask``.

    Works on horizontal runs: runs on consecutive rows that overlap (or touch
    diagonally, for 8-connectivity) are joined, and the run graph is split
    into components. Ids are 1, 2, ... in order of each component's first
    pixel in row-major order.
    """
    if connectivity not in (4, 8):
        raise ValidationError(f"connectivity must be 4 or 8, got {connectivity}")
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    ids = np.zeros((h, w), dtype=np.int32)
    row, start, stop = _row_runs(mask)
    n = row.size
    if n == 0:
        return InstanceLabelMap(ids)

    slack = 1 if connectivity == 8 else 0
    stride = w + 2
    key_start = row * stride + start
    key_stop = row * stride + stop
    # for every run on row r+1 find the runs on row r with stop > s - slack and start < e + slack
    prev = row - 1
    lo = np.searchsorted(key_stop, prev * stride + start - slack, side="right")
    hi = np.searchsorted(key_start, prev * stride + stop + slack, side="left")
    cnt = np.maximum(hi - lo, 0)
    src = np.repeat(np.arange(n), cnt)
    offs = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
    dst = np.repeat(lo, cnt) + offs
    graph = coo_matrix((np.ones(src.size, dtype=np.int8), (src, dst)), shape=(n, n))
    _, comp = _graph_components(graph, directed=False)

    # renumber components by their first run (runs are already row-major)
    first = np.full(comp.max() + 1, n, dtype=np.int64)
    np.minimum.at(first, comp, np.arange(n))
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    run_ids = (rank[comp] + 1).astype(np.int32)
    ids[mask] = np.repeat(run_ids, stop - start)
    return InstanceLabelMap(ids)


def _pixel_groups(ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    flat = ids.ravel()
    fg = np.flatnonzero(flat)
    return fg, flat[fg]


def compute_records(
    ids: np.ndarray,
    labels: SemanticLabelMap,
    probs: SemanticProbMap | None,
    catalog: ClassCatalog,
    diagnostics: dict | None = None,
) -> tuple[InstanceRecord, ...]:
    """Class by majority vote (thing classes only), confidence by mean probability."""
    h, w = ids.shape
    fg, lab = _pixel_groups(ids)
    if fg.size == 0:
        return ()
    n = int(lab.max()) + 1
    k = catalog.void_id + 1
    sem = labels.labels.ravel()[fg].astype(np.int64)
    votes = np.bincount(lab.astype(np.int64) * k + sem, minlength=n * k).reshape(n, k)
    area = votes.sum(axis=1)
    thing = catalog.thing_lut()
    # argmax takes the first maximum, i.e. the smallest class id on ties
    modal_any = np.argmax(votes, axis=1)
    thing_votes = np.where(thing[None, :], votes, -1)
    modal_thing = np.argmax(thing_votes, axis=1)
    present = np.flatnonzero(area)
    flagged = [int(i) for i in present if not thing[modal_any[i]] or votes[i, modal_thing[i]] <= 0]
    if flagged:
        log.warning("instances %s have a non-thing majority label", flagged)
        if diagnostics is not None:
            diagnostics.setdefault("non_thing_majority", []).extend(flagged)
    if any(votes[i, modal_thing[i]] <= 0 for i in present):
        # no thing pixel at all: fall back to the first thing class
        modal_thing = np.where(votes[np.arange(n), modal_thing] > 0, modal_thing, catalog.thing_ids[0])

    rows, cols = np.divmod(fg, w)
    with np.errstate(invalid="ignore", divide="ignore"):
        cr = np.bincount(lab, weights=rows, minlength=n) / area
        cc = np.bincount(lab, weights=cols, minlength=n) / area
        if probs is not None:
            flat_probs = probs.probs.reshape(h * w, -1)
            p = flat_probs[fg, modal_thing[lab]].astype(np.float64)
            conf = np.bincount(lab, weights=p, minlength=n) / area
        else:
            conf = np.ones(n)
    return tuple(
        InstanceRecord(
            int(i),
            int(modal_thing[i]),
            int(area[i]),
            (float(cr[i]), float(cc[i])),
            float(min(max(conf[i], 0.0), 1.0)),
        )
        for i in present
    )


def assign_class_and_confidence(
    instances: InstanceLabelMap,
    labels: SemanticLabelMap,
    probs: SemanticProbMap | None,
    catalog: ClassCatalog,
    diagnostics: dict | None = None,
) -> InstanceLabelMap:
    return InstanceLabelMap(
        instances.ids, compute_records(instances.ids, labels, probs, catalog, diagnostics)
    )


def nearest_centroid(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Index of the nearest centroid per point; ties go to the lower index."""
    points = np.asarray(points, dtype=np.float64)
    centroids = np.asarray(centroids, dtype=np.float64)
    pr, pc = points[:, 0], points[:, 1]
    best = np.full(points.shape[0], np.inf)
    out = np.zeros(points.shape[0], dtype=np.intp)
    for i, (cr, cc) in enumerate(centroids):
        d = (pr - cr) ** 2 + (pc - cc) ** 2
        closer = d < best
        best = np.where(closer, d, best)
        out[closer] = i
    return out


def _bfs_fill(ids: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    """Grow ids into ``allowed`` zero pixels, one 4-neighbour ring at a time.

    A pixel reached by several instances in the same ring takes the smallest id.
    """
    ids = ids.copy()
    big = np.iinfo(np.int64).max
    work = np.where(ids > 0, ids.astype(np.int64), big)
    pending = allowed & (ids == 0)
    while pending.any():
        best = np.full(ids.shape, big, dtype=np.int64)
        best[1:, :] = np.minimum(best[1:, :], work[:-1, :])
        best[:-1, :] = np.minimum(best[:-1, :], work[1:, :])
        best[:, 1:] = np.minimum(best[:, 1:], work[:, :-1])
        best[:, :-1] = np.minimum(best[:, :-1], work[:, 1:])
        grow = pending & (best < big)
        if not grow.any():
            break
        work[grow] = best[grow]
        pending &= ~grow
    return np.where(work < big, work, 0).astype(ids.dtype)


def reassign_contour_pixels(
    instances: InstanceLabelMap,
    class_mask: np.ndarray,
    offsets: OffsetField | None = None,
) -> np.ndarray:
    """Give every unlabeled thing pixel an instance id where possible.

    Returns the new id raster; records have to be recomputed by the caller.
    """
    ids = instances.ids
    todo = class_mask & (ids == 0)
    if not todo.any():
        return ids.copy()
    present = instances.present_ids()
    if present.size == 0:
        return ids.copy()
    if offsets is None:
        return _bfs_fill(ids, class_mask)

    out = ids.copy()
    _, w = ids.shape
    area_ids = ids.ravel()
    fg = np.flatnonzero(area_ids)
    lab = area_ids[fg]
    rows, cols = np.divmod(fg, w)
    n = int(lab.max()) + 1
    area = np.bincount(lab, minlength=n)[present]
    cent = np.stack(
        [
            np.bincount(lab, weights=rows, minlength=n)[present] / area,
            np.bincount(lab, weights=cols, minlength=n)[present] / area,
        ],
        axis=1,
    )
    tr, tc = np.nonzero(todo)
    off = offsets.offsets[tr, tc].astype(np.float64)
    centers = np.stack([tr + off[:, 0], tc + off[:, 1]], axis=1)
    out[tr, tc] = present[nearest_centroid(centers, cent)]
    return out


def derive_instances(
    sem_probs: SemanticProbMap,
    contour_probs: ContourProbMap,
    catalog: ClassCatalog,
    offsets: OffsetField | None = None,
    params: DeriveParams = DeriveParams(),
    labels: SemanticLabelMap | None = None,
    diagnostics: dict | None = None,
) -> tuple[SemanticLabelMap, InstanceLabelMap]:
    """Full instance derivation; returns the argmax labels and the instances."""
    check_same_shape(sem_probs, contour_probs, names=("semantic probs", "contours"))
    if offsets is not None:
        check_same_shape(sem_probs, offsets, names=("semantic probs", "offsets"))
    if labels is None:
        labels = argmax_semantic(sem_probs)
    class_mask = instance_class_mask(labels, catalog)
    aware = boundary_aware_mask(class_mask, contour_probs, params)
    comps = connected_components(aware, params.connectivity)
    ids = reassign_contour_pixels(comps, class_mask, offsets)
    if diagnostics is not None:
        diagnostics["components"] = int(comps.present_ids().size)
        diagnostics["unassigned_thing_pixels"] = int((class_mask & (ids == 0)).sum())
    return labels, InstanceLabelMap(ids, compute_records(ids, labels, sem_probs, catalog, diagnostics))
