"""Split, merge and min-area refinement driven by center offsets."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from contourpan.instances import compute_records, nearest_centroid
from contourpan.raster import (
    ClassCatalog,
    InstanceLabelMap,
    OffsetField,
    SemanticLabelMap,
    SemanticProbMap,
    ValidationError,
)


@dataclass(frozen=True)
class RefineParams:
    eps: float = 20.0
    min_samples: int | None = None  # None: max(10, ceil(1% of the instance area))
    min_area: int = 300
    merge_distance: float = 20.0
    merge_same_class_only: bool = True
    split: bool = True
    merge: bool = True
    filter: bool = True

    def __post_init__(self) -> None:
        if not self.eps > 0:
            raise ValidationError(f"eps must be > 0, got {self.eps}")
        if self.min_area < 0:
            raise ValidationError(f"min_area must be >= 0, got {self.min_area}")
        if self.min_samples is not None and self.min_samples < 1:
            raise ValidationError(f"min_samples must be >= 1, got {self.min_samples}")
        if not self.merge_distance > 0:
            raise ValidationError(f"merge_distance must be > 0, got {self.merge_distance}")

    def samples_for(self, area: int) -> int:
        if self.min_samples is not None:
            return self.min_samples
        return max(10, math.ceil(0.01 * area))


def predicted_centers(pixels: np.ndarray, offsets: OffsetField) -> np.ndarray:
    """``pixels`` is (N, 2) of (row, col); returns position + offset as float64."""
    pixels = np.asarray(pixels)
    off = offsets.offsets[pixels[:, 0], pixels[:, 1]].astype(np.float64)
    return pixels.astype(np.float64) + off


# ---------------------------------------------------------------- dbscan


def dbscan(points: np.ndarray, eps: float, min_samples: int) -> np.ndarray:
    """Density clustering; returns one label per point, -1 for noise.

    Neighbourhoods are closed balls (squared distance <= eps**2) and include
    the point itself. Clusters are numbered in order of their first core
    point. A border point reachable from several clusters joins the cluster
    of its earliest core neighbour in input order.
    """
    if not eps > 0:
        raise ValidationError(f"eps must be > 0, got {eps}")
    if min_samples < 1:
        raise ValidationError(f"min_samples must be >= 1, got {min_samples}")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = pts.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)

    # collapse duplicates into weighted points, kept in first-occurrence order
    uniq, first, inverse, counts = np.unique(
        pts, axis=0, return_index=True, return_inverse=True, return_counts=True
    )
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    uniq, counts, inverse = uniq[order], counts[order], rank[inverse.ravel()]

    extent = uniq.max(axis=0) - uniq.min(axis=0)
    if float(extent @ extent) <= eps * eps:
        # every pair is within eps: one cluster or nothing
        return np.full(n, 0 if n >= min_samples else -1, dtype=np.int64)
    return _grid_dbscan(uniq, counts, eps, min_samples)[inverse]


def _grid_dbscan(u: np.ndarray, w: np.ndarray, eps: float, min_samples: int) -> np.ndarray:
    m = u.shape[0]
    eps2 = eps * eps
    side = eps / math.sqrt(2.0)  # any two points in one cell are neighbours
    cell = np.floor((u - u.min(axis=0)) / side).astype(np.int64)
    keys = cell[:, 0] * (int(cell[:, 1].max()) + 5) + cell[:, 1]
    stride = int(cell[:, 1].max()) + 5
    srt = np.argsort(keys, kind="stable")
    uk, starts = np.unique(keys[srt], return_index=True)
    members = np.split(srt, starts[1:])
    cells = {int(k): np.sort(idx) for k, idx in zip(uk, members)}
    window = [dr * stride + dc for dr in range(-2, 3) for dc in range(-2, 3)]
    nbrs = {k: [k + d for d in window if k + d in cells] for k in cells}

    core = np.zeros(m, dtype=bool)
    for k, idx in cells.items():
        if w[idx].sum() >= min_samples:
            core[idx] = True
            continue
        cand = np.concatenate([cells[j] for j in nbrs[k]])
        d2 = ((u[idx, None, :] - u[None, cand, :]) ** 2).sum(axis=2)
        core[idx] = (d2 <= eps2) @ w[cand] >= min_samples

    core_cells = {k: idx[core[idx]] for k, idx in cells.items() if core[idx].any()}
    parent = {k: k for k in core_cells}

    def find(k: int) -> int:
        while parent[k] != k:
            parent[k] = parent[parent[k]]
            k = parent[k]
        return k

    trees: dict[int, cKDTree] = {}
    for k, a in core_cells.items():
        for j in nbrs[k]:
            if j <= k or j not in core_cells or find(j) == find(k):
                continue
            b = core_cells[j]
            if a.size * b.size <= 4096:
                d2 = ((u[a, None, :] - u[None, b, :]) ** 2).sum(axis=2)
                linked = bool((d2 <= eps2).any())
            else:
                if j not in trees:
                    trees[j] = cKDTree(u[b])
                _, hit = trees[j].query(u[a], k=1)
                d2 = ((u[a] - u[b[hit]]) ** 2).sum(axis=1)
                linked = bool((d2 <= eps2).any())
            if linked:
                ra, rb = find(k), find(j)
                parent[max(ra, rb)] = min(ra, rb)

    labels = np.full(m, -1, dtype=np.int64)
    if not core_cells:
        return labels
    # number clusters by their earliest core point
    root_first: dict[int, int] = {}
    for k, a in core_cells.items():
        r = find(k)
        root_first[r] = min(root_first.get(r, m), int(a[0]))
    numbering = {r: i for i, r in enumerate(sorted(root_first, key=root_first.__getitem__))}
    for k, a in core_cells.items():
        labels[a] = numbering[find(k)]

    for k, idx in cells.items():
        border = idx[~core[idx]]
        if border.size == 0:
            continue
        cand = [core_cells[j] for j in nbrs[k] if j in core_cells]
        if not cand:
            continue
        cand_idx = np.sort(np.concatenate(cand))
        d2 = ((u[border, None, :] - u[None, cand_idx, :]) ** 2).sum(axis=2)
        within = d2 <= eps2
        has = within.any(axis=1)
        first_hit = cand_idx[np.argmax(within, axis=1)]
        labels[border[has]] = labels[first_hit[has]]
    return labels


# ---------------------------------------------------------------- helpers


def _rebuild(
    ids: np.ndarray,
    labels: SemanticLabelMap,
    probs: SemanticProbMap | None,
    catalog: ClassCatalog,
) -> InstanceLabelMap:
    return InstanceLabelMap(ids, compute_records(ids, labels, probs, catalog))


def _center_sums(ids: np.ndarray, offsets: OffsetField) -> tuple[np.ndarray, np.ndarray]:
    """Per-id pixel count and mean predicted center (index = id)."""
    h, w = ids.shape
    flat = ids.ravel()
    fg = np.flatnonzero(flat)
    lab = flat[fg]
    n = int(lab.max()) + 1 if lab.size else 1
    rows, cols = np.divmod(fg, w)
    off = offsets.offsets.reshape(h * w, 2)[fg].astype(np.float64)
    area = np.bincount(lab, minlength=n)
    with np.errstate(invalid="ignore", divide="ignore"):
        cr = np.bincount(lab, weights=rows + off[:, 0], minlength=n) / area
        cc = np.bincount(lab, weights=cols + off[:, 1], minlength=n) / area
    return area, np.stack([cr, cc], axis=1)


def _group_by_distance(points: np.ndarray, limit: float, allowed: np.ndarray | None = None) -> np.ndarray:
    """Connected components of the graph joining points closer than ``limit``.

    Returns, per point, the index of the smallest member of its component.
    """
    n = points.shape[0]
    root = np.arange(n)
    if n < 2:
        return root
    d = np.sqrt(((points[:, None, :] - points[None, :, :]) ** 2).sum(axis=2))
    adj = d < limit
    if allowed is not None:
        adj &= allowed
    _, comp = connected_components(csr_matrix(adj), directed=False)
    firsts = np.full(comp.max() + 1, n)
    np.minimum.at(firsts, comp, np.arange(n))
    return firsts[comp]


# ---------------------------------------------------------------- steps


def split_instances(
    instances: InstanceLabelMap,
    offsets: OffsetField,
    params: RefineParams,
    labels: SemanticLabelMap,
    probs: SemanticProbMap | None,
    catalog: ClassCatalog,
) -> InstanceLabelMap:
    ids = instances.ids
    present = instances.present_ids()
    if present.size == 0:
        return instances
    h, w = ids.shape
    flat = ids.ravel()
    fg = np.flatnonzero(flat)
    lab = flat[fg]
    rows, cols = np.divmod(fg, w)
    off = offsets.offsets.reshape(h * w, 2)[fg].astype(np.float64)
    ctr = np.stack([rows + off[:, 0], cols + off[:, 1]], axis=1)
    # cheap exact screen: centers inside a box of diagonal < eps cannot hold
    # two cluster means that are eps apart
    n = int(lab.max()) + 1
    lo = np.full((n, 2), np.inf)
    hi = np.full((n, 2), -np.inf)
    for axis in (0, 1):
        np.minimum.at(lo[:, axis], lab, ctr[:, axis])
        np.maximum.at(hi[:, axis], lab, ctr[:, axis])
    spread = np.hypot(*(hi[present] - lo[present]).T)
    candidates = present[spread >= params.eps]
    if candidates.size == 0:
        return instances

    out = ids.copy()
    next_id = int(ids.max()) + 1
    changed = False
    for inst in candidates:
        sel = lab == inst
        centers = ctr[sel]
        prow, pcol = np.divmod(fg[sel], w)
        cl = dbscan(centers, params.eps, params.samples_for(prow.size))
        n_clusters = int(cl.max()) + 1
        if n_clusters < 2:
            continue
        means = np.stack(
            [centers[cl == k].mean(axis=0) for k in range(n_clusters)], axis=0
        )
        group = _group_by_distance(means, params.eps)
        roots = np.unique(group)
        if roots.size < 2:
            continue
        group_means = np.stack(
            [centers[np.isin(cl, np.flatnonzero(group == g))].mean(axis=0) for g in roots]
        )
        pix_group = np.empty(prow.size, dtype=np.intp)
        clustered = cl >= 0
        pix_group[clustered] = np.searchsorted(roots, group[cl[clustered]])
        if (~clustered).any():
            pix_group[~clustered] = nearest_centroid(centers[~clustered], group_means)
        out[prow, pcol] = next_id + pix_group
        next_id += roots.size
        changed = True
    if not changed:
        return instances
    return _rebuild(out, labels, probs, catalog)


def merge_instances(
    instances: InstanceLabelMap,
    offsets: OffsetField,
    params: RefineParams,
    labels: SemanticLabelMap,
    probs: SemanticProbMap | None,
    catalog: ClassCatalog,
) -> InstanceLabelMap:
    present = instances.present_ids()
    if present.size < 2:
        return instances
    _, means = _center_sums(instances.ids, offsets)
    pts = means[present]
    allowed = None
    if params.merge_same_class_only:
        cls = np.array([instances.record_map()[int(i)].class_id for i in present])
        allowed = cls[:, None] == cls[None, :]
    root = _group_by_distance(pts, params.merge_distance, allowed)
    if np.array_equal(root, np.arange(present.size)):
        return instances
    lut = np.arange(int(instances.ids.max()) + 1)
    lut[present] = present[root]
    return _rebuild(lut[instances.ids], labels, probs, catalog)


def filter_min_area(
    instances: InstanceLabelMap,
    offsets: OffsetField,
    params: RefineParams,
    labels: SemanticLabelMap,
    probs: SemanticProbMap | None,
    catalog: ClassCatalog,
) -> InstanceLabelMap:
    small = [r for r in instances.records if r.area < params.min_area]
    if not small:
        return instances
    keep = [r for r in instances.records if r.area >= params.min_area]
    ids = instances.ids
    lut = np.arange(int(ids.max()) + 1)
    lut[[r.id for r in small]] = 0
    out = lut[ids]
    if keep:
        rows, cols = np.nonzero((ids > 0) & (out == 0))
        centers = predicted_centers(np.stack([rows, cols], axis=1), offsets)
        cents = np.array([r.centroid for r in keep])
        keep_ids = np.array([r.id for r in keep])
        out[rows, cols] = keep_ids[nearest_centroid(centers, cents)]
    return _rebuild(out, labels, probs, catalog)


def refine(
    instances: InstanceLabelMap,
    offsets: OffsetField,
    labels: SemanticLabelMap,
    probs: SemanticProbMap | None,
    catalog: ClassCatalog,
    params: RefineParams = RefineParams(),
) -> InstanceLabelMap:
    """Split, then merge, then drop small instances (each step optional)."""
    if params.split:
        instances = split_instances(instances, offsets, params, labels, probs, catalog)
    if params.merge:
        instances = merge_instances(instances, offsets, params, labels, probs, catalog)
    if params.filter:
        instances = filter_min_area(instances, offsets, params, labels, probs, catalog)
    return instances
