"""Slow, obviously-correct reference implementations used by the tests."""

from __future__ import annotations

from collections import deque
from typing import Callable

import numpy as np


def flood_fill_label(mask: np.ndarray, connectivity: int) -> np.ndarray:
    """Label components by BFS, numbering them in row-major first-pixel order."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    if connectivity == 4:
        steps = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    else:
        steps = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if dr or dc]
    out = np.zeros((h, w), dtype=np.int64)
    nxt = 1
    for r in range(h):
        for c in range(w):
            if not mask[r, c] or out[r, c]:
                continue
            out[r, c] = nxt
            queue = deque([(r, c)])
            while queue:
                y, x = queue.popleft()
                for dy, dx in steps:
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < h and 0 <= xx < w and mask[yy, xx] and not out[yy, xx]:
                        out[yy, xx] = nxt
                        queue.append((yy, xx))
            nxt += 1
    return out


def brute_dbscan(points: np.ndarray, eps: float, min_samples: int) -> np.ndarray:
    """Textbook DBSCAN on the full distance matrix.

    Same conventions as the library: closed eps-ball including the point
    itself, clusters numbered by first core point, border points join the
    cluster of their earliest core neighbour.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
    nb = d2 <= eps * eps
    core = nb.sum(axis=1) >= min_samples
    labels = np.full(n, -1, dtype=np.int64)
    k = 0
    for i in range(n):
        if not core[i] or labels[i] >= 0:
            continue
        labels[i] = k
        stack = [i]
        while stack:
            j = stack.pop()
            for m in np.flatnonzero(nb[j] & core):
                if labels[m] < 0:
                    labels[m] = k
                    stack.append(m)
        k += 1
    for i in range(n):
        if core[i]:
            continue
        hits = np.flatnonzero(nb[i] & core)
        if hits.size:
            labels[i] = labels[hits[0]]
    return labels


def brute_pq_counts(
    pred_enc: np.ndarray, gt_enc: np.ndarray, void_id: int, divisor: int = 1000
) -> dict[int, tuple[int, int, int, float]]:
    """Per-class (tp, fp, fn, iou_sum) by scoring every same-class pair.

    Pairs are matched greedily by IoU, which needs no uniqueness argument;
    with the > 0.5 rule it must agree with any correct matcher.
    """
    g_ids = [int(v) for v in np.unique(gt_enc)]
    p_ids = [int(v) for v in np.unique(pred_enc)]
    void_px = gt_enc // divisor == void_id
    pairs = []
    for g in g_ids:
        if g // divisor == void_id:
            continue
        gm = gt_enc == g
        for p in p_ids:
            if p // divisor != g // divisor:
                continue
            pm = pred_enc == p
            inter = int((gm & pm).sum())
            union = int((gm | pm).sum()) - int((pm & void_px).sum())
            iou = inter / union if union else 0.0
            pairs.append((iou, g, p))
    pairs.sort(reverse=True)
    used_g: set[int] = set()
    used_p: set[int] = set()
    out: dict[int, list] = {}
    for iou, g, p in pairs:
        if iou <= 0.5 or g in used_g or p in used_p:
            continue
        used_g.add(g)
        used_p.add(p)
        t = out.setdefault(g // divisor, [0, 0, 0, 0.0])
        t[0] += 1
        t[3] += iou
    for g in g_ids:
        if g // divisor != void_id and g not in used_g:
            out.setdefault(g // divisor, [0, 0, 0, 0.0])[2] += 1
    for p in p_ids:
        if p // divisor == void_id or p in used_p:
            continue
        pm = pred_enc == p
        if (pm & void_px).sum() / pm.sum() > 0.5:
            continue
        out.setdefault(p // divisor, [0, 0, 0, 0.0])[1] += 1
    return {c: tuple(v) for c, v in out.items()}


def brute_dilate(mask: np.ndarray, rate: int) -> np.ndarray:
    """Square structuring element of side 2*rate+1, by explicit neighbour loops."""
    h, w = mask.shape
    out = np.zeros_like(mask, dtype=bool)
    for r, c in zip(*np.nonzero(mask)):
        out[max(r - rate, 0) : r + rate + 1, max(c - rate, 0) : c + rate + 1] = True
    return out


def brute_contours(ids: np.ndarray) -> np.ndarray:
    """Instance pixels with an 8-neighbour (or the image border) of another id."""
    h, w = ids.shape
    out = np.zeros((h, w), dtype=bool)
    for r in range(h):
        for c in range(w):
            if ids[r, c] == 0:
                continue
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    rr, cc = r + dr, c + dc
                    if not (0 <= rr < h and 0 <= cc < w) or ids[rr, cc] != ids[r, c]:
                        out[r, c] = True
    return out


def central_difference(
    f: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-4
) -> np.ndarray:
    """Numerical gradient of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + step
        fp = f(x)
        x[i] = orig - step
        fm = f(x)
        x[i] = orig
        grad[i] = (fp - fm) / (2 * step)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))
