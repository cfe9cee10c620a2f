"""Training losses with analytic gradients.

Every function returns ``(value, gradient)`` where the gradient has the shape
of the prediction argument. Reduction conventions: semantic cross entropy is
averaged over pixels; weighted BCE, Huber and the NMS term are summed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from contourpan.raster import (
    ContourMask,
    ContourProbMap,
    SemanticLabelMap,
    SemanticProbMap,
    ValidationError,
    check_same_shape,
)

EPS = 1e-12
CONTOUR_HUBER_DELTA = 0.3
CENTER_HUBER_DELTA = 1.0


@dataclass(frozen=True)
class LossWeights:
    lambda_semantic: float = 1.0
    lambda_contour: float = 50.0
    lambda_center: float = 0.1

    def __post_init__(self) -> None:
        for name in ("lambda_semantic", "lambda_contour", "lambda_center"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValidationError(f"{name} must be finite and >= 0, got {v}")

    @classmethod
    def parse(cls, text: str) -> LossWeights:
        try:
            parts = [float(p) for p in text.split(",")]
        except ValueError:
            raise ValidationError(f"weights must be numbers, got {text!r}") from None
        if len(parts) != 3:
            raise ValidationError(f"expected three comma-separated weights, got {text!r}")
        return cls(*parts)


@dataclass
class LossReport:
    semantic: float = 0.0
    wbce: float = 0.0
    huber_contour: float = 0.0
    nms: float = 0.0
    center: float = 0.0
    total: float = 0.0
    weights: LossWeights = field(default_factory=LossWeights)
    gradients: dict[str, np.ndarray] = field(default_factory=dict)
    diagnostics: dict[str, int] = field(default_factory=dict)

    @property
    def contour(self) -> float:
        return self.wbce + self.huber_contour + self.nms

    def to_json(self) -> dict:
        return {
            "semantic": self.semantic,
            "wbce": self.wbce,
            "huber_contour": self.huber_contour,
            "nms": self.nms,
            "contour": self.contour,
            "center": self.center,
            "total": self.total,
            "weights": [
                self.weights.lambda_semantic,
                self.weights.lambda_contour,
                self.weights.lambda_center,
            ],
            "diagnostics": dict(self.diagnostics),
        }


def semantic_ce(probs: SemanticProbMap, gt: SemanticLabelMap) -> tuple[float, np.ndarray]:
    check_same_shape(probs, gt, names=("probs", "gt"))
    p = probs.probs.astype(np.float64)
    lab = gt.labels.astype(np.intp)
    n = lab.size
    p_gt = np.take_along_axis(p, lab[..., None], axis=2)[..., 0]
    clamped = np.maximum(p_gt, EPS)
    value = float(-np.log(clamped).sum() / n)
    g_gt = np.where(p_gt > EPS, -1.0 / (n * clamped), 0.0)
    grad = np.zeros_like(p)
    np.put_along_axis(grad, lab[..., None], g_gt[..., None], axis=2)
    return value, grad


def weighted_bce(probs: ContourProbMap, gt: ContourMask) -> tuple[float, np.ndarray]:
    """Class-balanced BCE; beta is the fraction of non-edge pixels in ``gt``."""
    check_same_shape(probs, gt, names=("probs", "gt"))
    p = probs.probs.astype(np.float64)
    y = gt.mask.astype(np.float64)
    beta = 1.0 - y.mean()
    pos = np.maximum(p, EPS)
    neg = np.maximum(1.0 - p, EPS)
    value = float(-(beta * y * np.log(pos) + (1 - beta) * (1 - y) * np.log(neg)).sum())
    grad = -beta * y * np.where(p > EPS, 1.0 / pos, 0.0) + (1 - beta) * (1 - y) * np.where(
        1.0 - p > EPS, 1.0 / neg, 0.0
    )
    return value, grad


def huber(pred: np.ndarray, gt: np.ndarray, delta: float) -> tuple[float, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValidationError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if not delta > 0:
        raise ValidationError(f"delta must be positive, got {delta}")
    r = pred - gt
    a = np.abs(r)
    quad = a <= delta
    value = float(np.where(quad, 0.5 * r * r, delta * a - 0.5 * delta * delta).sum())
    grad = np.where(quad, r, delta * np.sign(r))
    return value, grad


def contour_normals(gt: ContourMask, rel_tol: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Unit normals at every contour pixel, from the distance transform.

    The distance-to-contour gradient points away from the contour on both
    sides and vanishes on the contour itself, so the normal is taken as the
    dominant eigenvector of the gradient structure tensor summed over the 3x3
    neighbourhood. Returns ``(normals, ok)`` for the contour pixels in
    row-major order; ``ok`` is False where the tensor has no dominant axis.
    """
    m = gt.mask
    dist = ndimage.distance_transform_edt(~m) if m.any() else np.zeros(m.shape)
    gr, gc = np.gradient(dist) if min(m.shape) > 1 else (np.zeros(m.shape), np.zeros(m.shape))
    box = np.ones((3, 3))
    jrr = ndimage.correlate(gr * gr, box, mode="nearest")
    jrc = ndimage.correlate(gr * gc, box, mode="nearest")
    jcc = ndimage.correlate(gc * gc, box, mode="nearest")
    rows, cols = np.nonzero(m)
    a, b, c = jrr[rows, cols], jrc[rows, cols], jcc[rows, cols]
    # closed-form eigen decomposition of [[a, b], [b, c]]
    half_tr = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    lam1 = half_tr + disc
    gap = 2 * disc
    ok = (lam1 > 0) & (gap > rel_tol * np.maximum(lam1, 1e-300))
    # eigenvector for lam1: (b, lam1 - a) or (lam1 - c, b); pick the better conditioned one
    v1 = np.stack([b, lam1 - a], axis=1)
    v2 = np.stack([lam1 - c, b], axis=1)
    use2 = np.linalg.norm(v2, axis=1) > np.linalg.norm(v1, axis=1)
    v = np.where(use2[:, None], v2, v1)
    norm = np.linalg.norm(v, axis=1)
    ok &= norm > 0
    v = np.where(ok[:, None], v / np.where(norm > 0, norm, 1.0)[:, None], 0.0)
    # canonical sign so results do not depend on which formula was chosen
    flip = (v[:, 0] < 0) | ((v[:, 0] == 0) & (v[:, 1] < 0))
    v[flip] *= -1
    return v, ok


def _bilinear_taps(
    pr: np.ndarray, pc: np.ndarray, h: int, w: int
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    # coordinates are clamped to the frame (edge replication)
    pr = np.clip(pr, 0, h - 1)
    pc = np.clip(pc, 0, w - 1)
    r0 = np.minimum(np.floor(pr).astype(np.intp), max(h - 2, 0))
    c0 = np.minimum(np.floor(pc).astype(np.intp), max(w - 2, 0))
    fr = pr - r0
    fc = pc - c0
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    idx = [r0 * w + c0, r0 * w + c1, r1 * w + c0, r1 * w + c1]
    wts = [(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc]
    return idx, wts


def nms_loss(
    probs: ContourProbMap, gt_contours: ContourMask, window: int = 9
) -> tuple[float, np.ndarray, dict[str, int]]:
    """Sharpness loss along contour normals.

    For every GT contour pixel, ``window`` samples of ``probs`` are taken at
    unit spacing along the normal (bilinear). The loss is the negative log of
    the softmax response at the central sample, summed over contour pixels.
    Returns ``(value, gradient, diagnostics)``.
    """
    check_same_shape(probs, gt_contours, names=("probs", "gt_contours"))
    if window < 3 or window % 2 == 0:
        raise ValidationError(f"window must be an odd integer >= 3, got {window}")
    p = probs.probs.astype(np.float64)
    h, w = p.shape
    grad = np.zeros(h * w)
    rows, cols = np.nonzero(gt_contours.mask)
    normals, ok = contour_normals(gt_contours)
    diag = {"contour_pixels": int(rows.size), "degenerate_normals": int((~ok).sum())}
    if not ok.any():
        return 0.0, grad.reshape(h, w), diag

    rows, cols, normals = rows[ok].astype(np.float64), cols[ok].astype(np.float64), normals[ok]
    half = window // 2
    steps = np.arange(-half, half + 1, dtype=np.float64)
    flat = p.ravel()
    taps = []
    samples = np.empty((rows.size, window))
    for k, t in enumerate(steps):
        idx, wts = _bilinear_taps(rows + t * normals[:, 0], cols + t * normals[:, 1], h, w)
        taps.append((idx, wts))
        samples[:, k] = sum(wt * flat[i] for i, wt in zip(idx, wts))

    shifted = samples - samples.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    soft = e / e.sum(axis=1, keepdims=True)
    hc = soft[:, half]
    value = float(-np.log(hc + EPS).sum())
    # d(-log(h + eps))/ds_k = -h * (delta_k,center - softmax_k) / (h + eps)
    scale = -hc / (hc + EPS)
    ds = scale[:, None] * ((np.arange(window) == half)[None, :] - soft)
    for k, (idx, wts) in enumerate(taps):
        for i, wt in zip(idx, wts):
            grad += np.bincount(i, weights=wt * ds[:, k], minlength=h * w)
    return value, grad.reshape(h, w), diag


def total_loss(
    semantic: float,
    wbce: float,
    huber_contour: float,
    nms: float,
    center: float,
    weights: LossWeights | None = None,
) -> LossReport:
    weights = weights or LossWeights()
    parts = (semantic, wbce, huber_contour, nms, center)
    if not all(np.isfinite(v) for v in parts):
        raise ValidationError(f"loss components must be finite, got {parts}")
    contour = wbce + huber_contour + nms
    total = (
        weights.lambda_semantic * semantic
        + weights.lambda_contour * contour
        + weights.lambda_center * center
    )
    return LossReport(semantic, wbce, huber_contour, nms, center, float(total), weights)


CONTOUR_TERMS = ("wbce", "huber", "nms")


def compute_losses(
    sem_probs: SemanticProbMap,
    sem_gt: SemanticLabelMap,
    contour_probs: ContourProbMap | None = None,
    contour_gt: ContourMask | None = None,
    offsets: np.ndarray | None = None,
    gt_offsets: np.ndarray | None = None,
    weights: LossWeights | None = None,
    contour_terms: tuple[str, ...] = CONTOUR_TERMS,
    center_mask: np.ndarray | None = None,
    nms_window: int = 9,
    with_gradients: bool = False,
) -> LossReport:
    """Evaluate every available term and combine them.

    Contour terms need both contour rasters, the center term needs both
    offset fields; missing pairs contribute zero. ``contour_terms`` selects
    which contour sub-losses are active. ``center_mask`` restricts the center
    Huber term to the given pixels (typically thing pixels).
    """
    unknown = set(contour_terms) - set(CONTOUR_TERMS)
    if unknown:
        raise ValidationError(f"unknown contour terms {sorted(unknown)}")
    grads: dict[str, np.ndarray] = {}
    diag: dict[str, int] = {}
    sem, g = semantic_ce(sem_probs, sem_gt)
    grads["semantic_probs"] = g

    wb = hu = nm = 0.0
    if contour_probs is not None and contour_gt is not None:
        gc = np.zeros(contour_probs.probs.shape)
        if "wbce" in contour_terms:
            wb, g = weighted_bce(contour_probs, contour_gt)
            gc += g
        if "huber" in contour_terms:
            hu, g = huber(contour_probs.probs, contour_gt.mask, CONTOUR_HUBER_DELTA)
            gc += g
        if "nms" in contour_terms:
            nm, g, diag = nms_loss(contour_probs, contour_gt, nms_window)
            gc += g
        grads["contour_probs"] = gc

    ce = 0.0
    if offsets is not None and gt_offsets is not None:
        pred = np.asarray(offsets, dtype=np.float64)
        ref = np.asarray(gt_offsets, dtype=np.float64)
        if center_mask is not None:
            sel = np.asarray(center_mask, dtype=bool)
            ce, gsel = huber(pred[sel], ref[sel], CENTER_HUBER_DELTA)
            g = np.zeros_like(pred)
            g[sel] = gsel
        else:
            ce, g = huber(pred, ref, CENTER_HUBER_DELTA)
        grads["offsets"] = g

    report = total_loss(sem, wb, hu, nm, ce, weights)
    report.diagnostics = diag
    if with_gradients:
        report.gradients = grads
    return report
