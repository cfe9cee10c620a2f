"""Ground-truth instance contours: inner boundaries, optionally thickened."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from contourpan.raster import ContourMask, InstanceLabelMap, ValidationError

_NEIGHBOURS_8 = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


def extract_contours(instances: InstanceLabelMap) -> ContourMask:
    """Mark instance pixels that have an 8-neighbour with a different id.

    Pixels outside the frame count as a different id, so instances touching
    the border are outlined there too. Background (id 0) is never marked.
    """
    ids = instances.ids
    h, w = ids.shape
    padded = np.full((h + 2, w + 2), -1, dtype=np.int64)
    padded[1:-1, 1:-1] = ids
    edge = np.zeros((h, w), dtype=bool)
    for dr, dc in _NEIGHBOURS_8:
        edge |= padded[1 + dr : 1 + dr + h, 1 + dc : 1 + dc + w] != ids
    return ContourMask(edge & (ids != 0))


def dilate_contours(mask: ContourMask, rate: int) -> ContourMask:
    """Dilate with a (2*rate+1)-sided square; rate 0 returns the input."""
    if rate < 0:
        raise ValidationError(f"dilation rate must be >= 0, got {rate}")
    if rate == 0:
        return mask
    size = 2 * rate + 1
    m = mask.mask.astype(np.uint8)
    # the square element is separable: a row pass then a column pass
    m = ndimage.maximum_filter1d(m, size, axis=0, mode="constant", cval=0)
    m = ndimage.maximum_filter1d(m, size, axis=1, mode="constant", cval=0)
    return ContourMask(m.astype(bool))


def gt_contours(instances: InstanceLabelMap, rate: int = 2) -> ContourMask:
    return dilate_contours(extract_contours(instances), rate)
