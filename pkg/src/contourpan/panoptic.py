"""Semantic labels + instances -> panoptic map (no conflict resolution needed)."""

from __future__ import annotations

import numpy as np

from contourpan.raster import (
    PANOPTIC_DIVISOR,
    ClassCatalog,
    InstanceLabelMap,
    PanopticMap,
    SemanticLabelMap,
    ValidationError,
    check_same_shape,
)


def merge_panoptic(
    labels: SemanticLabelMap, instances: InstanceLabelMap, catalog: ClassCatalog
) -> PanopticMap:
    """Stuff pixels keep their label with instance 0; instance pixels take the
    instance's class and a dense per-class index 1..n ordered by instance id.
    Thing-labelled pixels left without an instance become void (class K).
    """
    check_same_shape(labels, instances, names=("labels", "instances"))
    lab = labels.labels.astype(np.int64)
    ids = instances.ids
    recs = instances.record_map()
    thing = catalog.thing_lut()

    max_id = int(ids.max()) if ids.size else 0
    cls_lut = np.full(max_id + 1, -1, dtype=np.int64)
    idx_lut = np.zeros(max_id + 1, dtype=np.int64)
    per_class: dict[int, int] = {}
    for rid in sorted(recs):
        rec = recs[rid]
        if not catalog.is_thing(rec.class_id):
            raise ValidationError(f"instance {rid} has class {rec.class_id}, which is not a thing class")
        per_class[rec.class_id] = per_class.get(rec.class_id, 0) + 1
        if per_class[rec.class_id] >= PANOPTIC_DIVISOR:
            raise ValidationError(f"more than {PANOPTIC_DIVISOR - 1} instances of class {rec.class_id}")
        if rid <= max_id:
            cls_lut[rid] = rec.class_id
            idx_lut[rid] = per_class[rec.class_id]
    present = instances.present_ids()
    missing = [int(i) for i in present if cls_lut[i] < 0]
    if missing:
        raise ValidationError(f"instances {missing} have no record")

    cls = lab.astype(np.int32).ravel()
    inst = np.zeros(cls.size, dtype=np.int32)
    flat_ids = ids.ravel()
    fg = np.flatnonzero(flat_ids)
    orphan = thing[np.clip(cls, 0, catalog.void_id)]
    orphan[fg] = False
    cls[orphan] = catalog.void_id
    cls[fg] = cls_lut[flat_ids[fg]]
    inst[fg] = idx_lut[flat_ids[fg]]
    return PanopticMap(cls.reshape(ids.shape), inst.reshape(ids.shape))


def panoptic_to_instances(pan: PanopticMap, catalog: ClassCatalog) -> tuple[np.ndarray, dict[int, int]]:
    """Thing segments of a panoptic map as an id raster plus id -> class.

    Ids are dense from 1, in order of encoded segment id.
    """
    thing = catalog.thing_lut()[np.clip(pan.class_ids, 0, catalog.void_id)]
    enc = pan.encode().astype(np.int64)
    ids = np.zeros(enc.shape, dtype=np.int32)
    if not thing.any():
        return ids, {}
    uniq, inv = np.unique(enc[thing], return_inverse=True)
    ids[thing] = inv.ravel() + 1
    return ids, {i + 1: int(u) // PANOPTIC_DIVISOR for i, u in enumerate(uniq)}
