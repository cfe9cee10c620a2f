import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from contourpan.instances import compute_records
from contourpan.panoptic import merge_panoptic, panoptic_to_instances
from contourpan.raster import (
    CITYSCAPES,
    InstanceLabelMap,
    InstanceRecord,
    SemanticLabelMap,
    ValidationError,
)

CAR, PERSON = 13, 11


def _instances(ids, labels):
    return InstanceLabelMap(ids, compute_records(ids, SemanticLabelMap(labels), None, CITYSCAPES))


def test_all_stuff_scene():
    labels = np.array([[0, 2], [10, 5]])
    pan = merge_panoptic(SemanticLabelMap(labels), InstanceLabelMap(np.zeros((2, 2), dtype=np.int32)), CITYSCAPES)
    assert np.array_equal(pan.class_ids, labels)
    assert not pan.instance_ids.any()


def test_single_instance_encoding():
    labels = np.array([[0, PERSON, PERSON]])
    ids = np.array([[0, 4, 4]], dtype=np.int32)
    pan = merge_panoptic(SemanticLabelMap(labels), _instances(ids, labels), CITYSCAPES)
    assert pan.encode().tolist() == [[0, 11001, 11001]]


def test_orphan_thing_pixel_becomes_void():
    labels = np.array([[CAR, CAR, 0]])
    ids = np.array([[1, 0, 0]], dtype=np.int32)
    pan = merge_panoptic(SemanticLabelMap(labels), _instances(ids, labels), CITYSCAPES)
    assert pan.class_ids.tolist() == [[CAR, CITYSCAPES.void_id, 0]]
    assert pan.instance_ids.tolist() == [[1, 0, 0]]
    pan.validate(CITYSCAPES)


def test_instance_indices_dense_per_class():
    labels = np.array([[CAR, PERSON, CAR, CAR]])
    ids = np.array([[7, 3, 9, 2]], dtype=np.int32)
    pan = merge_panoptic(SemanticLabelMap(labels), _instances(ids, labels), CITYSCAPES)
    # cars ordered by instance id: 2 -> 1, 7 -> 2, 9 -> 3
    assert pan.encode().tolist() == [[13002, 11001, 13003, 13001]]


def test_instance_class_wins_over_pixel_label():
    labels = np.array([[CAR, CAR, PERSON]])
    ids = np.array([[1, 1, 1]], dtype=np.int32)
    pan = merge_panoptic(SemanticLabelMap(labels), _instances(ids, labels), CITYSCAPES)
    assert (pan.class_ids == CAR).all()


def test_missing_record_rejected():
    labels = np.array([[CAR]])
    with pytest.raises(ValidationError, match="no record"):
        merge_panoptic(SemanticLabelMap(labels), InstanceLabelMap(np.array([[1]], dtype=np.int32)), CITYSCAPES)


def test_stuff_instance_rejected():
    rec = InstanceRecord(1, 3, 1, (0.0, 0.0), 1.0)
    inst = InstanceLabelMap(np.array([[1]], dtype=np.int32), (rec,))
    with pytest.raises(ValidationError, match="not a thing"):
        merge_panoptic(SemanticLabelMap(np.array([[3]])), inst, CITYSCAPES)


def test_shape_mismatch():
    with pytest.raises(ValidationError):
        merge_panoptic(
            SemanticLabelMap(np.zeros((2, 2), dtype=int)),
            InstanceLabelMap(np.zeros((2, 3), dtype=np.int32)),
            CITYSCAPES,
        )


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.int32, (8, 9), elements=st.sampled_from([0, 2, 11, 13])),
    arrays(np.int32, (8, 9), elements=st.integers(0, 5)),
)
def test_panoptic_invariants_and_round_trip(labels, ids):
    ids = np.where(CITYSCAPES.thing_lut()[labels], ids, 0).astype(np.int32)
    inst = _instances(ids, labels)
    pan = merge_panoptic(SemanticLabelMap(labels), inst, CITYSCAPES)
    pan.validate(CITYSCAPES)
    # stuff pixels keep their label
    stuff = ~CITYSCAPES.thing_lut()[labels]
    assert np.array_equal(pan.class_ids[stuff], labels[stuff])
    # instance partition is preserved exactly
    back, _ = panoptic_to_instances(pan, CITYSCAPES)
    fg = ids > 0
    assert np.array_equal(back > 0, fg)
    pairs = set(zip(ids[fg].tolist(), back[fg].tolist()))
    assert len(pairs) == len({a for a, _ in pairs}) == len({b for _, b in pairs})
