import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from contourpan.raster import (
    CITYSCAPES,
    ClassCatalog,
    ClassInfo,
    ContourProbMap,
    InstanceLabelMap,
    InstanceRecord,
    OffsetField,
    PanopticMap,
    SemanticLabelMap,
    SemanticProbMap,
    ValidationError,
    argmax_semantic,
    instance_geometry,
    one_hot,
)


def test_cityscapes_catalog_layout():
    assert CITYSCAPES.num_classes == 19
    assert CITYSCAPES.void_id == 19
    assert CITYSCAPES.thing_ids == list(range(11, 19))
    assert CITYSCAPES.is_thing(11) and not CITYSCAPES.is_thing(0)
    lut = CITYSCAPES.thing_lut()
    assert lut.shape == (20,) and not lut[19]


def test_catalog_rejects_gaps():
    with pytest.raises(ValidationError):
        ClassCatalog((ClassInfo(0, "road", False), ClassInfo(2, "car", True)))


def test_catalog_requires_thing_and_stuff_for_panoptic():
    only_stuff = ClassCatalog.from_entries([("road", False), ("sky", False)])
    with pytest.raises(ValidationError):
        only_stuff.require_panoptic()
    CITYSCAPES.require_panoptic()


def test_catalog_json_round_trip(tmp_path):
    path = tmp_path / "cat.json"
    path.write_text(json.dumps(CITYSCAPES.to_json()))
    assert ClassCatalog.from_json(path) == CITYSCAPES


def test_semantic_probs_validation_reports_first_pixel():
    p = np.full((2, 3, 2), 0.5, dtype=np.float32)
    p[1, 2] = (0.9, 0.3)
    with pytest.raises(ValidationError, match=r"pixel \(1, 2\)"):
        SemanticProbMap(p).validate()


def test_contour_probs_out_of_range_reports_pixel():
    p = np.zeros((3, 3), dtype=np.float32)
    p[2, 1] = 1.5
    p[2, 2] = 2.0
    with pytest.raises(ValidationError, match=r"pixel \(2, 1\)"):
        ContourProbMap(p).validate()


def test_offsets_must_be_finite():
    o = np.zeros((2, 2, 2), dtype=np.float32)
    o[0, 1, 0] = np.nan
    with pytest.raises(ValidationError, match=r"pixel \(0, 1\)"):
        OffsetField(o).validate()


def test_rasters_are_read_only():
    lab = SemanticLabelMap(np.zeros((2, 2), dtype=np.int32))
    with pytest.raises(ValueError):
        lab.labels[0, 0] = 1


def test_instance_records_must_match_ids():
    ids = np.array([[0, 1], [1, 2]], dtype=np.int32)
    recs = (InstanceRecord(1, 11, 2, (0.5, 0.5), 1.0),)
    with pytest.raises(ValidationError, match="no record for \\[2\\]"):
        InstanceLabelMap(ids, recs).validate()


def test_instance_record_geometry_checked():
    ids = np.array([[0, 1], [1, 1]], dtype=np.int32)
    good = InstanceRecord(1, 11, 3, (2 / 3, 2 / 3), 0.5)
    InstanceLabelMap(ids, (good,)).validate(CITYSCAPES)
    bad = InstanceRecord(1, 11, 2, (2 / 3, 2 / 3), 0.5)
    with pytest.raises(ValidationError, match="area"):
        InstanceLabelMap(ids, (bad,)).validate()
    stuff = InstanceRecord(1, 3, 3, (2 / 3, 2 / 3), 0.5)
    with pytest.raises(ValidationError, match="non-thing"):
        InstanceLabelMap(ids, (stuff,)).validate(CITYSCAPES)


def test_instance_record_json_round_trip():
    rec = InstanceRecord(4, 12, 30, (1.25, 7.5), 0.875)
    assert InstanceRecord.from_json(json.loads(json.dumps(rec.to_json()))) == rec


def test_panoptic_encoding():
    pan = PanopticMap(np.array([[11, 3]]), np.array([[2, 0]]))
    assert pan.encode().tolist() == [[11002, 3000]]
    back = PanopticMap.decode(pan.encode())
    assert np.array_equal(back.class_ids, pan.class_ids)
    assert np.array_equal(back.instance_ids, pan.instance_ids)


def test_panoptic_invariants():
    PanopticMap(np.array([[11, 3, 19]]), np.array([[1, 0, 0]])).validate(CITYSCAPES)
    with pytest.raises(ValidationError):
        PanopticMap(np.array([[11]]), np.array([[0]])).validate(CITYSCAPES)
    with pytest.raises(ValidationError):
        PanopticMap(np.array([[3]]), np.array([[1]])).validate(CITYSCAPES)
    with pytest.raises(ValidationError):
        PanopticMap(np.array([[11]]), np.array([[1000]])).validate(CITYSCAPES)


@pytest.mark.parametrize(
    "pixel, expected",
    [((0.1, 0.7, 0.2), 1), ((0.5, 0.5, 0.0), 0), ((0.0, 0.0, 1.0), 2)],
)
def test_argmax_examples(pixel, expected):
    p = np.array(pixel, dtype=np.float32).reshape(1, 1, 3)
    assert argmax_semantic(SemanticProbMap(p)).labels[0, 0] == expected


@settings(max_examples=50, deadline=None)
@given(arrays(np.int32, (6, 7), elements=st.integers(0, 4)))
def test_argmax_of_one_hot_is_identity(labels):
    probs = SemanticProbMap(one_hot(labels, 5))
    probs.validate()
    assert np.array_equal(argmax_semantic(probs).labels, labels)


@settings(max_examples=50, deadline=None)
@given(arrays(np.int32, (5, 6), elements=st.integers(0, 3)))
def test_instance_geometry_matches_direct_means(ids):
    area, cent = instance_geometry(ids)
    for i in np.unique(ids[ids > 0]):
        rows, cols = np.nonzero(ids == i)
        assert area[i] == rows.size
        assert np.allclose(cent[i], (rows.mean(), cols.mean()))
