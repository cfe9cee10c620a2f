import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from contourpan import stf
from contourpan.raster import (
    ContourMask,
    ContourProbMap,
    InstanceLabelMap,
    OffsetField,
    PanopticMap,
    SemanticLabelMap,
    SemanticProbMap,
    ValidationError,
    one_hot,
)
from contourpan.stf import FormatError, Tag


def test_label_round_trip(tmp_path):
    lab = SemanticLabelMap(np.array([[0, 1], [1, 0]], dtype=np.int32))
    stf.write_tensor(lab, tmp_path / "l.stf")
    back = stf.read_tensor(tmp_path / "l.stf")
    assert isinstance(back, SemanticLabelMap)
    assert np.array_equal(back.labels, lab.labels)


def test_header_layout():
    buf = stf.to_bytes(ContourProbMap(np.zeros((3, 5), dtype=np.float32)))
    magic, dtype, tag, pad, h, w, c = struct.unpack_from("<4sBBHIII", buf)
    assert (magic, dtype, tag, pad, h, w, c) == (b"STF1", 3, Tag.CONTOUR_PROBS, 0, 3, 5, 1)
    assert len(buf) == 20 + 15 * 4


def test_smallest_integer_payload():
    small = stf.to_bytes(InstanceLabelMap(np.array([[0, 255]], dtype=np.int32)))
    wide = stf.to_bytes(InstanceLabelMap(np.array([[0, 256]], dtype=np.int32)))
    assert small[4] == 0 and wide[4] == 1


def test_panoptic_stored_encoded():
    pan = PanopticMap(np.array([[11, 3]]), np.array([[2, 0]]))
    buf = stf.to_bytes(pan)
    payload = np.frombuffer(buf[20:], dtype="<u4")
    assert payload.tolist() == [11002, 3000]
    back = stf.from_bytes(buf)
    assert np.array_equal(back.encode(), pan.encode())


@pytest.mark.parametrize(
    "raster",
    [
        SemanticProbMap(one_hot(np.array([[0, 2], [1, 1]]), 3)),
        ContourProbMap(np.array([[0.25, 1.0]], dtype=np.float32)),
        ContourMask(np.array([[True, False], [False, True]])),
        OffsetField(np.arange(12, dtype=np.float32).reshape(2, 3, 2) - 4),
        InstanceLabelMap(np.array([[0, 70000]], dtype=np.int32)),
    ],
)
def test_round_trip_every_kind(raster):
    back = stf.from_bytes(stf.to_bytes(raster))
    assert type(back) is type(raster)
    a = next(v for v in vars(raster).values() if isinstance(v, np.ndarray))
    b = next(v for v in vars(back).values() if isinstance(v, np.ndarray))
    assert np.array_equal(a, b)


def test_missing_magic():
    buf = stf.to_bytes(ContourMask(np.zeros((2, 2), dtype=bool)))
    with pytest.raises(FormatError, match="magic"):
        stf.from_bytes(b"XXXX" + buf[4:])


def test_truncated_payload():
    buf = stf.to_bytes(ContourMask(np.zeros((2, 2), dtype=bool)))
    with pytest.raises(FormatError, match="payload"):
        stf.from_bytes(buf[:-1])
    with pytest.raises(FormatError, match="header"):
        stf.from_bytes(buf[:7])


def test_bad_tag_and_dtype():
    buf = bytearray(stf.to_bytes(ContourMask(np.zeros((2, 2), dtype=bool))))
    buf[5] = 9
    with pytest.raises(FormatError, match="tag"):
        stf.from_bytes(bytes(buf))
    buf[5] = Tag.CONTOUR_PROBS  # u8 payload for a float tag
    with pytest.raises(FormatError, match="f32"):
        stf.from_bytes(bytes(buf))


def test_out_of_range_probability_names_pixel(tmp_path):
    p = np.zeros((3, 3), dtype=np.float32)
    p[1, 2] = 1.5
    stf.write_tensor(ContourProbMap(p), tmp_path / "c.stf")
    with pytest.raises(ValidationError, match=r"pixel \(1, 2\)"):
        stf.read_tensor(tmp_path / "c.stf")
    # raw reads stay possible for inspection
    assert stf.read_tensor(tmp_path / "c.stf", validate=False).probs[1, 2] == 1.5


def test_read_as_checks_kind(tmp_path):
    stf.write_tensor(ContourMask(np.zeros((1, 1), dtype=bool)), tmp_path / "m.stf")
    with pytest.raises(FormatError, match="expected SemanticLabelMap"):
        stf.read_as(tmp_path / "m.stf", SemanticLabelMap)


def test_ids_beyond_int32_rejected_on_read():
    buf = stf.to_bytes(InstanceLabelMap(np.array([[2**31]], dtype=np.int64)))
    with pytest.raises(FormatError, match="int32"):
        stf.from_bytes(buf)


def test_negative_labels_cannot_be_written():
    with pytest.raises(ValidationError):
        stf.to_bytes(SemanticLabelMap(np.array([[-1]], dtype=np.int32)))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 6), st.just(2)),
              elements=st.floats(-1e4, 1e4, width=32)))
def test_offsets_round_trip_bit_exact(a):
    back = stf.from_bytes(stf.to_bytes(OffsetField(a)))
    assert back.offsets.tobytes() == a.tobytes()


@settings(max_examples=60, deadline=None)
@given(arrays(np.int64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
              elements=st.integers(0, 2**31 - 1)))
def test_instance_ids_round_trip(a):
    back = stf.from_bytes(stf.to_bytes(InstanceLabelMap(a)))
    assert np.array_equal(back.ids.astype(np.int64), a)


def test_pgm_round_trip(tmp_path):
    img = np.array([[0, 300], [65535, 7]])
    stf.write_pgm(img, tmp_path / "a.pgm")
    assert np.array_equal(stf.read_pgm(tmp_path / "a.pgm"), img)
    small = np.array([[0, 255]])
    stf.write_pgm(small, tmp_path / "b.pgm")
    assert (tmp_path / "b.pgm").read_bytes().startswith(b"P5\n2 1\n255\n")


def test_panoptic_ppm_is_deterministic(tmp_path):
    pan = PanopticMap(np.array([[11, 11, 3]]), np.array([[1, 2, 0]]))
    stf.write_panoptic_ppm(pan, tmp_path / "a.ppm")
    stf.write_panoptic_ppm(pan, tmp_path / "b.ppm")
    data = (tmp_path / "a.ppm").read_bytes()
    assert data == (tmp_path / "b.ppm").read_bytes()
    assert data.startswith(b"P6\n3 1\n255\n")
    rgb = np.frombuffer(data[len(b"P6\n3 1\n255\n"):], dtype=np.uint8).reshape(3, 3)
    assert len({tuple(px) for px in rgb}) == 3
