"""STF tensor files plus PGM/PPM debug images.

STF layout (little-endian)::

    magic  "STF1"           4 bytes
    dtype  u8               0=u8 1=u16 2=u32 3=f32
    tag    u8               what the payload means (see Tag)
    pad    u16              always 0
    height u32
    width  u32
    channels u32
    payload                 row-major H x W x C
"""

from __future__ import annotations

import enum
import struct
from pathlib import Path
from typing import Union

import numpy as np

from contourpan.raster import (
    ContourMask,
    ContourProbMap,
    InstanceLabelMap,
    OffsetField,
    PanopticMap,
    SemanticLabelMap,
    SemanticProbMap,
    ValidationError,
)

MAGIC = b"STF1"
_HEADER = struct.Struct("<4sBBHIII")

_DTYPES = {0: np.dtype("<u1"), 1: np.dtype("<u2"), 2: np.dtype("<u4"), 3: np.dtype("<f4")}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}


class FormatError(ValueError):
    """Raised for files that are not well-formed STF/PGM."""


class Tag(enum.IntEnum):
    SEMANTIC_PROBS = 0
    LABELS = 1
    CONTOUR_PROBS = 2
    CONTOUR_MASK = 3
    OFFSETS = 4
    INSTANCE_IDS = 5
    PANOPTIC_ENCODED = 6


Raster = Union[
    SemanticProbMap,
    SemanticLabelMap,
    ContourProbMap,
    ContourMask,
    OffsetField,
    InstanceLabelMap,
    PanopticMap,
]


def _smallest_uint(a: np.ndarray) -> np.dtype:
    top = int(a.max()) if a.size else 0
    if int(a.min(initial=0)) < 0:
        raise ValidationError("negative values cannot be stored as unsigned STF payload")
    if top < 2**8:
        return _DTYPES[0]
    if top < 2**16:
        return _DTYPES[1]
    if top < 2**32:
        return _DTYPES[2]
    raise ValidationError(f"value {top} does not fit in u32")


def _payload(raster: Raster) -> tuple[Tag, np.ndarray]:
    if isinstance(raster, SemanticProbMap):
        return Tag.SEMANTIC_PROBS, raster.probs.astype(_DTYPES[3])
    if isinstance(raster, SemanticLabelMap):
        a = raster.labels
        return Tag.LABELS, a.astype(_smallest_uint(a))
    if isinstance(raster, ContourProbMap):
        return Tag.CONTOUR_PROBS, raster.probs.astype(_DTYPES[3])
    if isinstance(raster, ContourMask):
        return Tag.CONTOUR_MASK, raster.mask.astype(_DTYPES[0])
    if isinstance(raster, OffsetField):
        return Tag.OFFSETS, raster.offsets.astype(_DTYPES[3])
    if isinstance(raster, InstanceLabelMap):
        a = raster.ids
        return Tag.INSTANCE_IDS, a.astype(_smallest_uint(a))
    if isinstance(raster, PanopticMap):
        return Tag.PANOPTIC_ENCODED, raster.encode().astype(_DTYPES[2])
    raise TypeError(f"cannot serialise {type(raster).__name__}")


def to_bytes(raster: Raster) -> bytes:
    tag, arr = _payload(raster)
    h, w = arr.shape[:2]
    c = arr.shape[2] if arr.ndim == 3 else 1
    header = _HEADER.pack(MAGIC, _DTYPE_CODES[arr.dtype], int(tag), 0, h, w, c)
    return header + np.ascontiguousarray(arr).tobytes()


def write_tensor(raster: Raster, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(raster))


def from_bytes(buf: bytes, validate: bool = True) -> Raster:
    if len(buf) < _HEADER.size:
        raise FormatError(f"truncated header ({len(buf)} bytes)")
    magic, dcode, tcode, reserved, h, w, c = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if dcode not in _DTYPES:
        raise FormatError(f"unknown dtype code {dcode}")
    try:
        tag = Tag(tcode)
    except ValueError:
        raise FormatError(f"unknown semantic tag {tcode}") from None
    if reserved != 0:
        raise FormatError(f"reserved field is {reserved}, expected 0")
    dtype = _DTYPES[dcode]
    expected = h * w * c * dtype.itemsize
    if len(buf) - _HEADER.size != expected:
        raise FormatError(f"payload is {len(buf) - _HEADER.size} bytes, header implies {expected}")
    arr = np.frombuffer(buf, dtype=dtype, offset=_HEADER.size).reshape(h, w, c)

    multi = tag in (Tag.SEMANTIC_PROBS, Tag.OFFSETS)
    if not multi and c != 1:
        raise FormatError(f"{tag.name} expects 1 channel, got {c}")
    if tag is Tag.OFFSETS and c != 2:
        raise FormatError(f"OFFSETS expects 2 channels, got {c}")
    is_float = dcode == 3
    if tag in (Tag.SEMANTIC_PROBS, Tag.CONTOUR_PROBS, Tag.OFFSETS) and not is_float:
        raise FormatError(f"{tag.name} requires f32 payload")
    if tag not in (Tag.SEMANTIC_PROBS, Tag.CONTOUR_PROBS, Tag.OFFSETS) and is_float:
        raise FormatError(f"{tag.name} requires an integer payload")

    if tag in (Tag.LABELS, Tag.INSTANCE_IDS) and int(arr.max(initial=0)) > np.iinfo(np.int32).max:
        raise FormatError(f"{tag.name} value {int(arr.max())} exceeds the int32 range")

    raster: Raster
    if tag is Tag.SEMANTIC_PROBS:
        raster = SemanticProbMap(arr)
    elif tag is Tag.LABELS:
        raster = SemanticLabelMap(arr[:, :, 0].astype(np.int32))
    elif tag is Tag.CONTOUR_PROBS:
        raster = ContourProbMap(arr[:, :, 0])
    elif tag is Tag.CONTOUR_MASK:
        if arr.max(initial=0) > 1:
            raise FormatError("contour mask payload must be 0/1")
        raster = ContourMask(arr[:, :, 0].astype(bool))
    elif tag is Tag.OFFSETS:
        raster = OffsetField(arr)
    elif tag is Tag.INSTANCE_IDS:
        raster = InstanceLabelMap(arr[:, :, 0].astype(np.int32))
    else:
        raster = PanopticMap.decode(arr[:, :, 0])

    if validate:
        if isinstance(raster, InstanceLabelMap):
            raster.validate(ids_only=True)
        else:
            raster.validate()
    return raster


def read_tensor(path: str | Path, validate: bool = True) -> Raster:
    return from_bytes(Path(path).read_bytes(), validate=validate)


def read_as(path: str | Path, kind: type) -> Raster:
    """Read a tensor and insist on its type."""
    r = read_tensor(path)
    if not isinstance(r, kind):
        raise FormatError(f"{path}: expected {kind.__name__}, found {type(r).__name__}")
    return r


def write_pgm(image: np.ndarray, path: str | Path) -> None:
    """Binary P5 with maxval 255 or 65535 depending on the data range."""
    a = np.asarray(image)
    if a.ndim != 2 or not np.issubdtype(a.dtype, np.integer) and a.dtype != bool:
        raise ValidationError("PGM export expects a 2-d integer image")
    top = int(a.max(initial=0))
    if int(a.min(initial=0)) < 0 or top > 65535:
        raise ValidationError("PGM values must lie in [0, 65535]")
    maxval = 255 if top <= 255 else 65535
    data = a.astype(">u1" if maxval == 255 else ">u2")
    header = f"P5\n{a.shape[1]} {a.shape[0]}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + data.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        tokens.append(buf[start:pos])
    pos += 1  # single whitespace before raster
    if tokens[0] != b"P5":
        raise FormatError(f"not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval not in (255, 65535):
        raise FormatError(f"unsupported maxval {maxval}")
    dtype = np.dtype(">u1" if maxval == 255 else ">u2")
    need = w * h * dtype.itemsize
    if len(buf) - pos < need:
        raise FormatError("truncated PGM payload")
    return np.frombuffer(buf, dtype=dtype, count=w * h, offset=pos).reshape(h, w).astype(np.int64)


def _palette(n: int) -> np.ndarray:
    # fixed golden-ratio hue walk; deterministic across runs and platforms
    idx = np.arange(n, dtype=np.float64)
    hue = (idx * 0.618033988749895) % 1.0
    sat = 0.55 + 0.45 * ((idx * 0.37) % 1.0)
    val = 0.6 + 0.4 * ((idx * 0.23) % 1.0)
    i = np.floor(hue * 6).astype(int) % 6
    f = hue * 6 - np.floor(hue * 6)
    p, q, t = val * (1 - sat), val * (1 - f * sat), val * (1 - (1 - f) * sat)
    rgb = np.select(
        [i[:, None] == k for k in range(6)],
        [
            np.stack(x, axis=1)
            for x in ((val, t, p), (q, val, p), (p, val, t), (p, q, val), (t, p, val), (val, p, q))
        ],
    )
    out = np.round(rgb * 255).astype(np.uint8)
    out[0] = 0
    return out


def write_panoptic_ppm(panoptic: PanopticMap, path: str | Path) -> None:
    """Colour each (class, instance) segment from a fixed table and save as P6."""
    enc = panoptic.encode().astype(np.int64)
    uniq, inv = np.unique(enc, return_inverse=True)
    # colour index depends on the encoded id only, not on which segments exist
    colours = _palette(4096)[(uniq * 2654435761 % 4095) + 1]
    rgb = colours[inv.reshape(enc.shape)]
    header = f"P6\n{enc.shape[1]} {enc.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(rgb).tobytes())
