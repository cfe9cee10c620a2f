"""Raster domain types shared by every pipeline stage.

All rasters wrap numpy arrays indexed ``[row, col, ...]``. Arrays are stored
as read-only views, so a raster can be shared freely once built. Constructors
only check shapes and dtypes; the full invariant checks (value ranges,
record/id consistency) live in ``validate()`` and are run by the STF reader.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PANOPTIC_DIVISOR = 1000
PROB_SUM_TOL = 1e-5


class ValidationError(ValueError):
    """Raised when a raster or catalog violates one of its invariants."""


def _frozen(a: np.ndarray) -> np.ndarray:
    v = a.view()
    v.flags.writeable = False
    return v


def _first_pixel(bad: np.ndarray) -> tuple[int, int]:
    # bad is an (H, W) boolean array with at least one True
    flat = int(np.flatnonzero(bad.ravel())[0])
    return divmod(flat, bad.shape[1])


@dataclass(frozen=True)
class ClassInfo:
    id: int
    name: str
    is_thing: bool


@dataclass(frozen=True)
class ClassCatalog:
    """Ordered set of semantic classes; ids run 0..K-1.

    The reserved void id is ``K`` (one past the last class). It never appears
    in the catalog itself.
    """

    classes: tuple[ClassInfo, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "classes", tuple(self.classes))
        ids = [c.id for c in self.classes]
        if ids != list(range(len(ids))):
            raise ValidationError(f"class ids must be contiguous from 0, got {ids}")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def void_id(self) -> int:
        return len(self.classes)

    @property
    def thing_ids(self) -> list[int]:
        return [c.id for c in self.classes if c.is_thing]

    @property
    def stuff_ids(self) -> list[int]:
        return [c.id for c in self.classes if not c.is_thing]

    def is_thing(self, class_id: int) -> bool:
        return 0 <= class_id < len(self.classes) and self.classes[class_id].is_thing

    def thing_lut(self) -> np.ndarray:
        """Boolean lookup table of length K+1 (void maps to False)."""
        lut = np.zeros(len(self.classes) + 1, dtype=bool)
        lut[self.thing_ids] = True
        return lut

    def name(self, class_id: int) -> str:
        if class_id == self.void_id:
            return "void"
        return self.classes[class_id].name

    def require_panoptic(self) -> None:
        if not self.thing_ids or not self.stuff_ids:
            raise ValidationError("catalog needs at least one thing and one stuff class")

    @classmethod
    def from_entries(cls, entries: Iterable[tuple[str, bool]]) -> ClassCatalog:
        return cls(tuple(ClassInfo(i, n, bool(t)) for i, (n, t) in enumerate(entries)))

    @classmethod
    def from_json(cls, path: str | Path) -> ClassCatalog:
        data = json.loads(Path(path).read_text())
        if isinstance(data, dict):
            data = data["classes"]
        return cls(
            tuple(ClassInfo(int(d["id"]), str(d["name"]), bool(d["is_thing"])) for d in data)
        )

    def to_json(self) -> dict:
        return {
            "classes": [
                {"id": c.id, "name": c.name, "is_thing": c.is_thing} for c in self.classes
            ]
        }


# Cityscapes train ids: 19 classes, the last 8 carry instances.
CITYSCAPES = ClassCatalog.from_entries(
    [
        ("road", False),
        ("sidewalk", False),
        ("building", False),
        ("wall", False),
        ("fence", False),
        ("pole", False),
        ("traffic light", False),
        ("traffic sign", False),
        ("vegetation", False),
        ("terrain", False),
        ("sky", False),
        ("person", True),
        ("rider", True),
        ("car", True),
        ("truck", True),
        ("bus", True),
        ("train", True),
        ("motorcycle", True),
        ("bicycle", True),
    ]
)


@dataclass(frozen=True)
class SemanticProbMap:
    probs: np.ndarray  # (H, W, K) float32

    def __post_init__(self) -> None:
        p = np.asarray(self.probs)
        if p.ndim != 3:
            raise ValidationError(f"semantic probs must be (H, W, K), got shape {p.shape}")
        object.__setattr__(self, "probs", _frozen(p))

    @property
    def height(self) -> int:
        return self.probs.shape[0]

    @property
    def width(self) -> int:
        return self.probs.shape[1]

    @property
    def num_classes(self) -> int:
        return self.probs.shape[2]

    def validate(self) -> None:
        p = self.probs
        bad = ~np.all((p >= 0) & (p <= 1), axis=2)
        if bad.any():
            r, c = _first_pixel(bad)
            raise ValidationError(f"probability outside [0, 1] at pixel ({r}, {c})")
        bad = np.abs(p.sum(axis=2, dtype=np.float64) - 1.0) > PROB_SUM_TOL
        if bad.any():
            r, c = _first_pixel(bad)
            raise ValidationError(f"channel sum differs from 1 at pixel ({r}, {c})")


@dataclass(frozen=True)
class SemanticLabelMap:
    labels: np.ndarray  # (H, W) integer class ids

    def __post_init__(self) -> None:
        a = np.asarray(self.labels)
        if a.ndim != 2 or not np.issubdtype(a.dtype, np.integer):
            raise ValidationError(f"labels must be a 2-d integer array, got {a.dtype} {a.shape}")
        object.__setattr__(self, "labels", _frozen(a))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def validate(self, num_classes: int | None = None) -> None:
        bad = self.labels < 0
        if num_classes is not None:
            bad |= self.labels >= num_classes
        if bad.any():
            r, c = _first_pixel(bad)
            raise ValidationError(f"label {self.labels[r, c]} out of range at pixel ({r}, {c})")


@dataclass(frozen=True)
class ContourProbMap:
    probs: np.ndarray  # (H, W) float32 in [0, 1]

    def __post_init__(self) -> None:
        a = np.asarray(self.probs)
        if a.ndim != 2:
            raise ValidationError(f"contour probs must be 2-d, got shape {a.shape}")
        object.__setattr__(self, "probs", _frozen(a))

    @property
    def height(self) -> int:
        return self.probs.shape[0]

    @property
    def width(self) -> int:
        return self.probs.shape[1]

    def validate(self) -> None:
        bad = ~((self.probs >= 0) & (self.probs <= 1))
        if bad.any():
            r, c = _first_pixel(bad)
            raise ValidationError(
                f"contour probability {self.probs[r, c]} outside [0, 1] at pixel ({r}, {c})"
            )


@dataclass(frozen=True)
class ContourMask:
    mask: np.ndarray  # (H, W) bool

    def __post_init__(self) -> None:
        a = np.asarray(self.mask)
        if a.ndim != 2:
            raise ValidationError(f"contour mask must be 2-d, got shape {a.shape}")
        object.__setattr__(self, "mask", _frozen(a.astype(bool, copy=False)))

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    @property
    def width(self) -> int:
        return self.mask.shape[1]

    def validate(self) -> None:
        pass


@dataclass(frozen=True)
class OffsetField:
    """Per-pixel (d_row, d_col); predicted center = position + offset."""

    offsets: np.ndarray  # (H, W, 2) float32

    def __post_init__(self) -> None:
        a = np.asarray(self.offsets)
        if a.ndim != 3 or a.shape[2] != 2:
            raise ValidationError(f"offsets must be (H, W, 2), got shape {a.shape}")
        object.__setattr__(self, "offsets", _frozen(a))

    @property
    def height(self) -> int:
        return self.offsets.shape[0]

    @property
    def width(self) -> int:
        return self.offsets.shape[1]

    def validate(self) -> None:
        bad = ~np.all(np.isfinite(self.offsets), axis=2)
        if bad.any():
            r, c = _first_pixel(bad)
            raise ValidationError(f"non-finite offset at pixel ({r}, {c})")


@dataclass(frozen=True)
class InstanceRecord:
    id: int
    class_id: int
    area: int
    centroid: tuple[float, float]
    confidence: float

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "class_id": self.class_id,
            "area": self.area,
            "centroid": [self.centroid[0], self.centroid[1]],
            "confidence": self.confidence,
        }

    @classmethod
    def from_json(cls, d: dict) -> InstanceRecord:
        return cls(
            int(d["id"]),
            int(d["class_id"]),
            int(d["area"]),
            (float(d["centroid"][0]), float(d["centroid"][1])),
            float(d["confidence"]),
        )


@dataclass(frozen=True)
class InstanceLabelMap:
    ids: np.ndarray  # (H, W) non-negative ints, 0 = no instance
    records: tuple[InstanceRecord, ...] = field(default=())

    def __post_init__(self) -> None:
        a = np.asarray(self.ids)
        if a.ndim != 2 or not np.issubdtype(a.dtype, np.integer):
            raise ValidationError(f"instance ids must be a 2-d integer array, got {a.dtype} {a.shape}")
        object.__setattr__(self, "ids", _frozen(a))
        object.__setattr__(self, "records", tuple(sorted(self.records, key=lambda r: r.id)))

    @property
    def height(self) -> int:
        return self.ids.shape[0]

    @property
    def width(self) -> int:
        return self.ids.shape[1]

    def record_map(self) -> dict[int, InstanceRecord]:
        return {r.id: r for r in self.records}

    def present_ids(self) -> np.ndarray:
        counts = np.bincount(self.ids.ravel())
        return np.flatnonzero(counts[1:]) + 1

    def validate(
        self,
        catalog: ClassCatalog | None = None,
        check_geometry: bool = True,
        ids_only: bool = False,
    ) -> None:
        if (self.ids < 0).any():
            r, c = _first_pixel(self.ids < 0)
            raise ValidationError(f"negative instance id at pixel ({r}, {c})")
        if ids_only:
            return
        present = set(self.present_ids().tolist())
        recs = self.record_map()
        if len(recs) != len(self.records):
            raise ValidationError("duplicate instance record ids")
        if present != set(recs):
            missing = sorted(present - set(recs))
            extra = sorted(set(recs) - present)
            raise ValidationError(f"records/ids mismatch: no record for {missing}, no pixels for {extra}")
        for rec in self.records:
            if not 0.0 <= rec.confidence <= 1.0:
                raise ValidationError(f"instance {rec.id} confidence {rec.confidence} outside [0, 1]")
            if catalog is not None and not catalog.is_thing(rec.class_id):
                raise ValidationError(f"instance {rec.id} has non-thing class {rec.class_id}")
        if check_geometry and self.records:
            area, cent = instance_geometry(self.ids)
            for rec in self.records:
                if area[rec.id] != rec.area:
                    raise ValidationError(f"instance {rec.id} area {rec.area} != pixel count {area[rec.id]}")
                if not np.allclose(cent[rec.id], rec.centroid, rtol=0, atol=1e-6):
                    raise ValidationError(f"instance {rec.id} centroid {rec.centroid} inconsistent")


def instance_geometry(ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-id pixel counts and centroids (index = id; row 0 is background)."""
    h, w = ids.shape
    flat = ids.ravel()
    n = int(flat.max()) + 1 if flat.size else 1
    fg = np.flatnonzero(flat)
    lab = flat[fg]
    rows, cols = np.divmod(fg, w)
    area = np.bincount(lab, minlength=n)
    with np.errstate(invalid="ignore", divide="ignore"):
        cr = np.bincount(lab, weights=rows, minlength=n) / area
        cc = np.bincount(lab, weights=cols, minlength=n) / area
    return area, np.stack([cr, cc], axis=1)


@dataclass(frozen=True)
class PanopticMap:
    class_ids: np.ndarray  # (H, W)
    instance_ids: np.ndarray  # (H, W), 0 for stuff and void

    def __post_init__(self) -> None:
        c = np.asarray(self.class_ids)
        i = np.asarray(self.instance_ids)
        if c.ndim != 2 or c.shape != i.shape:
            raise ValidationError(f"panoptic channels must be equal 2-d shapes, got {c.shape} / {i.shape}")
        object.__setattr__(self, "class_ids", _frozen(c))
        object.__setattr__(self, "instance_ids", _frozen(i))

    @property
    def height(self) -> int:
        return self.class_ids.shape[0]

    @property
    def width(self) -> int:
        return self.class_ids.shape[1]

    def encode(self) -> np.ndarray:
        return self.class_ids.astype(np.uint32) * PANOPTIC_DIVISOR + self.instance_ids.astype(np.uint32)

    @classmethod
    def decode(cls, encoded: np.ndarray) -> PanopticMap:
        e = np.asarray(encoded).astype(np.int64)
        return cls(e // PANOPTIC_DIVISOR, e % PANOPTIC_DIVISOR)

    def validate(self, catalog: ClassCatalog | None = None) -> None:
        bad = (self.instance_ids < 0) | (self.instance_ids >= PANOPTIC_DIVISOR)
        if bad.any():
            r, c = _first_pixel(bad)
            raise ValidationError(f"instance id {self.instance_ids[r, c]} not encodable at pixel ({r}, {c})")
        if catalog is None:
            return
        cls_ids = self.class_ids
        bad = (cls_ids < 0) | (cls_ids > catalog.void_id)
        if bad.any():
            r, c = _first_pixel(bad)
            raise ValidationError(f"class {cls_ids[r, c]} not in catalog at pixel ({r}, {c})")
        thing = catalog.thing_lut()[cls_ids]
        bad = (thing & (self.instance_ids < 1)) | (~thing & (self.instance_ids != 0))
        if bad.any():
            r, c = _first_pixel(bad)
            raise ValidationError(
                f"class {cls_ids[r, c]} with instance {self.instance_ids[r, c]} at pixel ({r}, {c})"
            )


def argmax_semantic(probs: SemanticProbMap) -> SemanticLabelMap:
    """Per-pixel class with the highest probability; ties go to the smallest index."""
    # np.argmax returns the first maximal index, which is the tie-break we want
    return SemanticLabelMap(np.argmax(probs.probs, axis=2).astype(np.int32))


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros(labels.shape + (num_classes,), dtype=np.float32)
    np.put_along_axis(out, labels[..., None].astype(np.intp), 1.0, axis=2)
    return out


def check_same_shape(*rasters: object, names: Sequence[str] | None = None) -> None:
    shapes = [(r.height, r.width) for r in rasters]  # type: ignore[attr-defined]
    if len(set(shapes)) > 1:
        label = ", ".join(names) if names else "inputs"
        raise ValidationError(f"dimension mismatch between {label}: {shapes}")
