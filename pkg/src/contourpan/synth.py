"""Synthetic scenes and simulated network outputs.

A scene is a stuff background (horizontal bands) with rectangle/ellipse
thing instances on top. ``simulate_predictions`` turns the ground truth into
the three tensors a trained network would emit, with independent noise knobs
per tensor. Each knob draws from its own seeded stream, so changing one knob
never reshuffles the randomness of another.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from contourpan.gt_contour import gt_contours
from contourpan.instances import compute_records
from contourpan.panoptic import merge_panoptic
from contourpan.raster import (
    CITYSCAPES,
    ClassCatalog,
    ContourProbMap,
    InstanceLabelMap,
    OffsetField,
    PanopticMap,
    SemanticLabelMap,
    SemanticProbMap,
    ValidationError,
    instance_geometry,
)

# rng stream ids
_LAYOUT, _OCCLUDE, _FLIP, _BREAK, _FALSE_POS, _OFFSET = range(6)


class SceneError(RuntimeError):
    """The requested scene could not be generated under its constraints."""


@dataclass(frozen=True)
class SceneSpec:
    height: int = 128
    width: int = 256
    seed: int = 0
    n_instances: int = 6
    shape_kinds: tuple[str, ...] = ("rect", "ellipse")
    min_size: int = 24
    max_size: int = 64
    thing_classes: tuple[int, ...] = (11, 13)
    stuff_classes: tuple[int, ...] = (0, 2, 10)
    occluder_class: int = 5
    min_instance_area: int = 400
    min_separation: float = 40.0
    enforce_separation: bool = True
    adjacency_prob: float = 0.5
    max_retries: int = 500
    dilation_rate: int = 2
    contour_break_prob: float = 0.0
    break_tile: int = 8
    semantic_flip_prob: float = 0.0
    offset_noise_sigma: float = 0.0
    contour_false_positive_prob: float = 0.0
    occluder_prob: float = 0.0
    occluder_width: int = 3

    def __post_init__(self) -> None:
        object.__setattr__(self, "shape_kinds", tuple(self.shape_kinds))
        object.__setattr__(self, "thing_classes", tuple(self.thing_classes))
        object.__setattr__(self, "stuff_classes", tuple(self.stuff_classes))
        for name in (
            "contour_break_prob",
            "semantic_flip_prob",
            "contour_false_positive_prob",
            "occluder_prob",
            "adjacency_prob",
        ):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {v}")
        if self.offset_noise_sigma < 0:
            raise ValidationError("offset_noise_sigma must be >= 0")
        if self.height < 1 or self.width < 1:
            raise ValidationError("scene must be at least 1x1")
        if not 1 <= self.min_size <= self.max_size:
            raise ValidationError(f"need 1 <= min_size <= max_size, got {self.min_size}, {self.max_size}")
        if set(self.shape_kinds) - {"rect", "ellipse"} or not self.shape_kinds:
            raise ValidationError(f"shape kinds must be rect/ellipse, got {self.shape_kinds}")
        if self.n_instances < 0 or self.dilation_rate < 0 or self.break_tile < 1:
            raise ValidationError("n_instances, dilation_rate >= 0 and break_tile >= 1 required")
        if self.n_instances and not self.thing_classes:
            raise ValidationError("instances requested but no thing classes given")
        if not self.stuff_classes:
            raise ValidationError("at least one stuff class is required")

    def check_catalog(self, catalog: ClassCatalog) -> None:
        for c in self.thing_classes:
            if not catalog.is_thing(c):
                raise ValidationError(f"class {c} is not a thing class in the catalog")
        for c in self.stuff_classes + (self.occluder_class,):
            if not 0 <= c < catalog.num_classes or catalog.is_thing(c):
                raise ValidationError(f"class {c} is not a stuff class in the catalog")

    def to_json(self) -> dict:
        d = asdict(self)
        for k in ("shape_kinds", "thing_classes", "stuff_classes"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_json(cls, data: dict) -> SceneSpec:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown scene spec keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> SceneSpec:
        return cls.from_json(json.loads(Path(path).read_text()))

    def with_seed(self, seed: int) -> SceneSpec:
        return replace(self, seed=seed)


@dataclass(frozen=True)
class GroundTruth:
    labels: SemanticLabelMap
    instances: InstanceLabelMap
    panoptic: PanopticMap


@dataclass(frozen=True)
class Predictions:
    semantic: SemanticProbMap
    contours: ContourProbMap
    offsets: OffsetField


def _rng(spec: SceneSpec, stream: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, stream])


def _shape_mask(kind: str, h: int, w: int) -> np.ndarray:
    if kind == "rect":
        return np.ones((h, w), dtype=bool)
    r = (np.arange(h) - (h - 1) / 2) / (h / 2)
    c = (np.arange(w) - (w - 1) / 2) / (w / 2)
    return r[:, None] ** 2 + c[None, :] ** 2 <= 1.0


def _background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    n_bands = int(rng.integers(1, len(spec.stuff_classes) + 1))
    classes = rng.permutation(np.array(spec.stuff_classes))[:n_bands]
    cuts = np.sort(rng.integers(1, max(spec.height, 2), size=n_bands - 1))
    labels = np.empty((spec.height, spec.width), dtype=np.int32)
    edges = [0, *cuts.tolist(), spec.height]
    for cls, a, b in zip(classes, edges[:-1], edges[1:]):
        labels[a:b] = cls
    return labels


@dataclass
class _Placed:
    id: int
    class_id: int
    kind: str
    box: tuple[int, int, int, int]  # r0, c0, h, w
    centroid: np.ndarray


def _propose(
    spec: SceneSpec, rng: np.random.Generator, placed: list[_Placed]
) -> tuple[int, str, int, int, int, int]:
    rects = [p for p in placed if p.kind == "rect"]
    if rects and rng.random() < spec.adjacency_prob:
        # abut an existing rectangle of the same class, sized so the two
        # centroids still respect the separation constraint
        a = rects[int(rng.integers(len(rects)))]
        r0, c0, ah, aw = a.box
        side = int(rng.integers(4))
        need = math.ceil(2 * spec.min_separation) if spec.enforce_separation else spec.min_size
        if side in (0, 1):  # left / right
            lo = max(spec.min_size, need - aw)
            w = int(rng.integers(lo, max(lo, spec.max_size) + 1))
            h = int(rng.integers(spec.min_size, spec.max_size + 1))
            c = c0 - w if side == 0 else c0 + aw
            r = r0 + int(rng.integers(-(h // 2), max(ah // 2, 1)))
        else:  # above / below
            lo = max(spec.min_size, need - ah)
            h = int(rng.integers(lo, max(lo, spec.max_size) + 1))
            w = int(rng.integers(spec.min_size, spec.max_size + 1))
            r = r0 - h if side == 2 else r0 + ah
            c = c0 + int(rng.integers(-(w // 2), max(aw // 2, 1)))
        return a.class_id, "rect", r, c, h, w
    cls = int(rng.choice(np.array(spec.thing_classes)))
    kind = str(rng.choice(np.array(spec.shape_kinds)))
    h = int(rng.integers(spec.min_size, spec.max_size + 1))
    w = int(rng.integers(spec.min_size, spec.max_size + 1))
    r = int(rng.integers(0, max(spec.height - h, 0) + 1))
    c = int(rng.integers(0, max(spec.width - w, 0) + 1))
    return cls, kind, r, c, h, w


def generate_scene(spec: SceneSpec, catalog: ClassCatalog = CITYSCAPES) -> GroundTruth:
    """Deterministic ground-truth triple for ``spec``.

    Instances never overlap and (by default) keep their centroids at least
    ``min_separation`` apart; raises :class:`SceneError` when an instance
    cannot be placed within ``max_retries`` attempts.
    """
    spec.check_catalog(catalog)
    rng = _rng(spec, _LAYOUT)
    labels = _background(spec, rng)
    ids = np.zeros((spec.height, spec.width), dtype=np.int32)
    placed: list[_Placed] = []

    for inst in range(1, spec.n_instances + 1):
        for _ in range(spec.max_retries):
            cls, kind, r, c, h, w = _propose(spec, rng, placed)
            if r < 0 or c < 0 or r + h > spec.height or c + w > spec.width:
                continue
            shape = _shape_mask(kind, h, w)
            if int(shape.sum()) < spec.min_instance_area:
                continue
            window = ids[r : r + h, c : c + w]
            if (window[shape] != 0).any():
                continue
            pr, pc = np.nonzero(shape)
            centroid = np.array([pr.mean() + r, pc.mean() + c])
            if spec.enforce_separation and any(
                np.hypot(*(centroid - p.centroid)) < spec.min_separation for p in placed
            ):
                continue
            window[shape] = inst
            labels[r : r + h, c : c + w][shape] = cls
            placed.append(_Placed(inst, cls, kind, (r, c, h, w), centroid))
            break
        else:
            raise SceneError(
                f"could not place instance {inst} of {spec.n_instances} after {spec.max_retries} "
                f"attempts (no overlap, area >= {spec.min_instance_area}, "
                f"centroid separation >= {spec.min_separation}) in a {spec.height}x{spec.width} scene"
            )

    occ = _rng(spec, _OCCLUDE)
    for p in placed:
        u, frac = occ.random(), occ.random()
        if u >= spec.occluder_prob:
            continue
        r0, c0, h, w = p.box
        # a vertical pole through the middle half of the instance
        col = c0 + int(w * (0.25 + 0.5 * frac))
        cols = slice(col, min(col + spec.occluder_width, c0 + w))
        strip = ids[r0 : r0 + h, cols] == p.id
        if (ids == p.id).sum() - strip.sum() < spec.min_instance_area:
            continue
        ids[r0 : r0 + h, cols][strip] = 0
        labels[r0 : r0 + h, cols][strip] = spec.occluder_class

    sem = SemanticLabelMap(labels)
    records = compute_records(ids, sem, None, catalog)
    instances = InstanceLabelMap(ids, records)
    return GroundTruth(sem, instances, merge_panoptic(sem, instances, catalog))


def gt_offsets(instances: InstanceLabelMap) -> np.ndarray:
    """Exact offsets: instance centroid minus pixel position, zero off-instance."""
    ids = instances.ids
    h, w = ids.shape
    _, cent = instance_geometry(ids)
    rows, cols = np.indices((h, w), dtype=np.float64)
    off = np.zeros((h, w, 2), dtype=np.float64)
    fg = ids > 0
    off[fg, 0] = cent[ids[fg], 0] - rows[fg]
    off[fg, 1] = cent[ids[fg], 1] - cols[fg]
    return off


def simulate_predictions(gt: GroundTruth, spec: SceneSpec, catalog: ClassCatalog = CITYSCAPES) -> Predictions:
    h, w = gt.labels.height, gt.labels.width
    k = catalog.num_classes
    true = gt.labels.labels.astype(np.int64)

    # semantic: one-hot, flipped pixels split 0.6 / 0.4 between new and true label
    probs = np.zeros((h, w, k), dtype=np.float32)
    flip_rng = _rng(spec, _FLIP)
    flip = flip_rng.random((h, w)) < spec.semantic_flip_prob
    shift = flip_rng.integers(1, k, size=(h, w))
    new = (true + shift) % k
    rr, cc = np.indices((h, w))
    probs[rr, cc, true] = np.where(flip, 0.4, 1.0)
    probs[rr[flip], cc[flip], new[flip]] = 0.6

    contour = gt_contours(gt.instances, spec.dilation_rate).mask.astype(np.float32)
    tiles = _rng(spec, _BREAK).random((-(-h // spec.break_tile), -(-w // spec.break_tile)))
    broken = np.repeat(np.repeat(tiles < spec.contour_break_prob, spec.break_tile, 0), spec.break_tile, 1)
    contour[broken[:h, :w]] = 0.0
    fp = _rng(spec, _FALSE_POS).random((h, w)) < spec.contour_false_positive_prob
    contour[fp] = 1.0

    off = gt_offsets(gt.instances)
    if spec.offset_noise_sigma > 0:
        noise = _rng(spec, _OFFSET).normal(0.0, spec.offset_noise_sigma, size=(h, w, 2))
        off[gt.instances.ids > 0] += noise[gt.instances.ids > 0]
    return Predictions(SemanticProbMap(probs), ContourProbMap(contour), OffsetField(off.astype(np.float32)))
