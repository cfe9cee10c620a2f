"""End-to-end runs (derive -> refine -> panoptic -> eval) and ablations."""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from contourpan import stf
from contourpan.gt_contour import gt_contours
from contourpan.instances import DeriveParams, derive_instances
from contourpan.losses import CONTOUR_TERMS, compute_losses
from contourpan.metrics import Evaluator
from contourpan.panoptic import merge_panoptic
from contourpan.raster import (
    PANOPTIC_DIVISOR,
    CITYSCAPES,
    ClassCatalog,
    ContourProbMap,
    InstanceLabelMap,
    OffsetField,
    PanopticMap,
    SemanticLabelMap,
    SemanticProbMap,
    ValidationError,
)
from contourpan.refine import RefineParams, refine
from contourpan.synth import GroundTruth, Predictions, SceneSpec, generate_scene, gt_offsets, simulate_predictions

log = logging.getLogger(__name__)

THREADS_ENV = "CONTOURPAN_THREADS"


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class PipelineConfig:
    derive: DeriveParams = DeriveParams()
    refine: RefineParams = RefineParams()
    refine_enabled: bool = True
    scene: SceneSpec = SceneSpec()
    n_scenes: int = 1

    def to_json(self) -> dict:
        return {
            "derive": asdict(self.derive),
            "refine": asdict(self.refine),
            "refine_enabled": self.refine_enabled,
            "scene": self.scene.to_json(),
            "n_scenes": self.n_scenes,
        }

    @classmethod
    def from_json(cls, data: dict) -> PipelineConfig:
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(
                derive=DeriveParams(**data.get("derive", {})),
                refine=RefineParams(**data.get("refine", {})),
                refine_enabled=bool(data.get("refine_enabled", True)),
                scene=SceneSpec.from_json(data.get("scene", {})),
                n_scenes=int(data.get("n_scenes", 1)),
            )
        except TypeError as exc:
            raise ValidationError(f"bad config: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> PipelineConfig:
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class SceneResult:
    labels: SemanticLabelMap
    derived: InstanceLabelMap
    instances: InstanceLabelMap
    panoptic: PanopticMap
    timings: dict[str, float] = field(default_factory=dict)
    diagnostics: dict[str, Any] = field(default_factory=dict)

    def confidences(self) -> dict[int, float]:
        """Confidence per encoded panoptic segment id."""
        out = {}
        pan_flat = self.panoptic.encode().ravel()
        ids_flat = self.instances.ids.ravel()
        uniq, first = np.unique(ids_flat, return_index=True)
        recs = self.instances.record_map()
        for i, pos in zip(uniq, first):
            if i:
                out[int(pan_flat[pos])] = recs[int(i)].confidence
        return dict(sorted(out.items()))


def process(
    semantic: SemanticProbMap,
    contours: ContourProbMap,
    offsets: OffsetField | None,
    catalog: ClassCatalog,
    config: PipelineConfig,
) -> SceneResult:
    """Run derive -> refine -> panoptic on one set of network outputs."""
    timings: dict[str, float] = {}
    diag: dict[str, Any] = {}
    t0 = time.perf_counter()
    labels, derived = derive_instances(semantic, contours, catalog, offsets, config.derive, diagnostics=diag)
    t1 = time.perf_counter()
    instances = derived
    if config.refine_enabled:
        if offsets is None:
            raise ValidationError("refinement needs an offset field (or disable refinement)")
        instances = refine(derived, offsets, labels, semantic, catalog, config.refine)
    t2 = time.perf_counter()
    pan = merge_panoptic(labels, instances, catalog)
    t3 = time.perf_counter()
    timings.update(derive_ms=1e3 * (t1 - t0), refine_ms=1e3 * (t2 - t1), panoptic_ms=1e3 * (t3 - t2))
    diag["instances_derived"] = len(derived.records)
    diag["instances_final"] = len(instances.records)
    return SceneResult(labels, derived, instances, pan, timings, diag)


def _records_json(instances: InstanceLabelMap) -> list[dict]:
    return [r.to_json() for r in instances.records]


def _finite(obj: Any) -> Any:
    # strict JSON has no NaN; undefined scores become null
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


def json_text(obj: Any) -> str:
    return json.dumps(_finite(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def dump_json(obj: Any, path: str | Path) -> None:
    Path(path).write_text(json_text(obj))


def write_ground_truth(gt: GroundTruth, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    stf.write_tensor(gt.labels, directory / "gt_labels.stf")
    stf.write_tensor(gt.instances, directory / "gt_instances.stf")
    stf.write_tensor(gt.panoptic, directory / "gt_panoptic.stf")
    stf.write_tensor(OffsetField(gt_offsets(gt.instances).astype(np.float32)), directory / "gt_offsets.stf")
    dump_json(_records_json(gt.instances), directory / "gt_records.json")


def write_predictions(pred: Predictions, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    stf.write_tensor(pred.semantic, directory / "semantic_probs.stf")
    stf.write_tensor(pred.contours, directory / "contours.stf")
    stf.write_tensor(pred.offsets, directory / "offsets.stf")


def write_result(res: SceneResult, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    stf.write_tensor(res.labels, directory / "labels.stf")
    stf.write_tensor(res.derived, directory / "instances_derived.stf")
    stf.write_tensor(res.instances, directory / "instances.stf")
    stf.write_tensor(res.panoptic, directory / "panoptic.stf")
    dump_json(_records_json(res.instances), directory / "records.json")
    dump_json({str(k): v for k, v in res.confidences().items()}, directory / "confidences.json")


def scene_seeds(config: PipelineConfig) -> list[int]:
    return [config.scene.seed + i for i in range(config.n_scenes)]


def _map_ordered(fn: Callable[[int], Any], items: Sequence[int], threads: int) -> list[Any]:
    if threads <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def run_synthetic(
    config: PipelineConfig,
    catalog: ClassCatalog = CITYSCAPES,
    out_dir: str | Path | None = None,
    threads: int = 1,
    scene_hook: Callable[[SceneSpec, GroundTruth, Predictions], dict] | None = None,
) -> dict:
    """Generate ``n_scenes`` synthetic scenes, run the pipeline and evaluate.

    Scenes are processed in parallel when ``threads > 1``; aggregation
    always happens in scene order, so the report and every written file are
    independent of the thread count (except the timing fields).
    """
    if config.n_scenes < 1:
        raise ValidationError("n_scenes must be >= 1")
    config.scene.check_catalog(catalog)
    out = Path(out_dir) if out_dir is not None else None

    def one(seed: int) -> tuple[GroundTruth, SceneResult, dict]:
        spec = config.scene.with_seed(seed)
        gt = generate_scene(spec, catalog)
        pred = simulate_predictions(gt, spec, catalog)
        res = process(pred.semantic, pred.contours, pred.offsets, catalog, config)
        extra = scene_hook(spec, gt, pred) if scene_hook else {}
        if out is not None:
            d = out / f"scene_{seed:05d}"
            write_ground_truth(gt, d)
            write_predictions(pred, d)
            write_result(res, d)
        return gt, res, extra

    t0 = time.perf_counter()
    results = _map_ordered(one, scene_seeds(config), threads)
    evaluator = Evaluator(catalog)
    scenes = []
    for seed, (gt, res, extra) in zip(scene_seeds(config), results):
        single = Evaluator(catalog)
        single.add(res.panoptic, gt.panoptic, res.labels, gt.labels, res.confidences())
        evaluator.add(res.panoptic, gt.panoptic, res.labels, gt.labels, res.confidences())
        scenes.append(
            {
                "name": f"scene_{seed:05d}",
                "seed": seed,
                "diagnostics": res.diagnostics,
                "metrics": single.report()["summary"],
                "timings": res.timings,
                **extra,
            }
        )
    report = {
        "config": config.to_json(),
        "catalog": catalog.to_json(),
        "scenes": scenes,
        "metrics": evaluator.report(),
        "timings": {"total_ms": 1e3 * (time.perf_counter() - t0)},
    }
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        dump_json(report, out / "report.json")
    return report


def strip_timings(report: Any) -> Any:
    """Copy of a report without its wall-clock fields."""
    if isinstance(report, dict):
        return {k: strip_timings(v) for k, v in report.items() if k != "timings"}
    if isinstance(report, list):
        return [strip_timings(v) for v in report]
    return report


# ------------------------------------------------------------------ ablation

ABLATION_AXES = ("dilation_rate", "min_area", "loss_combo", "refine_flags")
REFINE_FLAG_VALUES = ("off", "split", "split+merge")
TABLE_COLUMNS = ("AP", "PQ", "PQ_Th", "SQ_Th", "RQ_Th", "PQ_St", "mIoU")


def parse_grid(axis: str, values: Sequence[str | int]) -> list[Any]:
    """Validate an ablation grid before anything runs."""
    if axis not in ABLATION_AXES:
        raise ValidationError(f"unknown ablation axis {axis!r}; choose from {ABLATION_AXES}")
    if not values:
        raise ValidationError("empty ablation grid")
    out: list[Any] = []
    for v in values:
        text = str(v).strip()
        if axis in ("dilation_rate", "min_area"):
            try:
                n = int(text)
            except ValueError:
                raise ValidationError(f"{axis} grid value {text!r} is not an integer") from None
            if n < 0:
                raise ValidationError(f"{axis} grid value {n} is negative")
            out.append(n)
        elif axis == "refine_flags":
            if text not in REFINE_FLAG_VALUES:
                raise ValidationError(f"refine_flags value {text!r} not in {REFINE_FLAG_VALUES}")
            out.append(text)
        else:
            terms = tuple(t for t in text.split("+") if t)
            if not terms or set(terms) - set(CONTOUR_TERMS):
                raise ValidationError(f"loss_combo value {text!r} must join terms from {CONTOUR_TERMS} with '+'")
            out.append("+".join(terms))
    return out


def _config_for(axis: str, value: Any, base: PipelineConfig) -> PipelineConfig:
    if axis == "dilation_rate":
        return replace(base, scene=replace(base.scene, dilation_rate=value))
    if axis == "min_area":
        return replace(base, refine=replace(base.refine, min_area=value))
    if axis == "refine_flags":
        if value == "off":
            return replace(base, refine_enabled=False)
        return replace(
            base,
            refine_enabled=True,
            refine=replace(base.refine, split=True, merge=value == "split+merge"),
        )
    return base


def run_ablation(
    axis: str,
    grid: Sequence[str | int],
    base: PipelineConfig,
    catalog: ClassCatalog = CITYSCAPES,
    threads: int = 1,
) -> list[dict]:
    """One row per grid value with the metric columns of the ablation tables.

    The ``loss_combo`` axis cannot change the post-processing (there is no
    network to retrain), so its rows also carry the mean contour loss of the
    simulated predictions under each combination.
    """
    values = parse_grid(axis, grid)
    rows = []
    for value in values:
        cfg = _config_for(axis, value, base)
        hook = None
        if axis == "loss_combo":
            terms = tuple(value.split("+"))

            def hook(spec: SceneSpec, gt: GroundTruth, pred: Predictions, terms=terms) -> dict:
                rep = compute_losses(
                    pred.semantic,
                    gt.labels,
                    pred.contours,
                    gt_contours(gt.instances, spec.dilation_rate),
                    pred.offsets.offsets,
                    gt_offsets(gt.instances),
                    contour_terms=terms,
                    center_mask=gt.instances.ids > 0,
                )
                return {"loss": {"contour": rep.contour, "total": rep.total}}

        report = run_synthetic(cfg, catalog, threads=threads, scene_hook=hook)
        summary = report["metrics"]["summary"]
        row: dict[str, Any] = {"axis": axis, "value": value}
        row.update({c: summary[c] for c in TABLE_COLUMNS})
        if axis == "loss_combo":
            row["contour_loss"] = float(np.mean([s["loss"]["contour"] for s in report["scenes"]]))
            row["total_loss"] = float(np.mean([s["loss"]["total"] for s in report["scenes"]]))
        rows.append(row)
    return rows


def write_table(rows: list[dict], csv_path: str | Path | None, json_path: str | Path | None) -> None:
    if csv_path is not None and rows:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    if json_path is not None:
        dump_json({"rows": rows}, json_path)

