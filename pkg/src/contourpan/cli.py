"""Command-line entry point: one subcommand per stage plus ``pipeline`` and ``ablate``.

Exit codes: 0 success, 1 validation/format error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from contourpan import stf
from contourpan.gt_contour import gt_contours
from contourpan.instances import DeriveParams, compute_records, derive_instances
from contourpan.losses import CONTOUR_TERMS, LossWeights, compute_losses
from contourpan.metrics import Evaluator
from contourpan.panoptic import merge_panoptic
from contourpan.pipeline import (
    ABLATION_AXES,
    PipelineConfig,
    default_threads,
    dump_json,
    json_text,
    parse_grid,
    process,
    run_ablation,
    run_synthetic,
    write_ground_truth,
    write_predictions,
    write_result,
    write_table,
)
from contourpan.raster import (
    CITYSCAPES,
    ClassCatalog,
    ContourMask,
    ContourProbMap,
    InstanceLabelMap,
    InstanceRecord,
    OffsetField,
    PanopticMap,
    SemanticLabelMap,
    SemanticProbMap,
    ValidationError,
    argmax_semantic,
)
from contourpan.refine import RefineParams, refine
from contourpan.stf import FormatError
from contourpan.synth import SceneError, SceneSpec, generate_scene, simulate_predictions

log = logging.getLogger("contourpan")


def _catalog(path: str | None) -> ClassCatalog:
    if path is None:
        return CITYSCAPES
    return ClassCatalog.from_json(path)


def _semantic(path: str) -> tuple[SemanticLabelMap, SemanticProbMap | None]:
    """Semantic input given either as probabilities or as labels."""
    r = stf.read_tensor(path)
    if isinstance(r, SemanticProbMap):
        return argmax_semantic(r), r
    if isinstance(r, SemanticLabelMap):
        return r, None
    raise FormatError(f"{path}: expected semantic probabilities or labels, got {type(r).__name__}")


def _instances(path: str, records: str | None) -> InstanceLabelMap:
    inst = stf.read_as(path, InstanceLabelMap)
    if records is None:
        return inst
    recs = tuple(InstanceRecord.from_json(d) for d in json.loads(Path(records).read_text()))
    out = InstanceLabelMap(inst.ids, recs)
    out.validate()
    return out


# ------------------------------------------------------------------ commands


def cmd_gt_contours(args: argparse.Namespace) -> None:
    inst = stf.read_as(args.instances, InstanceLabelMap)
    stf.write_tensor(gt_contours(inst, args.rate), args.out)


def cmd_loss(args: argparse.Namespace) -> None:
    probs = stf.read_as(args.probs, SemanticProbMap)
    gt = stf.read_as(args.gt, SemanticLabelMap)
    cp = stf.read_as(args.contour_probs, ContourProbMap) if args.contour_probs else None
    cg = stf.read_as(args.contour_gt, ContourMask) if args.contour_gt else None
    if (cp is None) != (cg is None):
        raise ValidationError("--contour-probs and --contour-gt must be given together")
    off = stf.read_as(args.offsets, OffsetField).offsets if args.offsets else None
    goff = stf.read_as(args.gt_offsets, OffsetField).offsets if args.gt_offsets else None
    if (off is None) != (goff is None):
        raise ValidationError("--offsets and --gt-offsets must be given together")
    mask = None
    if args.center_mask:
        mask = stf.read_as(args.center_mask, InstanceLabelMap).ids > 0
    terms = tuple(t for t in args.terms.split("+") if t)
    report = compute_losses(
        probs,
        gt,
        cp,
        cg,
        off,
        goff,
        weights=LossWeights.parse(args.weights),
        contour_terms=terms,
        center_mask=mask,
        nms_window=args.nms_window,
    )
    out = report.to_json()
    out["contour_terms"] = list(terms)
    _emit(out, args.report)


def cmd_derive(args: argparse.Namespace) -> None:
    catalog = _catalog(args.catalog)
    probs = stf.read_as(args.semantic_probs, SemanticProbMap)
    contours = stf.read_as(args.contours, ContourProbMap)
    offsets = stf.read_as(args.offsets, OffsetField) if args.offsets else None
    params = DeriveParams(args.threshold, args.connectivity)
    diag: dict = {}
    labels, inst = derive_instances(probs, contours, catalog, offsets, params, diagnostics=diag)
    stf.write_tensor(inst, args.out)
    if args.records:
        dump_json([r.to_json() for r in inst.records], args.records)
    if args.labels_out:
        stf.write_tensor(labels, args.labels_out)
    log.info("derived %d instances %s", len(inst.records), diag)


def cmd_refine(args: argparse.Namespace) -> None:
    catalog = _catalog(args.catalog)
    probs = stf.read_as(args.semantic_probs, SemanticProbMap)
    labels = argmax_semantic(probs)
    inst = stf.read_as(args.instances, InstanceLabelMap)
    inst = InstanceLabelMap(inst.ids, compute_records(inst.ids, labels, probs, catalog))
    offsets = stf.read_as(args.offsets, OffsetField)
    params = RefineParams(
        eps=args.eps,
        min_samples=args.min_samples,
        min_area=args.min_area,
        merge_distance=args.merge_distance,
        split=not args.no_split,
        merge=not args.no_merge,
        filter=not args.no_filter,
    )
    out = refine(inst, offsets, labels, probs, catalog, params)
    stf.write_tensor(out, args.out)
    if args.records:
        dump_json([r.to_json() for r in out.records], args.records)


def cmd_panoptic(args: argparse.Namespace) -> None:
    catalog = _catalog(args.catalog)
    labels, probs = _semantic(args.semantic)
    inst = _instances(args.instances, args.records)
    if not inst.records and inst.present_ids().size:
        inst = InstanceLabelMap(inst.ids, compute_records(inst.ids, labels, probs, catalog))
    pan = merge_panoptic(labels, inst, catalog)
    stf.write_tensor(pan, args.out)
    if args.debug_ppm:
        stf.write_panoptic_ppm(pan, args.debug_ppm)


def _find_pairs(pred_dir: Path, gt_dir: Path) -> list[tuple[Path, Path]]:
    pairs = []
    for pred in sorted(pred_dir.rglob("*panoptic.stf")):
        if pred.name.startswith("gt_"):
            continue
        rel = pred.relative_to(pred_dir)
        candidates = [gt_dir / rel.parent / f"gt_{rel.name}", gt_dir / rel]
        gt = next((c for c in candidates if c.is_file()), None)
        if gt is None:
            raise FileNotFoundError(2, "no ground truth for prediction", str(candidates[0]))
        pairs.append((pred, gt))
    if not pairs:
        raise FileNotFoundError(2, "no *panoptic.stf predictions found", str(pred_dir))
    return pairs


def _semantic_beside(panoptic_path: Path) -> SemanticLabelMap | None:
    prefix = panoptic_path.name[: -len("panoptic.stf")]
    for name in (f"{prefix}labels.stf", f"{prefix}semantic.stf"):
        p = panoptic_path.with_name(name)
        if p.is_file():
            return stf.read_as(p, SemanticLabelMap)
    return None


def evaluate_dirs(pred_dir: Path, gt_dir: Path, catalog: ClassCatalog) -> dict:
    ev = Evaluator(catalog)
    images = []
    for pred_path, gt_path in _find_pairs(pred_dir, gt_dir):
        pred = stf.read_as(pred_path, PanopticMap)
        gt = stf.read_as(gt_path, PanopticMap)
        pred.validate(catalog)
        gt.validate(catalog)
        conf_path = pred_path.with_name(pred_path.name[: -len("panoptic.stf")] + "confidences.json")
        conf = None
        if conf_path.is_file():
            conf = {int(k): float(v) for k, v in json.loads(conf_path.read_text()).items()}
        ev.add(pred, gt, _semantic_beside(pred_path), _semantic_beside(gt_path), conf)
        images.append({"pred": str(pred_path.relative_to(pred_dir)), "gt": str(gt_path.relative_to(gt_dir))})
    report = ev.report()
    report["pairs"] = images
    return report


def cmd_eval(args: argparse.Namespace) -> None:
    catalog = _catalog(args.catalog)
    pred_dir, gt_dir = Path(args.pred_dir), Path(args.gt_dir)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise FileNotFoundError(2, "not a directory", str(d))
    _emit(evaluate_dirs(pred_dir, gt_dir, catalog), args.report)


def cmd_synth(args: argparse.Namespace) -> None:
    catalog = _catalog(args.catalog)
    spec = SceneSpec.load(args.spec) if args.spec else SceneSpec()
    if args.seed is not None:
        spec = spec.with_seed(args.seed)
    spec.check_catalog(catalog)
    out = Path(args.out_dir)
    scenes = []
    for i in range(args.n_scenes):
        s = spec.with_seed(spec.seed + i)
        gt = generate_scene(s, catalog)
        pred = simulate_predictions(gt, s, catalog)
        d = out / f"scene_{s.seed:05d}"
        write_ground_truth(gt, d)
        write_predictions(pred, d)
        scenes.append({"name": d.name, "seed": s.seed, "instances": len(gt.instances.records)})
    dump_json({"spec": spec.to_json(), "catalog": catalog.to_json(), "scenes": scenes}, out / "manifest.json")


def _pipeline_config(args: argparse.Namespace) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if args.spec:
        cfg = replace(cfg, scene=SceneSpec.load(args.spec))
    if args.seed is not None:
        cfg = replace(cfg, scene=cfg.scene.with_seed(args.seed))
    if args.n_scenes is not None:
        cfg = replace(cfg, n_scenes=args.n_scenes)
    derive_kw = {k: v for k, v in (("contour_threshold", args.threshold), ("connectivity", args.connectivity)) if v is not None}
    refine_kw = {k: v for k, v in (("eps", args.eps), ("min_area", args.min_area)) if v is not None}
    if args.rate is not None:
        cfg = replace(cfg, scene=replace(cfg.scene, dilation_rate=args.rate))
    cfg = replace(cfg, derive=replace(cfg.derive, **derive_kw), refine=replace(cfg.refine, **refine_kw))
    if args.no_refine:
        cfg = replace(cfg, refine_enabled=False)
    return cfg


def cmd_pipeline(args: argparse.Namespace) -> None:
    catalog = _catalog(args.catalog)
    cfg = _pipeline_config(args)
    threads = args.threads or default_threads()
    if args.semantic_probs:
        report = _pipeline_files(args, cfg, catalog)
    else:
        report = run_synthetic(cfg, catalog, out_dir=args.out_dir, threads=threads)
    _emit(report, args.report)


def _pipeline_files(args: argparse.Namespace, cfg: PipelineConfig, catalog: ClassCatalog) -> dict:
    if not args.contours:
        raise ValidationError("--contours is required with --semantic-probs")
    probs = stf.read_as(args.semantic_probs, SemanticProbMap)
    contours = stf.read_as(args.contours, ContourProbMap)
    offsets = stf.read_as(args.offsets, OffsetField) if args.offsets else None
    if offsets is None and cfg.refine_enabled:
        raise ValidationError("refinement needs --offsets (or pass --no-refine)")
    res = process(probs, contours, offsets, catalog, cfg)
    report: dict = {
        "config": cfg.to_json(),
        "inputs": {"semantic_probs": args.semantic_probs, "contours": args.contours, "offsets": args.offsets},
        "diagnostics": res.diagnostics,
        "timings": res.timings,
    }
    if args.out_dir:
        write_result(res, Path(args.out_dir))
    if args.gt_panoptic:
        gt = stf.read_as(args.gt_panoptic, PanopticMap)
        ev = Evaluator(catalog)
        ev.add(res.panoptic, gt, res.labels, None, res.confidences())
        report["metrics"] = ev.report()
    return report


def cmd_ablate(args: argparse.Namespace) -> None:
    catalog = _catalog(args.catalog)
    cfg = _pipeline_config(args)
    grid = [g for g in args.grid.split(",") if g.strip()]
    parse_grid(args.axis, grid)
    rows = run_ablation(args.axis, grid, cfg, catalog, threads=args.threads or default_threads())
    write_table(rows, args.out, args.report)
    if args.out is None and args.report is None:
        _emit({"rows": rows}, None)


def _emit(obj: dict, path: str | None) -> None:
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        dump_json(obj, path)
    else:
        sys.stdout.write(json_text(obj))


# ------------------------------------------------------------------ parser


def _pipeline_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--spec", help="scene spec JSON (replaces the config's scene)")
    p.add_argument("--seed", type=int, help="first scene seed")
    p.add_argument("--n-scenes", type=int)
    p.add_argument("--threshold", type=float, help="contour threshold (default 0.5)")
    p.add_argument("--connectivity", type=int, choices=(4, 8))
    p.add_argument("--eps", type=float, help="DBSCAN eps in pixels (default 20)")
    p.add_argument("--min-area", type=int, help="minimum instance area (default 300)")
    p.add_argument("--rate", type=int, help="GT contour dilation rate (default 2)")
    p.add_argument("--no-refine", action="store_true", help="skip split/merge/min-area refinement")
    p.add_argument("--threads", type=int, help="worker threads (default from CONTOURPAN_THREADS or 1)")
    p.add_argument("--catalog", help="class catalog JSON (default: Cityscapes 19 classes)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="contourpan", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gt-contours", help="GT instance contours from an instance map")
    p.add_argument("--instances", required=True)
    p.add_argument("--rate", type=int, default=2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gt_contours)

    p = sub.add_parser("loss", help="evaluate the training losses")
    p.add_argument("--probs", required=True, help="semantic probabilities")
    p.add_argument("--gt", required=True, help="GT semantic labels")
    p.add_argument("--contour-probs")
    p.add_argument("--contour-gt")
    p.add_argument("--offsets")
    p.add_argument("--gt-offsets")
    p.add_argument("--center-mask", help="instance map; the center loss only covers its foreground")
    p.add_argument("--weights", default="1,50,0.1")
    p.add_argument("--terms", default="+".join(CONTOUR_TERMS), help="contour terms joined by '+'")
    p.add_argument("--nms-window", type=int, default=9)
    p.add_argument("--report")
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("derive", help="instances from semantic + contour probabilities")
    p.add_argument("--semantic-probs", required=True)
    p.add_argument("--contours", required=True)
    p.add_argument("--offsets")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--connectivity", type=int, choices=(4, 8), default=4)
    p.add_argument("--catalog")
    p.add_argument("--out", required=True)
    p.add_argument("--records")
    p.add_argument("--labels-out")
    p.set_defaults(func=cmd_derive)

    p = sub.add_parser("refine", help="split / merge / min-area refinement")
    p.add_argument("--instances", required=True)
    p.add_argument("--offsets", required=True)
    p.add_argument("--semantic-probs", required=True)
    p.add_argument("--eps", type=float, default=20.0)
    p.add_argument("--min-samples", type=int)
    p.add_argument("--min-area", type=int, default=300)
    p.add_argument("--merge-distance", type=float, default=20.0)
    p.add_argument("--no-merge", action="store_true")
    p.add_argument("--no-split", action="store_true")
    p.add_argument("--no-filter", action="store_true")
    p.add_argument("--catalog")
    p.add_argument("--out", required=True)
    p.add_argument("--records")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("panoptic", help="merge semantics and instances")
    p.add_argument("--semantic", required=True, help="semantic probabilities or labels")
    p.add_argument("--instances", required=True)
    p.add_argument("--records", help="instance records JSON (default: recomputed by majority vote)")
    p.add_argument("--catalog")
    p.add_argument("--out", required=True)
    p.add_argument("--debug-ppm")
    p.set_defaults(func=cmd_panoptic)

    p = sub.add_parser("eval", help="PQ / mIoU / AP over directories of panoptic maps")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--catalog")
    p.add_argument("--report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="write synthetic scenes and simulated predictions")
    p.add_argument("--spec")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-scenes", type=int, default=1)
    p.add_argument("--catalog")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pipeline", help="derive -> refine -> panoptic -> eval")
    _pipeline_args(p)
    p.add_argument("--semantic-probs", help="run on tensors instead of synthetic scenes")
    p.add_argument("--contours")
    p.add_argument("--offsets")
    p.add_argument("--gt-panoptic", help="evaluate tensor input against this GT")
    p.add_argument("--out-dir")
    p.add_argument("--report")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("ablate", help="sweep one experiment axis on synthetic scenes")
    _pipeline_args(p)
    p.add_argument("--axis", required=True, choices=ABLATION_AXES)
    p.add_argument("--grid", required=True, help="comma-separated values")
    p.add_argument("--out", help="CSV table")
    p.add_argument("--report", help="JSON table")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    stage = args.command
    try:
        args.func(args)
    except (ValidationError, FormatError, SceneError) as exc:
        print(f"error [{stage}]: {exc}", file=sys.stderr)
        return 1
    except json.JSONDecodeError as exc:
        print(f"error [{stage}]: invalid JSON: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        path = exc.filename or ""
        print(f"error [{stage}]: {exc.strerror or exc}: {path}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
