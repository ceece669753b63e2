"""Command-line entry points for the screening pipeline.

Subcommands map one-to-one onto the orchestration workflows; the CLI only
parses arguments, wires files, and prints results. Every command accepts
--config (TOML) and repeated --set section.key=value overrides.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import PipelineConfig, load_config
from .densescan import dense_score
from .imagecore import filter_bank
from .imageio import read_image, read_mask, write_mask, write_score_map
from .phenotype import (ProcessedWell, WellRecord, cross_validate,
                        intensity_histogram_diagnostic, read_manifest,
                        train_plate_classifier, classify_well)
from .pipeline import (SegmenterBundle, TrainImage, append_run_record,
                       file_hash, process_well, train_segmenter_workflow,
                       train_stripe_workflow)
from .segmenter import (annotations_from_json, evaluate_segmentation,
                        hard_negative_mine, threshold_segment)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None,
                   help="TOML config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override a config value")


def _cfg(args) -> PipelineConfig:
    return load_config(args.config, args.overrides)


def _load_train_images(image_paths, annotation_paths, cfg):
    items = []
    for img_path, ann_path in zip(image_paths, annotation_paths):
        _, _, worms = annotations_from_json(Path(ann_path).read_text())
        items.append(TrainImage(
            stack=filter_bank(read_image(img_path), cfg.filter_bank),
            annotations=worms))
    return items


def cmd_synth(args) -> int:
    from .synthplate import PlateConfig, SynthConfig, synth_plate
    base = SynthConfig(width=args.image_size, height=args.image_size,
                       worm_count=args.worms)
    plate = PlateConfig(plate_id=args.plate_id, mutant=args.mutant,
                        wells_per_class=args.wells_per_class,
                        base=base, seed=args.seed,
                        well_area_sigma=args.well_area_sigma)
    records, _ = synth_plate(plate, args.out)
    print(f"wrote {len(records)} wells to {args.out}")
    return 0


def cmd_train_segmenter(args) -> int:
    cfg = _cfg(args)
    items = _load_train_images(args.images, args.annotations, cfg)
    bundle = train_segmenter_workflow(items, cfg, progress=print)
    bundle.save(args.out)
    append_run_record(Path(args.out).parent / "runs.jsonl",
                      "train-segmenter", cfg,
                      {p: file_hash(p) for p in args.images},
                      [str(args.out)])
    print(f"saved segmenter model to {args.out} "
          f"(threshold {bundle.threshold:.3f})")
    return 0


def cmd_mine_negatives(args) -> int:
    cfg = _cfg(args)
    bundle = SegmenterBundle.load(args.model)
    items = _load_train_images(args.images, args.annotations, cfg)
    mined = hard_negative_mine(bundle.model,
                               [(it.stack, it.annotations) for it in items],
                               top_m=args.top_m, cfg=cfg.segmenter)
    payload = [{"image": str(args.images[m.image_index]),
                "x": m.segment.cx, "y": m.segment.cy,
                "angle": m.segment.angle, "length": m.segment.length,
                "score": m.score} for m in mined]
    Path(args.out).write_text(json.dumps(payload, indent=1))
    print(f"mined {len(mined)} hard negatives -> {args.out}")
    return 0


def cmd_segment(args) -> int:
    cfg = _cfg(args)
    bundle = SegmenterBundle.load(args.model)
    img = read_image(args.image)
    stack = filter_bank(img, cfg.filter_bank)
    scores = dense_score(stack, bundle.model, cfg.segmenter)
    tau = args.threshold if args.threshold is not None else bundle.threshold
    result = threshold_segment(scores, tau, cfg.segmenter.min_region_area)
    if args.out_mask:
        write_mask(args.out_mask, result.mask)
    if args.out_scores:
        write_score_map(args.out_scores, scores.best_score)
    print(f"{args.image}: {len(result.regions)} regions at "
          f"threshold {tau:.3f}")
    return 0


def cmd_eval_seg(args) -> int:
    mask = read_mask(args.mask)
    truth = read_mask(args.truth)
    ev = evaluate_segmentation(mask, truth)
    print(f"false positive: {ev.fp_pct:7.2f} %\n"
          f"false negative: {ev.fn_pct:7.2f} %\n"
          f"total mismatch: {ev.total_pct:7.2f} %")
    return 0


def cmd_train_stripe(args) -> int:
    from .fluor import save_stripe_model, stripe_labels_from_json
    cfg = _cfg(args)
    images, labels = [], []
    for img_path, lab_path in zip(args.images, args.labels):
        images.append(read_image(img_path))
        _, _, labs = stripe_labels_from_json(Path(lab_path).read_text())
        labels.append(labs)
    model = train_stripe_workflow(images, labels, cfg)
    save_stripe_model(args.out, model)
    print(f"saved stripe model to {args.out}")
    return 0


def cmd_detect_stripes(args) -> int:
    from .fluor import classify_stripes, detect_blobs, load_stripe_model
    cfg = _cfg(args)
    model = load_stripe_model(args.model)
    fl = read_image(args.fl)
    worm_mask = read_mask(args.worm_mask) if args.worm_mask else None
    blobs = detect_blobs(fl, model.blob_config, worm_mask=worm_mask)
    stripes = classify_stripes(model, blobs)
    if args.out_mask:
        mask = np.zeros(fl.shape, bool)
        for b in stripes:
            mask[b.ys, b.xs] = True
        write_mask(args.out_mask, mask)
    if args.out_json:
        from .fluor import BLOB_FEATURE_NAMES, blob_features
        payload = [{"blob_id": i, "area": b.area,
                    "centroid": list(b.centroid),
                    "features": dict(zip(BLOB_FEATURE_NAMES,
                                         blob_features(b).tolist()))}
                   for i, b in enumerate(stripes)]
        Path(args.out_json).write_text(json.dumps(payload, indent=1))
    print(f"{len(blobs)} blobs, {len(stripes)} stripes")
    return 0


def _processed_wells(args, cfg, records) -> list[ProcessedWell]:
    """Process manifest wells, with an optional feature cache."""
    from .fluor import load_stripe_model
    cache = Path(args.cache) if args.cache else None
    if cache and cache.exists():
        wells = _load_well_cache(cache, records)
        if wells is not None:
            print(f"using cached features from {cache}")
            return wells
    seg_bundle = SegmenterBundle.load(args.seg_model)
    stripe_model = load_stripe_model(args.stripe_model)
    wells = []
    for i, rec in enumerate(records):
        res = process_well(rec, seg_bundle, stripe_model, cfg)
        print(f"[{i + 1}/{len(records)}] {rec.well_id}: {res.status}")
        if res.status == "ok":
            wells.append(res.processed)
    if cache:
        _save_well_cache(cache, wells)
    return wells


def _save_well_cache(path: Path, wells) -> None:
    payload = [{
        "plate_id": w.record.plate_id, "well_id": w.record.well_id,
        "bf_path": w.record.bf_path, "fl_path": w.record.fl_path,
        "role": w.record.role, "known_label": w.record.known_label,
        "features": w.features.tolist(),
        "mean_fl": w.mean_fl_in_regions, "ratio": w.stripe_area_ratio,
    } for w in wells]
    path.write_text(json.dumps(payload))


def _load_well_cache(path: Path, records) -> list[ProcessedWell] | None:
    try:
        payload = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError):
        return None
    want = {(r.plate_id, r.well_id) for r in records}
    got = {(w["plate_id"], w["well_id"]) for w in payload}
    if not want <= got:
        return None
    wells = []
    for w in payload:
        if (w["plate_id"], w["well_id"]) not in want:
            continue
        feats = np.asarray(w["features"], dtype=np.float64)
        if feats.size == 0:
            feats = feats.reshape(0, 9)
        wells.append(ProcessedWell(
            record=WellRecord(w["plate_id"], w["well_id"], w["bf_path"],
                              w["fl_path"], w["role"], w["known_label"]),
            features=feats, mean_fl_in_regions=w["mean_fl"],
            stripe_area_ratio=w["ratio"]))
    return wells


def cmd_train_phenotype(args) -> int:
    from .boosting import save_model
    cfg = _cfg(args)
    records = [r for r in read_manifest(args.manifest) if r.role == "control"]
    wells = _processed_wells(args, cfg, records)
    task = tuple(args.task.split(":"))
    bag = train_plate_classifier(wells, task, K=cfg.boosting.bag_size,
                                 subsample_fraction=
                                 cfg.boosting.subsample_fraction,
                                 rounds=cfg.boosting.phenotype_rounds,
                                 seed=cfg.seed)
    save_model(args.out, bag)
    print(f"saved phenotype bag to {args.out}")
    return 0


def cmd_classify_plate(args) -> int:
    from .boosting import load_model
    cfg = _cfg(args)
    records = read_manifest(args.manifest)
    wells = _processed_wells(args, cfg, records)
    bag = load_model(args.bag)
    decisions = []
    for w in wells:
        ws = classify_well(bag, w)
        name = {1: "mutant", -1: "WT", 0: "abstain"}[ws.decision]
        decisions.append({"well_id": w.record.well_id, "decision": name,
                          "total": ws.total, "reason": ws.reason})
        print(f"{w.record.well_id}: {name:8s} total {ws.total:+.3f} "
              f"{ws.reason}")
    if args.out:
        Path(args.out).write_text(json.dumps(decisions, indent=1))
    return 0


def cmd_cv_report(args) -> int:
    cfg = _cfg(args)
    records = read_manifest(args.manifest)
    wells = _processed_wells(args, cfg, records)
    task = tuple(args.task.split(":"))
    report = cross_validate(wells, task, replicates=args.replicates,
                            seed=cfg.seed, K=cfg.boosting.bag_size,
                            rounds=cfg.boosting.phenotype_rounds,
                            subsample_fraction=
                            cfg.boosting.subsample_fraction)
    print(report.to_text())
    if args.out:
        Path(args.out).write_text(report.to_json())
    return 0


def cmd_fig2_diagnostic(args) -> int:
    cfg = _cfg(args)
    records = read_manifest(args.manifest)
    wells = _processed_wells(args, cfg, records)
    task = tuple(args.task.split(":"))
    rep = intensity_histogram_diagnostic(wells, task)
    print(f"mean-intensity KS between classes: {rep.intensity_ks:.3f}")
    print(f"stripe-ratio  KS between classes: {rep.ratio_ks:.3f}")
    if args.out:
        Path(args.out).write_text(rep.to_json())
    return 0


def cmd_serve(args) -> int:
    import uvicorn
    from .service import create_app
    cfg = _cfg(args)
    app = create_app(args.workspace, cfg)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="wormscreen",
                                 description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic control plate")
    p.add_argument("--plate", action="store_true", default=True,
                   help="generate a whole plate (default)")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--plate-id", default="plate1")
    p.add_argument("--mutant", default="hNR", choices=["lNR", "hNR"])
    p.add_argument("--wells-per-class", type=int, default=48)
    p.add_argument("--image-size", type=int, default=512)
    p.add_argument("--worms", type=int, default=7)
    p.add_argument("--well-area-sigma", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-segmenter", help="train the worm detector")
    _add_common(p)
    p.add_argument("--images", nargs="+", required=True, type=Path)
    p.add_argument("--annotations", nargs="+", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_train_segmenter)

    p = sub.add_parser("mine-negatives",
                       help="list the highest-scoring non-worm segments")
    _add_common(p)
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--images", nargs="+", required=True, type=Path)
    p.add_argument("--annotations", nargs="+", required=True, type=Path)
    p.add_argument("--top-m", type=int, default=200)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_mine_negatives)

    p = sub.add_parser("segment", help="segment one brightfield image")
    _add_common(p)
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--image", required=True, type=Path)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--out-mask", type=Path)
    p.add_argument("--out-scores", type=Path)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("eval-seg", help="mismatch between mask and truth")
    p.add_argument("--mask", required=True, type=Path)
    p.add_argument("--truth", required=True, type=Path)
    p.set_defaults(func=cmd_eval_seg)

    p = sub.add_parser("train-stripe", help="train the stripe classifier")
    _add_common(p)
    p.add_argument("--images", nargs="+", required=True, type=Path)
    p.add_argument("--labels", nargs="+", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_train_stripe)

    p = sub.add_parser("detect-stripes", help="detect stripes in one image")
    _add_common(p)
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--fl", required=True, type=Path)
    p.add_argument("--worm-mask", type=Path)
    p.add_argument("--out-mask", type=Path)
    p.add_argument("--out-json", type=Path)
    p.set_defaults(func=cmd_detect_stripes)

    for name, fn in (
            ("train-phenotype", cmd_train_phenotype),
            ("classify-plate", cmd_classify_plate),
            ("cv-report", cmd_cv_report),
            ("fig2-diagnostic", cmd_fig2_diagnostic)):
        p = sub.add_parser(name)
        _add_common(p)
        p.add_argument("--manifest", required=True, type=Path)
        p.add_argument("--seg-model", required=True, type=Path)
        p.add_argument("--stripe-model", required=True, type=Path)
        p.add_argument("--task", default="WT:hNR",
                       help="negative:positive class pair, e.g. WT:hNR")
        p.add_argument("--cache", type=Path, default=None,
                       help="feature cache file (JSON)")
        if name == "train-phenotype":
            p.add_argument("--out", required=True, type=Path)
        if name == "classify-plate":
            p.add_argument("--bag", required=True, type=Path)
            p.add_argument("--out", type=Path)
        if name == "cv-report":
            p.add_argument("--replicates", type=int, default=20)
            p.add_argument("--out", type=Path)
        if name == "fig2-diagnostic":
            p.add_argument("--out", type=Path)
        p.set_defaults(func=fn)

    p = sub.add_parser("serve", help="run the annotation service")
    _add_common(p)
    p.add_argument("--workspace", required=True, type=Path)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
