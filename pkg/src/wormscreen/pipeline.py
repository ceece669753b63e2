"""Orchestration: training workflows, per-well processing, run records.

The three-detector pipeline per well: brightfield -> dense segment scan ->
threshold into regions; fluorescence -> blob detection -> stripe
classification; regions + stripes -> phenotype features. All workflows are
deterministic given the config seed and stamp their outputs with the config
hash and model ids.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .boosting import (BaggedEnsemble, StumpEnsemble, examples_from_arrays,
                       load_model, save_model, train_adaboost)
from .config import PipelineConfig
from .densescan import dense_score
from .fluor import (Blob, BlobConfig, StripeModel, classify_stripes,
                    detect_blobs, load_stripe_model, prepare_fl,
                    save_stripe_model, train_stripe_model)
from .imagecore import FilterStack, GrayImage, filter_bank
from .imageio import read_image
from .phenotype import (ProcessedWell, WellRecord, region_features)
from .segmenter import (ScoreImage, SegmentationResult, SegmenterConfig,
                        WormAnnotation, calibrate_threshold, feature_names,
                        generate_positives, generate_random_negatives,
                        hard_negative_mine, rasterize_annotations,
                        segment_features, threshold_segment)

log = logging.getLogger(__name__)


@dataclass
class SegmenterBundle:
    """Trained segment scorer plus its calibrated mask threshold."""

    model: StumpEnsemble
    threshold: float
    config_hash: str = ""

    def save(self, path: str | Path) -> None:
        path = Path(path)
        save_model(path, self.model)
        d = json.loads(path.read_text())
        d["mask_threshold"] = self.threshold
        d["config_hash"] = self.config_hash
        path.write_text(json.dumps(d, indent=1))

    @staticmethod
    def load(path: str | Path) -> "SegmenterBundle":
        d = json.loads(Path(path).read_text())
        model = load_model(path)
        return SegmenterBundle(model=model,
                               threshold=float(d.get("mask_threshold", 0.0)),
                               config_hash=d.get("config_hash", ""))


def model_id(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:12]


@dataclass
class TrainImage:
    """One annotated brightfield image prepared for detector training."""

    stack: FilterStack
    annotations: list[WormAnnotation]


def _collect_examples(items: Sequence[TrainImage], cfg: PipelineConfig,
                      seed: int):
    """Initial training matrix: annotated positives + random negatives."""
    seg_cfg = cfg.segmenter
    X_rows, y_rows = [], []
    for idx, item in enumerate(items):
        positives = []
        for ann in item.annotations:
            positives.extend(generate_positives(
                ann, spacing=cfg.training.positive_spacing, cfg=seg_cfg))
        n_neg = max(1, int(round(len(positives)
                                 * cfg.training.negatives_per_positive)))
        negatives = generate_random_negatives(
            item.stack.source.shape, item.annotations, n_neg,
            seed=seed + idx, cfg=seg_cfg)
        for s in positives:
            X_rows.append(segment_features(item.stack, s, seg_cfg))
            y_rows.append(+1.0)
        for s in negatives:
            X_rows.append(segment_features(item.stack, s, seg_cfg))
            y_rows.append(-1.0)
    return X_rows, y_rows


def train_segmenter_workflow(
        items: Sequence[TrainImage], cfg: PipelineConfig,
        progress: Callable[[str], None] | None = None,
        keep_round_bundles: bool = False):
    """Full detector training: boost, then alternate mining and retraining.

    Returns the final bundle; with keep_round_bundles also a list with the
    calibrated bundle after each round (index 0 = before any mining), which
    the evaluation harness uses to show that mining reduces false positives.
    """
    say = progress or (lambda msg: log.info("%s", msg))
    seg_cfg = cfg.segmenter
    names = feature_names(items[0].stack.names, seg_cfg)
    X_rows, y_rows = _collect_examples(items, cfg, seed=cfg.seed)
    say(f"initial training set: {len(X_rows)} examples")

    gt_masks = [rasterize_annotations(it.annotations, it.stack.source.shape)
                for it in items]

    def fit():
        model = train_adaboost(
            examples_from_arrays(np.stack(X_rows), np.array(y_rows)),
            rounds=cfg.boosting.segmenter_rounds, seed=cfg.seed,
            feature_names=names)
        score_images = [dense_score(it.stack, model, seg_cfg)
                        for it in items]
        tau = calibrate_threshold(
            score_images, gt_masks,
            n_candidates=cfg.training.threshold_candidates,
            min_region_area=seg_cfg.min_region_area)
        return SegmenterBundle(model, tau, cfg.hash()), score_images

    bundle, score_images = fit()
    rounds = [bundle]
    for mining_round in range(cfg.training.mining_rounds):
        mined = hard_negative_mine(
            bundle.model, [(it.stack, it.annotations) for it in items],
            top_m=cfg.training.mined_per_image * len(items),
            cfg=seg_cfg, score_images=score_images)
        if not mined:
            say(f"mining round {mining_round + 1}: no candidates, stopping")
            break
        for neg in mined:
            X_rows.append(segment_features(items[neg.image_index].stack,
                                           neg.segment, seg_cfg))
            y_rows.append(-1.0)
        say(f"mining round {mining_round + 1}: added {len(mined)} negatives "
            f"(training set now {len(X_rows)})")
        bundle, score_images = fit()
        rounds.append(bundle)
    if keep_round_bundles:
        return bundle, rounds
    return bundle


def segment_well(bf: GrayImage, bundle: SegmenterBundle,
                 cfg: PipelineConfig, parallel: bool = True
                 ) -> tuple[ScoreImage, SegmentationResult]:
    stack = filter_bank(bf, cfg.filter_bank)
    scores = dense_score(stack, bundle.model, cfg.segmenter,
                         parallel=parallel)
    result = threshold_segment(scores, bundle.threshold,
                               min_region_area=cfg.segmenter.min_region_area)
    return scores, result


@dataclass
class WellResult:
    record: WellRecord
    status: str                      # "ok" or "failed"
    error: str = ""
    segmentation: SegmentationResult | None = None
    scores: ScoreImage | None = None
    stripes: list[Blob] = field(default_factory=list)
    processed: ProcessedWell | None = None


def process_well(record: WellRecord, seg_bundle: SegmenterBundle,
                 stripe_model: StripeModel, cfg: PipelineConfig
                 ) -> WellResult:
    """Run the full three-detector pipeline on one well."""
    try:
        bf = read_image(record.bf_path)
        fl = read_image(record.fl_path)
        scores, seg = segment_well(bf, seg_bundle, cfg)
        angle_map = scores.angles[scores.best_angle]
        fl_norm = prepare_fl(fl, stripe_model.blob_config)
        blobs = detect_blobs(fl_norm, stripe_model.blob_config,
                             worm_mask=seg.mask, worm_angles=angle_map)
        stripes = classify_stripes(stripe_model, blobs)
        floor = cfg.training.phenotype_min_region_area
        feats = []
        ratios_num = ratios_den = 0.0
        fl_vals = []
        for region in seg.regions:
            # mean intensity for the diagnostic uses the raw image; the
            # classifier features use the normalized one
            fl_vals.append(fl.data[region.ys, region.xs])
            if region.area < floor:
                continue
            overlapping = [b for b in stripes
                           if _blob_touches_region(b, region, seg.mask.shape)]
            f = region_features(region, overlapping, fl_norm)
            feats.append(f.vector())
            ratios_num += f.stripe_total_area
            ratios_den += f.region_area
        processed = ProcessedWell(
            record=record,
            features=(np.stack(feats) if feats
                      else np.zeros((0, 9))),
            mean_fl_in_regions=(float(np.concatenate(fl_vals).mean())
                                if fl_vals else 0.0),
            stripe_area_ratio=(ratios_num / ratios_den if ratios_den else 0.0),
        )
        return WellResult(record=record, status="ok", segmentation=seg,
                          scores=scores, stripes=stripes, processed=processed)
    except Exception as exc:  # keep the plate run alive on per-well failure
        log.warning("well %s failed: %s", record.well_id, exc)
        return WellResult(record=record, status="failed", error=str(exc))


def _blob_touches_region(blob: Blob, region, shape) -> bool:
    x0, y0, x1, y1 = blob.bbox
    rx0, ry0, rx1, ry1 = region.bbox
    if x1 < rx0 or rx1 < x0 or y1 < ry0 or ry1 < y0:
        return False
    mask = np.zeros(shape, bool)
    mask[region.ys, region.xs] = True
    return bool(mask[blob.ys, blob.xs].any())


def run_pipeline(records: Sequence[WellRecord], seg_bundle: SegmenterBundle,
                 stripe_model: StripeModel, cfg: PipelineConfig,
                 progress: Callable[[str], None] | None = None
                 ) -> list[WellResult]:
    """Process every well in the manifest; failures do not stop the run."""
    say = progress or (lambda msg: log.info("%s", msg))
    results = []
    for i, record in enumerate(records):
        res = process_well(record, seg_bundle, stripe_model, cfg)
        say(f"[{i + 1}/{len(records)}] {record.well_id}: {res.status}"
            + (f" ({len(res.segmentation.regions)} regions, "
               f"{len(res.stripes)} stripes)" if res.status == "ok" else ""))
        results.append(res)
    return results


def train_stripe_workflow(fl_images: Sequence[GrayImage],
                          labels: Sequence[dict[int, str]],
                          cfg: PipelineConfig,
                          worm_masks: Sequence[np.ndarray] | None = None,
                          worm_angle_maps: Sequence[np.ndarray] | None = None
                          ) -> StripeModel:
    """Train the stripe classifier from per-image blob labels.

    Blob ids in the label dicts refer to the detection order produced by
    detect_blobs on the same image with the same blob config.
    """
    labeled = []
    for i, (fl, lab) in enumerate(zip(fl_images, labels)):
        mask = worm_masks[i] if worm_masks is not None else None
        angles = worm_angle_maps[i] if worm_angle_maps is not None else None
        blobs = detect_blobs(prepare_fl(fl, cfg.blobs), cfg.blobs,
                             worm_mask=mask, worm_angles=angles)
        for j, blob in enumerate(blobs):
            if j in lab:
                labeled.append((blob, lab[j] == "stripe"))
    if not labeled:
        raise ValueError("no labeled blobs")
    return train_stripe_model(labeled, rounds=cfg.boosting.stripe_rounds,
                              seed=cfg.seed, blob_config=cfg.blobs)


# ---------------------------------------------------------------------------
# run records

def append_run_record(path: str | Path, command: str, cfg: PipelineConfig,
                      inputs: dict[str, str], outputs: list[str]) -> None:
    """Append one line to the append-only run log."""
    record = {
        "time": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "command": command,
        "config_hash": cfg.hash(),
        "inputs": inputs,
        "outputs": outputs,
    }
    with open(path, "a") as fh:
        fh.write(json.dumps(record) + "\n")


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:12]
