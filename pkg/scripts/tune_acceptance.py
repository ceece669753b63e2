"""Dry run of the acceptance scenario with the current defaults.

Trains the full stack on synthetic wells at the acceptance geometry, then
reports every PRIMARY criterion number: held-out segmentation mismatch per
mining round, CV metrics for both tasks, and the intensity/ratio KS stats.
Used to pin the synth and pipeline defaults before freezing the acceptance
test; not part of the test suite.
"""

import pickle
import sys
import time

import numpy as np

from wormscreen.config import PipelineConfig
from wormscreen.densescan import dense_score
from wormscreen.fluor import detect_blobs, prepare_fl
from wormscreen.imagecore import filter_bank
from wormscreen.phenotype import cross_validate, intensity_histogram_diagnostic
from wormscreen.pipeline import (TrainImage, process_well,
                                 train_segmenter_workflow,
                                 train_stripe_workflow)
from wormscreen.segmenter import threshold_segment
from wormscreen.synthplate import (PlateConfig, SynthConfig, synth_plate,
                                   synth_scene)

WELL = dict(width=352, height=352, worm_count=4,
            worm_length=(80.0, 130.0))
HARDER_AREA_SIGMA = 0.16
N_PER_CLASS = int(sys.argv[1]) if len(sys.argv) > 1 else 48
REPLICATES = int(sys.argv[2]) if len(sys.argv) > 2 else 20

t0 = time.time()


def tick(msg):
    print(f"[{time.time() - t0:6.0f}s] {msg}", flush=True)


cfg = PipelineConfig()

train_items = []
for s in range(6):
    sc = synth_scene(SynthConfig(seed=100 + s, **WELL))
    train_items.append(TrainImage(
        stack=filter_bank(sc.bf, cfg.filter_bank),
        annotations=sc.annotations))
tick("training scenes ready")

bundle, rounds = train_segmenter_workflow(train_items, cfg,
                                          keep_round_bundles=True)
bundle.save("/tmp/acc_seg_bundle.json")
tick(f"segmenter trained ({len(rounds)} round bundles)")

held = [synth_scene(SynthConfig(seed=500 + i, **WELL)) for i in range(20)]
for ri in (0, len(rounds) - 1):
    b = rounds[ri]
    fp = fn = gt_area = 0
    for sc in held:
        stack = filter_bank(sc.bf, cfg.filter_bank)
        scores = dense_score(stack, b.model, cfg.segmenter)
        seg = threshold_segment(scores, b.threshold,
                                cfg.segmenter.min_region_area)
        gt = sc.worm_mask_union()
        fp += int(np.sum(seg.mask & ~gt))
        fn += int(np.sum(~seg.mask & gt))
        gt_area += int(gt.sum())
    tick(f"round {ri}: FP {100 * fp / gt_area:.1f}%  "
         f"FN {100 * fn / gt_area:.1f}%  total "
         f"{100 * (fp + fn) / gt_area:.1f}%")

stripe_scenes = [synth_scene(SynthConfig(seed=200 + i, phenotype=p, **WELL))
                 for i, p in enumerate(["WT", "WT", "lNR", "lNR",
                                        "hNR", "hNR"])]
fl_imgs, labels, masks = [], [], []
for sc in stripe_scenes:
    gt = sc.stripe_mask_union()
    blobs = detect_blobs(prepare_fl(sc.fl, cfg.blobs), cfg.blobs,
                         worm_mask=sc.worm_mask_union())
    labs = {j: ("stripe" if float(np.mean(gt[b.ys, b.xs])) >= 0.5
                else "other") for j, b in enumerate(blobs)}
    fl_imgs.append(sc.fl)
    labels.append(labs)
    masks.append(sc.worm_mask_union())
stripe_model = train_stripe_workflow(fl_imgs, labels, cfg, worm_masks=masks)
from wormscreen.fluor import save_stripe_model
save_stripe_model("/tmp/acc_stripe_model.json", stripe_model)
tick("stripe model trained")

import tempfile

for mutant, extra in (("lNR", {}),
                      ("hNR", {"well_area_sigma": HARDER_AREA_SIGMA})):
    with tempfile.TemporaryDirectory() as d:
        pc = PlateConfig(mutant=mutant, wells_per_class=N_PER_CLASS,
                         seed=42, base=SynthConfig(**WELL), **extra)
        records, scenes = synth_plate(pc, d)
        wells = [process_well(r, bundle, stripe_model, cfg).processed
                 for r in records]
    with open(f"/tmp/acc_wells_{mutant}.pkl", "wb") as fh:
        pickle.dump(wells, fh)
    tick(f"{mutant} plate processed ({len(wells)} wells)")
    rep = cross_validate(wells, ("WT", mutant), replicates=REPLICATES,
                         seed=cfg.seed)
    diag = intensity_histogram_diagnostic(wells, ("WT", mutant))
    tick(f"{mutant}: err w/o {rep.error_without_abstention_pct:.2f}%  "
         f"w/ {rep.error_with_abstention_pct:.2f}%  "
         f"abst {rep.abstention_pct:.1f}%  "
         f"| KS int {diag.intensity_ks:.2f} ratio {diag.ratio_ks:.2f}")
