"""Per-plate phenotype classification over connected worm regions.

Regions inherit their well's phenotype label for training (touching worms
share a region; the region is still a usable unit). A well is decided by the
sign of the summed region scores; a bag of independently subsampled
ensembles adds a unanimity rule that abstains on disagreement.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .boosting import (ABSTAIN, BaggedEnsemble, LabeledExample, score_many,
                       train_bagged)
from .fluor import Blob
from .imagecore import GrayImage, Region, nearest_rank_index

PHENOTYPES = ("WT", "lNR", "hNR")

REGION_FEATURE_NAMES = [
    "region_area", "region_eccentricity", "stripe_count",
    "stripe_total_area", "stripe_area_ratio", "stripe_q50", "stripe_q90",
    "stripe_patchiness", "stripe_boundary_contrast",
]


@dataclass
class WellRecord:
    plate_id: str
    well_id: str
    bf_path: str
    fl_path: str
    role: str = "test"                 # "control" or "test"
    known_label: str | None = None

    def __post_init__(self):
        if self.role not in ("control", "test"):
            raise ValueError(f"bad role {self.role!r}")
        if self.role == "control" and not self.known_label:
            raise ValueError(f"control well {self.well_id} needs known_label")
        if self.known_label is not None and self.known_label not in PHENOTYPES:
            raise ValueError(f"unknown phenotype {self.known_label!r}")


def read_manifest(path: str | Path) -> list[WellRecord]:
    records = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            records.append(WellRecord(
                plate_id=row["plate_id"],
                well_id=row["well_id"],
                bf_path=row["bf_path"],
                fl_path=row["fl_path"],
                role=row.get("role", "test") or "test",
                known_label=row.get("known_label") or None,
            ))
    return records


def write_manifest(path: str | Path, records: Sequence[WellRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["plate_id", "well_id", "bf_path", "fl_path",
                         "role", "known_label"])
        for r in records:
            writer.writerow([r.plate_id, r.well_id, r.bf_path, r.fl_path,
                             r.role, r.known_label or ""])


@dataclass
class RegionPhenoFeatures:
    region_area: float
    region_eccentricity: float
    stripe_count: float
    stripe_total_area: float
    stripe_area_ratio: float
    stripe_q50: float
    stripe_q90: float
    stripe_patchiness: float
    stripe_boundary_contrast: float

    def vector(self) -> np.ndarray:
        return np.array([
            self.region_area, self.region_eccentricity, self.stripe_count,
            self.stripe_total_area, self.stripe_area_ratio, self.stripe_q50,
            self.stripe_q90, self.stripe_patchiness,
            self.stripe_boundary_contrast,
        ])


def region_features(region: Region, stripes: Sequence[Blob],
                    fl: GrayImage) -> RegionPhenoFeatures:
    """Combine region geometry with the stripes overlapping it.

    Stripe intensity quantiles are expressed relative to the region's own
    median fluorescence (the body glow), which cancels per-well staining
    brightness; boundary contrast uses the blobs' inside/ring ratio for the
    same reason. Regions without stripes report zeros.
    """
    if region.area <= 0:
        raise ValueError("zero-area region")
    region_mask = np.zeros(fl.shape, bool)
    region_mask[region.ys, region.xs] = True

    inter_ys: list[np.ndarray] = []
    inter_xs: list[np.ndarray] = []
    contrasts = []
    count = 0
    for blob in stripes:
        inside = region_mask[blob.ys, blob.xs]
        k = int(inside.sum())
        if k == 0:
            continue
        count += 1
        inter_ys.append(blob.ys[inside])
        inter_xs.append(blob.xs[inside])
        contrasts.append(blob.contrast_ratio)

    region_vals = np.sort(fl.data[region.ys, region.xs])
    body_level = max(
        float(region_vals[nearest_rank_index(0.5, region_vals.size)]), 1e-3)
    total = int(sum(len(a) for a in inter_ys))
    if total:
        vals = np.sort(fl.data[np.concatenate(inter_ys),
                               np.concatenate(inter_xs)])
        q50 = float(vals[nearest_rank_index(0.5, total)]) / body_level
        q90 = float(vals[nearest_rank_index(0.9, total)]) / body_level
    else:
        q50 = q90 = 0.0

    dy = region.ys - region.ys.mean()
    dx = region.xs - region.xs.mean()
    mu20 = float(np.mean(dx * dx)) + 1.0 / 12.0
    mu02 = float(np.mean(dy * dy)) + 1.0 / 12.0
    mu11 = float(np.mean(dx * dy))
    tr, det = mu20 + mu02, mu20 * mu02 - mu11 * mu11
    disc = math.sqrt(max(0.0, tr * tr / 4.0 - det))
    lam1 = tr / 2.0 + disc
    lam2 = max(tr / 2.0 - disc, 1e-12)
    ecc = math.sqrt(max(0.0, 1.0 - lam2 / lam1))

    return RegionPhenoFeatures(
        region_area=float(region.area),
        region_eccentricity=ecc,
        stripe_count=float(count),
        stripe_total_area=float(total),
        stripe_area_ratio=min(1.0, total / region.area),
        stripe_q50=q50,
        stripe_q90=q90,
        stripe_patchiness=count / (region.area / 1000.0),
        stripe_boundary_contrast=float(np.mean(contrasts)) if contrasts
        else 0.0,
    )


@dataclass
class ProcessedWell:
    """A well after segmentation and stripe detection."""

    record: WellRecord
    features: np.ndarray          # (n_regions, n_features)
    mean_fl_in_regions: float = 0.0
    stripe_area_ratio: float = 0.0

    @property
    def n_regions(self) -> int:
        return int(self.features.shape[0]) if self.features.size else 0


@dataclass
class WellScore:
    well_id: str
    region_scores: np.ndarray     # mean member score per region
    member_totals: np.ndarray     # (K,)
    total: float                  # mean of member totals
    decision: int                 # +1 mutant-class, -1 WT, 0 abstain
    reason: str = ""


def train_plate_classifier(wells: Sequence[ProcessedWell],
                           task: tuple[str, str], K: int = 7,
                           subsample_fraction: float = 0.7,
                           rounds: int = 50,
                           seed: int | None = None) -> BaggedEnsemble:
    """Train the per-plate bagged classifier from control wells.

    task = (negative_class, positive_class); regions inherit their well's
    label: +1 for the positive (non-WT) class, -1 otherwise.
    """
    neg_class, pos_class = task
    examples = []
    seen = {neg_class: 0, pos_class: 0}
    for well in wells:
        label = well.record.known_label
        if label not in task:
            continue
        seen[label] += 1
        y = +1 if label == pos_class else -1
        for row in well.features:
            examples.append(LabeledExample(row, y))
    for cls, n in seen.items():
        if n == 0:
            raise ValueError(f"no control wells with phenotype {cls!r}")
    return train_bagged(examples, K=K, subsample_fraction=subsample_fraction,
                        rounds=rounds, seed=seed,
                        feature_names=list(REGION_FEATURE_NAMES))


def classify_well(bag: BaggedEnsemble, well: ProcessedWell) -> WellScore:
    """Sum region scores per member and vote by sign; unanimity or abstain.

    A member total of exactly zero carries no sign and forces abstention.
    Wells with no detected regions abstain outright.
    """
    K = len(bag.members)
    if well.n_regions == 0:
        return WellScore(well_id=well.record.well_id,
                         region_scores=np.zeros(0),
                         member_totals=np.zeros(K), total=0.0,
                         decision=ABSTAIN, reason="no worms detected")
    member_totals = np.array([
        float(np.sum(score_many(m, well.features))) for m in bag.members])
    votes = [0 if t == 0.0 else (+1 if t > 0 else -1) for t in member_totals]
    if votes[0] != 0 and all(v == votes[0] for v in votes):
        decision, reason = votes[0], ""
    else:
        decision, reason = ABSTAIN, "member disagreement"
    per_region = np.mean(
        np.stack([score_many(m, well.features) for m in bag.members]), axis=0)
    return WellScore(well_id=well.record.well_id, region_scores=per_region,
                     member_totals=member_totals,
                     total=float(member_totals.mean()),
                     decision=decision, reason=reason)


@dataclass
class PlateReport:
    task: tuple[str, str]
    error_without_abstention_pct: float
    error_with_abstention_pct: float
    abstention_pct: float
    replicates: int
    folds: int
    seed: int | None
    per_replicate: list[dict] = field(default_factory=list)
    label_mapping: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = dict(self.__dict__)
        d["task"] = list(self.task)
        return json.dumps(d, indent=1)

    def to_text(self) -> str:
        a, b = self.task
        return (
            f"Task {a} vs {b} ({self.folds}-fold CV, "
            f"{self.replicates} replicates)\n"
            f"  error without abstention: "
            f"{self.error_without_abstention_pct:5.1f} %\n"
            f"  error with abstention:    "
            f"{self.error_with_abstention_pct:5.1f} %\n"
            f"  abstained wells:          "
            f"{self.abstention_pct:5.1f} %\n")


def cross_validate(wells: Sequence[ProcessedWell], task: tuple[str, str],
                   replicates: int = 20, seed: int | None = None,
                   K: int = 7, rounds: int = 50,
                   subsample_fraction: float = 0.7) -> PlateReport:
    """Stratified random-halving cross validation, both directions per split.

    The no-abstention decision is the sign of the mean member total; the
    abstention columns apply the unanimity rule on top.
    """
    neg_class, pos_class = task
    by_class = {neg_class: [], pos_class: []}
    for w in wells:
        if w.record.known_label in by_class:
            by_class[w.record.known_label].append(w)
    for cls, group in by_class.items():
        if len(group) < 2:
            raise ValueError(f"need at least 2 wells of class {cls!r}, "
                             f"got {len(group)}")

    streams = np.random.SeedSequence(seed).spawn(replicates)
    per_replicate = []
    for rep in range(replicates):
        rng = np.random.default_rng(streams[rep])
        halves = {cls: None for cls in task}
        for cls in task:
            group = list(by_class[cls])
            order = rng.permutation(len(group))
            cut = len(group) // 2
            halves[cls] = ([group[i] for i in order[:cut]],
                           [group[i] for i in order[cut:]])
        wrong_plain = wrong_decided = decided = abstained = total = 0
        for direction in (0, 1):
            train = halves[neg_class][direction] + halves[pos_class][direction]
            test = (halves[neg_class][1 - direction]
                    + halves[pos_class][1 - direction])
            bag = train_plate_classifier(
                train, task, K=K, rounds=rounds,
                subsample_fraction=subsample_fraction,
                seed=int(rng.integers(0, 2 ** 31)))
            for well in test:
                truth = +1 if well.record.known_label == pos_class else -1
                ws = classify_well(bag, well)
                plain = 0 if ws.total == 0.0 else (+1 if ws.total > 0 else -1)
                total += 1
                if plain != truth:
                    wrong_plain += 1
                if ws.decision == ABSTAIN:
                    abstained += 1
                else:
                    decided += 1
                    if ws.decision != truth:
                        wrong_decided += 1
        per_replicate.append({
            "error_without_pct": 100.0 * wrong_plain / total,
            "error_with_pct": (100.0 * wrong_decided / decided
                               if decided else 0.0),
            "abstention_pct": 100.0 * abstained / total,
        })

    return PlateReport(
        task=task,
        error_without_abstention_pct=float(np.mean(
            [r["error_without_pct"] for r in per_replicate])),
        error_with_abstention_pct=float(np.mean(
            [r["error_with_pct"] for r in per_replicate])),
        abstention_pct=float(np.mean(
            [r["abstention_pct"] for r in per_replicate])),
        replicates=replicates,
        folds=2,
        seed=seed,
        per_replicate=per_replicate,
        label_mapping={"+1": pos_class, "-1": neg_class},
    )


@dataclass
class DiagnosticReport:
    """Raw intensity vs. stripe-ratio separation between two classes."""

    classes: tuple[str, str]
    mean_intensity: dict[str, list[float]]
    stripe_ratio: dict[str, list[float]]
    intensity_ks: float
    ratio_ks: float
    intensity_hist: dict[str, list[int]]
    hist_edges: list[float]

    def to_json(self) -> str:
        d = dict(self.__dict__)
        d["classes"] = list(self.classes)
        return json.dumps(d, indent=1)


def intensity_histogram_diagnostic(wells: Sequence[ProcessedWell],
                                   classes: tuple[str, str],
                                   bins: int = 16) -> DiagnosticReport:
    """Per-class distributions of mean in-worm fluorescence and stripe ratio.

    Reproduces the negative result that raw intensity separates phenotypes
    poorly while the stripe-to-region area ratio separates them well.
    """
    intensity = {c: [] for c in classes}
    ratio = {c: [] for c in classes}
    for w in wells:
        c = w.record.known_label
        if c in intensity:
            intensity[c].append(w.mean_fl_in_regions)
            ratio[c].append(w.stripe_area_ratio)
    for c in classes:
        if not intensity[c]:
            raise ValueError(f"no wells with phenotype {c!r}")
    a, b = classes
    iks = float(stats.ks_2samp(intensity[a], intensity[b]).statistic)
    rks = float(stats.ks_2samp(ratio[a], ratio[b]).statistic)
    pooled = np.concatenate([intensity[a], intensity[b]])
    edges = np.histogram_bin_edges(pooled, bins=bins)
    hist = {c: np.histogram(intensity[c], bins=edges)[0].tolist()
            for c in classes}
    return DiagnosticReport(
        classes=classes,
        mean_intensity={c: list(map(float, v)) for c, v in intensity.items()},
        stripe_ratio={c: list(map(float, v)) for c, v in ratio.items()},
        intensity_ks=iks,
        ratio_ks=rks,
        intensity_hist=hist,
        hist_edges=[float(e) for e in edges],
    )
