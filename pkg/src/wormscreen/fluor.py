"""Fluorescent stripe detection: band-pass blob extraction plus a boosted
blob classifier.

Bright dye concentrations appear as elongated blobs after filtering the
fluorescence image with a Laplacian-of-Gaussian. The classifier separates
true stripes from other bright objects using blob geometry, intensity
profile, and overlap with the worm mask from the brightfield detector.
Centroid and bounding-box positions are deliberately excluded from the
classifier features so the model is translation-invariant.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.ndimage as ndi

from .boosting import (LabeledExample, StumpEnsemble, load_model, save_model,
                       score_many, train_adaboost)
from .imagecore import (GrayImage, connected_components, convolve,
                        log_kernel, nearest_rank_index)

BLOB_FEATURE_NAMES = [
    "area", "elongation", "worm_alignment", "mean", "max",
    "q10", "q50", "q90", "boundary_contrast", "contrast_ratio",
    "worm_overlap", "bbox_aspect",
]


@dataclass
class BlobConfig:
    # sigma tracks the stripe half-width scale; larger values wash out the
    # thinnest dim stripes relative to the image-wide response spread
    log_sigma: float = 1.5
    threshold_mode: str = "relative"   # "relative": mu + k*sigma of response
    threshold_value: float = 2.0       # k (relative) or absolute response
    min_area: int = 10
    ring_width: float = 2.0
    # per-well percentile normalization applied before detection and
    # featurization: cancels the large well-to-well staining brightness
    # variation so intensity features compare across wells. Detection with
    # the relative threshold is unaffected (the response scales linearly);
    # only feature values change.
    normalize: bool = False
    norm_lo: float = 0.5
    norm_hi: float = 0.999


def prepare_fl(fl: GrayImage, cfg: "BlobConfig") -> GrayImage:
    """Apply the per-well normalization the blob config asks for."""
    if not cfg.normalize:
        return fl
    from .imagecore import contrast_adjust
    return contrast_adjust(fl, cfg.norm_lo, cfg.norm_hi)


@dataclass
class Blob:
    """Connected bright region of the band-pass response, fully featurized."""

    label: int
    ys: np.ndarray
    xs: np.ndarray
    area: int
    centroid: tuple[float, float]
    bbox: tuple[int, int, int, int]
    elongation: float
    orientation: float
    mean: float
    max: float
    q10: float
    q50: float
    q90: float
    boundary_contrast: float
    contrast_ratio: float    # inside mean / ring mean; staining-level free
    worm_overlap: float
    worm_alignment: float

    def features(self) -> np.ndarray:
        return blob_features(self)


def blob_features(blob: Blob) -> np.ndarray:
    """Fixed-order classifier features; excludes absolute position."""
    x0, y0, x1, y1 = blob.bbox
    w = x1 - x0 + 1
    h = y1 - y0 + 1
    aspect = max(w, h) / max(1, min(w, h))
    return np.array([
        float(blob.area), blob.elongation, blob.worm_alignment,
        blob.mean, blob.max, blob.q10, blob.q50, blob.q90,
        blob.boundary_contrast, blob.contrast_ratio,
        blob.worm_overlap, float(aspect),
    ])


def _second_moments(ys, xs):
    my, mx = ys.mean(), xs.mean()
    dy, dx = ys - my, xs - mx
    # 1/12 is the variance of a unit pixel; keeps single-row blobs finite
    mu20 = float(np.mean(dx * dx)) + 1.0 / 12.0
    mu02 = float(np.mean(dy * dy)) + 1.0 / 12.0
    mu11 = float(np.mean(dx * dy))
    tr = mu20 + mu02
    det = mu20 * mu02 - mu11 * mu11
    disc = max(0.0, tr * tr / 4.0 - det)
    lam1 = tr / 2.0 + math.sqrt(disc)
    lam2 = max(tr / 2.0 - math.sqrt(disc), 1e-12)
    orientation = 0.5 * math.atan2(2.0 * mu11, mu20 - mu02) % math.pi
    return lam1, lam2, orientation


def detect_blobs(fl: GrayImage, cfg: BlobConfig | None = None,
                 worm_mask: np.ndarray | None = None,
                 worm_angles: np.ndarray | None = None) -> list[Blob]:
    """Threshold the negated band-pass response into connected bright blobs.

    worm_mask / worm_angles come from the brightfield detector and feed the
    overlap and alignment features; without them those features are zero.
    """
    cfg = cfg or BlobConfig()
    resp = -convolve(fl, log_kernel(cfg.log_sigma)).data
    if cfg.threshold_mode == "relative":
        t = float(resp.mean()) + cfg.threshold_value * float(resp.std())
    elif cfg.threshold_mode == "absolute":
        t = cfg.threshold_value
    else:
        raise ValueError(f"unknown threshold mode {cfg.threshold_mode!r}")
    mask = resp > t
    regions = [r for r in connected_components(mask)
               if r.area >= cfg.min_area]
    all_blob_mask = np.zeros(fl.shape, bool)
    for r in regions:
        all_blob_mask[r.ys, r.xs] = True

    r_width = int(math.ceil(cfg.ring_width))
    yy, xx = np.mgrid[-r_width:r_width + 1, -r_width:r_width + 1]
    disk = (xx * xx + yy * yy) <= cfg.ring_width ** 2

    blobs = []
    for r in regions:
        vals = np.sort(fl.data[r.ys, r.xs])
        n = vals.size
        blob_mask = np.zeros(fl.shape, bool)
        blob_mask[r.ys, r.xs] = True
        ring = ndi.binary_dilation(blob_mask, structure=disk) & ~all_blob_mask
        ring_mean = float(fl.data[ring].mean()) if ring.any() else 0.0
        inside_mean = float(vals.mean())
        lam1, lam2, orientation = _second_moments(r.ys, r.xs)
        if worm_mask is not None:
            overlap = float(np.mean(worm_mask[r.ys, r.xs]))
        else:
            overlap = 0.0
        if worm_angles is not None:
            cy = int(round(r.centroid[1]))
            cx = int(round(r.centroid[0]))
            worm_angle = float(worm_angles[cy, cx])
            alignment = math.cos(2.0 * (orientation - worm_angle))
        else:
            alignment = 0.0
        blobs.append(Blob(
            label=r.label, ys=r.ys, xs=r.xs, area=r.area,
            centroid=r.centroid, bbox=r.bbox,
            elongation=math.sqrt(lam1 / lam2),
            orientation=orientation,
            mean=inside_mean,
            max=float(vals[-1]),
            q10=float(vals[nearest_rank_index(0.1, n)]),
            q50=float(vals[nearest_rank_index(0.5, n)]),
            q90=float(vals[nearest_rank_index(0.9, n)]),
            boundary_contrast=inside_mean - ring_mean,
            contrast_ratio=inside_mean / max(ring_mean, 1e-3),
            worm_overlap=overlap,
            worm_alignment=alignment,
        ))
    return blobs


@dataclass
class StripeModel:
    ensemble: StumpEnsemble
    blob_config: BlobConfig = field(default_factory=BlobConfig)

    def scores(self, blobs: Sequence[Blob]) -> np.ndarray:
        if not blobs:
            return np.zeros(0)
        X = np.stack([blob_features(b) for b in blobs])
        return score_many(self.ensemble, X)


def train_stripe_model(labeled_blobs: Sequence[tuple[Blob, bool]],
                       rounds: int = 50, seed: int | None = None,
                       blob_config: BlobConfig | None = None) -> StripeModel:
    """Boost a stripe/non-stripe classifier from labeled blobs."""
    examples = [LabeledExample(blob_features(b), +1 if is_stripe else -1)
                for b, is_stripe in labeled_blobs]
    ensemble = train_adaboost(examples, rounds=rounds, seed=seed,
                              feature_names=list(BLOB_FEATURE_NAMES))
    return StripeModel(ensemble=ensemble,
                       blob_config=blob_config or BlobConfig())


def classify_stripes(model: StripeModel,
                     blobs: Sequence[Blob]) -> list[Blob]:
    """Blobs with a strictly positive ensemble score, order preserved."""
    blobs = list(blobs)
    if not blobs:
        return []
    s = model.scores(blobs)
    return [b for b, v in zip(blobs, s) if v > 0]


def save_stripe_model(path: str | Path, model: StripeModel) -> None:
    import dataclasses
    path = Path(path)
    save_model(path, model.ensemble)
    d = json.loads(path.read_text())
    d["blob_config"] = dataclasses.asdict(model.blob_config)
    path.write_text(json.dumps(d, indent=1))


def load_stripe_model(path: str | Path) -> StripeModel:
    d = json.loads(Path(path).read_text())
    ensemble = load_model(path)
    cfg = BlobConfig(**d["blob_config"]) if "blob_config" in d else BlobConfig()
    return StripeModel(ensemble=ensemble, blob_config=cfg)


# ---------------------------------------------------------------------------
# outlines and label files

_MOORE = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)]


def blob_outline(blob: Blob) -> list[tuple[int, int]]:
    """Ordered boundary pixels (x, y) by Moore-neighbor tracing."""
    x0, y0, x1, y1 = blob.bbox
    h = y1 - y0 + 3
    w = x1 - x0 + 3
    m = np.zeros((h, w), bool)
    m[blob.ys - y0 + 1, blob.xs - x0 + 1] = True
    sy, sx = np.argwhere(m)[0]
    outline = [(int(sx), int(sy))]
    prev_dir = 6  # entered moving left-to-right; backtrack points west
    cy, cx = sy, sx
    for _ in range(4 * (h * w)):
        found = False
        for i in range(8):
            d = (prev_dir + 1 + i) % 8
            ny, nx = cy + _MOORE[d][0], cx + _MOORE[d][1]
            if 0 <= ny < h and 0 <= nx < w and m[ny, nx]:
                cy, cx = ny, nx
                prev_dir = (d + 4) % 8
                found = True
                break
        if not found:
            break  # single-pixel blob
        if (cy, cx) == (sy, sx):
            break
        outline.append((int(cx), int(cy)))
    return [(x + x0 - 1, y + y0 - 1) for x, y in outline]


def stripe_labels_to_json(image_id: str, labels: dict[int, str],
                          version: int = 1) -> str:
    return json.dumps({
        "image_id": image_id,
        "version": version,
        "labels": [{"blob_id": k, "label": v}
                   for k, v in sorted(labels.items())],
    }, indent=1)


def stripe_labels_from_json(text: str) -> tuple[str, int, dict[int, str]]:
    d = json.loads(text)
    labels = {int(e["blob_id"]): e["label"] for e in d.get("labels", [])}
    return d.get("image_id", ""), int(d.get("version", 1)), labels
