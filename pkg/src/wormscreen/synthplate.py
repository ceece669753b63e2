"""Synthetic well renderer: paired BF/FL images with exact ground truth.

Worms are sinusoidal tubes, dark in brightfield with a bright edge rim.
Tracks are rendered by the same tube machinery but without rims and with
contrast overlapping the worm bodies, which makes them the designed confusor
for the segment detector. Fluorescence shows two bright sub-stripes along
each worm's midline whose brightness, width, and patchiness depend on the
phenotype; a faint body glow and out-of-worm decoy blobs complete the image.

Every knob lives in SynthConfig and generation is a pure function of the
seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.ndimage as ndi

from .imagecore import GrayImage
from .imageio import write_image, write_mask
from .phenotype import WellRecord, write_manifest
from .segmenter import WormAnnotation


@dataclass
class StripeParams:
    brightness: float        # added FL intensity inside a stripe patch
    brightness_jitter: float  # per-worm lognormal sigma
    area_fraction: float     # stripe band width as a fraction of half-width
    patch_scale: float       # arclength scale of patch structure, px
    duty: float              # fraction of the band that is lit


# Default per-phenotype stripe appearance. lNR: dim, narrow, homogeneous.
# hNR: bright, wide, patchy. Tuned so that the stripe-to-worm area ratio
# separates classes while mean in-worm intensity overlaps.
DEFAULT_STRIPES = {
    "WT": StripeParams(brightness=0.42, brightness_jitter=0.20,
                       area_fraction=0.52, patch_scale=26.0, duty=0.80),
    "lNR": StripeParams(brightness=0.17, brightness_jitter=0.20,
                        area_fraction=0.30, patch_scale=60.0, duty=0.97),
    "hNR": StripeParams(brightness=0.62, brightness_jitter=0.25,
                        area_fraction=0.92, patch_scale=12.0, duty=0.55),
}


@dataclass
class SynthConfig:
    width: int = 512
    height: int = 512
    worm_count: int = 7
    worm_length: tuple[float, float] = (100.0, 170.0)
    worm_half_width: tuple[float, float] = (11.0, 15.0)
    wiggle_amplitude: tuple[float, float] = (5.0, 13.0)
    wiggle_period: tuple[float, float] = (70.0, 130.0)
    bf_background: float = 0.72
    worm_contrast: float = 0.22
    rim_strength: float = 0.10
    rim_width: float = 1.6
    track_count: int = 7
    track_contrast: tuple[float, float] = (0.45, 0.85)  # x worm_contrast
    track_rim_fraction: float = 0.25   # tracks that get a faint rim
    vignette_strength: float = 0.30
    defocus_sigma: float = 2.5
    noise_sigma: float = 0.02
    phenotype: str = "WT"
    stripe: StripeParams | None = None
    lumen_fraction: float = 0.22       # lumen gap as fraction of half-width
    body_glow: float = 0.16
    glow_jitter: float = 0.12
    well_brightness_scale: float = 1.0  # per-well systematic factor
    fl_background: float = 0.04
    fl_noise_sigma: float = 0.015
    decoy_count: int = 6
    allow_overlap: bool = True
    placement_retries: int = 60
    seed: int = 0

    def stripe_params(self) -> StripeParams:
        if self.stripe is not None:
            return self.stripe
        if self.phenotype not in DEFAULT_STRIPES:
            raise ValueError(f"unknown phenotype {self.phenotype!r}")
        return DEFAULT_STRIPES[self.phenotype]


@dataclass
class SynthScene:
    bf: GrayImage
    fl: GrayImage
    worm_masks: list[np.ndarray]
    stripe_masks: list[np.ndarray]
    annotations: list[WormAnnotation]
    config: SynthConfig

    def worm_mask_union(self) -> np.ndarray:
        out = np.zeros((self.config.height, self.config.width), bool)
        for m in self.worm_masks:
            out |= m
        return out

    def stripe_mask_union(self) -> np.ndarray:
        out = np.zeros((self.config.height, self.config.width), bool)
        for m in self.stripe_masks:
            out |= m
        return out


@dataclass
class _Tube:
    points: np.ndarray       # (n, 2) midline at ~1 px arclength steps
    normals: np.ndarray      # (n, 2) unit normals
    half_widths: np.ndarray  # (n,)


def _make_tube(rng, length, half_width, amplitude, period, shape, margin,
               retries) -> _Tube | None:
    h, w = shape
    for _ in range(retries):
        phi = rng.uniform(0, 2 * math.pi)
        phase = rng.uniform(0, 2 * math.pi)
        amp = rng.uniform(*amplitude)
        per = rng.uniform(*period)
        x0 = rng.uniform(margin, w - margin)
        y0 = rng.uniform(margin, h - margin)
        s = np.arange(0.0, length, 1.0)
        c, sn = math.cos(phi), math.sin(phi)
        lateral = amp * np.sin(2 * math.pi * s / per + phase)
        xs = x0 + s * c - lateral * sn
        ys = y0 + s * sn + lateral * c
        if (xs.min() < margin or xs.max() > w - margin
                or ys.min() < margin or ys.max() > h - margin):
            continue
        pts = np.column_stack([xs, ys])
        d = np.gradient(pts, axis=0)
        norm = np.hypot(d[:, 0], d[:, 1])
        tangents = d / norm[:, None]
        normals = np.column_stack([-tangents[:, 1], tangents[:, 0]])
        # rounded taper toward both ends
        u = (s - s[-1] / 2.0) / (s[-1] / 2.0)
        taper = np.sqrt(np.clip(1.0 - u * u, 0.0, 1.0)) ** 0.35
        return _Tube(points=pts, normals=normals,
                     half_widths=half_width * np.clip(taper, 0.05, 1.0))
    return None


def _tube_fields(tube: _Tube, shape):
    """Distance, signed lateral offset, and nearest-vertex index per pixel.

    Returns (ys, xs, dist, lateral, idx) for the pixels of the tube's
    bounding box, computed against the nearest midline vertex.
    """
    h, w = shape
    pts = tube.points
    reach = float(tube.half_widths.max()) + 3.0
    x0 = max(0, int(math.floor(pts[:, 0].min() - reach)))
    x1 = min(w - 1, int(math.ceil(pts[:, 0].max() + reach)))
    y0 = max(0, int(math.floor(pts[:, 1].min() - reach)))
    y1 = min(h - 1, int(math.ceil(pts[:, 1].max() + reach)))
    gy, gx = np.mgrid[y0:y1 + 1, x0:x1 + 1]
    px = gx.ravel().astype(np.float64)
    py = gy.ravel().astype(np.float64)
    # nearest vertex by squared distance, in row blocks to bound memory
    n_px = px.size
    idx = np.empty(n_px, np.int64)
    block = 20000
    for b0 in range(0, n_px, block):
        b1 = min(n_px, b0 + block)
        d2 = ((px[b0:b1, None] - pts[None, :, 0]) ** 2
              + (py[b0:b1, None] - pts[None, :, 1]) ** 2)
        idx[b0:b1] = np.argmin(d2, axis=1)
    near = pts[idx]
    dx = px - near[:, 0]
    dy = py - near[:, 1]
    dist = np.hypot(dx, dy)
    nrm = tube.normals[idx]
    lateral = dx * nrm[:, 0] + dy * nrm[:, 1]
    return gy.ravel(), gx.ravel(), dist, lateral, idx


def _soft_profile(dist, half_widths, soft=1.5):
    """1 inside the tube, smooth falloff to 0 across `soft` px at the edge."""
    return np.clip((half_widths - dist) / soft + 1.0, 0.0, 1.0)


def synth_scene(cfg: SynthConfig) -> SynthScene:
    """Render one well. Pure function of the config (including seed)."""
    rng = np.random.default_rng(cfg.seed)
    h, w = cfg.height, cfg.width
    shape = (h, w)
    bf = np.full(shape, cfg.bf_background)
    fl = np.full(shape, cfg.fl_background)
    stripe_p = cfg.stripe_params()

    # -- tracks first (worms draw over them)
    for _ in range(cfg.track_count):
        tube = _make_tube(
            rng,
            length=rng.uniform(cfg.worm_length[0], cfg.worm_length[1] * 1.6),
            half_width=rng.uniform(*cfg.worm_half_width) * 0.9,
            amplitude=cfg.wiggle_amplitude,
            period=(cfg.wiggle_period[0] * 1.2, cfg.wiggle_period[1] * 2.0),
            shape=shape, margin=3.0, retries=cfg.placement_retries)
        if tube is None:
            continue
        ys, xs, dist, _, idx = _tube_fields(tube, shape)
        profile = _soft_profile(dist, tube.half_widths[idx])
        contrast = cfg.worm_contrast * rng.uniform(*cfg.track_contrast)
        bf[ys, xs] -= contrast * profile
        if rng.random() < cfg.track_rim_fraction:
            hw = tube.half_widths[idx]
            rim = np.clip(1.0 - np.abs(dist - hw) / cfg.rim_width, 0, 1)
            bf[ys, xs] += 0.4 * cfg.rim_strength * rim

    # -- worms
    worm_masks: list[np.ndarray] = []
    stripe_masks: list[np.ndarray] = []
    annotations: list[WormAnnotation] = []
    placed = 0
    for wi in range(cfg.worm_count):
        tube = _make_tube(
            rng,
            length=rng.uniform(*cfg.worm_length),
            half_width=rng.uniform(*cfg.worm_half_width),
            amplitude=cfg.wiggle_amplitude,
            period=cfg.wiggle_period,
            shape=shape, margin=4.0, retries=cfg.placement_retries)
        if tube is None:
            raise RuntimeError(
                f"could not place worm {wi + 1}/{cfg.worm_count}; "
                f"image too crowded")
        placed += 1
        ys, xs, dist, lateral, idx = _tube_fields(tube, shape)
        hw = tube.half_widths[idx]
        profile = _soft_profile(dist, hw)
        inside = dist <= hw

        # brightfield: dark body with a bright rim
        bf[ys, xs] -= cfg.worm_contrast * rng.uniform(0.85, 1.1) * profile
        rim = np.clip(1.0 - np.abs(dist - hw) / cfg.rim_width, 0, 1)
        bf[ys, xs] += cfg.rim_strength * rim

        mask = np.zeros(shape, bool)
        mask[ys[inside], xs[inside]] = True
        worm_masks.append(mask)

        # fluorescence: body glow plus two phenotype-dependent stripes
        glow = (cfg.body_glow * cfg.well_brightness_scale
                * math.exp(cfg.glow_jitter * rng.standard_normal()))
        fl[ys, xs] += glow * profile

        half_widths_pts = tube.half_widths
        lumen = np.maximum(0.8, cfg.lumen_fraction * half_widths_pts)
        stripe_hw = np.maximum(
            0.0, stripe_p.area_fraction * (half_widths_pts - lumen) / 2.0)
        offset = lumen + stripe_hw
        # lit patches along arclength
        n_pts = len(tube.points)
        noise = rng.standard_normal(n_pts)
        smooth = ndi.gaussian_filter1d(noise, max(1.0, stripe_p.patch_scale
                                                  / 3.0))
        cut = np.quantile(smooth, 1.0 - stripe_p.duty)
        lit = smooth >= cut
        brightness = (stripe_p.brightness * cfg.well_brightness_scale
                      * math.exp(stripe_p.brightness_jitter
                                 * rng.standard_normal()))

        off_px = offset[idx]
        shw_px = stripe_hw[idx]
        band = (np.abs(np.abs(lateral) - off_px) <= shw_px) & inside & \
            lit[idx] & (shw_px > 0.2)
        soft_band = np.clip(
            (shw_px - np.abs(np.abs(lateral) - off_px)) / 1.0 + 1.0, 0, 1)
        fl[ys, xs] += brightness * np.where(band, 1.0, 0.0) * soft_band
        smask = np.zeros(shape, bool)
        smask[ys[band], xs[band]] = True
        stripe_masks.append(smask)

        # annotation polylines from the generative tube (every ~3 px),
        # trimmed to where the tapered tube is at least a pixel wide so the
        # midline stays inside the rasterized mask
        body = np.nonzero(tube.half_widths >= 1.0)[0]
        lo, hi = (int(body[0]), int(body[-1])) if body.size >= 2 \
            else (0, n_pts - 1)
        step = 3
        sel = np.arange(lo, hi + 1, step)
        if sel[-1] != hi:
            sel = np.append(sel, hi)
        mid = tube.points[sel]
        nrm = tube.normals[sel]
        hw_sel = np.maximum(tube.half_widths[sel], 0.6)
        side_a = mid + nrm * hw_sel[:, None]
        side_b = mid - nrm * hw_sel[:, None]
        annotations.append(WormAnnotation(
            worm_id=f"worm{wi:02d}", midline=mid, side_a=side_a,
            side_b=side_b))

    # -- fluorescent decoys (bright objects not tied to worms); they are
    # fluorescent material, so they scale with the well's staining level
    for _ in range(cfg.decoy_count):
        cx = rng.uniform(5, w - 5)
        cy = rng.uniform(5, h - 5)
        if rng.random() < 0.5:
            sigma = rng.uniform(1.5, 3.0)
            amp = rng.uniform(0.25, 0.6) * cfg.well_brightness_scale
            rr = int(math.ceil(3 * sigma))
            gy, gx = np.mgrid[-rr:rr + 1, -rr:rr + 1]
            spot = amp * np.exp(-(gx * gx + gy * gy) / (2 * sigma * sigma))
            ys_c = np.clip(gy + int(round(cy)), 0, h - 1)
            xs_c = np.clip(gx + int(round(cx)), 0, w - 1)
            np.add.at(fl, (ys_c.ravel(), xs_c.ravel()), spot.ravel())
        else:
            ang = rng.uniform(0, math.pi)
            ln = rng.uniform(8, 20)
            amp = rng.uniform(0.25, 0.55) * cfg.well_brightness_scale
            s = np.arange(0, ln, 0.5)
            xs_c = cx + s * math.cos(ang)
            ys_c = cy + s * math.sin(ang)
            for ww in (-1, 0, 1):
                xi = np.clip(np.round(xs_c + ww * math.sin(ang)), 0,
                             w - 1).astype(int)
                yi = np.clip(np.round(ys_c - ww * math.cos(ang)), 0,
                             h - 1).astype(int)
                fl[yi, xi] += amp * (0.6 if ww else 1.0)

    # -- meniscus: vignette plus border defocus on BF
    gy, gx = np.mgrid[0:h, 0:w]
    rx = (gx - (w - 1) / 2.0) / (w / 2.0)
    ry = (gy - (h - 1) / 2.0) / (h / 2.0)
    r = np.hypot(rx, ry)
    falloff = np.clip((r - 0.55) / 0.45, 0.0, 1.0) ** 2
    bf = bf * (1.0 - cfg.vignette_strength * falloff)
    blurred = ndi.gaussian_filter(bf, cfg.defocus_sigma, mode="nearest")
    bf = bf * (1.0 - falloff) + blurred * falloff

    bf = bf + rng.normal(0.0, cfg.noise_sigma, shape)
    fl = fl + rng.normal(0.0, cfg.fl_noise_sigma, shape)
    bf = np.clip(bf, 0.0, 1.0)
    fl = np.clip(fl, 0.0, 1.0)

    return SynthScene(bf=GrayImage(bf), fl=GrayImage(fl),
                      worm_masks=worm_masks, stripe_masks=stripe_masks,
                      annotations=annotations, config=cfg)


# ---------------------------------------------------------------------------
# plates

@dataclass
class PlateConfig:
    """Plate-level design: class pair, well counts, per-well systematics.

    Per-well lognormal jitters model staining variability between wells:
    brightness jitter scales the whole fluorescence signal (glow and
    stripes), area jitter scales the stripe band width. Brightness jitter
    makes raw mean intensity a poor class separator while leaving the
    stripe-area ratio intact; area jitter controls how hard the
    classification task is.
    """

    plate_id: str = "plate1"
    mutant: str = "hNR"               # class paired against WT
    wells_per_class: int = 48
    controls_per_class: int = 0       # 0: every well is a labeled control
    base: SynthConfig = field(default_factory=SynthConfig)
    well_brightness_sigma: float = 0.35
    well_area_sigma: float = 0.05
    seed: int = 0


def _well_ids(n: int) -> list[str]:
    rows = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
    return [f"{rows[i // 12]}{i % 12 + 1:02d}" for i in range(n)]


def synth_plate(cfg: PlateConfig, out_dir: str | Path
                ) -> tuple[list[WellRecord], list[SynthScene]]:
    """Render a control plate: half the wells WT, half the mutant class.

    Writes BF/FL images, ground-truth masks, annotation files, and the
    manifest CSV into out_dir. Returns the records and in-memory scenes.
    """
    if cfg.wells_per_class < 1:
        raise ValueError("need at least 1 well per class")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "truth").mkdir(parents=True, exist_ok=True)
    (out / "annotations").mkdir(parents=True, exist_ok=True)

    n = cfg.wells_per_class * 2
    ids = _well_ids(n)
    labels = ["WT", cfg.mutant] * cfg.wells_per_class
    streams = np.random.SeedSequence(cfg.seed).spawn(n)

    records: list[WellRecord] = []
    scenes: list[SynthScene] = []
    from .segmenter import save_annotations

    for i, (well_id, label) in enumerate(zip(ids, labels)):
        rng = np.random.default_rng(streams[i])
        scale = (math.exp(cfg.well_brightness_sigma * rng.standard_normal())
                 if cfg.well_brightness_sigma > 0 else 1.0)
        stripe = cfg.base.stripe or DEFAULT_STRIPES[label]
        if cfg.well_area_sigma > 0:
            af = stripe.area_fraction * math.exp(
                cfg.well_area_sigma * rng.standard_normal())
            stripe = replace(stripe, area_fraction=min(max(af, 0.05), 1.0))
        well_cfg = replace(cfg.base, phenotype=label, stripe=stripe,
                           well_brightness_scale=scale,
                           seed=int(rng.integers(0, 2 ** 62)))
        scene = synth_scene(well_cfg)
        bf_path = out / "images" / f"{well_id}_bf.pgm"
        fl_path = out / "images" / f"{well_id}_fl.pgm"
        write_image(bf_path, scene.bf, bits=16)
        write_image(fl_path, scene.fl, bits=16)
        write_mask(out / "truth" / f"{well_id}_worms.pgm",
                   scene.worm_mask_union())
        write_mask(out / "truth" / f"{well_id}_stripes.pgm",
                   scene.stripe_mask_union())
        save_annotations(out / "annotations" / f"{well_id}_bf.json",
                         f"{well_id}_bf", scene.annotations)
        per_class_idx = i // 2
        role = ("control"
                if cfg.controls_per_class == 0
                or per_class_idx < cfg.controls_per_class else "test")
        records.append(WellRecord(
            plate_id=cfg.plate_id, well_id=well_id,
            bf_path=str(bf_path), fl_path=str(fl_path),
            role=role, known_label=label))
        scenes.append(scene)

    write_manifest(out / "manifest.csv", records)
    return records, scenes
