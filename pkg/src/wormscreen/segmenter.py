"""Worm detector: segment hypotheses, features, training sets, segmentation.

A worm is represented by short line segments that cross it orthogonally to
its midline. Features for one segment are oriented-rectangle quantiles of the
filter-bank responses: one rectangle covering the segment, two beyond its
endpoints, and two flanking it along the segment normal. The boosted scoring
function over these features is evaluated densely by densescan.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.ndimage as ndi

from .boosting import EMPTY_FEATURE_SENTINEL, StumpEnsemble
from .imagecore import (FilterStack, connected_components, Region,
                        nearest_rank_index)

log = logging.getLogger(__name__)


@dataclass
class SegmenterConfig:
    """Geometry and scan parameters of the worm-segment detector."""

    min_length: float = 10.0
    max_length: float = 30.0
    rect_half_width: float = 4.0
    end_offset_margin: float = 4.0   # end rects sit at +-(L/2 + margin)
    side_offset: float = 8.0         # side rects sit at +-offset along normal
    quantiles: tuple[float, ...] = (0.1, 0.5, 0.9)
    angle_step_deg: float = 30.0
    scan_lengths: tuple[float, ...] = (10.0, 16.0, 22.0, 28.0)
    positive_spacing: float = 3.0
    negative_dilation: float = 3.0
    min_region_area: int = 30
    nms_radius: float = 5.0

    @property
    def angles(self) -> np.ndarray:
        step = math.radians(self.angle_step_deg)
        count = int(round(math.pi / step))
        if abs(count * step - math.pi) > 1e-9:
            raise ValueError("angle step must divide 180 degrees")
        return np.arange(count) * step

    @property
    def rect_names(self) -> tuple[str, ...]:
        return ("on", "end_pos", "end_neg", "side_pos", "side_neg")


RECT_COUNT = 5


@dataclass
class WormSegment:
    """Oriented short line segment hypothesized to cross a worm."""

    cx: float
    cy: float
    angle: float
    length: float

    def __post_init__(self):
        object.__setattr__(self, "angle", self.angle % math.pi)
        if self.length <= 0:
            raise ValueError("segment length must be positive")


@dataclass
class WormAnnotation:
    """Hand-drawn midline and two side polylines for one worm."""

    worm_id: str
    midline: np.ndarray   # (n, 2) of (x, y)
    side_a: np.ndarray
    side_b: np.ndarray
    image_id: str = ""

    def __post_init__(self):
        for name in ("midline", "side_a", "side_b"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 2:
                raise ValueError(f"{name} must be an (n>=2, 2) polyline")
            object.__setattr__(self, name, arr)

    def polygon(self) -> np.ndarray:
        """Closed outline: side_a forward, side_b reversed."""
        return np.vstack([self.side_a, self.side_b[::-1]])


def validate_annotation(ann: WormAnnotation) -> None:
    """Check that the midline runs between the two sides.

    For every midline vertex, the nearest points on side_a and side_b must
    fall on opposite sides of the local midline tangent.
    """
    mid = ann.midline
    for i, p in enumerate(mid):
        j0, j1 = max(0, i - 1), min(len(mid) - 1, i + 1)
        tangent = mid[j1] - mid[j0]
        norm = np.hypot(*tangent)
        if norm == 0:
            continue
        tangent = tangent / norm
        na = _nearest_point_on_polyline(p, ann.side_a) - p
        nb = _nearest_point_on_polyline(p, ann.side_b) - p
        cross_a = tangent[0] * na[1] - tangent[1] * na[0]
        cross_b = tangent[0] * nb[1] - tangent[1] * nb[0]
        if cross_a * cross_b > 0:
            raise ValueError(
                f"worm {ann.worm_id!r}: midline vertex {i} is not between "
                f"the side polylines")


def _nearest_point_on_polyline(p: np.ndarray, poly: np.ndarray) -> np.ndarray:
    a = poly[:-1]
    b = poly[1:]
    ab = b - a
    denom = np.einsum("ij,ij->i", ab, ab)
    denom[denom == 0] = 1.0
    t = np.clip(np.einsum("ij,ij->i", p - a, ab) / denom, 0.0, 1.0)
    proj = a + t[:, None] * ab
    d2 = np.einsum("ij,ij->i", proj - p, proj - p)
    return proj[int(np.argmin(d2))]


# ---------------------------------------------------------------------------
# feature layout

def layout_rect_offsets(angle: float, length: float, cfg: SegmenterConfig
                        ) -> list[tuple[str, float, float]]:
    """Relative centers (ox, oy) of the five feature rectangles."""
    c, s = math.cos(angle), math.sin(angle)
    end = length / 2.0 + cfg.end_offset_margin
    side = cfg.side_offset
    return [
        ("on", 0.0, 0.0),
        ("end_pos", end * c, end * s),
        ("end_neg", -end * c, -end * s),
        ("side_pos", -side * s, side * c),
        ("side_neg", side * s, -side * c),
    ]


def feature_names(stack_names: Sequence[str], cfg: SegmenterConfig
                  ) -> list[str]:
    """Fixed feature ordering: channel-major, then rectangle, then quantile."""
    return [f"{ch}|{rect}|q{q:g}"
            for ch in stack_names
            for rect in cfg.rect_names
            for q in cfg.quantiles]


def segment_frame_pixels(seg_cx: float, seg_cy: float, ox: float, oy: float,
                         angle: float, half_length: float, half_width: float
                         ) -> tuple[np.ndarray, np.ndarray]:
    """Pixels of a layout rectangle, tested in the segment's own frame.

    The membership predicate runs on (pixel - segment center) - (ox, oy),
    never on absolute rectangle centers. The dense scan precomputes stencils
    with seg_cx = seg_cy = 0; because segment centers there are integers, the
    same float expressions are evaluated in both paths and pixel membership
    agrees bit-for-bit even when a rectangle border passes exactly through
    pixel centers (which happens at axis-aligned angles).
    """
    c, s = math.cos(angle), math.sin(angle)
    reach = math.hypot(half_length, half_width)
    x0 = math.floor(seg_cx + (ox - reach))
    x1 = math.ceil(seg_cx + (ox + reach))
    y0 = math.floor(seg_cy + (oy - reach))
    y1 = math.ceil(seg_cy + (oy + reach))
    xs = np.arange(x0, x1 + 1, dtype=np.int64)
    ys = np.arange(y0, y1 + 1, dtype=np.int64)
    gx, gy = np.meshgrid(xs, ys)
    du = (gx - seg_cx) - ox
    dv = (gy - seg_cy) - oy
    u = du * c + dv * s
    v = -du * s + dv * c
    inside = (np.abs(u) <= half_length) & (np.abs(v) <= half_width)
    return gx[inside], gy[inside]


def segment_features(stack: FilterStack, seg: WormSegment,
                     cfg: SegmenterConfig | None = None) -> np.ndarray:
    """Feature vector for one segment: quantiles of each filter response in
    each layout rectangle. Rectangles with no pixels inside the image yield
    the reserved sentinel value."""
    cfg = cfg or SegmenterConfig()
    h, w = stack.source.shape
    if not (0 <= seg.cx < w and 0 <= seg.cy < h):
        raise ValueError("segment center must be inside the image")
    arr = stack.as_array()
    n_ch = arr.shape[0]
    n_q = len(cfg.quantiles)
    out = np.empty(n_ch * RECT_COUNT * n_q)
    hl = seg.length / 2.0
    for ri, (_, ox, oy) in enumerate(
            layout_rect_offsets(seg.angle, seg.length, cfg)):
        px, py = segment_frame_pixels(seg.cx, seg.cy, ox, oy, seg.angle,
                                      hl, cfg.rect_half_width)
        keep = (px >= 0) & (px < w) & (py >= 0) & (py < h)
        px, py = px[keep], py[keep]
        if px.size == 0:
            for ci in range(n_ch):
                for qi in range(n_q):
                    out[(ci * RECT_COUNT + ri) * n_q + qi] = \
                        EMPTY_FEATURE_SENTINEL
            continue
        vals = np.sort(arr[:, py, px], axis=1)
        for ci in range(n_ch):
            for qi, q in enumerate(cfg.quantiles):
                out[(ci * RECT_COUNT + ri) * n_q + qi] = \
                    vals[ci, nearest_rank_index(q, vals.shape[1])]
    return out


def decode_feature_index(index: int, n_q: int) -> tuple[int, int, int]:
    """Feature index -> (channel, rect, quantile) indices."""
    qi = index % n_q
    rest = index // n_q
    return rest // RECT_COUNT, rest % RECT_COUNT, qi


# ---------------------------------------------------------------------------
# training-set construction

def _polyline_arclength(poly: np.ndarray) -> np.ndarray:
    d = np.hypot(*np.diff(poly, axis=0).T)
    return np.concatenate([[0.0], np.cumsum(d)])


def _point_at_arclength(poly: np.ndarray, cum: np.ndarray, s: float
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Point and unit tangent at arclength s along the polyline."""
    i = int(np.searchsorted(cum, s, side="right")) - 1
    i = min(max(i, 0), len(poly) - 2)
    seg_len = cum[i + 1] - cum[i]
    t = 0.0 if seg_len == 0 else (s - cum[i]) / seg_len
    p = poly[i] + t * (poly[i + 1] - poly[i])
    tangent = poly[i + 1] - poly[i]
    norm = np.hypot(*tangent)
    tangent = tangent / norm if norm > 0 else np.array([1.0, 0.0])
    return p, tangent


def _ray_polyline_hit(origin: np.ndarray, direction: np.ndarray,
                      poly: np.ndarray) -> float | None:
    """Signed distance along direction to the nearest polyline crossing."""
    best = None
    ox, oy = origin
    dx, dy = direction
    for (x1, y1), (x2, y2) in zip(poly[:-1], poly[1:]):
        ex, ey = x2 - x1, y2 - y1
        denom = dx * ey - dy * ex
        if denom == 0:
            continue
        # origin + t*direction == (x1, y1) + u*(ex, ey)
        t = ((x1 - ox) * ey - (y1 - oy) * ex) / denom
        u = ((x1 - ox) * dy - (y1 - oy) * dx) / denom
        if 0.0 <= u <= 1.0 and (best is None or abs(t) < abs(best)):
            best = t
    return best


def generate_positives(ann: WormAnnotation, spacing: float = 3.0,
                       cfg: SegmenterConfig | None = None
                       ) -> list[WormSegment]:
    """Sample worm-crossing segments every `spacing` px of midline arclength.

    Each segment is centered between the two side intersections of the local
    midline normal; samples whose normal fails to hit both sides are skipped.
    """
    cfg = cfg or SegmenterConfig()
    cum = _polyline_arclength(ann.midline)
    total = cum[-1]
    count = int(total / spacing) + 1
    segments = []
    skipped = 0
    for k in range(count):
        s = min(k * spacing, total)
        p, tangent = _point_at_arclength(ann.midline, cum, s)
        normal = np.array([-tangent[1], tangent[0]])
        ta = _ray_polyline_hit(p, normal, ann.side_a)
        tb = _ray_polyline_hit(p, normal, ann.side_b)
        if ta is None or tb is None or ta * tb > 0:
            skipped += 1
            continue
        e1 = p + ta * normal
        e2 = p + tb * normal
        center = (e1 + e2) / 2.0
        length = float(np.clip(abs(ta - tb), cfg.min_length, cfg.max_length))
        angle = math.atan2(normal[1], normal[0]) % math.pi
        segments.append(WormSegment(float(center[0]), float(center[1]),
                                    angle, length))
    if skipped:
        log.warning("worm %s: skipped %d/%d segment samples (normal did not "
                    "cross both sides)", ann.worm_id, skipped, count)
    return segments


def point_in_polygon(x: float, y: float, poly: np.ndarray) -> bool:
    """Even-odd rule point-in-polygon test."""
    inside = False
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        if (y1 > y) != (y2 > y):
            xc = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            if x < xc:
                inside = not inside
    return inside


def _distance_to_polygon(x: float, y: float, poly: np.ndarray) -> float:
    p = np.array([x, y])
    closed = np.vstack([poly, poly[:1]])
    return float(np.hypot(*(_nearest_point_on_polyline(p, closed) - p)))


def _near_any_worm(x: float, y: float, annotations: Sequence[WormAnnotation],
                   dilation: float) -> bool:
    for ann in annotations:
        poly = ann.polygon()
        if point_in_polygon(x, y, poly):
            return True
        if dilation > 0 and _distance_to_polygon(x, y, poly) <= dilation:
            return True
    return False


def generate_random_negatives(shape: tuple[int, int],
                              annotations: Sequence[WormAnnotation],
                              n: int, seed: int | None = None,
                              cfg: SegmenterConfig | None = None
                              ) -> list[WormSegment]:
    """Uniform random segments whose centers avoid the dilated worm outlines."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cfg = cfg or SegmenterConfig()
    h, w = shape
    rng = np.random.default_rng(seed)
    out: list[WormSegment] = []
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 1000 and len(out) < attempts / 1000:
            raise RuntimeError("negative sampling rejection rate above "
                               "99.9%; image is nearly all worm")
        cx = rng.uniform(0, w - 1)
        cy = rng.uniform(0, h - 1)
        angle = rng.uniform(0, math.pi)
        length = rng.uniform(cfg.min_length, cfg.max_length)
        if _near_any_worm(cx, cy, annotations, cfg.negative_dilation):
            continue
        out.append(WormSegment(cx, cy, angle, length))
    return out


def rasterize_annotations(annotations: Sequence[WormAnnotation],
                          shape: tuple[int, int],
                          dilation: float = 0.0) -> np.ndarray:
    """Union of worm polygons as a boolean mask, optionally dilated."""
    h, w = shape
    mask = np.zeros((h, w), dtype=bool)
    for ann in annotations:
        _fill_polygon(mask, ann.polygon())
    if dilation > 0:
        r = int(math.ceil(dilation))
        yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
        disk = (xx * xx + yy * yy) <= dilation * dilation
        mask = ndi.binary_dilation(mask, structure=disk)
    return mask


def _fill_polygon(mask: np.ndarray, poly: np.ndarray) -> None:
    h, w = mask.shape
    ys = poly[:, 1]
    y0 = max(0, int(math.floor(ys.min())))
    y1 = min(h - 1, int(math.ceil(ys.max())))
    n = len(poly)
    for y in range(y0, y1 + 1):
        xs = []
        for i in range(n):
            x1, yy1 = poly[i]
            x2, yy2 = poly[(i + 1) % n]
            if (yy1 > y) != (yy2 > y):
                xs.append(x1 + (y - yy1) * (x2 - x1) / (yy2 - yy1))
        xs.sort()
        for lo, hi in zip(xs[::2], xs[1::2]):
            a = max(0, int(math.ceil(lo)))
            b = min(w - 1, int(math.floor(hi)))
            if a <= b:
                mask[y, a:b + 1] = True


# ---------------------------------------------------------------------------
# score images and segmentation

@dataclass
class ScoreImage:
    """Per-pixel best score over all scanned (angle, length) hypotheses."""

    best_score: np.ndarray   # float64 (h, w)
    best_angle: np.ndarray   # uint8 angle-bin index
    best_length: np.ndarray  # uint8 length-bin index
    angles: np.ndarray       # bin values, radians
    lengths: np.ndarray      # bin values, px

    def __post_init__(self):
        if not (self.best_score.shape == self.best_angle.shape
                == self.best_length.shape):
            raise ValueError("score image planes must share one shape")
        if self.best_angle.max(initial=0) >= len(self.angles):
            raise ValueError("angle index out of range")

    @property
    def shape(self) -> tuple[int, int]:
        return self.best_score.shape


@dataclass
class SegmentationResult:
    mask: np.ndarray
    regions: list[Region]
    threshold: float
    model_id: str = ""


@dataclass
class SegEval:
    fp_pct: float
    fn_pct: float
    total_pct: float


def threshold_segment(scores: ScoreImage, tau: float,
                      min_region_area: int = 30,
                      model_id: str = "") -> SegmentationResult:
    """Mask = best_score > tau, minus connected regions below the area floor."""
    if not math.isfinite(tau):
        raise ValueError("threshold must be finite")
    raw = scores.best_score > tau
    regions = [r for r in connected_components(raw)
               if r.area >= min_region_area]
    mask = np.zeros_like(raw)
    for r in regions:
        mask[r.ys, r.xs] = True
    return SegmentationResult(mask=mask, regions=regions, threshold=tau,
                              model_id=model_id)


def evaluate_segmentation(mask: np.ndarray,
                          ground_truth: np.ndarray) -> SegEval:
    """False-positive / false-negative area relative to the ground truth."""
    mask = np.asarray(mask, bool)
    gt = np.asarray(ground_truth, bool)
    if mask.shape != gt.shape:
        raise ValueError("mask and ground truth must share dimensions")
    gt_area = int(gt.sum())
    if gt_area == 0:
        raise ValueError("ground truth is empty; mismatch metric undefined")
    fp = int(np.sum(mask & ~gt)) / gt_area * 100.0
    fn = int(np.sum(~mask & gt)) / gt_area * 100.0
    return SegEval(fp_pct=fp, fn_pct=fn, total_pct=fp + fn)


def _pooled_mismatch(score_images: Sequence[ScoreImage],
                     gt_masks: Sequence[np.ndarray], tau: float,
                     min_region_area: int) -> float:
    fp = fn = gt_total = 0
    for scores, gt in zip(score_images, gt_masks):
        mask = threshold_segment(scores, tau, min_region_area).mask
        gt = np.asarray(gt, bool)
        fp += int(np.sum(mask & ~gt))
        fn += int(np.sum(~mask & gt))
        gt_total += int(gt.sum())
    if gt_total == 0:
        raise ValueError("ground truth is empty across all images")
    return (fp + fn) / gt_total * 100.0


def calibrate_threshold(score_images: Sequence[ScoreImage],
                        gt_masks: Sequence[np.ndarray],
                        n_candidates: int = 64,
                        min_region_area: int = 30) -> float:
    """Pick the score threshold minimizing pooled total mismatch.

    Candidates are quantiles of the pooled score distribution. The returned
    threshold is the midpoint of the winning plateau, which for perfectly
    separated scores is the midpoint of the separating gap.
    """
    pooled = np.concatenate([s.best_score.ravel() for s in score_images])
    if pooled.size > 200_000:
        rng = np.random.default_rng(0)
        pooled = rng.choice(pooled, size=200_000, replace=False)
    pooled = np.sort(pooled)
    qs = np.linspace(0.0, 1.0, n_candidates)
    idx = [nearest_rank_index(q, pooled.size) for q in qs]
    candidates = np.unique(pooled[idx])
    mism = np.array([_pooled_mismatch(score_images, gt_masks, c,
                                      min_region_area) for c in candidates])
    best = mism.min()
    winners = np.nonzero(mism == best)[0]
    lo = candidates[winners[0]]
    hi_idx = winners[-1]
    if hi_idx + 1 < len(candidates):
        mid = (lo + candidates[hi_idx + 1]) / 2.0
        if _pooled_mismatch(score_images, gt_masks, mid,
                            min_region_area) <= best:
            return float(mid)
    return float(lo)


# ---------------------------------------------------------------------------
# hard-negative mining

@dataclass
class MinedNegative:
    image_index: int
    segment: WormSegment
    score: float


def hard_negative_mine(model: StumpEnsemble,
                       items: Sequence[tuple[FilterStack,
                                             Sequence[WormAnnotation]]],
                       top_m: int,
                       cfg: SegmenterConfig | None = None,
                       score_images: Sequence[ScoreImage] | None = None
                       ) -> list[MinedNegative]:
    """Highest-scoring segments outside the annotated worms.

    Candidates come from the dense scan's per-pixel best hypothesis; accepted
    negatives are kept at least nms_radius apart (per image) so the mined set
    is diverse. Ties resolve in scan order (image, then row, then column).
    """
    from .densescan import dense_score  # local import avoids a module cycle

    cfg = cfg or SegmenterConfig()
    pool = []  # (-score, image_index, y, x, angle_idx, len_idx)
    score_maps = []
    for idx, (stack, annotations) in enumerate(items):
        if score_images is not None:
            scores = score_images[idx]
        else:
            scores = dense_score(stack, model, cfg)
        score_maps.append(scores)
        excluded = rasterize_annotations(annotations, stack.source.shape,
                                         dilation=cfg.negative_dilation)
        ys, xs = np.nonzero(~excluded)
        vals = scores.best_score[ys, xs]
        order = np.lexsort((xs, ys, -vals))
        take = min(len(order), top_m * 20)  # enough slack for NMS rejections
        for i in order[:take]:
            pool.append((float(-vals[i]), idx, int(ys[i]), int(xs[i])))
    pool.sort()

    out: list[MinedNegative] = []
    r = int(math.ceil(cfg.nms_radius))
    r2 = cfg.nms_radius ** 2
    occupied = {idx: np.zeros(item[0].source.shape, dtype=bool)
                for idx, item in enumerate(items)}
    for neg_score, idx, y, x in pool:
        if len(out) >= top_m:
            break
        if occupied[idx][y, x]:
            continue
        scores = score_maps[idx]
        angle = float(scores.angles[scores.best_angle[y, x]])
        length = float(scores.lengths[scores.best_length[y, x]])
        out.append(MinedNegative(
            image_index=idx,
            segment=WormSegment(float(x), float(y), angle, length),
            score=-neg_score))
        h, w = occupied[idx].shape
        y0, y1 = max(0, y - r), min(h - 1, y + r)
        x0, x1 = max(0, x - r), min(w - 1, x + r)
        yy, xx = np.mgrid[y0:y1 + 1, x0:x1 + 1]
        occupied[idx][y0:y1 + 1, x0:x1 + 1] |= \
            ((yy - y) ** 2 + (xx - x) ** 2) <= r2
    return out


# ---------------------------------------------------------------------------
# annotation files

def annotations_to_json(image_id: str, worms: Sequence[WormAnnotation],
                        version: int = 1) -> str:
    return json.dumps({
        "image_id": image_id,
        "version": version,
        "worms": [
            {"worm_id": w.worm_id,
             "midline": w.midline.tolist(),
             "side_a": w.side_a.tolist(),
             "side_b": w.side_b.tolist()}
            for w in worms
        ],
    }, indent=1)


def annotations_from_json(text: str) -> tuple[str, int, list[WormAnnotation]]:
    d = json.loads(text)
    worms = [WormAnnotation(worm_id=w["worm_id"],
                            midline=np.asarray(w["midline"]),
                            side_a=np.asarray(w["side_a"]),
                            side_b=np.asarray(w["side_b"]),
                            image_id=d.get("image_id", ""))
             for w in d.get("worms", [])]
    return d.get("image_id", ""), int(d.get("version", 1)), worms


def load_annotations(path: str | Path) -> tuple[str, int, list[WormAnnotation]]:
    return annotations_from_json(Path(path).read_text())


def save_annotations(path: str | Path, image_id: str,
                     worms: Sequence[WormAnnotation],
                     version: int = 1) -> None:
    Path(path).write_text(annotations_to_json(image_id, worms, version))
