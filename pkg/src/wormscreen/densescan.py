"""Dense evaluation of the segment scoring function over a whole image.

Evaluating a quantile for every pixel x angle x length hypothesis directly is
far too slow. Instead, each stump's decision is rewritten as a counting test:

    quantile_q(values) < t  <=>  #{v : v < t} >= max(1, ceil(q * n))

The count over a rotated rectangle decomposes into per-row runs, each read in
O(1) from a row-wise prefix-sum of the thresholded response plane. One plane
per distinct (channel, threshold) pair serves every pixel, so the whole scan
costs a few adds per stump-run-pixel. Scores are bit-identical to scoring
segment_features directly: the same pixel sets, comparisons, confidences, and
summation order. ceil(q * n) is evaluated in float64 in both paths (see
nearest_rank_index).

Pixels are scanned at integer centers; hypotheses are visited in (angle
index, length index) order and the per-pixel best survives, so ties resolve
to the smallest index pair. Rows are independent, which makes the parallel
and serial kernels produce identical output.

The kernel splits every row into clipped edge columns and an interior range
where no stencil run crosses the image border: the interior pixel count per
rectangle is a compile-time constant of the hypothesis, so the hot loops are
branch-free streaming adds that the compiler vectorizes.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit, prange

from .boosting import EMPTY_FEATURE_SENTINEL, StumpEnsemble
from .imagecore import FilterStack
from .segmenter import (RECT_COUNT, ScoreImage, SegmenterConfig,
                        decode_feature_index, layout_rect_offsets,
                        segment_frame_pixels)


def _kernel_body(planes, run_dy, run_x0, run_x1, rect_start,
                 st_plane, st_rect, st_q, st_cl, st_cr, st_sent_left,
                 xi0, xi1, a_idx, l_idx, best_score, best_angle, best_length):
    n_planes, height, w1 = planes.shape
    width = w1 - 1
    n_stumps = st_plane.size
    n_rects = rect_start.size - 1
    # columns in [xi0, xi1) never clip any stencil run horizontally, so the
    # hot loops over that range are branch-free and use zero-offset slices
    # (runtime offsets inside the index expression defeat the vectorizer)
    for y in prange(height):
        score_row = np.zeros(width, np.float64)
        n_edge = np.zeros((n_rects, width), np.int32)
        n_mid = np.zeros(n_rects, np.int64)
        cnt = np.zeros(width, np.int32)

        for r in range(n_rects):
            for k in range(rect_start[r], rect_start[r + 1]):
                yy = y + run_dy[k]
                if yy < 0 or yy >= height:
                    continue
                x0 = run_x0[k]
                x1p = run_x1[k] + 1
                n_mid[r] += x1p - x0
                for x in range(0, xi0):
                    lo = min(max(x + x0, 0), width)
                    hi = min(max(x + x1p, 0), width)
                    if hi > lo:
                        n_edge[r, x] += hi - lo
                for x in range(xi1, width):
                    lo = min(max(x + x0, 0), width)
                    hi = min(max(x + x1p, 0), width)
                    if hi > lo:
                        n_edge[r, x] += hi - lo

        for si in range(n_stumps):
            p = st_plane[si]
            r = st_rect[si]
            q = st_q[si]
            cl = st_cl[si]
            cr = st_cr[si]
            sent_val = cl if st_sent_left[si] != 0 else cr

            first = True
            for k in range(rect_start[r], rect_start[r + 1]):
                yy = y + run_dy[k]
                if yy < 0 or yy >= height:
                    continue
                row = planes[p, yy]
                x0 = run_x0[k]
                x1p = run_x1[k] + 1
                hi_v = row[xi0 + x1p: xi1 + x1p]
                lo_v = row[xi0 + x0: xi1 + x0]
                c_v = cnt[xi0:xi1]
                if first:
                    for x in range(0, xi0):
                        lo = min(max(x + x0, 0), width)
                        hi = min(max(x + x1p, 0), width)
                        cnt[x] = (np.int32(row[hi]) - np.int32(row[lo])
                                  if hi > lo else 0)
                    for i in range(c_v.size):
                        c_v[i] = np.int32(hi_v[i]) - np.int32(lo_v[i])
                    for x in range(xi1, width):
                        lo = min(max(x + x0, 0), width)
                        hi = min(max(x + x1p, 0), width)
                        cnt[x] = (np.int32(row[hi]) - np.int32(row[lo])
                                  if hi > lo else 0)
                    first = False
                else:
                    for x in range(0, xi0):
                        lo = min(max(x + x0, 0), width)
                        hi = min(max(x + x1p, 0), width)
                        if hi > lo:
                            cnt[x] += np.int32(row[hi]) - np.int32(row[lo])
                    for i in range(c_v.size):
                        c_v[i] += np.int32(hi_v[i]) - np.int32(lo_v[i])
                    for x in range(xi1, width):
                        lo = min(max(x + x0, 0), width)
                        hi = min(max(x + x1p, 0), width)
                        if hi > lo:
                            cnt[x] += np.int32(row[hi]) - np.int32(row[lo])
            if first:
                # stencil has no row inside the image: empty region everywhere
                for x in range(width):
                    score_row[x] += sent_val
                continue

            nm = n_mid[r]
            if nm == 0:
                for x in range(xi0, xi1):
                    score_row[x] += sent_val
            else:
                k1 = int(math.ceil(q * nm))
                if k1 < 1:
                    k1 = 1
                c_v = cnt[xi0:xi1]
                s_v = score_row[xi0:xi1]
                for i in range(c_v.size):
                    s_v[i] += cl if c_v[i] >= k1 else cr
            for x in range(0, xi0):
                n = n_edge[r, x]
                if n == 0:
                    score_row[x] += sent_val
                else:
                    k1g = int(math.ceil(q * n))
                    if k1g < 1:
                        k1g = 1
                    score_row[x] += cl if cnt[x] >= k1g else cr
            for x in range(xi1, width):
                n = n_edge[r, x]
                if n == 0:
                    score_row[x] += sent_val
                else:
                    k1g = int(math.ceil(q * n))
                    if k1g < 1:
                        k1g = 1
                    score_row[x] += cl if cnt[x] >= k1g else cr

        for x in range(width):
            if score_row[x] > best_score[y, x]:
                best_score[y, x] = score_row[x]
                best_angle[y, x] = a_idx
                best_length[y, x] = l_idx


_kernel_serial = njit(cache=True)(_kernel_body)
_kernel_parallel = njit(parallel=True, cache=True)(_kernel_body)


def _hypothesis_runs(angle: float, length: float, cfg: SegmenterConfig):
    """Row-run decomposition of the five rect stencils for one hypothesis."""
    run_dy: list[int] = []
    run_x0: list[int] = []
    run_x1: list[int] = []
    rect_start = [0]
    hl = length / 2.0
    for _, ox, oy in layout_rect_offsets(angle, length, cfg):
        dxs, dys = segment_frame_pixels(0.0, 0.0, ox, oy, angle, hl,
                                        cfg.rect_half_width)
        order = np.lexsort((dxs, dys))
        dxs, dys = dxs[order], dys[order]
        i = 0
        while i < len(dys):
            j = i
            while j + 1 < len(dys) and dys[j + 1] == dys[i]:
                j += 1
            xs = dxs[i:j + 1]
            # rectangles are convex: each row of the stencil is one run
            assert xs[-1] - xs[0] + 1 == len(xs), "non-contiguous stencil row"
            run_dy.append(int(dys[i]))
            run_x0.append(int(xs[0]))
            run_x1.append(int(xs[-1]))
            i = j + 1
        rect_start.append(len(run_dy))
    return (np.asarray(run_dy, np.int64), np.asarray(run_x0, np.int64),
            np.asarray(run_x1, np.int64), np.asarray(rect_start, np.int64))


def _stump_tables(model: StumpEnsemble, n_q: int, quantiles):
    """Flatten the ensemble into arrays plus deduplicated plane keys."""
    plane_ids: dict[tuple[int, float], int] = {}
    st_plane, st_rect, st_q = [], [], []
    st_cl, st_cr, st_sent = [], [], []
    for s in model.stumps:
        ci, ri, qi = decode_feature_index(s.feature_index, n_q)
        key = (ci, s.threshold)
        pid = plane_ids.setdefault(key, len(plane_ids))
        st_plane.append(pid)
        st_rect.append(ri)
        st_q.append(quantiles[qi])
        st_cl.append(s.c_left)
        st_cr.append(s.c_right)
        st_sent.append(1 if EMPTY_FEATURE_SENTINEL < s.threshold else 0)
    tables = (np.asarray(st_plane, np.int64), np.asarray(st_rect, np.int64),
              np.asarray(st_q, np.float64), np.asarray(st_cl, np.float64),
              np.asarray(st_cr, np.float64), np.asarray(st_sent, np.uint8))
    return tables, list(plane_ids.keys())


def _build_planes(arr: np.ndarray, plane_keys) -> np.ndarray:
    """Row prefix sums of (response < threshold), one plane per key."""
    n_ch, height, width = arr.shape
    dtype = np.uint16 if width < 65535 else np.uint32
    planes = np.zeros((len(plane_keys), height, width + 1), dtype)
    for pid, (ci, t) in enumerate(plane_keys):
        np.cumsum(arr[ci] < t, axis=1, dtype=dtype, out=planes[pid, :, 1:])
    return planes


def dense_score(stack: FilterStack, model: StumpEnsemble,
                cfg: SegmenterConfig | None = None,
                parallel: bool = True) -> ScoreImage:
    """Score every (pixel, angle, length) hypothesis; keep the best per pixel.

    The result is deterministic and identical between parallel and serial
    execution.
    """
    cfg = cfg or SegmenterConfig()
    height, width = stack.source.shape
    angles = cfg.angles
    lengths = np.asarray(cfg.scan_lengths, np.float64)
    n_q = len(cfg.quantiles)
    expected_dim = len(stack.names) * RECT_COUNT * n_q
    if model.dimensionality != expected_dim:
        raise ValueError(
            f"model dimensionality {model.dimensionality} does not match "
            f"stack layout ({expected_dim} features)")

    best_angle = np.zeros((height, width), np.uint8)
    best_length = np.zeros((height, width), np.uint8)
    if not model.stumps:
        return ScoreImage(np.zeros((height, width)), best_angle, best_length,
                          angles, lengths)

    arr = stack.as_array()
    tables, plane_keys = _stump_tables(model, n_q, cfg.quantiles)
    planes = _build_planes(arr, plane_keys)
    best_score = np.full((height, width), -np.inf)
    kernel = _kernel_parallel if parallel else _kernel_serial
    for a_idx, angle in enumerate(angles):
        for l_idx, length in enumerate(lengths):
            run_dy, run_x0, run_x1, rect_start = _hypothesis_runs(
                float(angle), float(length), cfg)
            if run_dy.size:
                xi0 = max(0, int(-run_x0.min()))
                xi1 = min(width, width - int(run_x1.max()) - 1)
            else:
                xi0 = xi1 = 0
            if xi1 <= xi0:
                xi0 = xi1 = 0
            kernel(planes, run_dy, run_x0, run_x1, rect_start, *tables,
                   xi0, xi1, np.uint8(a_idx), np.uint8(l_idx),
                   best_score, best_angle, best_length)
    return ScoreImage(best_score, best_angle, best_length, angles, lengths)
