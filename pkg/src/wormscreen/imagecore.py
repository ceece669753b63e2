"""Image containers, the linear filter bank, and oriented-rectangle quantiles.

Coordinate convention: x is the column, y is the row, origin at the top-left
corner, y pointing down. Pixel centers sit at integer coordinates. Image data
is stored row-major as ``data[y, x]`` in float64. Images loaded from disk are
normalized to [0, 1]; filter responses may take any finite value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.ndimage as ndi


class EmptyRegionError(ValueError):
    """An oriented rectangle contains no pixel centers inside the image."""


def nearest_rank_index(q: float, n: int) -> int:
    """Index into a sorted array of n values for the nearest-rank q-quantile.

    Shared by every quantile path in the package (including the optimized
    count-based scorer) so that all paths agree bit-for-bit, including the
    floating-point evaluation of ceil(q*n).
    """
    return max(0, math.ceil(q * n) - 1)


@dataclass
class GrayImage:
    """2-D scalar intensity raster. Immutable after construction."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"image data must be 2-D, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image contains non-finite values")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass
class Kernel:
    """Convolution kernel with odd dimensions."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2:
            raise ValueError("kernel must be 2-D")
        if w.shape[0] % 2 == 0 or w.shape[1] % 2 == 0:
            raise ValueError(f"kernel dimensions must be odd, got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("kernel contains non-finite weights")
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> tuple[int, int]:
        return self.weights.shape


@dataclass
class OrientedRect:
    """Rectangle with center (x, y), rotation angle in [0, pi), half extents.

    half_length is the half extent along the angle direction, half_width
    across it. A pixel belongs to the rectangle when its center falls inside
    (borders inclusive).
    """

    cx: float
    cy: float
    angle: float
    half_length: float
    half_width: float

    def __post_init__(self):
        if self.half_length <= 0 or self.half_width <= 0:
            raise ValueError("rectangle half extents must be positive")
        # Normalize the angle label; geometry is invariant under +pi.
        a = self.angle % math.pi
        object.__setattr__(self, "angle", a)

    def corners(self) -> np.ndarray:
        """4x2 array of corner (x, y) coordinates, counterclockwise."""
        c, s = math.cos(self.angle), math.sin(self.angle)
        hl, hw = self.half_length, self.half_width
        out = []
        for du, dv in ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)):
            out.append((self.cx + du * c - dv * s, self.cy + du * s + dv * c))
        return np.asarray(out)


@dataclass
class FilterBankConfig:
    """Parameters of the default linear filter bank.

    The bank always emits the raw image, a percentile contrast adjustment,
    Sobel gradient magnitude, one band-pass response per entry of log_sigmas,
    a Gaussian smoothing, and contrast adjustment followed by band-pass.
    """

    log_sigmas: tuple[float, ...] = (1.5, 3.0)
    gauss_sigma: float = 2.0
    contrast_lo: float = 0.01
    contrast_hi: float = 0.99
    contrast_log_sigma: float = 1.5


@dataclass
class FilterStack:
    """Named filter responses, all with the source image's dimensions."""

    source: GrayImage
    responses: dict[str, GrayImage] = field(default_factory=dict)

    def __post_init__(self):
        for name, resp in self.responses.items():
            if resp.shape != self.source.shape:
                raise ValueError(f"response {name!r} has shape {resp.shape}, "
                                 f"source is {self.source.shape}")

    @property
    def names(self) -> list[str]:
        return list(self.responses.keys())

    def as_array(self) -> np.ndarray:
        """Stack responses into a (channels, height, width) array."""
        return np.stack([self.responses[n].data for n in self.names])


# ---------------------------------------------------------------------------
# kernels

def sobel_x_kernel() -> Kernel:
    return Kernel(np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=float))


def sobel_y_kernel() -> Kernel:
    return Kernel(np.array([[-1, -2, -1], [0, 0, 0], [1, 2, 1]], dtype=float))


def gaussian_kernel(sigma: float, truncate: float = 3.5) -> Kernel:
    """Sampled 2-D Gaussian, normalized to unit sum."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    r = max(1, int(math.ceil(truncate * sigma)))
    ax = np.arange(-r, r + 1, dtype=float)
    xx, yy = np.meshgrid(ax, ax)
    w = np.exp(-(xx * xx + yy * yy) / (2.0 * sigma * sigma))
    return Kernel(w / w.sum())


def log_kernel(sigma: float, truncate: float = 3.5) -> Kernel:
    """Sampled Laplacian-of-Gaussian, adjusted to an exactly zero sum.

    Follows the analytic sign convention: a bright blob on a dark background
    produces a negative response at its center.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    r = max(2, int(math.ceil(truncate * sigma)))
    ax = np.arange(-r, r + 1, dtype=float)
    xx, yy = np.meshgrid(ax, ax)
    r2 = xx * xx + yy * yy
    s2 = sigma * sigma
    w = (r2 - 2.0 * s2) / (s2 * s2) * np.exp(-r2 / (2.0 * s2))
    w -= w.mean()  # enforce zero response to constant fields
    return Kernel(w)


# ---------------------------------------------------------------------------
# operations

def convolve(img: GrayImage, k: Kernel) -> GrayImage:
    """2-D convolution (kernel flipped) with edge replication at borders."""
    out = ndi.convolve(img.data, k.weights, mode="nearest")
    return GrayImage(out)


def contrast_adjust(img: GrayImage, lo_pct: float = 0.01,
                    hi_pct: float = 0.99) -> GrayImage:
    """Linear rescale mapping intensity percentiles lo->0 and hi->1.

    Output is clamped to [0, 1]. A degenerate image whose two percentiles
    coincide maps to a constant 0.5.
    """
    if not (0.0 <= lo_pct < hi_pct <= 1.0):
        raise ValueError("need 0 <= lo_pct < hi_pct <= 1")
    flat = np.sort(img.data, axis=None)
    n = flat.size
    lo = flat[nearest_rank_index(lo_pct, n)]
    hi = flat[nearest_rank_index(hi_pct, n)]
    if hi <= lo:
        return GrayImage(np.full(img.shape, 0.5))
    out = np.clip((img.data - lo) / (hi - lo), 0.0, 1.0)
    return GrayImage(out)


def filter_bank(img: GrayImage,
                cfg: FilterBankConfig | None = None) -> FilterStack:
    """Run the linear filter bank and collect named responses."""
    cfg = cfg or FilterBankConfig()
    contrast = contrast_adjust(img, cfg.contrast_lo, cfg.contrast_hi)
    gx = convolve(img, sobel_x_kernel()).data
    gy = convolve(img, sobel_y_kernel()).data
    responses: dict[str, GrayImage] = {
        "raw": img,
        "contrast": contrast,
        "sobel": GrayImage(np.hypot(gx, gy)),
    }
    for sigma in cfg.log_sigmas:
        responses[f"log{sigma:g}"] = convolve(img, log_kernel(sigma))
    responses["gauss"] = convolve(img, gaussian_kernel(cfg.gauss_sigma))
    responses["contrast_log"] = convolve(contrast,
                                         log_kernel(cfg.contrast_log_sigma))
    return FilterStack(source=img, responses=responses)


def rect_pixel_offsets(rect: OrientedRect, ox: float = 0.0, oy: float = 0.0
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Integer pixel offsets (dx, dy) covered by a rect centered at (ox, oy).

    Offsets are relative to the origin of the (ox, oy) frame: a segment
    centered at integer pixel (x, y) with an attached rectangle at relative
    center (ox, oy) covers pixels (x+dx, y+dy). Membership uses the exact
    predicate of rect_quantile so the two paths select identical pixels.
    """
    c, s = math.cos(rect.angle), math.sin(rect.angle)
    reach = math.hypot(rect.half_length, rect.half_width)
    x0 = math.floor(ox - reach)
    x1 = math.ceil(ox + reach)
    y0 = math.floor(oy - reach)
    y1 = math.ceil(oy + reach)
    xs = np.arange(x0, x1 + 1, dtype=np.int64)
    ys = np.arange(y0, y1 + 1, dtype=np.int64)
    gx, gy = np.meshgrid(xs, ys)
    dx = gx - ox
    dy = gy - oy
    u = dx * c + dy * s
    v = -dx * s + dy * c
    inside = (np.abs(u) <= rect.half_length) & (np.abs(v) <= rect.half_width)
    return gx[inside], gy[inside]


def rect_quantile(resp: GrayImage, r: OrientedRect, q: float) -> float:
    """Nearest-rank q-quantile of pixel values whose centers fall in r.

    Pixels outside the image are excluded. Raises EmptyRegionError when no
    pixel center is inside both the rectangle and the image.
    """
    if not (0.0 <= q <= 1.0):
        raise ValueError("quantile must be in [0, 1]")
    px, py = rect_pixel_offsets(r, r.cx, r.cy)
    keep = (px >= 0) & (px < resp.width) & (py >= 0) & (py < resp.height)
    px, py = px[keep], py[keep]
    if px.size == 0:
        raise EmptyRegionError("rectangle contains no pixels inside the image")
    vals = np.sort(resp.data[py, px])
    return float(vals[nearest_rank_index(q, vals.size)])


@dataclass
class Region:
    """One 8-connected foreground component of a binary mask."""

    label: int
    ys: np.ndarray
    xs: np.ndarray
    area: int
    bbox: tuple[int, int, int, int]  # (x0, y0, x1, y1) inclusive
    centroid: tuple[float, float]    # (x, y)

    def mask(self, shape: tuple[int, int]) -> np.ndarray:
        m = np.zeros(shape, dtype=bool)
        m[self.ys, self.xs] = True
        return m


_EIGHT_CONN = np.ones((3, 3), dtype=int)


def connected_components(mask: np.ndarray) -> list[Region]:
    """8-connected components of a binary mask, in label order."""
    mask = np.asarray(mask, dtype=bool)
    labels, count = ndi.label(mask, structure=_EIGHT_CONN)
    regions = []
    for lab, sl in enumerate(ndi.find_objects(labels), start=1):
        if sl is None:
            continue
        ys, xs = np.nonzero(labels[sl] == lab)
        ys = ys + sl[0].start
        xs = xs + sl[1].start
        regions.append(Region(
            label=lab,
            ys=ys,
            xs=xs,
            area=int(ys.size),
            bbox=(int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())),
            centroid=(float(xs.mean()), float(ys.mean())),
        ))
    return regions
