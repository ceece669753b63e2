"""Reading and writing single-channel images.

Supported containers: binary PGM (P5, 8- or 16-bit) and PNG (8- or 16-bit
grayscale). Intensities are divided by the container's bit-depth maximum on
load so images enter the pipeline in [0, 1]. Masks are written as 0/255 PGM;
score maps as 16-bit PGM with a JSON sidecar recording the affine mapping
from score to stored intensity.
"""

from __future__ import annotations

import io
import json
import re
from pathlib import Path

import numpy as np
from PIL import Image

from .imagecore import GrayImage

_PGM_HEADER = re.compile(
    rb"^P5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s+(\d+)\s", re.S)


def read_pgm(path: str | Path) -> GrayImage:
    raw = Path(path).read_bytes()
    m = _PGM_HEADER.match(raw)
    if not m:
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    width, height, maxval = (int(g) for g in m.groups())
    if maxval <= 0 or maxval > 65535:
        raise ValueError(f"{path}: bad maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.uint8
    pixels = np.frombuffer(raw, dtype=dtype, count=width * height,
                           offset=m.end())
    data = pixels.reshape(height, width).astype(np.float64) / maxval
    return GrayImage(data)


def write_pgm(path: str | Path, data: np.ndarray, maxval: int = 255) -> None:
    """Write integer pixel data (already scaled to [0, maxval]) as P5 PGM."""
    arr = np.asarray(data)
    if maxval > 255:
        arr = arr.astype(">u2")
    else:
        arr = arr.astype(np.uint8)
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n{maxval}\n".encode()
    Path(path).write_bytes(header + arr.tobytes())


def read_png(path: str | Path) -> GrayImage:
    with Image.open(path) as im:
        if im.mode == "I;16":
            arr = np.asarray(im, dtype=np.float64) / 65535.0
        elif im.mode in ("L", "P"):
            arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
        elif im.mode == "I":
            arr = np.asarray(im, dtype=np.float64) / 65535.0
        else:
            arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    return GrayImage(arr)


def read_image(path: str | Path) -> GrayImage:
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return read_pgm(path)
    if path.suffix.lower() == ".png":
        return read_png(path)
    raise ValueError(f"unsupported image container: {path.suffix!r}")


def write_image(path: str | Path, img: GrayImage, bits: int = 8) -> None:
    """Write a [0, 1] image as 8- or 16-bit PGM or PNG."""
    path = Path(path)
    maxval = 255 if bits == 8 else 65535
    pixels = np.round(np.clip(img.data, 0.0, 1.0) * maxval).astype(np.uint32)
    if path.suffix.lower() == ".pgm":
        write_pgm(path, pixels, maxval=maxval)
    elif path.suffix.lower() == ".png":
        if bits == 8:
            Image.fromarray(pixels.astype(np.uint8), mode="L").save(path)
        else:
            Image.fromarray(pixels.astype(np.uint16)).save(path)
    else:
        raise ValueError(f"unsupported image container: {path.suffix!r}")


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    """Write a binary mask as 0/255 8-bit PGM."""
    write_pgm(path, np.where(np.asarray(mask, bool), 255, 0), maxval=255)


def read_mask(path: str | Path) -> np.ndarray:
    return read_pgm(path).data > 0.5


def write_score_map(path: str | Path, scores: np.ndarray) -> None:
    """Write a float score map as 16-bit PGM plus a JSON affine sidecar.

    Stored intensity = round((score - offset) / scale); the sidecar allows
    approximate inversion: score ~= intensity * scale + offset.
    """
    path = Path(path)
    scores = np.asarray(scores, dtype=np.float64)
    smin = float(scores.min()) if scores.size else 0.0
    smax = float(scores.max()) if scores.size else 0.0
    scale = (smax - smin) / 65535.0 if smax > smin else 1.0
    pixels = np.round((scores - smin) / scale).astype(np.uint32)
    write_pgm(path, pixels, maxval=65535)
    sidecar = {"offset": smin, "scale": scale}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar))


def read_score_map(path: str | Path) -> np.ndarray:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    img = read_pgm(path)
    return img.data * 65535.0 * sidecar["scale"] + sidecar["offset"]


def png_bytes(img: GrayImage, log_view: bool = False) -> bytes:
    """Encode an image to 8-bit PNG bytes, optionally log-transformed."""
    data = img.data
    if log_view:
        data = np.log1p(data * 255.0) / np.log(256.0)
    pixels = np.round(np.clip(data, 0.0, 1.0) * 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(pixels, mode="L").save(buf, format="PNG")
    return buf.getvalue()
