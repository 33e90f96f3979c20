"""Tissue detection and uniform random patch sampling inside tissue."""

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import HistoBofError
from .seeding import make_rng


class InsufficientTissue(HistoBofError, RuntimeError):
    def __init__(self, found, requested, wsi_id=None):
        where = f" in {wsi_id}" if wsi_id else ""
        super().__init__(
            f"only {found} of {requested} patches met the tissue threshold{where}"
        )
        self.found = found
        self.requested = requested
        self.wsi_id = wsi_id


class OutOfBounds(HistoBofError, IndexError):
    pass


@dataclass(frozen=True)
class TissueMaskParams:
    saturation_min: float = 0.08
    luminance_max: int = 225

    def __post_init__(self):
        if not 0.0 <= self.saturation_min <= 1.0:
            raise ValueError("saturation_min must be in [0, 1]")
        if not 0 <= self.luminance_max <= 255:
            raise ValueError("luminance_max must be in [0, 255]")


@dataclass(frozen=True)
class Patch:
    wsi_id: str
    x: int
    y: int
    size: int
    pixels: np.ndarray = field(repr=False, compare=False)
    tissue_coverage: float


def tissue_mask(image, params=TissueMaskParams()):
    """Boolean mask of stained pixels.

    Uses HSV definitions: value = max channel, saturation = (max - min) / max.
    A pixel is tissue when its saturation exceeds ``saturation_min`` or its
    value is below ``luminance_max``.
    """
    img = np.asarray(image)
    hi = img.max(axis=2).astype(np.int32)
    lo = img.min(axis=2).astype(np.int32)
    # (hi - lo) / hi > s_min, rearranged to avoid dividing by zero on black pixels
    saturated = (hi - lo) > params.saturation_min * hi
    dark = hi < params.luminance_max
    return saturated | dark


def integral_image(mask):
    out = np.zeros((mask.shape[0] + 1, mask.shape[1] + 1), dtype=np.int64)
    np.cumsum(np.cumsum(mask, axis=0, dtype=np.int64), axis=1, out=out[1:, 1:])
    return out


def _window_sum(ii, x, y, size):
    return ii[y + size, x + size] - ii[y, x + size] - ii[y + size, x] + ii[y, x]


def tissue_coverage(mask, x, y, size):
    """Fraction of tissue pixels in the ``size`` x ``size`` window at (x, y)."""
    h, w = mask.shape
    if x < 0 or y < 0 or x + size > w or y + size > h or size <= 0:
        raise OutOfBounds(f"window ({x}, {y}, {size}) outside mask of shape {mask.shape}")
    return int(np.count_nonzero(mask[y:y + size, x:x + size])) / (size * size)


def sample_patches(image, n, size=256, min_coverage=0.75, seed=0, max_attempts=None,
                   wsi_id="", mask=None, mask_params=TissueMaskParams()):
    """Rejection-sample ``n`` patches whose tissue coverage is at least ``min_coverage``.

    Candidate top-left corners are drawn uniformly over the valid rectangle, one
    at a time, and accepted in draw order. Locations may repeat. ``max_attempts``
    defaults to ``100 * n``.
    """
    img = np.asarray(image)
    h, w = img.shape[:2]
    if h < size or w < size:
        raise ValueError(f"image {w}x{h} smaller than patch size {size}")
    if not 0.0 <= min_coverage <= 1.0:
        raise ValueError("min_coverage must be in [0, 1]")
    if max_attempts is None:
        max_attempts = 100 * n
    if mask is None:
        mask = tissue_mask(img, mask_params)
    ii = integral_image(mask)
    area = size * size

    rng = make_rng(seed)
    patches = []
    drawn = 0
    batch = max(64, n)
    while len(patches) < n and drawn < max_attempts:
        m = min(batch, max_attempts - drawn)
        xs = rng.integers(0, w - size + 1, size=m)
        ys = rng.integers(0, h - size + 1, size=m)
        counts = _window_sum(ii, xs, ys, size)
        for x, y, c in zip(xs.tolist(), ys.tolist(), counts.tolist()):
            drawn += 1
            coverage = c / area
            if coverage >= min_coverage:
                patches.append(Patch(wsi_id, x, y, size,
                                     img[y:y + size, x:x + size], coverage))
                if len(patches) == n:
                    break
    if len(patches) < n:
        raise InsufficientTissue(len(patches), n, wsi_id or None)
    return patches


def dump_patches(patches, out_dir):
    """Write patches as PNG files plus an ``index.csv`` describing them."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "index.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["file", "wsi_id", "index", "x", "y", "size", "tissue_coverage"])
        for i, p in enumerate(patches):
            name = f"{p.wsi_id}_{i}_{p.x}_{p.y}.png"
            Image.fromarray(np.ascontiguousarray(p.pixels)).save(out_dir / name)
            writer.writerow([name, p.wsi_id, i, p.x, p.y, p.size, repr(p.tissue_coverage)])
