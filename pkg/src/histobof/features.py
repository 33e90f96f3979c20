"""Patch descriptors and the feature-store file format.

Feature-store files hold one record per patch::

    #dim=<d>
    wsi_id<TAB>patch_index<TAB>v0,v1,...,v{d-1}

Values are written with ``repr`` so a round trip is bit-exact.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, HistoBofError

HANDCRAFTED_DIM = 120
COLOR_BINS = 32
GRADIENT_BINS = 16
# gradient magnitudes at or above this value land in the last bin
GRADIENT_RANGE = 64.0
LUMA = np.array([0.299, 0.587, 0.114])


class FeatureParseError(HistoBofError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NonFiniteValue(HistoBofError, ValueError):
    pass


@dataclass(frozen=True)
class FeatureVector:
    wsi_id: str
    patch_index: int
    values: np.ndarray = field(compare=False)

    def __eq__(self, other):
        if not isinstance(other, FeatureVector):
            return NotImplemented
        return (self.wsi_id == other.wsi_id and self.patch_index == other.patch_index
                and np.array_equal(self.values, other.values))

    __hash__ = None


class FeatureStore:
    """Per-patch descriptors of uniform dimension, grouped by slide."""

    def __init__(self, dimension, records=(), allow_partial=False):
        self.dimension = int(dimension)
        self._groups = {}
        for i, rec in enumerate(records):
            values = np.asarray(rec.values, dtype=np.float64)
            if values.shape != (self.dimension,):
                raise DimensionMismatch(
                    f"record {i} has dimension {values.size}, expected {self.dimension}", index=i)
            if not np.all(np.isfinite(values)):
                raise NonFiniteValue(f"record {i} ({rec.wsi_id}) contains a non-finite value")
            self._groups.setdefault(rec.wsi_id, []).append(
                FeatureVector(rec.wsi_id, int(rec.patch_index), values))
        if not allow_partial and self._groups:
            counts = {len(v) for v in self._groups.values()}
            if len(counts) > 1:
                raise ValueError(f"unequal patch counts per slide: {sorted(counts)}")
        self._matrices = {}

    @classmethod
    def from_arrays(cls, arrays):
        """Build a store from ``{wsi_id: (n_patches, d) array}``."""
        dims = {np.asarray(a).shape[1] for a in arrays.values()}
        if len(dims) > 1:
            raise DimensionMismatch(f"mixed dimensions {sorted(dims)}")
        dim = dims.pop() if dims else 0
        records = [FeatureVector(wsi, i, row)
                   for wsi, a in arrays.items() for i, row in enumerate(np.asarray(a, float))]
        return cls(dim, records)

    @property
    def wsi_ids(self):
        return list(self._groups)

    def __contains__(self, wsi_id):
        return wsi_id in self._groups

    def __len__(self):
        return sum(len(v) for v in self._groups.values())

    def __eq__(self, other):
        if not isinstance(other, FeatureStore):
            return NotImplemented
        return self.dimension == other.dimension and self._groups == other._groups

    __hash__ = None

    def records(self):
        for group in self._groups.values():
            yield from group

    def features(self, wsi_id):
        return list(self._groups[wsi_id])

    def matrix(self, wsi_id):
        """All descriptors of one slide as a read-only ``(n_patches, d)`` array."""
        m = self._matrices.get(wsi_id)
        if m is None:
            m = np.vstack([r.values for r in self._groups[wsi_id]])
            m.flags.writeable = False
            self._matrices[wsi_id] = m
        return m


def extract_handcrafted(patch, wsi_id=None, patch_index=0):
    """120-dim color/gradient descriptor of an RGB patch.

    Layout: three 32-bin channel histograms, one 16-bin histogram of luminance
    gradient magnitude (central differences on interior pixels), then
    per-channel mean and std followed by luminance mean and std. Histograms are
    L1-normalized; means are divided by 255 and stds by 127.5.
    """
    pixels = getattr(patch, "pixels", patch)
    if wsi_id is None:
        wsi_id = getattr(patch, "wsi_id", "")
    img = np.asarray(pixels)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 3 or img.shape[1] < 3:
        raise ValueError(f"expected an RGB patch of at least 3x3, got shape {img.shape}")
    img = img.astype(np.uint8, copy=False)
    n = img.shape[0] * img.shape[1]

    hists = [np.bincount((img[..., c] >> 3).ravel(), minlength=COLOR_BINS) / n
             for c in range(3)]

    rgb = img.astype(np.float64)
    lum = rgb @ LUMA
    gx = (lum[1:-1, 2:] - lum[1:-1, :-2]) / 2.0
    gy = (lum[2:, 1:-1] - lum[:-2, 1:-1]) / 2.0
    mag = np.hypot(gx, gy).ravel()
    gbin = np.minimum((mag * (GRADIENT_BINS / GRADIENT_RANGE)).astype(np.int64),
                      GRADIENT_BINS - 1)
    ghist = np.bincount(gbin, minlength=GRADIENT_BINS) / mag.size

    flat = rgb.reshape(-1, 3)
    stats = np.concatenate([
        flat.mean(axis=0) / 255.0,
        flat.std(axis=0) / 127.5,
        [lum.mean() / 255.0, lum.std() / 127.5],
    ])
    values = np.concatenate(hists + [ghist, stats])
    return FeatureVector(wsi_id, patch_index, values)


def export_features(store, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"#dim={store.dimension}\n")
        for rec in store.records():
            vals = ",".join(repr(float(v)) for v in rec.values)
            fh.write(f"{rec.wsi_id}\t{rec.patch_index}\t{vals}\n")


def import_features(path, allow_partial=False):
    """Read a feature-store file; the dimension comes from the first record."""
    records = []
    dim = None
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("#dim="):
            raise FeatureParseError("missing '#dim=<d>' header", line=1)
        try:
            declared = int(header[5:].strip())
        except ValueError:
            raise FeatureParseError("malformed dimension header", line=1) from None
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\r\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise FeatureParseError("expected 3 tab-separated fields", line=lineno)
            wsi_id, idx, vals = parts
            try:
                idx = int(idx)
                values = np.array([float(v) for v in vals.split(",")], dtype=np.float64)
            except ValueError as exc:
                raise FeatureParseError(str(exc), line=lineno) from None
            if dim is None:
                dim = values.size
            if values.size != dim:
                raise DimensionMismatch(
                    f"record {len(records)} (line {lineno}) has dimension {values.size}, "
                    f"expected {dim}", index=len(records))
            if not all(math.isfinite(v) for v in values):
                raise NonFiniteValue(f"line {lineno}: non-finite value")
            records.append(FeatureVector(wsi_id, idx, values))
    if dim is None:
        dim = declared
    elif dim != declared:
        raise DimensionMismatch(f"header declares dim={declared}, records have {dim}")
    return FeatureStore(dim, records, allow_partial=allow_partial)
