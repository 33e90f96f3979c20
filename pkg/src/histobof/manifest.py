"""Slide manifests and seeded train/test splits.

A manifest is a UTF-8 CSV file with the header ``wsi_id,image_path,modality,label``.
Lines starting with ``#`` are comments. ``image_path`` is relative to the
directory containing the manifest.
"""

import csv
import enum
import math
from dataclasses import dataclass
from pathlib import Path

from .errors import HistoBofError
from .seeding import make_rng

HEADER = ("wsi_id", "image_path", "modality", "label")


class Modality(enum.Enum):
    FROZEN = "frozen"
    PARAFFIN = "paraffin"
    TRANSLATED = "translated"


class Label(enum.Enum):
    PAPILLARY = "papillary"
    FOLLICULAR = "follicular"

    @property
    def sign(self):
        """SVM target: papillary is +1, follicular is -1."""
        return 1 if self is Label.PAPILLARY else -1


class ManifestError(HistoBofError):
    pass


class MissingFile(ManifestError, FileNotFoundError):
    pass


class ParseError(ManifestError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DuplicateId(ManifestError, ValueError):
    def __init__(self, wsi_id, line=None):
        super().__init__(f"line {line}: duplicate wsi_id {wsi_id!r}")
        self.wsi_id = wsi_id
        self.line = line


class UnknownModality(ManifestError, ValueError):
    def __init__(self, value, line=None):
        super().__init__(f"line {line}: unknown modality {value!r}")
        self.value = value
        self.line = line


class UnknownLabel(ManifestError, ValueError):
    def __init__(self, value, line=None):
        super().__init__(f"line {line}: unknown label {value!r}")
        self.value = value
        self.line = line


class TooFewRecords(HistoBofError, ValueError):
    pass


@dataclass(frozen=True)
class WsiRecord:
    wsi_id: str
    image_path: str
    modality: Modality
    label: Label


@dataclass(frozen=True)
class Split:
    train: tuple
    test: tuple
    seed: int
    train_ratio: float


def _data_lines(handle):
    for lineno, line in enumerate(handle, start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        yield lineno, line


def load_manifest(path):
    """Read a manifest file into a list of :class:`WsiRecord`, preserving row order."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"manifest not found: {path}")
    with open(path, encoding="utf-8", newline="") as fh:
        lines = list(_data_lines(fh))
    if not lines:
        raise ParseError("missing header", line=1)

    header_line, header = lines[0]
    fields = next(csv.reader([header]))
    if tuple(f.strip() for f in fields) != HEADER:
        raise ParseError(f"expected header {','.join(HEADER)}", line=header_line)

    records = []
    seen = set()
    for lineno, line in lines[1:]:
        row = next(csv.reader([line]))
        if len(row) != len(HEADER):
            raise ParseError(f"expected {len(HEADER)} fields, got {len(row)}", line=lineno)
        wsi_id, image_path, modality, label = (v.strip() for v in row)
        if not wsi_id:
            raise ParseError("empty wsi_id", line=lineno)
        if wsi_id in seen:
            raise DuplicateId(wsi_id, line=lineno)
        try:
            modality = Modality(modality.lower())
        except ValueError:
            raise UnknownModality(modality, line=lineno) from None
        try:
            label = Label(label.lower())
        except ValueError:
            raise UnknownLabel(label, line=lineno) from None
        seen.add(wsi_id)
        records.append(WsiRecord(wsi_id, image_path, modality, label))
    return records


def write_manifest(records, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HEADER)
        for r in records:
            writer.writerow([r.wsi_id, r.image_path, r.modality.value, r.label.value])


def resolve_image(record, manifest_path):
    return Path(manifest_path).parent / record.image_path


def by_modality(records):
    """Group records by modality, keeping manifest order inside each group."""
    groups = {}
    for r in records:
        groups.setdefault(r.modality, []).append(r)
    return groups


def round_half_up(x):
    return int(math.floor(x + 0.5))


def split_train_test(records, train_ratio, seed):
    """Uniform random (not stratified) split; a pure function of its inputs.

    The permutation comes from a PCG64 generator seeded with ``seed``; the first
    ``round(train_ratio * N)`` permuted records form the training set.
    """
    if not 0.0 < train_ratio < 1.0:
        raise ValueError(f"train_ratio must lie in (0, 1), got {train_ratio}")
    n = len(records)
    n_train = round_half_up(train_ratio * n)
    if n < 2 or n_train == 0 or n_train == n:
        raise TooFewRecords(f"cannot split {n} records with ratio {train_ratio}")
    order = make_rng(seed).permutation(n)
    ids = [records[i].wsi_id for i in order]
    return Split(tuple(ids[:n_train]), tuple(ids[n_train:]), seed, train_ratio)
