"""Slide-level feature augmentation by patch subsampling."""

import enum
import math
from dataclasses import dataclass

import numpy as np

from .bof import assign_all, histogram_from_assignments
from .errors import EmptyFeatureList, HistoBofError
from .seeding import make_rng


class InvalidPolicy(HistoBofError, ValueError):
    pass


class AugMode(enum.Enum):
    NONE = "none"
    AUG1 = "aug1"
    AUG2 = "aug2"
    CUSTOM = "custom"


_FIXED_RATIOS = {AugMode.NONE: 1.0, AugMode.AUG1: 0.75, AugMode.AUG2: 0.5}


@dataclass(frozen=True)
class AugmentationPolicy:
    mode: AugMode = AugMode.NONE
    repeats: int = 1
    r_patch: float = 1.0

    def __post_init__(self):
        if self.mode in _FIXED_RATIOS and self.r_patch != _FIXED_RATIOS[self.mode]:
            raise InvalidPolicy(f"{self.mode.value} requires r_patch={_FIXED_RATIOS[self.mode]}")
        if self.mode is AugMode.NONE and self.repeats != 1:
            raise InvalidPolicy("policy 'none' has exactly one repeat")
        if not 0.0 < self.r_patch <= 1.0:
            raise InvalidPolicy(f"r_patch must be in (0, 1], got {self.r_patch}")
        if self.repeats < 1:
            raise InvalidPolicy("repeats must be at least 1")

    @classmethod
    def none(cls):
        return cls(AugMode.NONE, 1, 1.0)

    @classmethod
    def aug1(cls, repeats=8):
        return cls(AugMode.AUG1, repeats, 0.75)

    @classmethod
    def aug2(cls, repeats=8):
        return cls(AugMode.AUG2, repeats, 0.5)

    @classmethod
    def custom(cls, r_patch, repeats=8):
        return cls(AugMode.CUSTOM, repeats, r_patch)

    @classmethod
    def parse(cls, name):
        try:
            return {"none": cls.none, "aug1": cls.aug1, "aug2": cls.aug2}[name.lower()]()
        except KeyError:
            raise InvalidPolicy(f"unknown augmentation {name!r}") from None

    @property
    def name(self):
        if self.mode is AugMode.CUSTOM:
            return f"custom{self.r_patch:g}x{self.repeats}"
        return self.mode.value


def expected_multiplicity(policy):
    return policy.repeats


def subset_size(policy, n):
    return max(1, math.floor(policy.r_patch * n))


def augmented_from_assignments(labels, k, policy, seed, wsi_id=""):
    """Augmented histograms for a slide whose patches are already assigned."""
    labels = np.asarray(labels)
    n = labels.size
    if n == 0:
        raise EmptyFeatureList(f"no patches for {wsi_id or 'slide'}")
    if policy.mode is AugMode.NONE:
        return [histogram_from_assignments(labels, k, wsi_id)]
    m = subset_size(policy, n)
    out = []
    for r in range(policy.repeats):
        idx = make_rng(seed, "round", r).choice(n, size=m, replace=False)
        out.append(histogram_from_assignments(labels[idx], k, wsi_id))
    return out


def augmented_histograms(codebook, wsi_features, policy, seed):
    """``policy.repeats`` histograms, each from a random subset of the slide's patches.

    Each round draws ``floor(r_patch * N)`` patches without replacement using a
    seed derived from ``seed`` and the round index. The ``none`` policy returns
    the single full histogram.
    """
    feats = list(wsi_features)
    if not feats:
        raise EmptyFeatureList("empty feature list")
    labels = assign_all(codebook, feats)
    return augmented_from_assignments(labels, codebook.k, policy, seed, feats[0].wsi_id)
