"""Synthetic two-class, two-modality slide corpus.

Slides are drawn as a lobed tissue region on a near-white background. The
tissue is a pink stroma field sprinkled with dark elliptical "nuclei" whose
density, size and hue depend on the class. Frozen slides are the paraffin
rendering of the same clean texture passed through :func:`apply_degradation`.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import HistoBofError
from .manifest import Label, Modality, WsiRecord, write_manifest
from .seeding import derive_seed, make_rng

BACKGROUND = 253.0
STROMA_RGB = np.array([232.0, 168.0, 200.0])
NUCLEUS_VALUE = 0.45
CLEAR_VALUE = 0.8


class InvalidSpec(HistoBofError, ValueError):
    pass


@dataclass(frozen=True)
class ClassTexture:
    blob_density: float  # nuclei per megapixel of tissue
    blob_radius_px: float
    base_hue: float  # degrees
    # radius fraction of a pale, optically clear nuclear centre (0: solid nuclei)
    clear_center: float = 0.0


@dataclass(frozen=True)
class DegradationParams:
    gaussian_blur_sigma: float = 2.0
    additive_noise_sigma: float = 3.0
    contrast_scale: float = 0.9
    hole_density: float = 8.0  # holes per megapixel of image
    hole_radius_px: float = 36.0

    def validate(self):
        for name in ("gaussian_blur_sigma", "additive_noise_sigma", "hole_density",
                     "hole_radius_px"):
            if getattr(self, name) < 0:
                raise InvalidSpec(f"{name} must be non-negative")
        if not 0.0 < self.contrast_scale <= 1.0:
            raise InvalidSpec("contrast_scale must be in (0, 1]")


IDENTITY_DEGRADATION = DegradationParams(0.0, 0.0, 1.0, 0.0, 0.0)


def _default_textures():
    return {
        # papillary: denser nuclei with pale, optically clear centres
        Label.PAPILLARY: ClassTexture(blob_density=1500.0, blob_radius_px=6.0, base_hue=280.0,
                                      clear_center=0.6),
        Label.FOLLICULAR: ClassTexture(blob_density=900.0, blob_radius_px=6.0, base_hue=280.0),
    }


@dataclass(frozen=True)
class CorpusSpec:
    n_per_class_per_modality: int = 20
    image_size: int = 2048
    class_texture_params: dict = field(default_factory=_default_textures)
    frozen_degradation: DegradationParams = DegradationParams()
    seed: int = 0
    # relative slide-to-slide spread of stain and nuclei statistics
    slide_variability: float = 0.25

    def validate(self):
        if self.n_per_class_per_modality < 1:
            raise InvalidSpec("n_per_class_per_modality must be at least 1")
        if self.image_size < 512:
            raise InvalidSpec("image_size must be at least 512")
        if set(self.class_texture_params) != set(Label):
            raise InvalidSpec("texture parameters needed for every class")
        for tex in self.class_texture_params.values():
            if tex.blob_density < 0 or tex.blob_radius_px <= 0:
                raise InvalidSpec("blob density must be >= 0 and radius > 0")
            if not 0.0 <= tex.clear_center < 1.0:
                raise InvalidSpec("clear_center must be in [0, 1)")
        if self.slide_variability < 0:
            raise InvalidSpec("slide_variability must be non-negative")
        self.frozen_degradation.validate()


def image_seed(spec, label, modality, index):
    return derive_seed(spec.seed, label.value, modality.value, index)


def _smooth_field(rng, shape, scale):
    """Zero-mean, unit-std random field with correlation length ~``scale`` px."""
    coarse = (max(2, shape[0] // scale + 2), max(2, shape[1] // scale + 2))
    small = rng.standard_normal(coarse)
    f = ndimage.zoom(small, (shape[0] / coarse[0], shape[1] / coarse[1]), order=3)
    f = f[:shape[0], :shape[1]]
    f = f - f.mean()
    sd = f.std()
    return f / sd if sd > 0 else f


def _tissue_region(rng, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    cx, cy = size / 2 + rng.uniform(-0.04, 0.04, 2) * size
    theta = np.arctan2(yy - cy, xx - cx)
    rad = np.hypot(xx - cx, yy - cy)
    lobes = np.ones_like(theta)
    for m in range(2, 6):
        lobes += rng.uniform(0.0, 0.12 / m * 2) * np.cos(m * theta + rng.uniform(0, 2 * np.pi))
    target = rng.uniform(0.5, 0.65)
    r0 = math.sqrt(target * size * size / math.pi)
    for _ in range(3):
        mask = rad < r0 * lobes
        frac = mask.mean()
        r0 *= math.sqrt(target / frac)
    return rad < r0 * lobes


def _hsv_to_rgb(h, s, v):
    h = (h % 360.0) / 60.0
    c = v * s
    x = c * (1 - abs(h % 2 - 1))
    m = v - c
    r, g, b = [(c, x, 0), (x, c, 0), (0, c, x), (0, x, c), (x, 0, c), (c, 0, x)][int(h) % 6]
    return np.array([r + m, g + m, b + m]) * 255.0


def render_clean(label, spec, index):
    """Clean (paraffin-quality) slide and its ground-truth tissue mask."""
    spec.validate()
    if not 0 <= index < spec.n_per_class_per_modality:
        raise InvalidSpec(f"index {index} outside [0, {spec.n_per_class_per_modality})")
    size = spec.image_size
    tex = spec.class_texture_params[label]
    var = spec.slide_variability
    rng = make_rng(image_seed(spec, label, Modality.PARAFFIN, index))

    region = _tissue_region(rng, size)

    # slide-level nuisance: stain strength, hue drift, nuclei statistics
    stain = 1.0 + 0.08 * var * rng.standard_normal()
    hue_shift = 24.0 * var * rng.standard_normal()
    density = tex.blob_density * math.exp(0.8 * var * rng.standard_normal())
    radius = tex.blob_radius_px * math.exp(0.4 * var * rng.standard_normal())

    shade = 1.0 + 0.04 * _smooth_field(rng, (size, size), 128)
    stroma = (STROMA_RGB - 255.0) * stain
    img = np.empty((size, size, 3), dtype=np.float32)
    img[...] = 255.0 + stroma[None, None, :] * shade[..., None]
    img += rng.normal(0.0, 3.0, size=img.shape).astype(np.float32)

    # patchy nuclei placement: density follows a smooth positive field
    patchiness = np.exp(0.5 * _smooth_field(rng, (size, size), 256))
    tissue_mp = region.sum() / 1e6
    n_blobs = rng.poisson(density * tissue_mp)
    accept_p = patchiness / patchiness.max()
    ys, xs = [], []
    while len(ys) < n_blobs:
        m = 2 * (n_blobs - len(ys)) + 16
        cy = rng.integers(0, size, m)
        cx = rng.integers(0, size, m)
        keep = region[cy, cx] & (rng.random(m) < accept_p[cy, cx])
        ys.extend(cy[keep].tolist())
        xs.extend(cx[keep].tolist())
    ys, xs = ys[:n_blobs], xs[:n_blobs]

    blob_mask = np.zeros((size, size), dtype=bool)
    for cy, cx in zip(ys, xs):
        r = radius * rng.uniform(0.7, 1.3)
        aspect = rng.uniform(0.55, 1.0)
        ang = rng.uniform(0, np.pi)
        hue = tex.base_hue + hue_shift + rng.normal(0, 5)
        sat = min(0.95, 0.55 * stain)
        value = NUCLEUS_VALUE + rng.normal(0, 0.04)
        if tex.clear_center > 0:
            # dark rim around a pale core, same mean value as a solid nucleus
            a = tex.clear_center ** 2
            rim = (value - a * CLEAR_VALUE) / (1 - a)
            color = _hsv_to_rgb(hue, sat, rim)
            core = _hsv_to_rgb(hue, 0.35 * sat, CLEAR_VALUE)
        else:
            color = _hsv_to_rgb(hue, sat, value)
        rr = int(math.ceil(r)) + 1
        y0, y1 = max(0, cy - rr), min(size, cy + rr + 1)
        x0, x1 = max(0, cx - rr), min(size, cx + rr + 1)
        yy, xx = np.mgrid[y0:y1, x0:x1]
        dy, dx = yy - cy, xx - cx
        u = dx * math.cos(ang) + dy * math.sin(ang)
        v = -dx * math.sin(ang) + dy * math.cos(ang)
        rho = (u / r) ** 2 + (v / (r * aspect)) ** 2
        inside = (rho <= 1.0) & region[y0:y1, x0:x1]
        img[y0:y1, x0:x1][inside] = color
        if tex.clear_center > 0:
            img[y0:y1, x0:x1][inside & (rho <= tex.clear_center ** 2)] = core
        blob_mask[y0:y1, x0:x1] |= inside

    bg = BACKGROUND + rng.normal(0.0, 0.6, size=(size, size)).astype(np.float32)
    img[~region] = bg[~region][:, None]
    out = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return out, region


def apply_degradation(image, params, seed):
    """Frozen-section artifacts, applied in a fixed order.

    Gaussian blur, then linear contrast compression toward 128, then additive
    Gaussian noise (clipped to [0, 255]), then near-white circular holes placed
    uniformly over the image at ``hole_density`` per megapixel.
    """
    params.validate()
    img = np.asarray(image)
    rng = make_rng(seed)
    out = img.astype(np.float64)
    if params.gaussian_blur_sigma > 0:
        out = ndimage.gaussian_filter(out, sigma=(params.gaussian_blur_sigma,) * 2 + (0,),
                                      mode="nearest")
    if params.contrast_scale != 1.0:
        out = 128.0 + params.contrast_scale * (out - 128.0)
    if params.additive_noise_sigma > 0:
        out += rng.normal(0.0, params.additive_noise_sigma, size=out.shape)
    out = np.clip(np.rint(out), 0, 255)

    h, w = out.shape[:2]
    n_holes = rng.poisson(params.hole_density * h * w / 1e6) if params.hole_radius_px > 0 else 0
    for _ in range(n_holes):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = params.hole_radius_px * rng.uniform(0.6, 1.4)
        y0, y1 = max(0, int(cy - r)), min(h, int(cy + r) + 2)
        x0, x1 = max(0, int(cx - r)), min(w, int(cx + r) + 2)
        yy, xx = np.mgrid[y0:y1, x0:x1]
        inside = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        out[y0:y1, x0:x1][inside] = rng.integers(251, 255)
    return out.astype(np.uint8)


def generate_wsi(label, modality, spec, index):
    """8-bit RGB slide for one (class, modality, index); deterministic in ``spec.seed``."""
    if modality is Modality.TRANSLATED:
        raise InvalidSpec("translated slides come from an external translation model")
    clean, _ = render_clean(label, spec, index)
    if modality is Modality.PARAFFIN:
        return clean
    return apply_degradation(clean, spec.frozen_degradation,
                             image_seed(spec, label, Modality.FROZEN, index))


def wsi_id_for(label, modality, index):
    return f"{modality.value}_{label.value}_{index:03d}"


def generate_corpus(spec, out_dir, modalities=(Modality.FROZEN, Modality.PARAFFIN)):
    """Write every slide as PNG plus ``manifest.csv``; returns the manifest path."""
    spec.validate()
    out_dir = Path(out_dir)
    records = []
    for modality in modalities:
        (out_dir / modality.value).mkdir(parents=True, exist_ok=True)
    for label in (Label.PAPILLARY, Label.FOLLICULAR):
        for index in range(spec.n_per_class_per_modality):
            clean, _ = render_clean(label, spec, index)
            for modality in modalities:
                if modality is Modality.PARAFFIN:
                    img = clean
                elif modality is Modality.FROZEN:
                    img = apply_degradation(clean, spec.frozen_degradation,
                                            image_seed(spec, label, modality, index))
                else:
                    raise InvalidSpec(f"cannot synthesize modality {modality.value}")
                wsi_id = wsi_id_for(label, modality, index)
                rel = f"{modality.value}/{wsi_id}.png"
                Image.fromarray(img).save(out_dir / rel, compress_level=3)
                records.append(WsiRecord(wsi_id, rel, modality, label))
    order = {m: i for i, m in enumerate(modalities)}
    records.sort(key=lambda r: order[r.modality])
    manifest = out_dir / "manifest.csv"
    write_manifest(records, manifest)
    return manifest
