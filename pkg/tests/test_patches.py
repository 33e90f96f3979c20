import numpy as np
import pytest
from scipy import stats

from histobof.patches import (
    InsufficientTissue, OutOfBounds, TissueMaskParams, dump_patches, sample_patches,
    tissue_coverage, tissue_mask,
)


def _solid(rgb, size=64):
    return np.tile(np.array(rgb, dtype=np.uint8), (size, size, 1))


def test_white_is_background():
    assert not tissue_mask(_solid((255, 255, 255))).any()


def test_pink_is_tissue():
    assert tissue_mask(_solid((200, 120, 160))).all()


def test_dark_gray_is_tissue_light_gray_is_not():
    assert tissue_mask(_solid((100, 100, 100))).all()
    assert not tissue_mask(_solid((240, 240, 240))).any()


def test_mask_thresholds_are_strict():
    # saturation exactly at the threshold is not tissue: (250-230)/250 = 0.08
    img = _solid((250, 230, 230))
    assert not tissue_mask(img, TissueMaskParams(0.08, 225)).any()
    assert tissue_mask(img, TissueMaskParams(0.079, 225)).all()
    assert not tissue_mask(_solid((225, 225, 225))).any()
    assert tissue_mask(_solid((224, 224, 224))).all()


def test_black_pixels_do_not_divide_by_zero():
    assert tissue_mask(_solid((0, 0, 0))).all()


def test_coverage_full_and_half():
    mask = np.zeros((20, 20), dtype=bool)
    mask[:, :10] = True
    assert tissue_coverage(mask, 0, 0, 10) == 1.0
    assert tissue_coverage(mask, 5, 0, 10) == 0.5
    assert tissue_coverage(mask, 10, 10, 10) == 0.0


def test_coverage_matches_recount(rng):
    mask = rng.random((50, 60)) < 0.4
    for _ in range(50):
        size = int(rng.integers(1, 40))
        x = int(rng.integers(0, 60 - size + 1))
        y = int(rng.integers(0, 50 - size + 1))
        count = sum(mask[y + i, x + j] for i in range(size) for j in range(size))
        assert tissue_coverage(mask, x, y, size) == count / size**2


def test_coverage_out_of_bounds():
    mask = np.ones((10, 10), dtype=bool)
    with pytest.raises(OutOfBounds):
        tissue_coverage(mask, 5, 0, 6)
    with pytest.raises(OutOfBounds):
        tissue_coverage(mask, -1, 0, 2)


def test_full_tissue_512():
    img = _solid((200, 120, 160), 600)
    patches = sample_patches(img, 512, 256, 0.75, seed=3)
    assert len(patches) == 512
    assert all(p.tissue_coverage == 1.0 for p in patches)
    assert all(0 <= p.x <= 600 - 256 and 0 <= p.y <= 600 - 256 for p in patches)
    assert all(p.pixels.shape == (256, 256, 3) for p in patches)


def test_blank_image_insufficient():
    with pytest.raises(InsufficientTissue) as err:
        sample_patches(_solid((255, 255, 255), 300), 4, 256, 0.75, seed=0)
    assert err.value.found == 0


def test_acceptance_filter_and_determinism(rng):
    img = np.full((400, 400, 3), 255, dtype=np.uint8)
    img[:, :220] = (200, 120, 160)
    img[300:, :] = (200, 120, 160)
    mask = tissue_mask(img)
    a = sample_patches(img, 100, 64, 0.75, seed=11)
    b = sample_patches(img, 100, 64, 0.75, seed=11)
    assert [(p.x, p.y) for p in a] == [(p.x, p.y) for p in b]
    for p in a:
        assert p.tissue_coverage >= 0.75
        assert p.tissue_coverage == tissue_coverage(mask, p.x, p.y, 64)
    c = sample_patches(img, 100, 64, 0.75, seed=12)
    assert [(p.x, p.y) for p in a] != [(p.x, p.y) for p in c]


def test_partial_reports_found_count():
    img = np.full((300, 300, 3), 255, dtype=np.uint8)
    img[:100, :100] = (200, 120, 160)
    with pytest.raises(InsufficientTissue) as err:
        sample_patches(img, 10_000, 100, 0.5, seed=0, max_attempts=2000)
    assert 0 < err.value.found < 10_000


def test_corner_uniformity():
    size, patch = 300, 60
    img = _solid((200, 120, 160), size)
    ps = sample_patches(img, 10_000, patch, 0.75, seed=5)
    span = size - patch + 1
    gx = np.array([p.x for p in ps]) * 4 // span
    gy = np.array([p.y for p in ps]) * 4 // span
    counts = np.bincount(gy * 4 + gx, minlength=16)
    # the 241 valid offsets do not split evenly into four bands
    edges = [i * span / 4 for i in range(5)]
    widths = np.array([sum(1 for v in range(span) if edges[i] <= v < edges[i + 1])
                       for i in range(4)])
    expected = np.outer(widths, widths).ravel() / span**2 * len(ps)
    chi2 = ((counts - expected) ** 2 / expected).sum()
    assert chi2 < stats.chi2.ppf(0.999, df=15)


def test_dump_patches(tmp_path):
    ps = sample_patches(_solid((200, 120, 160), 100), 3, 32, 0.5, seed=1, wsi_id="w")
    dump_patches(ps, tmp_path)
    lines = (tmp_path / "index.csv").read_text().splitlines()
    assert len(lines) == 4
    assert (tmp_path / f"w_0_{ps[0].x}_{ps[0].y}.png").exists()
