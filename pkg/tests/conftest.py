import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus_features():
    """Paraffin descriptors of a 3-per-class synthetic corpus, 64 small patches each."""
    from histobof.features import FeatureStore
    from histobof.harness import slide_features
    from histobof.manifest import Label, Modality
    from histobof.synthetic import CorpusSpec, generate_wsi, wsi_id_for

    spec = CorpusSpec(n_per_class_per_modality=3, image_size=512, seed=5)
    arrays = {}
    for label in Label:
        for i in range(3):
            w = wsi_id_for(label, Modality.PARAFFIN, i)
            arrays[w] = slide_features(generate_wsi(label, Modality.PARAFFIN, spec, i), w,
                                       n_patches=64, patch_size=64, seed=1)
    return FeatureStore.from_arrays(arrays)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
