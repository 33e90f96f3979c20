import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from histobof.augmentation import AugmentationPolicy
from histobof.features import FeatureStore
from histobof.harness import (
    AbortedAfterSplitFailures, Classifier, ExperimentConfig, LeakageAudit, LeakageError,
    MissingFeatures, SplitRun, emit_report, grid_configs, load_results, modality_records,
    run_experiment, run_grid, run_single_split, split_seed,
)
from histobof.manifest import Label, Modality, WsiRecord

N_PATCH = 16


def _corpus(modalities=(Modality.PARAFFIN,), n_per_class=20, signal=3.0, seed=0, dim=4):
    """Records plus a store whose patch features shift with the class by ``signal``."""
    rng = np.random.default_rng(seed)
    records, arrays = [], {}
    for m in modalities:
        for label in Label:
            for i in range(n_per_class):
                w = f"{m.value}_{label.value}_{i:02d}"
                records.append(WsiRecord(w, f"{w}.png", m, label))
                arrays[w] = rng.standard_normal((N_PATCH, dim)) + signal * label.sign
    return records, FeatureStore.from_arrays(arrays)


def _config(**kw):
    base = dict(n_patches=N_PATCH, repetitions=4, k_clusters=4, c_grid=(0.1, 1.0, 10.0))
    base.update(kw)
    return ExperimentConfig(**base)


def test_forty_slides_give_eight_test_slides():
    records, store = _corpus()
    run = SplitRun(records, store, split_seed(0, 0), n_patches=N_PATCH)
    assert len(run.split.test) == 8 and len(run.split.train) == 32
    result = run_experiment(_config(), records, store)
    for a in result.per_split_accuracy:
        assert 0.0 <= a <= 1.0 and (a * 8) == int(a * 8)


def test_separable_case_is_perfect():
    records, store = _corpus(signal=10.0)
    for clf in Classifier:
        res = run_experiment(_config(classifier=clf), records, store)
        assert res.per_split_accuracy == (1.0,) * 4


def test_permuted_labels_are_near_chance():
    records, store = _corpus(signal=3.0, seed=1)
    rng = np.random.default_rng(2)
    flipped = rng.permutation([r.label for r in records])
    shuffled = [replace(r, label=l) for r, l in zip(records, flipped)]
    res = run_experiment(_config(repetitions=32), shuffled, store)
    assert abs(res.mean_accuracy - 0.5) <= 0.15


def test_repetition_count_and_single_std():
    records, store = _corpus()
    assert len(run_experiment(_config(repetitions=32), records, store).per_split_accuracy) == 32
    one = run_experiment(_config(repetitions=1), records, store)
    assert one.std_accuracy == 0.0


def test_deterministic_records():
    records, store = _corpus(signal=0.7)
    a = run_experiment(_config(), records, store)
    b = run_experiment(_config(), records, store)
    assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())


def test_split_seeds_are_paired_across_configs():
    records, store = _corpus(signal=0.7)
    audits = {}
    for cfg in grid_configs([Modality.PARAFFIN], _config(), k_values=(4, 8)):
        audit = LeakageAudit()
        run_experiment(cfg, records, store, audit)
        audits[cfg.cell] = [audit.splits[(cfg.cell, split_seed(0, rep))] for rep in range(4)]
    first = next(iter(audits.values()))
    assert all(v == first for v in audits.values())
    assert len({s for s in first}) == 4


def test_grid_sizes():
    records, store = _corpus(modalities=tuple(Modality), n_per_class=5)
    assert len(grid_configs(list(Modality))) == 72
    per_block = {}
    for cfg in grid_configs(list(Modality)):
        key = (cfg.modality, cfg.classifier)
        per_block[key] = per_block.get(key, 0) + 1
    assert set(per_block.values()) == {12}
    out = run_grid(records, store, base_config=_config(repetitions=1),
                   modalities=[Modality.PARAFFIN], k_values=(4,), augmentations=("none",),
                   classifiers=(Classifier.LINEAR,))
    assert len(out) == 1


def test_grid_covers_present_modalities():
    records, store = _corpus(modalities=tuple(Modality), n_per_class=5)
    recs = run_grid(records, store, base_config=_config(repetitions=1), k_values=(2, 3, 4, 5))
    assert len(recs) == 72
    assert [r.config.cell for r in recs] == [c.cell for c in grid_configs(
        list(Modality), _config(repetitions=1), k_values=(2, 3, 4, 5))]


def test_grid_matches_single_experiments():
    records, store = _corpus(signal=0.6, n_per_class=10)
    cfgs = grid_configs([Modality.PARAFFIN], _config(), k_values=(4,),
                        augmentations=("none", "aug1"))
    grid = run_grid(records, store, base_config=_config(), k_values=(4,),
                    augmentations=("none", "aug1"))
    for cfg, rec in zip(cfgs, grid):
        assert rec.per_split_accuracy == run_experiment(cfg, records, store).per_split_accuracy


def test_parallel_grid_equals_serial():
    records, store = _corpus(modalities=(Modality.FROZEN, Modality.PARAFFIN), signal=0.6,
                             n_per_class=10)
    kw = dict(base_config=_config(repetitions=2), k_values=(4,), augmentations=("aug2",))
    serial = run_grid(records, store, jobs=1, **kw)
    parallel = run_grid(records, store, jobs=2, **kw)
    assert [r.to_dict() for r in serial] == [r.to_dict() for r in parallel]


def test_augmented_training_shapes():
    records, store = _corpus(n_per_class=20)
    run = SplitRun(records, store, split_seed(0, 0), n_patches=N_PATCH)
    X, y, groups, hists = run.training_set(4, AugmentationPolicy.aug1())
    assert X.shape == (32 * 8, 4) and len(set(groups.tolist())) == 32
    assert all(h.patch_count == 12 for h in hists)
    assert all(abs(h.bins.sum() - 1.0) <= 1e-9 for h in hists)
    Xt, yt, th = run.test_set(4)
    assert Xt.shape == (8, 4) and all(h.patch_count == N_PATCH for h in th)


def test_report_shape_and_roundtrip(tmp_path):
    records, store = _corpus(modalities=tuple(Modality), n_per_class=5)
    recs = run_grid(records, store, base_config=_config(repetitions=2), k_values=(2, 3, 4, 5))
    json_path, csv_path = emit_report(recs, tmp_path, {"note": "test"})
    rows = list(csv.reader(open(csv_path)))
    assert len(rows) == 13 and all(len(r) == 2 + 6 for r in rows)
    assert "±" in rows[1][2]
    back, doc = load_results(json_path)
    assert doc["run_config"] == {"note": "test"} and doc["std_kind"] == "population"
    for r in back:
        assert abs(np.mean(r.per_split_accuracy) - r.mean_accuracy) <= 1e-12
    assert [r.config for r in back] == [r.config for r in recs]

    emit_report(recs[:1], tmp_path / "one")
    assert len(list(csv.reader(open(tmp_path / "one" / "results.csv")))) == 2


def test_report_rejects_empty(tmp_path):
    with pytest.raises(ValueError):
        emit_report([], tmp_path)


def test_no_leakage_over_grid():
    records, store = _corpus(modalities=(Modality.FROZEN, Modality.PARAFFIN), n_per_class=10)
    audit = LeakageAudit()
    recs = run_grid(records, store, base_config=_config(repetitions=2), k_values=(2, 4),
                    audit=audit)
    assert audit.checks["codebook"] == 2 * 2 * 2  # modality x rep x k
    assert audit.checks["svm"] == len(recs) * 2
    assert len(audit.splits) == 4


def test_leakage_is_detected():
    records, store = _corpus()
    run = SplitRun(records, store, split_seed(0, 0), n_patches=N_PATCH, audit=LeakageAudit())
    # smuggle a test slide into the training list
    run.split = replace(run.split, train=run.split.train + run.split.test[:1])
    with pytest.raises(LeakageError):
        run.evaluate(4, AugmentationPolicy.none(), Classifier.LINEAR, (1.0,))


def test_missing_features_and_aborts():
    records, store = _corpus()
    with pytest.raises(MissingFeatures):
        modality_records(records + [WsiRecord("ghost", "g.png", Modality.PARAFFIN,
                                              Label.PAPILLARY)], Modality.PARAFFIN, store)
    with pytest.raises(AbortedAfterSplitFailures) as err:
        run_experiment(_config(n_patches=N_PATCH + 1), records, store)
    assert err.value.n == 4
    with pytest.raises(AbortedAfterSplitFailures):
        run_grid(records, store, base_config=_config(n_patches=N_PATCH + 1), k_values=(4,))


def test_run_single_split_matches_experiment():
    records, store = _corpus(signal=0.6)
    cfg = _config()
    res = run_experiment(cfg, records, store)
    assert run_single_split(cfg, records, store, split_seed(0, 2)) == res.per_split_accuracy[2]


def test_config_dict_roundtrip():
    cfg = _config(augmentation=AugmentationPolicy.custom(0.6, 3), classifier=Classifier.RBF,
                  gamma=0.5)
    assert ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
