"""Evaluation protocol: repeated random splits over the configuration grid.

For every split the codebook is fit on training patches only, training slides
may be augmented, test slides are represented by one full histogram, C is
chosen by grouped inner cross-validation and accuracy is measured on the test
slides. Split seeds depend only on the base seed and repetition index, so
every configuration sees the same partitions.
"""

import csv
import enum
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .augmentation import AugMode, AugmentationPolicy, augmented_from_assignments
from .bof import assign_all, histogram_from_assignments, kmeans_fit
from .errors import HistoBofError
from .features import FeatureStore, extract_handcrafted
from .manifest import Modality, resolve_image, split_train_test
from .patches import sample_patches
from .seeding import derive_seed
from .svm import DEFAULT_C_GRID, Kernel, rbf_gamma_default, select_C, svm_predict, svm_train

log = logging.getLogger(__name__)

K_VALUES = (16, 32, 64, 128)
AUG_NAMES = ("none", "aug1", "aug2")


class Classifier(enum.Enum):
    LINEAR = "linear"
    RBF = "rbf"


class LeakageError(HistoBofError, AssertionError):
    pass


class SplitFailure(HistoBofError, RuntimeError):
    pass


class AbortedAfterSplitFailures(HistoBofError, RuntimeError):
    def __init__(self, n, first):
        super().__init__(f"{n} split(s) failed; first failure: {first}")
        self.n = n
        self.first = first


class MissingFeatures(HistoBofError, ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    modality: Modality = Modality.PARAFFIN
    k_clusters: int = 32
    augmentation: AugmentationPolicy = AugmentationPolicy.none()
    classifier: Classifier = Classifier.LINEAR
    repetitions: int = 32
    train_ratio: float = 0.8
    base_seed: int = 0
    n_patches: int = 512
    patch_size: int = 256
    min_coverage: float = 0.75
    folds: int = 5
    c_grid: tuple = DEFAULT_C_GRID
    gamma: float = None  # None: 1 / (d * mean variance) of the training histograms
    kmeans_max_iter: int = 100
    kmeans_tol: float = 1e-6

    def __post_init__(self):
        if self.repetitions < 1:
            raise ValueError("repetitions must be at least 1")
        if self.k_clusters < 1:
            raise ValueError("k_clusters must be at least 1")

    @property
    def cell(self):
        return (self.modality.value, self.k_clusters, self.augmentation.name,
                self.classifier.value)

    def to_dict(self):
        d = asdict(self)
        d["modality"] = self.modality.value
        d["classifier"] = self.classifier.value
        d["augmentation"] = {"name": self.augmentation.name,
                             "repeats": self.augmentation.repeats,
                             "r_patch": self.augmentation.r_patch}
        d["c_grid"] = list(self.c_grid)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        aug = d["augmentation"]
        mode = AugMode(aug["name"]) if aug["name"] in AUG_NAMES else AugMode.CUSTOM
        d["augmentation"] = AugmentationPolicy(mode, aug["repeats"], aug["r_patch"])
        d["modality"] = Modality(d["modality"])
        d["classifier"] = Classifier(d["classifier"])
        d["c_grid"] = tuple(d["c_grid"])
        return cls(**d)


@dataclass(frozen=True)
class ResultRecord:
    config: ExperimentConfig
    per_split_accuracy: tuple
    mean_accuracy: float
    std_accuracy: float
    wall_time_s: float = field(default=0.0, compare=False)

    @classmethod
    def from_accuracies(cls, config, accuracies, wall_time_s=0.0):
        acc = np.asarray(accuracies, dtype=np.float64)
        return cls(config, tuple(float(a) for a in acc), float(acc.mean()),
                   float(acc.std()), wall_time_s)

    def to_dict(self):
        return {"config": self.config.to_dict(),
                "per_split_accuracy": list(self.per_split_accuracy),
                "mean_accuracy": self.mean_accuracy,
                "std_accuracy": self.std_accuracy}

    @classmethod
    def from_dict(cls, d, wall_time_s=0.0):
        return cls(ExperimentConfig.from_dict(d["config"]), tuple(d["per_split_accuracy"]),
                   d["mean_accuracy"], d["std_accuracy"], wall_time_s)


class LeakageAudit:
    """Records which slides reach codebook fitting and SVM training.

    ``check`` raises :class:`LeakageError` as soon as a test slide shows up.
    """

    def __init__(self):
        self.checks = {"codebook": 0, "svm": 0}
        self.rows_checked = {"codebook": 0, "svm": 0}
        self.splits = {}

    def observe_split(self, key, split):
        self.splits[key] = (tuple(split.train), tuple(split.test))

    def check(self, stage, seen_ids, test_ids):
        seen = list(seen_ids)
        leaked = set(seen) & set(test_ids)
        if leaked:
            raise LeakageError(f"{stage} saw test slides {sorted(leaked)}")
        self.checks[stage] = self.checks.get(stage, 0) + 1
        self.rows_checked[stage] = self.rows_checked.get(stage, 0) + len(seen)

    def merge(self, other):
        for stage, n in other.checks.items():
            self.checks[stage] = self.checks.get(stage, 0) + n
        for stage, n in other.rows_checked.items():
            self.rows_checked[stage] = self.rows_checked.get(stage, 0) + n
        self.splits.update(other.splits)


def split_seed(base_seed, rep):
    return derive_seed(base_seed, "split", rep)


def modality_records(manifest, modality, store=None):
    records = [r for r in manifest if r.modality is modality]
    if store is not None:
        missing = [r.wsi_id for r in records if r.wsi_id not in store]
        if missing:
            raise MissingFeatures(f"no features for {missing[:5]}"
                                  + (" ..." if len(missing) > 5 else ""))
    return records


class SplitRun:
    """One train/test partition of one modality, with per-k codebooks cached."""

    def __init__(self, records, store, seed, train_ratio=0.8, n_patches=512,
                 kmeans_max_iter=100, kmeans_tol=1e-6, audit=None, audit_key=None):
        self.seed = seed
        self.split = split_train_test(records, train_ratio, seed)
        self.labels = {r.wsi_id: r.label.sign for r in records}
        self.store = store
        self.n_patches = n_patches
        self.kmeans_max_iter = kmeans_max_iter
        self.kmeans_tol = kmeans_tol
        self.audit = audit
        if audit is not None:
            audit.observe_split(audit_key if audit_key is not None else seed, self.split)
        self._assignments = {}

    def _matrix(self, wsi_id):
        m = self.store.matrix(wsi_id)
        if m.shape[0] < self.n_patches:
            raise MissingFeatures(
                f"{wsi_id} has {m.shape[0]} patch features, need {self.n_patches}")
        return m[:self.n_patches]

    def assignments(self, k):
        if k not in self._assignments:
            rows = [(w, self._matrix(w)) for w in self.split.train]
            if self.audit is not None:
                self.audit.check("codebook", [w for w, m in rows for _ in range(len(m))],
                                 self.split.test)
            X = np.vstack([m for _, m in rows])
            codebook = kmeans_fit(X, k, seed=derive_seed(self.seed, "kmeans", k),
                                  max_iter=self.kmeans_max_iter, tol=self.kmeans_tol)
            ids = self.split.train + self.split.test
            self._assignments[k] = {w: assign_all(codebook, self._matrix(w)) for w in ids}
        return self._assignments[k]

    def training_set(self, k, policy):
        labels = self.assignments(k)
        rows, y, groups, hists = [], [], [], []
        for g, w in enumerate(self.split.train):
            hs = augmented_from_assignments(labels[w], k, policy,
                                            derive_seed(self.seed, "aug", policy.name, w), w)
            for h in hs:
                rows.append(h.bins)
                y.append(self.labels[w])
                groups.append(g)
                hists.append(h)
        return np.array(rows), np.array(y, dtype=np.float64), np.array(groups), hists

    def test_set(self, k):
        labels = self.assignments(k)
        hists = [histogram_from_assignments(labels[w], k, w) for w in self.split.test]
        y = np.array([self.labels[w] for w in self.split.test], dtype=np.float64)
        return np.array([h.bins for h in hists]), y, hists

    def evaluate(self, k, policy, classifier, c_grid=DEFAULT_C_GRID, folds=5, gamma=None):
        Xtr, ytr, groups, _ = self.training_set(k, policy)
        Xte, yte, _ = self.test_set(k)
        if self.audit is not None:
            self.audit.check("svm", [self.split.train[g] for g in groups], self.split.test)
        if classifier is Classifier.LINEAR:
            kernel = Kernel.linear()
        else:
            kernel = Kernel.rbf(gamma if gamma is not None else rbf_gamma_default(Xtr))
        sel = select_C(Xtr, ytr, c_grid, folds, kernel, derive_seed(self.seed, "cv"),
                       groups=groups)
        model = svm_train(Xtr, ytr, sel.chosen_C, kernel, seed=derive_seed(self.seed, "svm"))
        pred = svm_predict(model, Xte)
        return int(np.sum(pred == yte)) / len(yte)


def _split_run(config, records, store, seed, audit=None, audit_key=None):
    return SplitRun(records, store, seed, config.train_ratio, config.n_patches,
                    config.kmeans_max_iter, config.kmeans_tol, audit, audit_key)


def run_single_split(config, manifest, feature_store, split_seed, audit=None):
    """Test accuracy of one configuration on one seeded train/test split."""
    records = modality_records(manifest, config.modality, feature_store)
    try:
        run = _split_run(config, records, feature_store, split_seed, audit,
                         (config.cell, split_seed))
        return run.evaluate(config.k_clusters, config.augmentation, config.classifier,
                            config.c_grid, config.folds, config.gamma)
    except LeakageError:
        raise
    except Exception as exc:
        raise SplitFailure(f"split seed {split_seed} of {config.cell}: {exc}") from exc


def run_experiment(config, manifest, feature_store, audit=None):
    """``config.repetitions`` splits with seeds derived from ``config.base_seed``."""
    t0 = time.perf_counter()
    accs, failures = [], []
    for rep in range(config.repetitions):
        try:
            accs.append(run_single_split(config, manifest, feature_store,
                                         split_seed(config.base_seed, rep), audit))
        except SplitFailure as exc:
            failures.append(exc)
    if failures:
        raise AbortedAfterSplitFailures(len(failures), failures[0])
    return ResultRecord.from_accuracies(config, accs, time.perf_counter() - t0)


def grid_configs(modalities, base_config=None, k_values=K_VALUES, augmentations=AUG_NAMES,
                 classifiers=tuple(Classifier), only=None):
    """Configurations of the full grid in report order."""
    base = base_config or ExperimentConfig()
    out = []
    for modality in modalities:
        for k in k_values:
            for aug in augmentations:
                for clf in classifiers:
                    cfg = replace(base, modality=modality, k_clusters=k,
                                  augmentation=AugmentationPolicy.parse(aug)
                                  if isinstance(aug, str) else aug,
                                  classifier=Classifier(clf))
                    if only is None or only(cfg):
                        out.append(cfg)
    return out


# worker-process state for parallel grid runs
_WORKER = {}


def _init_worker(manifest, store):
    _WORKER["manifest"] = manifest
    _WORKER["store"] = store


def _run_unit(args):
    """All cells of one modality on one repetition; returns accuracies and audit."""
    modality, rep, configs, manifest, store = args
    if manifest is None:
        manifest, store = _WORKER["manifest"], _WORKER["store"]
    base = configs[0]
    seed = split_seed(base.base_seed, rep)
    audit = LeakageAudit()
    records = modality_records(manifest, modality, store)
    t0 = time.perf_counter()
    results = {}
    try:
        run = _split_run(base, records, store, seed, audit, (modality.value, rep))
        for cfg in configs:
            results[cfg.cell] = run.evaluate(cfg.k_clusters, cfg.augmentation, cfg.classifier,
                                             cfg.c_grid, cfg.folds, cfg.gamma)
    except LeakageError:
        raise
    except Exception as exc:
        return modality, rep, None, f"split {rep} of {modality.value}: {exc!r}", audit, 0.0
    return modality, rep, results, None, audit, time.perf_counter() - t0


def run_grid(manifest, feature_store, base_seed=0, base_config=None, modalities=None,
             k_values=K_VALUES, augmentations=AUG_NAMES, classifiers=tuple(Classifier),
             only=None, jobs=1, audit=None, progress=None):
    """Run every configuration of the grid; records come back in grid order.

    Cells sharing a modality and repetition reuse the same split and codebooks.
    """
    base = replace(base_config or ExperimentConfig(), base_seed=base_seed)
    if modalities is None:
        present = {r.modality for r in manifest}
        modalities = [m for m in Modality if m in present]
    configs = grid_configs(modalities, base, k_values, augmentations, classifiers, only)
    by_modality = {}
    for cfg in configs:
        by_modality.setdefault(cfg.modality, []).append(cfg)
    for modality in by_modality:
        modality_records(manifest, modality, feature_store)

    units = [(m, rep) for m in by_modality for rep in range(base.repetitions)]
    if jobs is None:
        jobs = os.cpu_count() or 1
    if jobs > 1 and len(units) > 1:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker,
                                 initargs=(manifest, feature_store)) as pool:
            outputs = list(pool.map(_run_unit, [(m, rep, by_modality[m], None, None)
                                                for m, rep in units]))
    else:
        outputs = []
        for m, rep in units:
            outputs.append(_run_unit((m, rep, by_modality[m], manifest, feature_store)))
            if progress is not None:
                progress(len(outputs), len(units))

    accs = {cfg.cell: [None] * base.repetitions for cfg in configs}
    times = {m: 0.0 for m in by_modality}
    failures = []
    for modality, rep, results, error, unit_audit, elapsed in outputs:
        if audit is not None:
            audit.merge(unit_audit)
        if error is not None:
            failures.append(error)
            continue
        times[modality] += elapsed
        for cell, a in results.items():
            accs[cell][rep] = a
    if failures:
        raise AbortedAfterSplitFailures(len(failures), failures[0])
    return [ResultRecord.from_accuracies(cfg, accs[cfg.cell],
                                         times[cfg.modality] / len(by_modality[cfg.modality]))
            for cfg in configs]


def _fmt(record):
    return f"{record.mean_accuracy:.3f} ± {record.std_accuracy:.3f}"


def emit_report(records, out_dir, run_config=None):
    """Write ``results.json``, ``results.csv`` (pivot) and ``timings.json``.

    ``results.json`` holds no timing data, so identical runs give identical bytes.
    Standard deviations are population standard deviations.
    """
    if not records:
        raise ValueError("no records to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "std_kind": "population",
        "run_config": run_config or {},
        "records": [r.to_dict() for r in records],
    }
    with open(out_dir / "results.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, ensure_ascii=False)
        fh.write("\n")
    with open(out_dir / "timings.json", "w", encoding="utf-8") as fh:
        json.dump([{"cell": list(r.config.cell), "wall_time_s": r.wall_time_s}
                   for r in records], fh, indent=1)
    write_pivot(records, out_dir / "results.csv")
    return out_dir / "results.json", out_dir / "results.csv"


def write_pivot(records, path):
    rows, cols, cells = [], [], {}
    for r in records:
        m, k, aug, clf = r.config.cell
        row, col = (k, aug), (m, clf)
        if row not in rows:
            rows.append(row)
        if col not in cols:
            cols.append(col)
        cells[row, col] = _fmt(r)
    aug_order = {a: i for i, a in enumerate(AUG_NAMES)}
    rows.sort(key=lambda rc: (rc[0], aug_order.get(rc[1], len(AUG_NAMES)), rc[1]))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["k", "augmentation"] + [f"{m}/{c}" for m, c in cols])
        for row in rows:
            writer.writerow([row[0], row[1]] + [cells.get((row, col), "") for col in cols])


def load_results(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return [ResultRecord.from_dict(d) for d in doc["records"]], doc


def slide_features(image, wsi_id, n_patches=512, patch_size=256, min_coverage=0.75, seed=0):
    """Sample tissue patches from one slide and describe them with the handcrafted extractor."""
    patches = sample_patches(image, n_patches, patch_size, min_coverage,
                             derive_seed(seed, "patches", wsi_id), wsi_id=wsi_id)
    return np.vstack([extract_handcrafted(p).values for p in patches])


def _features_job(args):
    path, wsi_id, n, size, cov, seed = args
    with Image.open(path) as im:
        image = np.asarray(im.convert("RGB"))
    return wsi_id, slide_features(image, wsi_id, n, size, cov, seed)


def features_for_manifest(manifest, manifest_path, n_patches=512, patch_size=256,
                          min_coverage=0.75, seed=0, jobs=1, progress=None):
    """Build a :class:`FeatureStore` with ``n_patches`` handcrafted descriptors per slide."""
    jobs_args = [(resolve_image(r, manifest_path), r.wsi_id, n_patches, patch_size,
                  min_coverage, seed) for r in manifest]
    arrays = {}
    if jobs and jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for wsi_id, m in pool.map(_features_job, jobs_args):
                arrays[wsi_id] = m
    else:
        for i, a in enumerate(jobs_args):
            wsi_id, m = _features_job(a)
            arrays[wsi_id] = m
            if progress is not None:
                progress(i + 1, len(jobs_args))
    return FeatureStore.from_arrays(arrays)
