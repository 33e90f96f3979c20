"""Command-line entry point: ``histobof <subcommand> ...``.

Settings come from built-in defaults, then an optional ``key=value`` config
file (``--config``), then ``HISTOBOF_SEED`` for the base seed, then explicit
flags. Exit status is 0 on success, 1 on runtime errors and 2 on bad
configuration.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .augmentation import AugmentationPolicy, InvalidPolicy
from .bof import kmeans_fit
from .errors import HistoBofError
from .features import export_features, import_features
from .harness import (
    AUG_NAMES, K_VALUES, Classifier, ExperimentConfig, LeakageAudit, emit_report,
    features_for_manifest, load_results, run_grid, write_pivot,
)
from .losses import gradient_check_suite
from .manifest import Modality, load_manifest
from .svm import DEFAULT_C_GRID
from .synthetic import CorpusSpec, generate_corpus

log = logging.getLogger("histobof")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
SEED_ENV = "HISTOBOF_SEED"


class ConfigError(HistoBofError, ValueError):
    pass


def _csv(kind):
    def parse(text):
        try:
            return [kind(x.strip()) for x in str(text).split(",") if x.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None
    parse.__name__ = f"{kind.__name__}_list"
    return parse


def _only(text):
    """``modality=paraffin,k=32,aug=aug1,clf=rbf`` -> dict of filters."""
    out = {}
    for part in str(text).split(","):
        if not part.strip():
            continue
        key, sep, value = part.partition("=")
        key = key.strip().lower()
        if not sep or key not in ("modality", "k", "aug", "clf"):
            raise argparse.ArgumentTypeError(f"bad --only term {part!r}")
        out[key] = value.strip().lower()
    return out


class _Formatter(argparse.RawDescriptionHelpFormatter):
    """Shows the default of every option, including those without help text."""

    def _get_help_string(self, action):
        text = action.help or ""
        if action.default is not argparse.SUPPRESS and action.option_strings:
            default = action.default
            if isinstance(default, (list, tuple)):
                default = ",".join(str(v) for v in default)
            text += f" (default: {default})"
        return text


def _add_common(p):
    p.add_argument("--config", type=Path, default=None,
                   help="key=value file; explicit flags override it")
    p.add_argument("--seed", type=int, default=0,
                   help=f"base seed (env {SEED_ENV} overrides the config file)")
    p.add_argument("-v", "--verbose", action="store_true", default=False,
                   help="log progress")


def _add_sampling(p):
    p.add_argument("--n-patches", type=int, default=512, help="patches per slide")
    p.add_argument("--patch-size", type=int, default=256, help="patch side in pixels")
    p.add_argument("--min-coverage", type=float, default=0.75,
                   help="minimum tissue fraction of an accepted patch")
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="worker processes")


def build_parser():
    parser = argparse.ArgumentParser(prog="histobof", formatter_class=_Formatter,
                                     description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("synth", help="write a synthetic two-modality corpus",
                       formatter_class=_Formatter)
    _add_common(p)
    p.add_argument("--n", type=int, default=20, help="slides per class and modality")
    p.add_argument("--size", type=int, default=2048, help="image side in pixels")
    p.add_argument("--out", type=Path, default=Path("data"), help="output directory")

    p = sub.add_parser("features", help="sample patches and write a feature store",
                       formatter_class=_Formatter)
    _add_common(p)
    _add_sampling(p)
    p.add_argument("--manifest", type=Path, default=None, help="manifest CSV")
    p.add_argument("--extractor", choices=("handcrafted", "imported"), default="handcrafted",
                   help="built-in 120-dim descriptor, or an external store")
    p.add_argument("--source", type=Path, default=None,
                   help="external feature store for --extractor imported")
    p.add_argument("--out", type=Path, default=Path("features.tsv"), help="feature store to write")

    p = sub.add_parser("codebook", help="fit one codebook on every slide of a modality",
                       formatter_class=_Formatter)
    _add_common(p)
    p.add_argument("--manifest", type=Path, default=None, help="manifest CSV")
    p.add_argument("--features", type=Path, default=None, help="feature store")
    p.add_argument("--modality", choices=[m.value for m in Modality], default="paraffin",
                   help="slides to pool")
    p.add_argument("--k", type=int, default=32, help="number of centroids")
    p.add_argument("--n-patches", type=int, default=512, help="patches used per slide")
    p.add_argument("--max-iter", type=int, default=100, help="Lloyd iteration cap")
    p.add_argument("--tol", type=float, default=1e-6,
                   help="stop when distortion falls by less than this fraction")
    p.add_argument("--out", type=Path, default=Path("codebook.json"), help="codebook JSON")

    p = sub.add_parser("grid", help="run the evaluation grid and write the report",
                       formatter_class=_Formatter)
    _add_common(p)
    _add_sampling(p)
    p.add_argument("--manifest", type=Path, default=None, help="manifest CSV")
    p.add_argument("--features", type=Path, default=None,
                   help="feature store; without it features are computed from the images")
    p.add_argument("--out", type=Path, default=Path("results"), help="report directory")
    p.add_argument("--modality", type=_csv(str), default=None,
                   help="modalities to run (default: all present in the manifest)")
    p.add_argument("--k", type=_csv(int), default=list(K_VALUES), help="codebook sizes")
    p.add_argument("--aug", type=_csv(str), default=list(AUG_NAMES),
                   help="augmentation policies")
    p.add_argument("--clf", type=_csv(str), default=[c.value for c in Classifier],
                   help="classifiers")
    p.add_argument("--only", type=_only, default=None,
                   help="restrict to one cell, e.g. modality=paraffin,k=32,aug=aug1,clf=rbf")
    p.add_argument("--repetitions", type=int, default=32, help="random splits per cell")
    p.add_argument("--train-ratio", type=float, default=0.8, help="training share of each split")
    p.add_argument("--folds", type=int, default=5, help="inner cross-validation folds")
    p.add_argument("--c-grid", type=_csv(float), default=list(DEFAULT_C_GRID),
                   help="SVM cost values tried by inner cross-validation")
    p.add_argument("--gamma", type=float, default=None,
                   help="RBF gamma; unset means 1/(d * mean feature variance)")
    p.add_argument("--kmeans-max-iter", type=int, default=100, help="Lloyd iteration cap")
    p.add_argument("--kmeans-tol", type=float, default=1e-6,
                   help="relative distortion decrease that stops k-means")

    p = sub.add_parser("report", help="re-render the pivot table of a results.json",
                       formatter_class=_Formatter)
    _add_common(p)
    p.add_argument("--results", type=Path, default=Path("results/results.json"),
                   help="results.json written by grid")
    p.add_argument("--out", type=Path, default=None, help="CSV path (default: print)")

    p = sub.add_parser("losses-check", help="finite-difference check of the loss gradients",
                       formatter_class=_Formatter)
    _add_common(p)
    p.add_argument("--instances", type=int, default=100, help="random instances per check")
    p.add_argument("--threshold", type=float, default=1e-4,
                   help="largest acceptable relative error")
    return parser


def _read_config(path):
    values = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{n}: expected key=value")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _subparser(parser, name):
    for action in parser._subparsers._group_actions:
        if name in action.choices:
            return action.choices[name]
    raise KeyError(name)


def _apply_config(sub, values, origin):
    """Turn config strings into typed defaults of ``sub``."""
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    typed = {}
    for key, raw in values.items():
        if key == "base_seed":
            key = "seed"
        if key not in actions:
            raise ConfigError(f"{origin}: unknown setting {key!r}")
        action = actions[key]
        try:
            if action.choices is not None and raw not in action.choices:
                raise ValueError(f"choose from {sorted(action.choices)}")
            if isinstance(action, argparse._StoreTrueAction):
                value = raw.lower() in ("1", "true", "yes", "on")
            elif action.type is not None:
                value = action.type(raw)
            else:
                value = raw
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise ConfigError(f"{origin}: bad value for {key}: {exc}") from None
        typed[key] = value
    sub.set_defaults(**typed)


def parse_args(argv=None):
    """Parse with precedence defaults < config file < HISTOBOF_SEED < flags."""
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    first = parser.parse_args(argv)
    sub = _subparser(parser, first.command)
    if first.config is not None:
        _apply_config(sub, _read_config(first.config), str(first.config))
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        _apply_config(sub, {"seed": env.strip()}, SEED_ENV)
    return parser.parse_args(argv)


def _require(path, what):
    if path is None:
        raise ConfigError(f"{what} is required")
    if not Path(path).exists():
        raise ConfigError(f"{what} {path} does not exist")
    return Path(path)


def resolved_config(args):
    d = {}
    for key, value in sorted(vars(args).items()):
        if isinstance(value, Path):
            value = str(value)
        d[key] = value
    return d


def cmd_synth(args):
    spec = CorpusSpec(n_per_class_per_modality=args.n, image_size=args.size, seed=args.seed)
    spec.validate()
    manifest = generate_corpus(spec, args.out)
    print(f"wrote {4 * args.n} slides and {manifest}")


def _progress(label):
    def report(done, total):
        log.info("%s %d/%d", label, done, total)
    return report


def _store_for_manifest(args, manifest, manifest_path):
    if args.extractor == "imported":
        source = _require(args.source, "--source")
        store = import_features(source)
        missing = [r.wsi_id for r in manifest if r.wsi_id not in store]
        if missing:
            raise ConfigError(f"imported store lacks slides {missing[:5]}")
        short = [w for w in (r.wsi_id for r in manifest) if len(store.features(w)) < args.n_patches]
        if short:
            raise HistoBofError(f"slides with fewer than {args.n_patches} patches: {short[:5]}")
        return store
    return features_for_manifest(manifest, manifest_path, args.n_patches, args.patch_size,
                                 args.min_coverage, args.seed, args.jobs,
                                 _progress("features"))


def cmd_features(args):
    manifest_path = _require(args.manifest, "--manifest")
    manifest = load_manifest(manifest_path)
    if args.extractor == "handcrafted" and args.source is not None:
        raise ConfigError("--source only applies to --extractor imported")
    store = _store_for_manifest(args, manifest, manifest_path)
    export_features(store, args.out)
    print(f"wrote {len(store)} records of dimension {store.dimension} to {args.out}")


def cmd_codebook(args):
    manifest = load_manifest(_require(args.manifest, "--manifest"))
    store = import_features(_require(args.features, "--features"))
    ids = [r.wsi_id for r in manifest if r.modality.value == args.modality]
    if not ids:
        raise ConfigError(f"no {args.modality} slides in the manifest")
    X = np.vstack([store.matrix(w)[:args.n_patches] for w in ids])
    cb = kmeans_fit(X, args.k, seed=args.seed, max_iter=args.max_iter, tol=args.tol)
    Path(args.out).write_text(cb.to_json() + "\n", encoding="utf-8")
    print(f"k={cb.k} distortion={cb.final_distortion:.6g} iterations={cb.iterations_run}")


def _grid_filters(args):
    try:
        augs = [AugmentationPolicy.parse(a).name for a in args.aug]
        clfs = [Classifier(c.lower()) for c in args.clf]
        mods = None if args.modality is None else [Modality(m.lower()) for m in args.modality]
    except (InvalidPolicy, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    only = None
    if args.only:
        o = args.only
        try:
            k_only = int(o["k"]) if "k" in o else None
        except ValueError:
            raise ConfigError(f"bad k in --only: {o['k']}") from None

        def only(cfg):
            return ((o.get("modality") in (None, cfg.modality.value))
                    and k_only in (None, cfg.k_clusters)
                    and o.get("aug") in (None, cfg.augmentation.name)
                    and o.get("clf") in (None, cfg.classifier.value))
    return mods, augs, clfs, only


def cmd_grid(args):
    manifest_path = _require(args.manifest, "--manifest")
    manifest = load_manifest(manifest_path)
    mods, augs, clfs, only = _grid_filters(args)
    try:
        base = ExperimentConfig(repetitions=args.repetitions, train_ratio=args.train_ratio,
                                base_seed=args.seed, n_patches=args.n_patches,
                                patch_size=args.patch_size, min_coverage=args.min_coverage,
                                folds=args.folds, c_grid=tuple(args.c_grid), gamma=args.gamma,
                                kmeans_max_iter=args.kmeans_max_iter,
                                kmeans_tol=args.kmeans_tol)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if args.features is not None:
        store = import_features(_require(args.features, "--features"))
    else:
        store = features_for_manifest(manifest, manifest_path, args.n_patches,
                                      args.patch_size, args.min_coverage, args.seed,
                                      args.jobs, _progress("features"))
    audit = LeakageAudit()
    records = run_grid(manifest, store, args.seed, base, mods, tuple(args.k), tuple(augs),
                       tuple(clfs), only, args.jobs, audit, _progress("split"))
    if not records:
        raise ConfigError("the filters select no grid cell")
    run_config = resolved_config(args)
    run_config["leakage_checks"] = dict(sorted(audit.checks.items()))
    json_path, csv_path = emit_report(records, args.out, run_config)
    for r in records:
        print("{:<10} k={:<4} {:<6} {:<7} {:.3f} ± {:.3f}".format(
            *r.config.cell, r.mean_accuracy, r.std_accuracy))
    print(f"wrote {json_path} and {csv_path}")


def cmd_report(args):
    records, doc = load_results(_require(args.results, "--results"))
    if args.out is not None:
        write_pivot(records, args.out)
        print(f"wrote {args.out}")
    else:
        import tempfile
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "pivot.csv"
            write_pivot(records, path)
            sys.stdout.write(path.read_text(encoding="utf-8"))
    cfg = doc.get("run_config")
    if cfg:
        print("# run config: " + json.dumps(cfg, sort_keys=True))


def cmd_losses_check(args):
    worst = gradient_check_suite(n_instances=args.instances, seed=args.seed)
    ok = True
    for name, err in worst.items():
        flag = "ok" if err < args.threshold else "FAIL"
        ok &= err < args.threshold
        print(f"{name:<22} max relative error {err:.3e}  {flag}")
    print(f"max relative error {max(worst.values()):.3e}")
    if not ok:
        raise HistoBofError(f"gradient error above {args.threshold}")


COMMANDS = {"synth": cmd_synth, "features": cmd_features, "codebook": cmd_codebook,
            "grid": cmd_grid, "report": cmd_report, "losses-check": cmd_losses_check}


def main(argv=None):
    try:
        args = parse_args(argv)
    except ConfigError as exc:
        print(f"histobof: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # argparse: --help exits 0, usage errors exit 2
        return exc.code if isinstance(exc.code, int) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"histobof: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (HistoBofError, OSError, ValueError, RuntimeError) as exc:
        print(f"histobof: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
