"""Command-line entry point: ``sslcd <command> [flags]``.

Every command accepts ``--config FILE.json`` whose keys are flag names
(dashes or underscores). Explicit flags win over the file, the file wins
over built-in defaults.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint
from .detection import (
    detect_cva,
    detect_linear,
    read_pgm,
    render_comparison,
    write_pgm,
    write_ppm,
)
from .errors import ConfigError, DataError, SslcdError
from .metrics import ConfusionCounts, build_report, confusion, metrics, rank_layers
from .raster import load_manifest, read_raster, split_counts, write_dataset, write_raster
from .synthetic import SyntheticSceneSpec, generate_benchmark
from .training import (
    LinearClassifier,
    LinearTrainConfig,
    PretrainConfig,
    make_fold_plan,
    pretrain,
    run_cv,
    train_change_classifier,
)

log = logging.getLogger("sslcd")


def _write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.2f}"


# ---------------------------------------------------------------- commands


def cmd_gen_synthetic(a) -> int:
    spec = SyntheticSceneSpec(
        size=tuple(a.size),
        bands=a.bands,
        texture_scale=a.texture_scale,
        noise_std=a.noise,
        n_blobs=a.change_blobs,
        blob_size_range=tuple(a.blob_size),
        fine_texture=a.fine_texture,
    )
    spec.validate()
    pairs = generate_benchmark(a.count, spec, a.seed)
    n_train, n_val, n_test = split_counts(a.count)
    splits = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
    meta = {"generator": "synthetic", "seed": a.seed, "spec": {k: v for k, v in spec.__dict__.items() if k != "seed"}}
    write_dataset(pairs, a.out, splits, meta)
    print(f"wrote {a.count} pairs to {a.out} (train {n_train}, val {n_val}, test {n_test})")
    return 0


def cmd_pretrain(a) -> int:
    manifest = load_manifest(a.manifest)
    cfg = PretrainConfig(
        task=a.task,
        lr=a.lr,
        weight_decay=a.weight_decay,
        gamma=a.gamma,
        margin=a.margin,
        batch_size=a.batch_size,
        patch_size=a.patch_size,
        pairs_per_image=a.pairs_per_image,
        val_pairs_per_image=a.val_pairs_per_image,
        max_epochs=a.max_epochs,
        augment=not a.no_augment,
        seed=a.seed,
    )
    train, val, test = (manifest.load_split(s) for s in ("train", "val", "test"))
    result = pretrain(train, val, cfg, test_pairs=test or None, out_dir=a.out)
    best = result.log[result.best_epoch - 1]
    print(f"stopped after epoch {result.stopped_epoch} ({result.stop_reason}); best epoch {result.best_epoch}")
    print(f"{'':6}{'loss':>10}{'accuracy':>10}")
    print(f"{'val':6}{best['val_loss']:>10.4f}{_fmt(best['metric']):>10}")
    if result.test is not None:
        print(f"{'test':6}{result.test['loss']:>10.4f}{_fmt(result.test.get('accuracy')):>10}")
    return 0


def _labeled_pairs(path):
    manifest = load_manifest(path)
    pairs = [manifest.load_pair(e) for e in manifest.entries if e.path_labels]
    if not pairs:
        raise DataError(f"{path} lists no labelled pairs")
    return pairs


def cmd_select_layer(a) -> int:
    model = load_checkpoint(a.ckpt)
    pairs = _labeled_pairs(a.labeled_manifest)
    plan = make_fold_plan([p.id for p in pairs], a.folds, a.seed)
    cfg = LinearTrainConfig(lr=a.lr, max_epochs=a.max_epochs, patience=a.patience, seed=a.seed)
    layers = a.layers or list(range(1, model.n_layers + 1))
    table = {}
    for layer in layers:
        res = run_cv(plan, layer, model, pairs, cfg, a.patches_per_image, a.patch_size, a.seed)
        table[layer] = res
    best = rank_layers({k: v.mean_aa for k, v in table.items()})
    print(f"{'layer':>5}  " + "  ".join(f"{'fold ' + str(i + 1):>8}" for i in range(plan.k)) + f"  {'mean AA':>8}")
    for layer, res in table.items():
        folds = "  ".join(f"{_fmt(v):>8}" for v in res.fold_aa)
        mark = "  <- selected" if layer == best else ""
        print(f"{layer:>5}  {folds}  {_fmt(res.mean_aa):>8}{mark}")
    _write_json(
        a.out,
        {
            "task": model.task,
            "folds": plan.folds,
            "per_layer": {str(k): {"fold_aa": v.fold_aa, "mean_aa": v.mean_aa, "excluded_folds": v.excluded_folds} for k, v in table.items()},
            "selected_layer": best,
            "metadata": {"units": "percent", "patches_per_image": a.patches_per_image, "patch_size": a.patch_size, "seed": a.seed},
        },
    )
    return 0


def cmd_train_classifier(a) -> int:
    model = load_checkpoint(a.ckpt)
    pairs = _labeled_pairs(a.labeled_manifest)
    cfg = LinearTrainConfig(lr=a.lr, max_epochs=a.max_epochs, patience=a.patience, seed=a.seed)
    clf, threshold = train_change_classifier(model, a.layer, pairs, cfg, a.patches_per_image, a.patch_size, a.seed)
    clf.save(a.out, threshold, extra={"layer": a.layer, "task": model.task})
    print(f"linear classifier on layer {a.layer} saved to {a.out}; F1-tuned threshold {threshold.threshold:.6f}")
    return 0


def cmd_detect(a) -> int:
    model = load_checkpoint(a.ckpt)
    manifest = load_manifest(a.manifest)
    pair = manifest.load_pair(a.pair_id)
    if a.classifier == "linear":
        if a.linear_model is None:
            raise ConfigError("--classifier linear needs --linear-model")
        clf, meta = LinearClassifier.load(a.linear_model)
        if "threshold" not in meta:
            raise DataError(f"{a.linear_model} stores no decision threshold")
        cmap = detect_linear(pair, model, a.layer, clf, meta["threshold"]["value"])
    else:
        cmap = detect_cva(pair, model, a.layer, a.classifier.split("-", 1)[1])
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    write_pgm(cmap.binary, out / f"{pair.id}.pgm")
    write_raster(cmap.score[None].astype(np.float32), out / f"{pair.id}_score.raw")
    summary = {"pair_id": pair.id, "classifier": cmap.classifier, "layer": a.layer, "threshold": None if np.isinf(cmap.threshold) else cmap.threshold}
    if cmap.note:
        summary["note"] = cmap.note
    if pair.labels is not None:
        c = confusion(cmap, pair.labels)
        summary["counts"] = c.to_json()
        summary["metrics"] = metrics(c)
        summary["metrics_units"] = "percent"
    _write_json(out / f"{pair.id}_metrics.json", summary)
    print(f"{pair.id}: {int(cmap.binary.sum())} changed pixels -> {out / (pair.id + '.pgm')}")
    if "metrics" in summary:
        m = summary["metrics"]
        print("  " + "  ".join(f"{k} {_fmt(m[k])}" for k in ("sensitivity", "precision", "f1", "average_accuracy")))
    return 0


def _read_truth(path: Path) -> np.ndarray:
    if path.suffix == ".pgm":
        return read_pgm(path)
    return read_raster(path)


def _truth_for(truth_dir: Path, pair_id: str) -> Path:
    for name in (f"{pair_id}.pgm", f"{pair_id}_labels.raw"):
        if (truth_dir / name).is_file():
            return truth_dir / name
    raise DataError(f"no ground truth for {pair_id} in {truth_dir}")


def cmd_evaluate(a) -> int:
    pred_dir, truth_dir = Path(a.pred), Path(a.truth)
    preds = sorted(pred_dir.glob("*.pgm"))
    if not preds:
        raise DataError(f"no .pgm change maps in {pred_dir}")
    per_pair: dict[str, ConfusionCounts] = {}
    for p in preds:
        per_pair[p.stem] = confusion(read_pgm(p), _read_truth(_truth_for(truth_dir, p.stem)))
    report = build_report(per_pair)
    _write_json(a.out, report)
    agg = report["aggregate"]
    print(f"{len(per_pair)} pairs; " + "  ".join(f"{k} {_fmt(agg[k])}" for k in ("accuracy", "average_accuracy", "sensitivity", "specificity", "precision", "f1")))
    return 0


def cmd_render_map(a) -> int:
    pred = read_pgm(a.pred)
    truth = _read_truth(Path(a.truth))
    write_ppm(render_comparison(pred, truth), a.out)
    print(f"wrote {a.out}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sslcd", description="Self-supervised change detection on multitemporal image pairs.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON file of flag defaults")
        p.set_defaults(func=fn)
        return p

    p = add("gen-synthetic", cmd_gen_synthetic, "generate a labelled synthetic benchmark")
    p.add_argument("--count", type=int, default=60)
    p.add_argument("--size", type=int, nargs=2, default=[256, 256], metavar=("H", "W"))
    p.add_argument("--bands", type=int, default=4)
    p.add_argument("--change-blobs", type=int, default=4)
    p.add_argument("--blob-size", type=int, nargs=2, default=[12, 40], metavar=("MIN", "MAX"))
    p.add_argument("--texture-scale", type=float, default=48.0)
    p.add_argument("--fine-texture", type=float, default=0.1)
    p.add_argument("--noise", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("pretrain", cmd_pretrain, "train a pretext model")
    p.add_argument("--task", choices=["overlap", "triplet"], required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--patch-size", type=int, default=64)
    p.add_argument("--pairs-per-image", type=int, default=5)
    p.add_argument("--val-pairs-per-image", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--max-epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--margin", type=float, default=1.0)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("select-layer", cmd_select_layer, "rank layers by cross-validated average accuracy")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--labeled-manifest", required=True)
    p.add_argument("--folds", type=int, default=3)
    p.add_argument("--patches-per-image", type=int, default=100)
    p.add_argument("--patch-size", type=int, default=16)
    p.add_argument("--layers", type=int, nargs="+")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--max-epochs", type=int, default=250)
    p.add_argument("--patience", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("train-classifier", cmd_train_classifier, "fit the linear change classifier for detect --classifier linear")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--labeled-manifest", required=True)
    p.add_argument("--patches-per-image", type=int, default=100)
    p.add_argument("--patch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--max-epochs", type=int, default=250)
    p.add_argument("--patience", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("detect", cmd_detect, "binary change map for one pair")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--pair-id", required=True)
    p.add_argument("--classifier", choices=["cva-otsu", "cva-triangle", "linear"], default="cva-triangle")
    p.add_argument("--linear-model")
    p.add_argument("--out", required=True)

    p = add("evaluate", cmd_evaluate, "metrics report for a directory of change maps")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True)

    p = add("render-map", cmd_render_map, "colour-coded comparison of a change map against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True)
    return parser


def _config_path(argv: list[str]) -> str | None:
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> None:
    """Install values from ``--config`` as parser defaults (flags still win)."""
    path = _config_path(argv)
    choices = parser._subparsers._group_actions[0].choices
    command = next((tok for tok in argv if tok in choices), None)
    if path is None or command is None:
        return
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a JSON object")
    sub = choices[command]
    known = {act.dest: act for act in sub._actions}
    overrides = {}
    for key, value in raw.items():
        dest = key.replace("-", "_")
        if dest not in known or dest in ("config", "help"):
            raise ConfigError(f"unknown config key {key!r} for {command}")
        overrides[dest] = value
        known[dest].required = False
    sub.set_defaults(**overrides)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except SslcdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ConfigError.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
