"""Command-line surface: label aggregation, cross-validation, ablation,
prediction and attention-map export.

Configuration comes from an optional flat ``key = value`` file passed via
--config, with explicit command-line flags taking precedence.  A single
--seed drives the fold plan and parameter init directly and the shuffle
stream through a fixed documented offset, so repeated invocations with
one manifest are byte-identical.
"""

from __future__ import annotations

import argparse
import os
import re
import sys

from . import dataset as ds
from . import figures
from . import model as mdl
from . import training
from .errors import ConfigError, VisaffError

# shuffle streams are decoupled from init/fold streams by this offset
SHUFFLE_SEED_OFFSET = 1_000_000_007

_INT_KEYS = {"folds", "runs", "epochs", "batch_size", "patience", "seed",
             "d_a", "head_hidden"}
_FLOAT_KEYS = {"dropout", "val_fraction"}
_BOOL_KEYS = {"per_model_primary"}
_STR_KEYS = {"features_tiled", "features_whole", "annotations", "labels",
             "outdir", "out", "checkpoint", "features", "variant",
             "label_mode", "mode", "images"}
_ALL_KEYS = _INT_KEYS | _FLOAT_KEYS | _BOOL_KEYS | _STR_KEYS


def load_config_file(path):
    """Parse a flat ``key = value`` manifest; '#' starts a comment."""
    values = {}
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    with fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}: line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in _ALL_KEYS:
                raise ConfigError(f"{path}: line {lineno}: unknown config key {key!r}")
            values[key] = value
    return values


def _coerce(key, value):
    if value is None or not isinstance(value, str):
        return value
    if key in _INT_KEYS:
        return int(value)
    if key in _FLOAT_KEYS:
        return float(value)
    if key in _BOOL_KEYS:
        lowered = value.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"config field {key!r}: cannot parse boolean {value!r}")
    return value


class Settings:
    """Flag-over-config-over-default resolution for one command."""

    def __init__(self, args):
        self.args = vars(args)
        self.file_values = {}
        if self.args.get("config"):
            self.file_values = load_config_file(self.args["config"])

    def get(self, key, default=None, required=False):
        cli = self.args.get(key)
        if cli is not None:
            value = cli
        elif key in self.file_values:
            value = _coerce(key, self.file_values[key])
        else:
            value = default
        if required and value is None:
            raise ConfigError(f"missing required field {key!r} (flag --{key.replace('_', '-')})")
        return value


def _load_labels(settings):
    labels_path = settings.get("labels")
    annotations_path = settings.get("annotations")
    mode = settings.get("label_mode", "mean")
    if labels_path:
        return ds.LabelMatrix.from_csv(labels_path, aggregation=mode)
    if annotations_path:
        table = ds.read_annotations(annotations_path)
        return ds.aggregate_labels(table, mode=mode)
    raise ConfigError("need either a labels CSV (--labels) or an annotation CSV (--annotations)")


def _load_feature_map(path):
    return ds.features_by_id(ds.read_features(path))


def _features_for_variant(settings, variant):
    layout = mdl.required_layout(variant)
    key = "features_tiled" if layout == "tiled" else "features_whole"
    path = settings.get(key)
    if path is None:
        raise ConfigError(
            f"variant {variant!r} consumes {layout} features; --{key.replace('_', '-')} is required"
        )
    return _load_feature_map(path)


def _model_config(settings, variant, seed):
    n_tasks = ds.N_TASKS if mdl.is_multitask(variant) else 1
    return mdl.ModelConfig(
        variant=variant,
        d_a=settings.get("d_a", 256),
        head_hidden=settings.get("head_hidden", 256),
        n_tasks=n_tasks,
        dropout_rate=settings.get("dropout", 0.5),
        per_model_primary_attention=bool(settings.get("per_model_primary", False)),
        init_seed=seed,
    )


def _train_config(settings, seed, runs_default=5):
    return training.TrainConfig(
        epochs=settings.get("epochs", 60),
        batch_size=settings.get("batch_size", 32),
        patience=settings.get("patience", 10),
        n_runs=settings.get("runs", runs_default),
        val_fraction=settings.get("val_fraction", 0.1),
        shuffle_seed=seed + SHUFFLE_SEED_OFFSET,
    )


def _safe_name(image_id):
    return re.sub(r"[^A-Za-z0-9._-]", "_", image_id)


# ---------------------------------------------------------------------------
# commands


def cmd_aggregate_labels(args):
    settings = Settings(args)
    annotations = settings.get("annotations", required=True)
    out = settings.get("out", required=True)
    mode = settings.get("mode") or settings.get("label_mode", "mean")
    table = ds.read_annotations(annotations)
    labels = ds.aggregate_labels(table, mode=mode)
    labels.to_csv(out)
    print(f"wrote {len(labels.image_ids)} rows x {ds.N_TASKS} dimensions to {out} "
          f"(mode={mode})")
    return 0


def cmd_cv(args):
    settings = Settings(args)
    variant = settings.get("variant", "attentive_mtl")
    if variant not in mdl.VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    seed = settings.get("seed", 0)
    outdir = settings.get("outdir", required=True)
    labels = _load_labels(settings)
    features = _features_for_variant(settings, variant)
    missing = [i for i in labels.image_ids if i not in features]
    if missing:
        raise ConfigError(f"feature file lacks labeled images: {missing[:5]}")
    folds = settings.get("folds", 5)
    fold_plan = ds.kfold_split(labels.image_ids, folds, seed)
    model_config = _model_config(settings, variant, seed)
    train_config = _train_config(settings, seed)
    os.makedirs(outdir, exist_ok=True)
    ckpt_dir = os.path.join(outdir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    log_path = os.path.join(outdir, "folds.jsonl")
    with open(log_path, "w", encoding="utf-8") as fh:
        report = training.run_experiment(
            features, labels, model_config, train_config, fold_plan,
            log_sink=training.jsonl_sink(fh), checkpoint_dir=ckpt_dir,
        )
    report_path = os.path.join(outdir, "report.csv")
    report.to_csv(report_path)
    figures.save_report_figure(report, os.path.join(outdir, "report.png"))
    print(f"report: {report_path}")
    print(f"fold logs: {log_path}")
    print(f"mean r_squared: {report.mean_r_squared():.4f}")
    return 0


def cmd_ablate(args):
    settings = Settings(args)
    seed = settings.get("seed", 0)
    outdir = settings.get("outdir", required=True)
    labels = _load_labels(settings)
    tiled_path = settings.get("features_tiled")
    whole_path = settings.get("features_whole")
    if tiled_path is None:
        raise ConfigError("ablation requires tiled features (--features-tiled)")
    if whole_path is None:
        raise ConfigError("ablation requires whole features (--features-whole)")
    tiled = _load_feature_map(tiled_path)
    whole = _load_feature_map(whole_path)
    base_config = _model_config(settings, "attentive_mtl", seed)
    train_config = _train_config(settings, seed)
    os.makedirs(outdir, exist_ok=True)
    log_path = os.path.join(outdir, "folds.jsonl")
    with open(log_path, "w", encoding="utf-8") as fh:
        reports = training.ablation_suite(
            tiled, whole, labels, train_config,
            base_config=base_config, folds=settings.get("folds", 5),
            fold_seed=seed, nontransfer_seed=seed + 1,
            log_sink=training.jsonl_sink(fh),
        )
    table_path = os.path.join(outdir, "ablation.csv")
    training.ablation_table_csv(reports, table_path)
    for variant, report in reports.items():
        report.to_csv(os.path.join(outdir, f"report_{variant}.csv"))
    figures.save_ablation_figure(reports, os.path.join(outdir, "ablation.png"))
    print(f"ablation table: {table_path}")
    for variant, report in reports.items():
        print(f"  {variant}: mean r_squared {report.mean_r_squared():.4f}")
    return 0


def cmd_predict(args):
    settings = Settings(args)
    ckpt_path = settings.get("checkpoint", required=True)
    feat_path = settings.get("features", required=True)
    out = settings.get("out", required=True)
    params = mdl.load_checkpoint(ckpt_path)
    features = _load_feature_map(feat_path)
    ids = sorted(features)
    want = mdl.required_layout(params.config.variant)
    for iid in ids:
        if features[iid].layout != want:
            raise ConfigError(
                f"checkpoint variant {params.config.variant!r} consumes {want} "
                f"features, file holds {features[iid].layout!r}"
            )
    preds = mdl.predict_features(params, features, ids,
                                 batch_size=settings.get("batch_size", 64))
    import csv as _csv

    with open(out, "w", newline="", encoding="utf-8") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["image_id"] + [f"d{i + 1}" for i in range(preds.shape[1])])
        for iid, row in zip(ids, preds):
            writer.writerow([iid] + [repr(float(v)) for v in row])
    print(f"wrote {len(ids)} predictions x {preds.shape[1]} dimensions to {out}")
    return 0


def cmd_attention_export(args):
    settings = Settings(args)
    ckpt_path = settings.get("checkpoint", required=True)
    feat_path = settings.get("features_tiled", required=True)
    outdir = settings.get("outdir", required=True)
    params = mdl.load_checkpoint(ckpt_path)
    if not mdl.is_attentive(params.config.variant):
        raise ConfigError(
            f"checkpoint variant {params.config.variant!r} has no attention stages"
        )
    features = _load_feature_map(feat_path)
    os.makedirs(outdir, exist_ok=True)
    count = 0
    for iid in sorted(features):
        pred = mdl.forward(features[iid], params, mode="eval")
        rec = pred.attention
        stem = os.path.join(outdir, _safe_name(iid))
        with open(stem + ".attention.csv", "w", newline="", encoding="utf-8") as fh:
            for m in range(rec.alpha_primary.shape[0]):
                vals = ",".join(repr(float(v)) for v in rec.alpha_primary[m])
                fh.write(f"primary,{m},{vals}\n")
            for k in range(rec.alpha_secondary.shape[0]):
                vals = ",".join(repr(float(v)) for v in rec.alpha_secondary[k])
                fh.write(f"secondary,{k},{vals}\n")
        pixels = figures.attention_heatmap_pixels(rec.alpha_primary)
        figures.write_pgm(stem + ".pgm", pixels)
        figures.save_attention_figure(rec.alpha_primary, stem + ".png", title=iid)
        count += 1
    print(f"exported attention artifacts for {count} images to {outdir}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(p):
    p.add_argument("--config", help="flat key = value manifest; flags override it")
    p.add_argument("--seed", type=int, help="base seed for folds, init and shuffles")


def _add_train_flags(p):
    p.add_argument("--variant", choices=mdl.VARIANTS)
    p.add_argument("--label-mode", dest="label_mode", choices=ds.AGGREGATION_MODES)
    p.add_argument("--folds", type=int)
    p.add_argument("--runs", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--val-fraction", dest="val_fraction", type=float)
    p.add_argument("--d-a", dest="d_a", type=int)
    p.add_argument("--head-hidden", dest="head_hidden", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--per-model-primary", dest="per_model_primary",
                   action="store_const", const=True)
    p.add_argument("--labels")
    p.add_argument("--annotations")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="visaff",
        description="attention-pooled multi-task regression over image feature tensors",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("aggregate-labels", help="aggregate raw ratings into a label CSV")
    _add_common(p)
    p.add_argument("--annotations")
    p.add_argument("--out")
    p.add_argument("--mode", choices=ds.AGGREGATION_MODES)
    p.add_argument("--label-mode", dest="label_mode", choices=ds.AGGREGATION_MODES)
    p.set_defaults(func=cmd_aggregate_labels)

    p = sub.add_parser("cv", help="cross-validated training and metric report")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--features-tiled", dest="features_tiled")
    p.add_argument("--features-whole", dest="features_whole")
    p.add_argument("--outdir")
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("ablate", help="five-variant comparison suite")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--features-tiled", dest="features_tiled")
    p.add_argument("--features-whole", dest="features_whole")
    p.add_argument("--outdir")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("predict", help="predict scores with a saved checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--features")
    p.add_argument("--out")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("attention-export",
                       help="per-image attention CSVs and heatmaps")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--features-tiled", dest="features_tiled")
    p.add_argument("--outdir")
    p.set_defaults(func=cmd_attention_export)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (VisaffError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
