"""Adam optimization, the fold trainer, and the experiment drivers.

Reproducibility contract: every stochastic choice (inner train/validation
split, per-epoch shuffling, dropout masks, parameter init) is driven by
generators derived from the two user-facing seeds (init_seed on the model
config, shuffle_seed on the train config).  Run r of a multi-run
experiment uses init_seed + r and shuffle_seed + r, so any single run can
be re-executed in isolation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import model as mdl
from .dataset import DIMENSIONS, N_TASKS, kfold_split
from .errors import ConfigError, MissingDataError, NumericError
from .evaluation import MetricRow, MetricsReport, pearson, r_squared, rmse

# offset mixed into per-task init seeds of the task-specific variants
_TASK_SEED_STRIDE = 104729


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    _scratch: np.ndarray = field(default=None, repr=False, compare=False)

    @classmethod
    def fresh(cls, n, lr=0.001):
        return cls(m=np.zeros(n, dtype=np.float64), v=np.zeros(n, dtype=np.float64),
                   lr=lr)


def adam_step(params_flat, grad_flat, state):
    """One bias-corrected Adam update; returns (new_params, state).

    The moment buffers and step counter of `state` are updated in place.
    Implemented with in-place vector ops and one scratch buffer; this
    update vector is lr * m_hat / (sqrt(v_hat) + eps) with
    m_hat = m / (1 - beta1^t) and v_hat = v / (1 - beta2^t).
    """
    params_flat = np.asarray(params_flat, dtype=np.float64)
    grad_flat = np.asarray(grad_flat, dtype=np.float64)
    if params_flat.shape != grad_flat.shape or params_flat.shape != state.m.shape:
        raise ValueError(
            f"shape mismatch: params {params_flat.shape}, grad {grad_flat.shape}, "
            f"state {state.m.shape}"
        )
    if not np.all(np.isfinite(grad_flat)):
        bad = int(np.argmax(~np.isfinite(grad_flat)))
        raise NumericError(
            f"non-finite gradient at flat index {bad} "
            f"(value {grad_flat[bad]!r}, step t={state.t})"
        )
    state.t += 1
    if state._scratch is None or state._scratch.shape != state.m.shape:
        state._scratch = np.empty_like(state.m)
    s = state._scratch
    state.m *= state.beta1
    np.multiply(grad_flat, 1.0 - state.beta1, out=s)
    state.m += s
    state.v *= state.beta2
    np.multiply(grad_flat, grad_flat, out=s)
    s *= 1.0 - state.beta2
    state.v += s
    # denominator sqrt(v_hat) + eps, computed as sqrt(v)/sqrt(1-beta2^t) + eps
    np.sqrt(state.v, out=s)
    s /= np.sqrt(1.0 - state.beta2 ** state.t)
    s += state.eps
    np.divide(state.m, s, out=s)
    s *= state.lr / (1.0 - state.beta1 ** state.t)
    return params_flat - s, state


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 32
    patience: int = 10
    n_runs: int = 5
    val_fraction: float = 0.1
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 1 or self.n_runs < 1:
            raise ConfigError("epochs, batch_size, patience and n_runs must be positive")
        if not 0.0 < self.val_fraction <= 0.5:
            raise ConfigError(f"val_fraction must be in (0, 0.5], got {self.val_fraction}")


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0
    val_ids: list = field(default_factory=list)

    def validate(self):
        if self.stopped_epoch < self.best_epoch:
            raise ValueError("best_epoch cannot exceed stopped_epoch")
        return self


def _epoch_eval_loss(params, rows, targets, batch_size):
    """Joint eval-mode loss over a fixed id set, chunked for memory."""
    chunk = max(batch_size, 64)  # eval has no batch semantics, only memory limits
    preds = np.empty_like(targets)
    for start in range(0, len(rows), chunk):
        x = np.stack(rows[start : start + chunk]).astype(np.float64)
        y, _ = mdl.forward_batch(x, params, mode="eval")
        preds[start : start + len(y)] = y
    return mdl.joint_loss(preds, targets)


def train_fold(train_ids, features, labels, model_config, train_config,
               task_index=None, initial_params=None):
    """Train one model on the given ids with early stopping.

    The ids are split into an inner train/validation pair (seeded); each
    epoch shuffles the inner-train set, walks batches of batch_size (the
    last batch may be smaller) and applies one Adam step per batch.  The
    joint validation loss is monitored in eval mode after every epoch;
    training stops after `patience` consecutive epochs without strict
    improvement, and the best-epoch weights are restored.

    task_index selects a single label column for single-task variants.
    """
    ids = sorted(train_ids)
    if not ids:
        raise ValueError("empty training id set")
    missing = [i for i in ids if i not in features]
    if missing:
        raise MissingDataError(f"no features for image ids: {missing[:5]}")
    targets_all = labels.rows_for(ids)
    if task_index is not None:
        targets_all = targets_all[:, [task_index]]
    if targets_all.shape[1] != model_config.n_tasks:
        raise ConfigError(
            f"model expects {model_config.n_tasks} targets, got {targets_all.shape[1]}"
        )
    rows = [features[i].values for i in ids]

    seed_seq = np.random.SeedSequence(train_config.shuffle_seed & ((1 << 64) - 1))
    split_rng, shuffle_rng, dropout_rng = (
        np.random.default_rng(c) for c in seed_seq.spawn(3)
    )

    n = len(ids)
    n_val = int(round(train_config.val_fraction * n))
    if n_val == 0 or n_val >= n:
        raise ConfigError(
            f"inner validation split of {n_val} images from {n} is unusable; "
            f"adjust val_fraction={train_config.val_fraction}"
        )
    perm = split_rng.permutation(n)
    val_idx = np.sort(perm[:n_val])
    train_idx = np.sort(perm[n_val:])
    val_rows = [rows[i] for i in val_idx]
    val_targets = targets_all[val_idx]

    params = initial_params if initial_params is not None else mdl.init_params(model_config)
    state = AdamState.fresh(params.size)
    history = TrainHistory(val_ids=[ids[i] for i in val_idx])
    best_val = np.inf
    best_flat = params.flat.copy()
    wait = 0

    for epoch in range(1, train_config.epochs + 1):
        order = shuffle_rng.permutation(train_idx)
        epoch_loss = 0.0
        for start in range(0, len(order), train_config.batch_size):
            batch = order[start : start + train_config.batch_size]
            x = np.stack([rows[i] for i in batch]).astype(np.float64)
            t = targets_all[batch]
            y, cache = mdl.forward_batch(x, params, mode="train", rng=dropout_rng)
            grad = mdl.backward_batch(cache, t)
            new_flat, state = adam_step(params.flat, grad, state)
            params.assign_flat(new_flat)
            epoch_loss += len(batch) * mdl.joint_loss(y, t)
        history.train_loss.append(epoch_loss / len(order))
        val_loss = _epoch_eval_loss(params, val_rows, val_targets,
                                    train_config.batch_size)
        history.val_loss.append(val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_flat = params.flat.copy()
            history.best_epoch = epoch
            wait = 0
        else:
            wait += 1
            if wait >= train_config.patience:
                history.stopped_epoch = epoch
                break
        history.stopped_epoch = epoch
    params.assign_flat(best_flat)
    return params, history.validate()


def default_fit_predict(train_ids, test_ids, features, labels, model_config,
                        train_config, task_index=None):
    """Train a fold model and predict the held-out ids in eval mode."""
    params, history = train_fold(
        train_ids, features, labels, model_config, train_config, task_index=task_index
    )
    preds = mdl.predict_features(params, features, list(test_ids),
                                 batch_size=train_config.batch_size)
    return preds, {"history": history, "params": params}


def _metrics_for(preds, targets, dimension_names):
    out = {}
    for d, name in enumerate(dimension_names):
        out[name] = {
            "r_squared": r_squared(preds[:, d], targets[:, d]),
            "pearson": pearson(preds[:, d], targets[:, d]),
            "rmse": rmse(preds[:, d], targets[:, d]),
        }
    return out


def run_experiment(features, labels, model_config, train_config, fold_plan,
                   log_sink=None, checkpoint_dir=None, fit_predict=None):
    """Cross-validated, multi-run evaluation of one variant.

    For every run and fold, trains on the other folds and predicts the
    held-out fold in eval mode.  Task-specific variants train one
    single-task model per dimension.  The report holds the arithmetic
    mean of every per-(run, fold) metric value.

    log_sink, when given, receives one dict per (run, fold[, task]) with
    epoch losses, best/stopped epochs, per-dimension metrics and held-out
    predictions.  checkpoint_dir saves each trained model.
    """
    if fit_predict is None:
        fit_predict = default_fit_predict
    ids = list(labels.image_ids)
    covered = set(fold_plan.assignments)
    if not set(ids) <= covered:
        raise ConfigError("fold plan does not cover all labeled images")
    task_specific = not mdl.is_multitask(model_config.variant)
    per_cell = []  # (12, 3) metric arrays in (run, fold) order

    def emit(record):
        if log_sink is not None:
            log_sink(record)

    def save(params, run, fold, task=None):
        if checkpoint_dir is None:
            return
        tag = f"run{run}_fold{fold}" + ("" if task is None else f"_task{task}")
        mdl.save_checkpoint(f"{checkpoint_dir}/{tag}.amtp", params)

    id_set = set(ids)
    for run in range(train_config.n_runs):
        mcfg = replace(model_config, init_seed=model_config.init_seed + run)
        tcfg = replace(train_config, shuffle_seed=train_config.shuffle_seed + run)
        for fold in range(fold_plan.k):
            test_ids = [i for i in fold_plan.fold_members(fold) if i in id_set]
            train_ids = [i for i in fold_plan.train_members(fold) if i in id_set]
            targets = labels.rows_for(test_ids)
            if task_specific:
                preds = np.empty((len(test_ids), N_TASKS), dtype=np.float64)
                for k in range(N_TASKS):
                    kcfg = replace(
                        mcfg, init_seed=mcfg.init_seed + _TASK_SEED_STRIDE * (k + 1)
                    )
                    preds_k, info = fit_predict(
                        train_ids, test_ids, features, labels, kcfg, tcfg,
                        task_index=k,
                    )
                    preds[:, k] = preds_k[:, 0]
                    metrics_k = _metrics_for(preds_k, targets[:, [k]], [DIMENSIONS[k]])
                    record = {
                        "run": run, "fold": fold, "task": k,
                        "metrics": metrics_k,
                        "predictions": {i: [float(v)] for i, v in
                                        zip(test_ids, preds_k[:, 0])},
                    }
                    _attach_history(record, info)
                    emit(record)
                    if "params" in info:
                        save(info["params"], run, fold, task=k)
            else:
                preds, info = fit_predict(
                    train_ids, test_ids, features, labels, mcfg, tcfg
                )
                record = {
                    "run": run, "fold": fold, "task": None,
                    "metrics": _metrics_for(preds, targets, DIMENSIONS),
                    "predictions": {i: [float(v) for v in row]
                                    for i, row in zip(test_ids, preds)},
                }
                _attach_history(record, info)
                emit(record)
                if "params" in info:
                    save(info["params"], run, fold)
            cell = np.array(
                [
                    [
                        r_squared(preds[:, d], targets[:, d]),
                        pearson(preds[:, d], targets[:, d]),
                        rmse(preds[:, d], targets[:, d]),
                    ]
                    for d in range(N_TASKS)
                ]
            )
            per_cell.append(cell)
    mean = np.mean(np.stack(per_cell), axis=0)
    provenance = {
        "variant": model_config.variant,
        "label_mode": labels.aggregation,
        "folds": fold_plan.k,
        "runs": train_config.n_runs,
    }
    rows = [
        MetricRow(DIMENSIONS[d], float(mean[d, 0]), float(mean[d, 1]), float(mean[d, 2]))
        for d in range(N_TASKS)
    ]
    return MetricsReport(rows, provenance)


def _attach_history(record, info):
    history = info.get("history")
    if history is not None:
        record["train_loss"] = [float(v) for v in history.train_loss]
        record["val_loss"] = [float(v) for v in history.val_loss]
        record["best_epoch"] = history.best_epoch
        record["stopped_epoch"] = history.stopped_epoch


def jsonl_sink(fh):
    """A log sink writing one JSON object per line to an open file."""

    def sink(record):
        fh.write(json.dumps(record, sort_keys=True) + "\n")

    return sink


# the five ablation rows, in reporting order
ABLATION_VARIANTS = (
    "attentive_mtl",
    "attentive_task_specific",
    "nonattentive_mtl",
    "attentive_mtl_nontransfer",
    "nonattentive_task_specific_nontransfer",
)


def ablation_suite(features_tiled, features_whole, labels, train_config,
                   base_config=None, folds=5, fold_seed=0, nontransfer_seed=7,
                   log_sink=None, variants=ABLATION_VARIANTS):
    """Run the five-variant comparison on one labeled image set.

    features_tiled / features_whole: id -> FeatureTensor maps for the two
    layouts (informative features).  Non-transfer variants consume frozen
    random-projection features generated here from `nontransfer_seed`.
    Returns {variant: MetricsReport} in reporting order.
    """
    if base_config is None:
        base_config = mdl.ModelConfig()
    ids = list(labels.image_ids)
    fold_plan = kfold_split(ids, folds, fold_seed)
    nontransfer = {}
    reports = {}
    for variant in variants:
        layout = mdl.required_layout(variant)
        if mdl.is_transfer(variant):
            feats = features_tiled if layout == "tiled" else features_whole
            if feats is None:
                raise ConfigError(
                    f"variant {variant!r} requires {layout} features, none supplied"
                )
        else:
            if layout not in nontransfer:
                nontransfer[layout] = {
                    r.image_id: r
                    for r in mdl.build_nontransfer_features(ids, nontransfer_seed, layout)
                }
            feats = nontransfer[layout]
        n_tasks = N_TASKS if mdl.is_multitask(variant) else 1
        cfg = replace(base_config, variant=variant, n_tasks=n_tasks)
        sink = None
        if log_sink is not None:
            def sink(record, _variant=variant):
                record = dict(record)
                record["variant"] = _variant
                log_sink(record)
        reports[variant] = run_experiment(
            feats, labels, cfg, train_config, fold_plan, log_sink=sink
        )
    return reports


def ablation_table_csv(reports, path):
    """Side-by-side ablation table: one row per dimension, three metric
    columns per variant."""
    import csv as _csv

    variants = list(reports)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("# variants=" + ",".join(variants) + "\n")
        writer = _csv.writer(fh)
        header = ["dimension"]
        for v in variants:
            header += [f"{v}.r_squared", f"{v}.pearson", f"{v}.rmse"]
        writer.writerow(header)
        for d, name in enumerate(DIMENSIONS):
            row = [name]
            for v in variants:
                r = reports[v].rows[d]
                row += [repr(float(r.r_squared)), repr(float(r.pearson)),
                        repr(float(r.rmse))]
            writer.writerow(row)
