"""The attentive multi-task network, its ablation variants, and gradients.

Variants
--------
attentive_mtl
    tiled features -> shared primary attention over sub-images ->
    per-task secondary attention over model rows -> per-task head
    (hidden relu layer, dropout, single tanh output).  Twelve tasks.
attentive_task_specific
    the same attentive stack with a single task; twelve independent
    instances are trained by the experiment driver.
nonattentive_mtl
    whole-image features (8064) -> shared dense stack -> per-task dense
    stack -> single tanh output per task.
attentive_mtl_nontransfer / nonattentive_task_specific_nontransfer
    architecturally identical to their transfer counterparts; they are
    trained on frozen random-projection features (see
    build_nontransfer_features) instead of informative ones.

Parameters live in one flat float64 vector with a fixed, documented
ordering (primary triple(s), then secondary triples for tasks 0..K-1,
then heads for tasks 0..K-1; dense variants order shared layers first,
then per-task stacks).  Shaped arrays are numpy views into the flat
vector, so optimizer updates written into the flat vector are visible
everywhere without copying.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .attention import (
    AttentionParams,
    AttentionRecord,
    attend,
    attention_backward,
    softmax,
)
from .dataset import (
    DENSENET_DIM,
    DENSENET_ROW,
    FEATURE_DIM,
    N_MODELS,
    N_SUBIMAGES,
    N_TASKS,
    FeatureTensor,
    seeded_rng,
)
from .errors import (
    BadMagicError,
    ConfigError,
    FormatError,
    MissingDataError,
    StateError,
    TruncatedFileError,
    VersionError,
)

VARIANTS = (
    "attentive_mtl",
    "attentive_task_specific",
    "nonattentive_mtl",
    "attentive_mtl_nontransfer",
    "nonattentive_task_specific_nontransfer",
)

_ATTENTIVE = {"attentive_mtl", "attentive_task_specific", "attentive_mtl_nontransfer"}
_MULTITASK = {"attentive_mtl", "nonattentive_mtl", "attentive_mtl_nontransfer"}
_TRANSFER = {"attentive_mtl", "attentive_task_specific", "nonattentive_mtl"}


def is_attentive(variant):
    return variant in _ATTENTIVE


def is_multitask(variant):
    return variant in _MULTITASK


def is_transfer(variant):
    return variant in _TRANSFER


def required_layout(variant):
    """Feature layout a variant consumes: tiled (attentive) or whole."""
    return "tiled" if is_attentive(variant) else "whole"


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "attentive_mtl"
    d_a: int = 256  # attention hidden width (unstated upstream; configurable)
    head_hidden: int = 256
    n_tasks: int = N_TASKS
    dropout_rate: float = 0.5
    per_model_primary_attention: bool = False
    shared_hidden_sizes: tuple = (1024, 512)
    task_hidden_sizes: tuple = (256, 64)
    init_seed: int = 0
    feature_dim: int = FEATURE_DIM
    densenet_dim: int = DENSENET_DIM

    def __post_init__(self):
        object.__setattr__(self, "shared_hidden_sizes", tuple(self.shared_hidden_sizes))
        object.__setattr__(self, "task_hidden_sizes", tuple(self.task_hidden_sizes))
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        expected_tasks = N_TASKS if is_multitask(self.variant) else 1
        if self.n_tasks != expected_tasks:
            raise ConfigError(
                f"variant {self.variant!r} requires n_tasks={expected_tasks}, "
                f"got {self.n_tasks}"
            )
        if self.d_a < 1 or self.head_hidden < 1:
            raise ConfigError("d_a and head_hidden must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if any(s < 1 for s in self.shared_hidden_sizes + self.task_hidden_sizes):
            raise ConfigError("hidden layer sizes must be positive")
        if self.feature_dim < 1 or not 0 < self.densenet_dim <= self.feature_dim:
            raise ConfigError("feature_dim/densenet_dim inconsistent")

    @property
    def whole_dim(self):
        return 3 * self.feature_dim + self.densenet_dim

    @property
    def n_primary(self):
        return N_MODELS if self.per_model_primary_attention else 1


def param_layout(config):
    """Ordered (name, shape) list defining the flat parameter vector.

    Attentive variants: primary triple(s) first (weight, bias, context,
    per-model index when the flag is set), then one secondary triple per
    task in task order, then one head (w1, b1, w2, b2) per task.  Dense
    variants: shared layers in depth order, then per task the hidden
    layers followed by the output layer.
    """
    names = []
    d = config.feature_dim
    if is_attentive(config.variant):
        d_a, h = config.d_a, config.head_hidden
        if config.per_model_primary_attention:
            for m in range(N_MODELS):
                names += [
                    (f"primary.{m}.weight", (d_a, d)),
                    (f"primary.{m}.bias", (d_a,)),
                    (f"primary.{m}.context", (d_a,)),
                ]
        else:
            names += [
                ("primary.weight", (d_a, d)),
                ("primary.bias", (d_a,)),
                ("primary.context", (d_a,)),
            ]
        for k in range(config.n_tasks):
            names += [
                (f"secondary.{k}.weight", (d_a, d)),
                (f"secondary.{k}.bias", (d_a,)),
                (f"secondary.{k}.context", (d_a,)),
            ]
        for k in range(config.n_tasks):
            names += [
                (f"head.{k}.w1", (h, d)),
                (f"head.{k}.b1", (h,)),
                (f"head.{k}.w2", (1, h)),
                (f"head.{k}.b2", (1,)),
            ]
    else:
        prev = config.whole_dim
        for i, size in enumerate(config.shared_hidden_sizes):
            names += [(f"shared.{i}.weight", (size, prev)), (f"shared.{i}.bias", (size,))]
            prev = size
        shared_out = prev
        for k in range(config.n_tasks):
            prev = shared_out
            for j, size in enumerate(config.task_hidden_sizes):
                names += [
                    (f"task.{k}.{j}.weight", (size, prev)),
                    (f"task.{k}.{j}.bias", (size,)),
                ]
                prev = size
            names += [(f"task.{k}.out.weight", (1, prev)), (f"task.{k}.out.bias", (1,))]
    return names


def _build_views(layout, flat):
    views = {}
    offsets = {}
    offset = 0
    for name, shape in layout:
        size = int(np.prod(shape))
        views[name] = flat[offset : offset + size].reshape(shape)
        offsets[name] = offset
        offset += size
    return views, offsets


def _stacked_view(flat, offsets, shape):
    """One writable (K, *shape) view over equally strided per-task blocks."""
    if len(offsets) > 1:
        deltas = {offsets[i + 1] - offsets[i] for i in range(len(offsets) - 1)}
        if len(deltas) != 1:
            raise ValueError("per-task parameter blocks are not equally strided")
        stride = deltas.pop()
    else:
        stride = int(np.prod(shape))
    inner = tuple(int(np.prod(shape[i + 1 :])) * 8 for i in range(len(shape)))
    return np.lib.stride_tricks.as_strided(
        flat[offsets[0] :], shape=(len(offsets), *shape),
        strides=(stride * 8, *inner), writeable=True,
    )


class ModelParams:
    """All learnable weights behind a flat float64 vector with named views."""

    def __init__(self, config, flat=None):
        self.config = config
        self.layout = param_layout(config)
        total = sum(int(np.prod(shape)) for _, shape in self.layout)
        if flat is None:
            flat = np.zeros(total, dtype=np.float64)
        else:
            flat = np.ascontiguousarray(flat, dtype=np.float64)
            if flat.shape != (total,):
                raise ValueError(
                    f"flat vector has {flat.shape} entries, layout needs {total}"
                )
        self.flat = flat
        self.size = total
        self.views, self.offsets = _build_views(self.layout, self.flat)
        self.version = 0

    def view(self, name):
        return self.views[name]

    def task_stack(self, fmt, shape):
        """(n_tasks, *shape) strided view over per-task blocks, e.g.
        task_stack("secondary.{}.weight", (d_a, d))."""
        offs = [self.offsets[fmt.format(k)] for k in range(self.config.n_tasks)]
        return _stacked_view(self.flat, offs, shape)

    def assign_flat(self, new_flat):
        """In-place update keeping all views valid; bumps the version."""
        self.flat[:] = new_flat
        self.version += 1

    def copy(self):
        other = ModelParams(self.config, self.flat.copy())
        other.version = self.version
        return other

    def primary_params(self):
        if self.config.per_model_primary_attention:
            return [
                AttentionParams(
                    self.views[f"primary.{m}.weight"],
                    self.views[f"primary.{m}.bias"],
                    self.views[f"primary.{m}.context"],
                )
                for m in range(N_MODELS)
            ]
        return AttentionParams(
            self.views["primary.weight"],
            self.views["primary.bias"],
            self.views["primary.context"],
        )

    def secondary_params(self, k):
        return AttentionParams(
            self.views[f"secondary.{k}.weight"],
            self.views[f"secondary.{k}.bias"],
            self.views[f"secondary.{k}.context"],
        )


def init_params(config):
    """Seeded fan-scaled symmetric-uniform weights, zero biases.

    Matrices draw from U(-a, a) with a = sqrt(6 / (fan_in + fan_out));
    context vectors are treated as (d_a -> 1) maps.  Draws happen in
    flat-layout order, so equal configs give bit-identical parameters.
    """
    params = ModelParams(config)
    rng = seeded_rng(config.init_seed)
    for name, shape in params.layout:
        view = params.views[name]
        base = name.rsplit(".", 1)[-1]
        if base in ("bias", "b1", "b2"):
            continue  # zeros already
        if base == "context":
            fan_in, fan_out = shape[0], 1
        else:
            fan_out, fan_in = shape
        a = np.sqrt(6.0 / (fan_in + fan_out))
        view[...] = rng.uniform(-a, a, size=shape)
    return params


# ---------------------------------------------------------------------------
# forward / loss / backward


@dataclass
class Prediction:
    values: np.ndarray  # (n_tasks,), each strictly inside (-1, 1)
    attention: AttentionRecord | None = None


@dataclass
class _DenseStackCache:
    inputs: list
    zs: list
    masks: list


@dataclass
class BatchCache:
    params: ModelParams
    version: int
    mode: str
    y: np.ndarray
    # attentive variants (task axis k stacked)
    primary: object = None  # AttendCache | list[AttendCache]
    pooled: np.ndarray | None = None  # (B, 4, d)
    u_sec: np.ndarray | None = None  # (B, K, 4, d_a)
    beta: np.ndarray | None = None  # (B, K, 4)
    fused: np.ndarray | None = None  # (B, K, d)
    z1: np.ndarray | None = None  # (B, K, H)
    h_dropped: np.ndarray | None = None  # (B, K, H)
    mask: np.ndarray | None = None  # (B, K, H) or None
    # dense variants
    x: np.ndarray | None = None
    shared: _DenseStackCache | None = None
    task_stacks: list = field(default_factory=list)
    task_outs: list = field(default_factory=list)  # (a_last, y_k) per task


def _dropout_mask(rng, shape, rate):
    if rng is None:
        raise ValueError("train-mode forward with dropout_rate > 0 needs an rng")
    return rng.random(shape) >= rate


def forward_batch(x, params, mode="eval", rng=None):
    """Run the variant's forward pass over a batch.

    x: float64 (B, 4, 16, feature_dim) for attentive variants, else
    (B, whole_dim).  In train mode inverted dropout is applied; eval mode
    is deterministic.  Returns (y (B, n_tasks), cache for backward).
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    cfg = params.config
    x = np.asarray(x, dtype=np.float64)
    if is_attentive(cfg.variant):
        expect = (N_MODELS, N_SUBIMAGES, cfg.feature_dim)
        if x.ndim != 4 or x.shape[1:] != expect:
            raise ValueError(
                f"variant {cfg.variant!r} expects batches of shape (B,) + {expect}, "
                f"got {x.shape}"
            )
        return _forward_attentive(x, params, mode, rng)
    if x.ndim != 2 or x.shape[1] != cfg.whole_dim:
        raise ValueError(
            f"variant {cfg.variant!r} expects batches of shape (B, {cfg.whole_dim}), "
            f"got {x.shape}"
        )
    return _forward_dense(x, params, mode, rng)


def _sec_head_stacks(params):
    cfg = params.config
    d, d_a, hh = cfg.feature_dim, cfg.d_a, cfg.head_hidden
    return {
        "ws": params.task_stack("secondary.{}.weight", (d_a, d)),
        "bs": params.task_stack("secondary.{}.bias", (d_a,)),
        "vs": params.task_stack("secondary.{}.context", (d_a,)),
        "w1": params.task_stack("head.{}.w1", (hh, d)),
        "b1": params.task_stack("head.{}.b1", (hh,)),
        "w2": params.task_stack("head.{}.w2", (1, hh))[:, 0, :],
        "b2": params.task_stack("head.{}.b2", (1,))[:, 0],
    }


def _forward_attentive(x, params, mode, rng):
    """Attentive forward with the task axis stacked into single products.

    The per-task parameter triples and heads are viewed as (K, ...) strided
    stacks over the flat vector, so the 12 secondary attentions and heads
    run as a handful of large matmuls instead of a python loop.
    """
    cfg = params.config
    B, K = x.shape[0], cfg.n_tasks
    d, d_a, hh = cfg.feature_dim, cfg.d_a, cfg.head_hidden
    drop = mode == "train" and cfg.dropout_rate > 0.0
    if cfg.per_model_primary_attention:
        triples = params.primary_params()
        pooled_rows, caches = [], []
        for m in range(N_MODELS):
            pm, _, cm = attend(x[:, m], triples[m])
            pooled_rows.append(pm)
            caches.append(cm)
        pooled = np.stack(pooled_rows, axis=1)  # (B, 4, d)
        primary_cache = caches
    else:
        pooled, _, primary_cache = attend(x, params.primary_params())
    st = _sec_head_stacks(params)
    # secondary attention, all tasks at once
    zs = pooled.reshape(B * N_MODELS, d) @ st["ws"].reshape(K * d_a, d).T
    u_sec = np.tanh(zs.reshape(B, N_MODELS, K, d_a).transpose(0, 2, 1, 3) + st["bs"][:, None, :])
    logits = np.einsum("bkmh,kh->bkm", u_sec, st["vs"])
    beta = softmax(logits, axis=-1)  # (B, K, 4)
    fused = np.einsum("bkm,bmd->bkd", beta, pooled)
    # heads, all tasks at once
    z1 = np.matmul(fused.transpose(1, 0, 2), st["w1"].transpose(0, 2, 1))
    z1 = z1.transpose(1, 0, 2) + st["b1"]  # (B, K, H)
    h = np.maximum(z1, 0.0)
    mask = None
    if drop:
        mask = _dropout_mask(rng, h.shape, cfg.dropout_rate)
        h = h * mask * (1.0 / (1.0 - cfg.dropout_rate))
    z2 = np.einsum("bkh,kh->bk", h, st["w2"]) + st["b2"]
    y = np.tanh(z2)
    cache = BatchCache(params, params.version, mode, y, primary=primary_cache,
                       pooled=pooled, u_sec=u_sec, beta=beta, fused=fused,
                       z1=z1, h_dropped=h, mask=mask)
    return y, cache


def _dense_stack_forward(a, names, params, drop, rate, rng):
    """Relu dense stack with inverted dropout on every hidden layer."""
    cache = _DenseStackCache([], [], [])
    scale = 1.0 / (1.0 - rate) if drop else 1.0
    for name in names:
        w = params.view(f"{name}.weight")
        b = params.view(f"{name}.bias")
        cache.inputs.append(a)
        z = a @ w.T + b
        cache.zs.append(z)
        a = np.maximum(z, 0.0)
        if drop:
            mask = _dropout_mask(rng, a.shape, rate)
            a = a * mask * scale
            cache.masks.append(mask)
        else:
            cache.masks.append(None)
    return a, cache


def _forward_dense(x, params, mode, rng):
    cfg = params.config
    drop = mode == "train" and cfg.dropout_rate > 0.0
    shared_names = [f"shared.{i}" for i in range(len(cfg.shared_hidden_sizes))]
    shared_out, shared_cache = _dense_stack_forward(
        x, shared_names, params, drop, cfg.dropout_rate, rng
    )
    cache = BatchCache(params, params.version, mode, None, x=x, shared=shared_cache)
    y = np.empty((x.shape[0], cfg.n_tasks), dtype=np.float64)
    for k in range(cfg.n_tasks):
        task_names = [f"task.{k}.{j}" for j in range(len(cfg.task_hidden_sizes))]
        a, task_cache = _dense_stack_forward(
            shared_out, task_names, params, drop, cfg.dropout_rate, rng
        )
        wo = params.view(f"task.{k}.out.weight")
        bo = params.view(f"task.{k}.out.bias")
        z_out = a @ wo.T + bo
        yk = np.tanh(z_out[:, 0])
        y[:, k] = yk
        cache.task_stacks.append(task_cache)
        cache.task_outs.append((a, yk))
    cache.y = y
    return y, cache


def forward(x, params, mode="eval", rng=None):
    """Single-sample forward returning a Prediction with attention weights."""
    cfg = params.config
    if isinstance(x, FeatureTensor):
        want = required_layout(cfg.variant)
        if x.layout != want:
            raise ValueError(
                f"variant {cfg.variant!r} consumes {want} features, "
                f"image {x.image_id!r} has layout {x.layout!r}"
            )
        arr = x.values.astype(np.float64)
    else:
        arr = np.asarray(x, dtype=np.float64)
    y, cache = forward_batch(arr[None], params, mode=mode, rng=rng)
    attention = None
    if is_attentive(cfg.variant):
        if cfg.per_model_primary_attention:
            alpha_p = np.stack([c.alpha[0] for c in cache.primary])
        else:
            alpha_p = cache.primary.alpha[0]
        attention = AttentionRecord(alpha_p, cache.beta[0].copy())
    return Prediction(values=y[0], attention=attention)


def per_task_mse(pred, target):
    """Per-task batch-mean squared errors, in task order."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.ndim == 1:
        pred = pred[None, :]
    if target.ndim == 1:
        target = target[None, :]
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    return [float(np.mean((pred[:, k] - target[:, k]) ** 2)) for k in range(pred.shape[1])]


def joint_loss(pred, target):
    """Sum of the per-task mean squared errors (fixed task order)."""
    return float(sum(per_task_mse(pred, target)))


def zeros_like_params(params):
    return np.zeros(params.size, dtype=np.float64)


def backward_batch(cache, targets):
    """Gradient of the joint loss w.r.t. the flat parameter vector.

    Requires the cache of a forward pass over the same parameter version;
    dropout masks recorded at forward time are reused, so train-mode
    gradients match the train-mode loss exactly.
    """
    if not isinstance(cache, BatchCache):
        raise StateError("backward_batch needs the cache returned by forward_batch")
    params = cache.params
    if params.version != cache.version:
        raise StateError(
            "parameters changed after the cached forward pass; rerun forward"
        )
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != cache.y.shape:
        raise ValueError(
            f"target shape {targets.shape} != prediction shape {cache.y.shape}"
        )
    grad = zeros_like_params(params)
    B = cache.y.shape[0]
    d_y = 2.0 * (cache.y - targets) / B  # (B, K)
    if is_attentive(params.config.variant):
        _backward_attentive(cache, d_y, grad)
    else:
        gviews, _ = _build_views(params.layout, grad)
        _backward_dense(cache, d_y, gviews)
    return grad


def _backward_attentive(cache, d_y, grad):
    params = cache.params
    cfg = params.config
    B, K = d_y.shape
    d, d_a = cfg.feature_dim, cfg.d_a
    drop = cache.mode == "train" and cfg.dropout_rate > 0.0
    scale = 1.0 / (1.0 - cfg.dropout_rate) if drop else 1.0
    st = _sec_head_stacks(params)
    gp = ModelParams(cfg, grad)  # named/stacked views over the grad buffer
    gst = _sec_head_stacks(gp)
    pooled, u_sec, beta, fused = cache.pooled, cache.u_sec, cache.beta, cache.fused
    # heads
    dz2 = d_y * (1.0 - cache.y * cache.y)  # (B, K)
    gst["w2"] += np.einsum("bk,bkh->kh", dz2, cache.h_dropped)
    gst["b2"] += dz2.sum(axis=0)
    dh = dz2[:, :, None] * st["w2"][None, :, :]
    if cache.mask is not None:
        dh = dh * cache.mask * scale
    dz1 = dh * (cache.z1 > 0.0)  # (B, K, H)
    gst["w1"] += np.matmul(dz1.transpose(1, 2, 0), fused.transpose(1, 0, 2))
    gst["b1"] += dz1.sum(axis=0)
    d_fused = np.matmul(dz1.transpose(1, 0, 2), st["w1"]).transpose(1, 0, 2)
    # secondary attention
    d_beta = np.einsum("bkd,bmd->bkm", d_fused, pooled)
    d_pooled = np.einsum("bkm,bkd->bmd", beta, d_fused)  # direct path, all tasks
    d_logits = beta * (d_beta - (beta * d_beta).sum(axis=-1, keepdims=True))
    gst["vs"] += np.einsum("bkm,bkmh->kh", d_logits, u_sec)
    du = d_logits[..., None] * st["vs"][None, :, None, :]
    dzs = du * (1.0 - u_sec * u_sec)  # (B, K, 4, d_a)
    gst["ws"] += np.matmul(
        dzs.transpose(1, 3, 0, 2).reshape(K, d_a, B * N_MODELS),
        pooled.reshape(B * N_MODELS, d),
    )
    gst["bs"] += dzs.sum(axis=(0, 2))
    d_pooled += (
        dzs.transpose(0, 2, 1, 3).reshape(B * N_MODELS, K * d_a)
        @ st["ws"].reshape(K * d_a, d)
    ).reshape(B, N_MODELS, d)
    # primary attention
    if cfg.per_model_primary_attention:
        for m in range(N_MODELS):
            _, dw, db, dv = attention_backward(
                cache.primary[m], d_pooled[:, m], need_input_grad=False
            )
            gp.views[f"primary.{m}.weight"] += dw
            gp.views[f"primary.{m}.bias"] += db
            gp.views[f"primary.{m}.context"] += dv
    else:
        _, dw, db, dv = attention_backward(
            cache.primary, d_pooled, need_input_grad=False
        )
        gp.views["primary.weight"] += dw
        gp.views["primary.bias"] += db
        gp.views["primary.context"] += dv


def _dense_stack_backward(d_out, names, stack, params, gviews, drop, rate):
    scale = 1.0 / (1.0 - rate) if drop else 1.0
    da = d_out
    for i in range(len(names) - 1, -1, -1):
        name = names[i]
        if stack.masks[i] is not None:
            da = da * stack.masks[i] * scale
        dz = da * (stack.zs[i] > 0.0)
        gviews[f"{name}.weight"] += dz.T @ stack.inputs[i]
        gviews[f"{name}.bias"] += dz.sum(axis=0)
        da = dz @ params.view(f"{name}.weight")
    return da


def _backward_dense(cache, d_y, gviews):
    params = cache.params
    cfg = params.config
    drop = cache.mode == "train" and cfg.dropout_rate > 0.0
    shared_names = [f"shared.{i}" for i in range(len(cfg.shared_hidden_sizes))]
    d_shared_out = None
    for k in range(cfg.n_tasks):
        a_last, yk = cache.task_outs[k]
        dz_out = d_y[:, k] * (1.0 - yk * yk)  # (B,)
        gviews[f"task.{k}.out.weight"][0] += a_last.T @ dz_out
        gviews[f"task.{k}.out.bias"][0] += dz_out.sum()
        da = dz_out[:, None] * params.view(f"task.{k}.out.weight")[0]
        task_names = [f"task.{k}.{j}" for j in range(len(cfg.task_hidden_sizes))]
        da = _dense_stack_backward(
            da, task_names, cache.task_stacks[k], params, gviews, drop, cfg.dropout_rate
        )
        d_shared_out = da if d_shared_out is None else d_shared_out + da
    _dense_stack_backward(
        d_shared_out, shared_names, cache.shared, params, gviews, drop, cfg.dropout_rate
    )


# ---------------------------------------------------------------------------
# batching helpers


def stack_features(feature_map, ids, variant):
    """Stack per-id feature payloads into one float64 batch array."""
    layout = required_layout(variant)
    rows = []
    for iid in ids:
        rec = feature_map.get(iid)
        if rec is None:
            raise MissingDataError(f"no feature record for image {iid!r}")
        if rec.layout != layout:
            raise ValueError(
                f"variant {variant!r} consumes {layout} features, "
                f"image {iid!r} has layout {rec.layout!r}"
            )
        rows.append(rec.values)
    return np.stack(rows).astype(np.float64)


def predict_features(params, feature_map, ids, batch_size=64):
    """Deterministic eval-mode predictions for the given ids, (n, K)."""
    cfg = params.config
    out = np.empty((len(ids), cfg.n_tasks), dtype=np.float64)
    for start in range(0, len(ids), batch_size):
        chunk = ids[start : start + batch_size]
        x = stack_features(feature_map, chunk, cfg.variant)
        y, _ = forward_batch(x, params, mode="eval")
        out[start : start + len(chunk)] = y
    return out


# ---------------------------------------------------------------------------
# checkpoints

_CKPT_MAGIC = b"AMTP"
_CKPT_VERSION = 1


def save_checkpoint(path, params):
    """Write config + flat parameter vector; round-trips bit-exactly."""
    cfg = params.config
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", _CKPT_VERSION))
        fh.write(struct.pack("<B", VARIANTS.index(cfg.variant)))
        fh.write(
            struct.pack(
                "<IIIII",
                cfg.d_a,
                cfg.head_hidden,
                cfg.n_tasks,
                cfg.feature_dim,
                cfg.densenet_dim,
            )
        )
        fh.write(struct.pack("<d", cfg.dropout_rate))
        fh.write(struct.pack("<B", int(cfg.per_model_primary_attention)))
        fh.write(struct.pack("<I", len(cfg.shared_hidden_sizes)))
        for s in cfg.shared_hidden_sizes:
            fh.write(struct.pack("<I", s))
        fh.write(struct.pack("<I", len(cfg.task_hidden_sizes)))
        for s in cfg.task_hidden_sizes:
            fh.write(struct.pack("<I", s))
        fh.write(struct.pack("<q", cfg.init_seed))
        fh.write(struct.pack("<Q", params.size))
        fh.write(np.ascontiguousarray(params.flat, dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    pos = 0

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise TruncatedFileError(f"{path}: truncated checkpoint header")
        out = struct.unpack_from(fmt, blob, pos)
        pos += size
        return out

    (magic,) = take("<4s")
    if magic != _CKPT_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {_CKPT_MAGIC!r}")
    (version,) = take("<I")
    if version != _CKPT_VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {version}")
    (variant_code,) = take("<B")
    if variant_code >= len(VARIANTS):
        raise FormatError(f"{path}: unknown variant code {variant_code}")
    d_a, head_hidden, n_tasks, feature_dim, densenet_dim = take("<IIIII")
    (dropout_rate,) = take("<d")
    (per_model,) = take("<B")
    (n_shared,) = take("<I")
    shared = [take("<I")[0] for _ in range(n_shared)]
    (n_task,) = take("<I")
    task = [take("<I")[0] for _ in range(n_task)]
    (init_seed,) = take("<q")
    (n_params,) = take("<Q")
    config = ModelConfig(
        variant=VARIANTS[variant_code],
        d_a=d_a,
        head_hidden=head_hidden,
        n_tasks=n_tasks,
        dropout_rate=dropout_rate,
        per_model_primary_attention=bool(per_model),
        shared_hidden_sizes=tuple(shared),
        task_hidden_sizes=tuple(task),
        init_seed=init_seed,
        feature_dim=feature_dim,
        densenet_dim=densenet_dim,
    )
    nbytes = 8 * n_params
    if pos + nbytes > len(blob):
        raise TruncatedFileError(f"{path}: truncated parameter payload")
    flat = np.frombuffer(blob, dtype="<f8", count=n_params, offset=pos).copy()
    pos += nbytes
    if pos != len(blob):
        raise FormatError(f"{path}: {len(blob) - pos} trailing bytes")
    try:
        return ModelParams(config, flat)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# frozen random-projection feature source (non-transfer stand-in)

SURROGATE_DIM = 64
_SEED_MASK = (1 << 64) - 1


def _id_entropy(image_id):
    digest = hashlib.sha256(image_id.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def build_nontransfer_features(items, seed, layout="tiled"):
    """Frozen seeded random-projection feature tensors.

    Stand-in for feature extraction with randomly initialized backbones:
    per-image surrogate blocks (seeded gaussian noise keyed by image id,
    or caller-supplied arrays) are pushed through one frozen per-model
    linear projection.  items: image ids, or (image_id, surrogate) pairs
    where surrogates have shape (4, 16, SURROGATE_DIM) for tiled output
    and (4, SURROGATE_DIM) for whole output.
    """
    if layout not in ("tiled", "whole"):
        raise ValueError(f"unknown layout {layout!r}")
    proj_rng = np.random.default_rng(
        np.random.SeedSequence([seed & _SEED_MASK, 0x70726F6A])
    )
    dims = [FEATURE_DIM, FEATURE_DIM, FEATURE_DIM, DENSENET_DIM]
    projections = [
        proj_rng.normal(0.0, 1.0 / np.sqrt(SURROGATE_DIM), (SURROGATE_DIM, d))
        for d in dims
    ]
    want_shape = (
        (N_MODELS, N_SUBIMAGES, SURROGATE_DIM) if layout == "tiled"
        else (N_MODELS, SURROGATE_DIM)
    )
    records = []
    for item in items:
        if isinstance(item, str):
            iid = item
            rng = np.random.default_rng(
                np.random.SeedSequence([seed & _SEED_MASK, _id_entropy(iid)])
            )
            surrogate = rng.standard_normal(want_shape)
        else:
            iid, surrogate = item
            surrogate = np.asarray(surrogate, dtype=np.float64)
            if surrogate.shape != want_shape:
                raise ValueError(
                    f"{iid!r}: surrogate shape {surrogate.shape}, expected {want_shape}"
                )
        if layout == "tiled":
            values = np.zeros((N_MODELS, N_SUBIMAGES, FEATURE_DIM), dtype=np.float64)
            for m in range(N_MODELS):
                values[m, :, : dims[m]] = surrogate[m] @ projections[m]
            values[DENSENET_ROW, :, DENSENET_DIM:] = 0.0
        else:
            values = np.concatenate(
                [surrogate[m] @ projections[m] for m in range(N_MODELS)]
            )
        records.append(FeatureTensor(iid, layout, values.astype(np.float32)))
    return records
