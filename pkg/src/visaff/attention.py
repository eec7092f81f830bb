"""Softmax attention pooling: forwards and hand-derived gradients.

Both pooling stages share one algebraic form.  Given a stack of row
vectors x_1..x_R and a parameter triple (weight W, bias b, context V):

    u_r     = tanh(W x_r + b)
    alpha_r = exp(u_r . V) / sum_s exp(u_s . V)
    pooled  = sum_r alpha_r x_r

The primary stage applies this over the 16 sub-image vectors of each
model row (one shared triple, or four per-model triples behind a flag);
the secondary stage applies it over the 4 pooled model vectors, one
triple per output task.

Gradients are derived by hand per stage; there is no autodiff graph.
All functions accept arbitrary leading batch axes on the stack argument.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import StateError


def softmax(logits, axis=-1):
    """Overflow-safe softmax (max subtraction before exponentiation)."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0 or logits.shape[axis] == 0:
        raise ValueError("softmax of an empty vector is undefined")
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class AttentionParams:
    """One (weight, bias, context) scoring triple."""

    weight: np.ndarray  # (d_a, d_in)
    bias: np.ndarray  # (d_a,)
    context: np.ndarray  # (d_a,)

    def validate(self, d_in=None):
        d_a = self.weight.shape[0]
        if self.weight.ndim != 2:
            raise ValueError(f"attention weight must be 2-d, got {self.weight.shape}")
        if self.bias.shape != (d_a,) or self.context.shape != (d_a,):
            raise ValueError("attention bias/context shapes inconsistent with weight")
        if d_in is not None and self.weight.shape[1] != d_in:
            raise ValueError(
                f"attention weight expects inputs of dim {self.weight.shape[1]}, got {d_in}"
            )
        return self


@dataclass
class AttendCache:
    """Forward intermediates required by the backward pass."""

    x: np.ndarray
    hidden: np.ndarray  # tanh activations u, (..., R, d_a)
    alpha: np.ndarray  # (..., R)
    params: AttentionParams


@dataclass
class AttentionRecord:
    """Attention weights of one prediction: simplex rows for both stages."""

    alpha_primary: np.ndarray  # (4, 16)
    alpha_secondary: np.ndarray  # (n_tasks, 4)


def attend(x, params):
    """Score, normalize and pool the rows of x.

    x has shape (..., R, d_in).  Returns (pooled (..., d_in),
    alpha (..., R), cache).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2:
        raise ValueError(f"attend expects a row stack, got shape {x.shape}")
    d_in = x.shape[-1]
    params.validate(d_in)
    lead = x.shape[:-1]  # (..., R)
    flat = x.reshape(-1, d_in)
    hidden = np.tanh(flat @ params.weight.T + params.bias)
    hidden = hidden.reshape(*lead, -1)  # (..., R, d_a)
    logits = hidden @ params.context  # (..., R)
    alpha = softmax(logits, axis=-1)
    pooled = np.einsum("...r,...rd->...d", alpha, x)
    return pooled, alpha, AttendCache(x, hidden, alpha, params)


def attention_backward(cache, d_pooled, d_alpha=None, need_input_grad=True):
    """Backpropagate through one pooling stage.

    Returns (d_x, d_weight, d_bias, d_context).  d_x is None when
    need_input_grad is False (saves the two largest products).
    """
    if cache is None:
        raise StateError("attention_backward called without a forward cache")
    x, u, alpha, params = cache.x, cache.hidden, cache.alpha, cache.params
    d_pooled = np.asarray(d_pooled, dtype=np.float64)
    if d_pooled.shape != x.shape[:-2] + x.shape[-1:]:
        raise StateError(
            f"upstream gradient shape {d_pooled.shape} does not match the "
            f"cached forward (pooled shape {x.shape[:-2] + x.shape[-1:]})"
        )
    d_a = u.shape[-1]
    d_in = x.shape[-1]
    da = np.einsum("...d,...rd->...r", d_pooled, x)
    if d_alpha is not None:
        da = da + d_alpha
    # softmax jacobian applied row-wise
    d_logits = alpha * (da - (alpha * da).sum(axis=-1, keepdims=True))
    d_context = (d_logits[..., None] * u).reshape(-1, d_a).sum(axis=0)
    du = d_logits[..., None] * params.context
    dz = du * (1.0 - u * u)
    dz_flat = dz.reshape(-1, d_a)
    x_flat = x.reshape(-1, d_in)
    d_weight = dz_flat.T @ x_flat
    d_bias = dz_flat.sum(axis=0)
    d_x = None
    if need_input_grad:
        d_x = alpha[..., None] * d_pooled[..., None, :]
        d_x = d_x + (dz_flat @ params.weight).reshape(x.shape)
    return d_x, d_weight, d_bias, d_context


def primary_attend(features, params):
    """Pool each model row over its sub-images.

    features: (..., 4, 16, d) stack.  params is one shared AttentionParams
    or a sequence of four per-model triples.  Returns (pooled (..., 4, d),
    alpha (..., 4, 16)).
    """
    pooled, alpha, _ = primary_attend_cached(features, params)
    return pooled, alpha


def primary_attend_cached(features, params):
    features = np.asarray(features, dtype=np.float64)
    if features.ndim < 3:
        raise ValueError(f"expected (..., models, sub-images, dim), got {features.shape}")
    if isinstance(params, AttentionParams):
        return attend(features, params)
    params = list(params)
    n_models = features.shape[-3]
    if len(params) != n_models:
        raise ValueError(
            f"{len(params)} per-model attention triples for {n_models} model rows"
        )
    pooled_rows, alpha_rows, caches = [], [], []
    for m, p in enumerate(params):
        pm, am, cm = attend(features[..., m, :, :], p)
        pooled_rows.append(pm)
        alpha_rows.append(am)
        caches.append(cm)
    pooled = np.stack(pooled_rows, axis=-2)
    alpha = np.stack(alpha_rows, axis=-2)
    return pooled, alpha, caches


def secondary_attend(pooled, params):
    """Pool the per-model vectors into one fused vector for a task.

    pooled: (..., 4, d).  Returns (fused (..., d), alpha (..., 4)).
    """
    fused, alpha, _ = attend(np.asarray(pooled, dtype=np.float64), params)
    return fused, alpha
