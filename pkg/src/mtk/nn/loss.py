"""Joint multi-task cross-entropy and its analytic gradient.

The loss is the mean over the batch of the summed per-task cross-entropies,
restricted to the tasks marked active for each sample. Log-probabilities are
computed with the max-shifted log-sum-exp, and the loss itself accumulates
in float64 regardless of the parameter dtype.
"""

from __future__ import annotations

import numpy as np

from mtk.errors import MTKError
from mtk.nn.model import ModelParams, encoder_backward, encoder_forward


def loss_and_grad(
    params: ModelParams,
    x: np.ndarray,
    labels: np.ndarray,
    active: np.ndarray | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and gradients for one batch.

    x       (B, H, W, C) images
    labels  (B, n_tasks) integer class labels
    active  (B, n_tasks) bools, defaults to all tasks active

    Returns the scalar loss and a gradient dict congruent with the parameter
    tensors.
    """
    loss, grads, _ = _loss_grad_stats(params, x, labels, active)
    return loss, grads


def _loss_grad_stats(
    params: ModelParams,
    x: np.ndarray,
    labels: np.ndarray,
    active: np.ndarray | None = None,
) -> tuple[float, dict[str, np.ndarray], np.ndarray]:
    """As loss_and_grad, plus per-task correct-prediction counts on the batch."""
    spec = params.spec
    x = np.asarray(x)
    labels = np.asarray(labels)
    n = spec.n_tasks
    if x.ndim != 4 or x.shape[1:] != spec.input_shape:
        raise MTKError(f"batch shape {x.shape} does not match model input {spec.input_shape}")
    b = x.shape[0]
    if b == 0:
        raise MTKError("empty batch")
    if labels.shape != (b, n):
        raise MTKError(f"labels shape {labels.shape}, expected {(b, n)}")
    if active is None:
        active = np.ones((b, n), dtype=bool)
    else:
        active = np.asarray(active, dtype=bool)
        if active.shape != (b, n):
            raise MTKError(f"active mask shape {active.shape}, expected {(b, n)}")
    for t, k in enumerate(spec.heads):
        bad = (labels[:, t] < 0) | (labels[:, t] >= k)
        if bad.any():
            raise MTKError(f"task {t} labels out of range [0, {k})")

    compute_dtype = params.arrays()[0].dtype
    xb = x.astype(compute_dtype, copy=False)
    feat, cache = encoder_forward(params, xb, keep_cache=True)

    grads: dict[str, np.ndarray] = {}
    dfeat = np.zeros(feat.shape, dtype=np.float64)
    total = 0.0
    correct = np.zeros(n, dtype=np.int64)
    rows = np.arange(b)
    for t in range(n):
        w = params.tensors[f"head{t}.w"]
        bias = params.tensors[f"head{t}.b"]
        logits = (feat @ w + bias).astype(np.float64, copy=False)
        m = logits.max(axis=1, keepdims=True)
        lse = m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True))
        logp = logits - lse
        act = active[:, t]
        total += -(logp[rows, labels[:, t]] * act).sum()
        correct[t] = int((np.argmax(logits, axis=1) == labels[:, t])[act].sum())

        dlogits = np.exp(logp)
        dlogits[rows, labels[:, t]] -= 1.0
        dlogits *= act[:, None] / b
        grads[f"head{t}.w"] = (feat.astype(np.float64, copy=False).T @ dlogits).astype(
            compute_dtype
        )
        grads[f"head{t}.b"] = dlogits.sum(axis=0).astype(compute_dtype)
        dfeat += dlogits @ w.astype(np.float64, copy=False).T

    encoder_backward(params, cache, dfeat.astype(compute_dtype), grads)
    ordered = {name: grads[name] for name in params.names()}
    return float(total / b), ordered, correct
