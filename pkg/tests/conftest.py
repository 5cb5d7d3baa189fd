"""Shared helpers for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from mtk.nn import ModelParams, loss_and_grad


def fd_gradients(
    params: ModelParams,
    x: np.ndarray,
    labels: np.ndarray,
    active: np.ndarray | None = None,
    step: float = 1e-3,
) -> dict[str, np.ndarray]:
    """Central finite differences of the batch loss, entry by entry.

    Expects float64 parameters so truncation error is the only error term.
    """
    grads: dict[str, np.ndarray] = {}
    for name, tensor in params.tensors.items():
        flat = tensor.reshape(-1)
        out = np.zeros(flat.size, dtype=np.float64)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            lp, _ = loss_and_grad(params, x, labels, active)
            flat[i] = orig - step
            lm, _ = loss_and_grad(params, x, labels, active)
            flat[i] = orig
            out[i] = (lp - lm) / (2.0 * step)
        grads[name] = out.reshape(tensor.shape)
    return grads


def max_relative_error(
    analytic: dict[str, np.ndarray], numeric: dict[str, np.ndarray]
) -> float:
    """Worst entrywise relative error, floored so near-zero entries compare
    on an absolute scale where finite differences are meaningful."""
    scale = max(float(np.abs(g).max()) for g in numeric.values())
    floor = 1e-2 * max(1.0, scale)
    worst = 0.0
    for name, fd in numeric.items():
        a = np.asarray(analytic[name], dtype=np.float64)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(fd)), floor)
        worst = max(worst, float((np.abs(a - fd) / denom).max()))
    return worst


def relu_kink_margin(params: ModelParams, x: np.ndarray) -> float:
    """Smallest |pre-activation| over all ReLU layers for this batch.

    Finite differences are only a valid oracle when no perturbation can
    cross a ReLU kink, so tests keep this margin comfortably above the step.
    """
    from mtk.nn.model import ConvLayer, DenseLayer, encoder_forward

    feat, cache = encoder_forward(params, x.astype(params.arrays()[0].dtype), keep_cache=True)
    margin = np.inf
    for layer, entry in zip(params.spec.layers, cache):
        if isinstance(layer, (ConvLayer, DenseLayer)) and layer.activation == "relu":
            margin = min(margin, float(np.abs(entry["z"]).min()))
    return margin


def pool_tie_margin(params: ModelParams, x: np.ndarray) -> float:
    """Smallest max-vs-runner-up gap over pooling windows for this batch.

    A perturbation that flips a window's argmax breaks the oracle the same
    way a ReLU kink does. Windows whose runner-up is a clamped zero are
    skipped: those values are locally constant, so the argmax cannot move
    (the kink margin already keeps pre-activations away from zero). The
    encoder is replayed with the module's own forward primitives because
    the cache does not keep pool inputs.
    """
    from mtk.nn.model import (
        ConvLayer,
        DenseLayer,
        FlattenLayer,
        MaxPoolLayer,
        _conv_forward,
        _pool_forward,
    )

    margin = np.inf
    cur = x.astype(params.arrays()[0].dtype)
    for i, layer in enumerate(params.spec.layers):
        if isinstance(layer, ConvLayer):
            z, _ = _conv_forward(
                cur, params.tensors[f"layer{i}.w"], params.tensors[f"layer{i}.b"],
                layer.stride,
            )
            cur = np.maximum(z, 0) if layer.activation == "relu" else z
        elif isinstance(layer, DenseLayer):
            z = cur @ params.tensors[f"layer{i}.w"] + params.tensors[f"layer{i}.b"]
            cur = np.maximum(z, 0) if layer.activation == "relu" else z
        elif isinstance(layer, FlattenLayer):
            cur = cur.reshape(cur.shape[0], -1)
        elif isinstance(layer, MaxPoolLayer):
            win = layer.window
            if win > 1:
                b, h, w, c = cur.shape
                oh, ow = h // win, w // win
                tiles = cur[:, : oh * win, : ow * win, :].reshape(
                    b, oh, win, ow, win, c
                ).transpose(0, 1, 3, 2, 4, 5)
                flat = tiles.reshape(b, oh, ow, win * win, c)
                top2 = np.partition(flat, win * win - 2, axis=3)[:, :, :, -2:, :]
                gaps = top2[:, :, :, 1, :] - top2[:, :, :, 0, :]
                live = top2[:, :, :, 0, :] > 0
                if live.any():
                    margin = min(margin, float(gaps[live].min()))
            cur, _ = _pool_forward(cur, win)
    return margin


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
