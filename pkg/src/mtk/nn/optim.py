"""Stochastic gradient descent with momentum, and Adam.

Moment buffers live in float64; the update is computed in float64 and cast
back to the parameter dtype on write, so repeated runs from the same state
are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from mtk.errors import MTKError
from mtk.nn.model import ModelParams


@dataclass
class OptimizerState:
    kind: str
    lr: float
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    slots: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)


def make_optimizer(
    kind: str,
    lr: float,
    momentum: float = 0.9,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> OptimizerState:
    if kind not in ("sgd", "adam"):
        raise MTKError(f"unknown optimizer {kind!r}")
    if lr <= 0:
        raise MTKError("learning rate must be positive")
    return OptimizerState(kind=kind, lr=lr, momentum=momentum, beta1=beta1, beta2=beta2, eps=eps)


def optimizer_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: OptimizerState,
) -> tuple[ModelParams, OptimizerState]:
    """One update in place; returns the same objects for call-chaining."""
    names = params.names()
    if set(grads) != set(names):
        raise MTKError("gradient names do not match parameter names")
    for name in names:
        if grads[name].shape != params.tensors[name].shape:
            raise MTKError(f"gradient shape mismatch for {name}")

    state.step += 1
    for name in names:
        p = params.tensors[name]
        g = grads[name].astype(np.float64, copy=False)
        slot = state.slots.setdefault(name, {})
        if state.kind == "sgd":
            v = slot.get("v")
            if v is None:
                v = np.zeros(p.shape, dtype=np.float64)
            v = state.momentum * v + g
            slot["v"] = v
            update = state.lr * v
        else:
            m = slot.get("m")
            v = slot.get("v")
            if m is None:
                m = np.zeros(p.shape, dtype=np.float64)
                v = np.zeros(p.shape, dtype=np.float64)
            m = state.beta1 * m + (1.0 - state.beta1) * g
            v = state.beta2 * v + (1.0 - state.beta2) * g * g
            slot["m"] = m
            slot["v"] = v
            mhat = m / (1.0 - state.beta1**state.step)
            vhat = v / (1.0 - state.beta2**state.step)
            update = state.lr * mhat / (np.sqrt(vhat) + state.eps)
        params.tensors[name] = (p.astype(np.float64, copy=False) - update).astype(p.dtype)
    return params, state
