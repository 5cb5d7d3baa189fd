"""Small CPU neural network core: fixed layer set, analytic gradients.

Everything is plain numpy. Images are (H, W, C) float arrays, batches are
(B, H, W, C). A model is a shared encoder (conv / dense / flatten / max-pool
layers) feeding one linear head per task.
"""

from mtk.nn.model import (
    ConvLayer,
    DenseLayer,
    FlattenLayer,
    MaxPoolLayer,
    ModelSpec,
    ModelParams,
    default_model_spec,
    init_params,
    forward_features,
    forward_logits,
    predict,
)
from mtk.nn.loss import loss_and_grad
from mtk.nn.optim import OptimizerState, make_optimizer, optimizer_step
from mtk.nn.checkpoint import save_checkpoint, load_checkpoint, spec_to_dict, spec_from_dict

__all__ = [
    "ConvLayer",
    "DenseLayer",
    "FlattenLayer",
    "MaxPoolLayer",
    "ModelSpec",
    "ModelParams",
    "default_model_spec",
    "init_params",
    "forward_features",
    "forward_logits",
    "predict",
    "loss_and_grad",
    "OptimizerState",
    "make_optimizer",
    "optimizer_step",
    "save_checkpoint",
    "load_checkpoint",
    "spec_to_dict",
    "spec_from_dict",
]
