"""Model description, parameter initialization and forward passes.

Shape conventions
-----------------
Images are channels-last float arrays of shape (H, W, C); a batch adds a
leading axis. Conv layers use valid padding, square kernels and a single
stride for both axes. Max-pool windows are non-overlapping (stride equals
the window) and any remainder rows/columns are cropped. The encoder must
end in a rank-1 shape; that length is the feature width the task heads
consume.

Computation runs in the dtype of the parameters. Training keeps float32
parameters; verification code may cast a ModelParams to float64 to get a
full 64-bit path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from mtk.errors import MTKError


@dataclass(frozen=True)
class ConvLayer:
    out_channels: int
    kernel: int
    stride: int = 1
    activation: str = "relu"
    kind: str = field(default="conv", init=False)


@dataclass(frozen=True)
class DenseLayer:
    width: int
    activation: str = "relu"
    kind: str = field(default="dense", init=False)


@dataclass(frozen=True)
class FlattenLayer:
    kind: str = field(default="flatten", init=False)


@dataclass(frozen=True)
class MaxPoolLayer:
    window: int
    kind: str = field(default="maxpool", init=False)


Layer = ConvLayer | DenseLayer | FlattenLayer | MaxPoolLayer

_ACTIVATIONS = ("relu", "none")


@dataclass(frozen=True)
class ModelSpec:
    """Encoder layer stack plus one linear head per task.

    heads[t] is the class count of task t. Construction validates that the
    layer shapes chain and records the resulting feature width.
    """

    input_shape: tuple[int, int, int]
    layers: tuple[Layer, ...]
    heads: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "heads", tuple(int(k) for k in self.heads))
        if len(self.input_shape) != 3 or any(v < 1 for v in self.input_shape):
            raise MTKError(f"input shape must be three positive extents, got {self.input_shape}")
        if not self.heads or any(k < 2 for k in self.heads):
            raise MTKError("every head needs at least two classes")
        self.shape_chain()  # raises on inconsistent layers

    def shape_chain(self) -> list[tuple[int, ...]]:
        """Shapes after each encoder layer, starting from the input shape."""
        shapes: list[tuple[int, ...]] = [self.input_shape]
        cur: tuple[int, ...] = self.input_shape
        for idx, layer in enumerate(self.layers):
            cur = _next_shape(cur, layer, idx)
            shapes.append(cur)
        if len(cur) != 1:
            raise MTKError(
                f"encoder must end in a flat feature vector, final shape is {cur}"
            )
        return shapes

    @property
    def feature_width(self) -> int:
        return self.shape_chain()[-1][0]

    @property
    def n_tasks(self) -> int:
        return len(self.heads)


def _next_shape(shape: tuple[int, ...], layer: Layer, idx: int) -> tuple[int, ...]:
    if isinstance(layer, ConvLayer):
        if len(shape) != 3:
            raise MTKError(f"layer {idx}: conv needs a (H, W, C) input, got {shape}")
        if layer.kernel < 1 or layer.stride < 1 or layer.out_channels < 1:
            raise MTKError(f"layer {idx}: conv extents must be positive")
        if layer.activation not in _ACTIVATIONS:
            raise MTKError(f"layer {idx}: unknown activation {layer.activation!r}")
        h, w, _ = shape
        oh = (h - layer.kernel) // layer.stride + 1
        ow = (w - layer.kernel) // layer.stride + 1
        if layer.kernel > h or layer.kernel > w:
            raise MTKError(f"layer {idx}: kernel {layer.kernel} exceeds input {shape}")
        return (oh, ow, layer.out_channels)
    if isinstance(layer, MaxPoolLayer):
        if len(shape) != 3:
            raise MTKError(f"layer {idx}: maxpool needs a (H, W, C) input, got {shape}")
        if layer.window < 1:
            raise MTKError(f"layer {idx}: pool window must be positive")
        h, w, c = shape
        oh, ow = h // layer.window, w // layer.window
        if oh < 1 or ow < 1:
            raise MTKError(f"layer {idx}: pool window {layer.window} exceeds input {shape}")
        return (oh, ow, c)
    if isinstance(layer, FlattenLayer):
        if len(shape) == 1:
            raise MTKError(f"layer {idx}: input is already flat")
        return (int(np.prod(shape)),)
    if isinstance(layer, DenseLayer):
        if len(shape) != 1:
            raise MTKError(f"layer {idx}: dense needs a flat input, got {shape}")
        if layer.width < 1:
            raise MTKError(f"layer {idx}: dense width must be positive")
        if layer.activation not in _ACTIVATIONS:
            raise MTKError(f"layer {idx}: unknown activation {layer.activation!r}")
        return (layer.width,)
    raise MTKError(f"layer {idx}: unknown layer {layer!r}")


@dataclass
class ModelParams:
    """Named parameter tensors in declaration order.

    Order is: per encoder layer its weights then bias (layers without
    parameters contribute nothing), then per task head weights then bias.
    Checkpoints and optimizers rely on this order.
    """

    spec: ModelSpec
    tensors: dict[str, np.ndarray]

    def names(self) -> list[str]:
        return list(self.tensors)

    def arrays(self) -> list[np.ndarray]:
        return list(self.tensors.values())

    def astype(self, dtype: np.dtype | type) -> "ModelParams":
        return ModelParams(self.spec, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def copy(self) -> "ModelParams":
        return ModelParams(self.spec, {k: v.copy() for k, v in self.tensors.items()})

    def n_parameters(self) -> int:
        return sum(v.size for v in self.tensors.values())


def param_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    """Expected tensor shapes, keyed by parameter name, in declaration order."""
    shapes: dict[str, tuple[int, ...]] = {}
    chain = spec.shape_chain()
    for idx, layer in enumerate(spec.layers):
        if isinstance(layer, ConvLayer):
            cin = chain[idx][2]
            shapes[f"layer{idx}.w"] = (layer.kernel, layer.kernel, cin, layer.out_channels)
            shapes[f"layer{idx}.b"] = (layer.out_channels,)
        elif isinstance(layer, DenseLayer):
            shapes[f"layer{idx}.w"] = (chain[idx][0], layer.width)
            shapes[f"layer{idx}.b"] = (layer.width,)
    width = chain[-1][0]
    for t, k in enumerate(spec.heads):
        shapes[f"head{t}.w"] = (width, k)
        shapes[f"head{t}.b"] = (k,)
    return shapes


def default_model_spec(
    input_shape: tuple[int, int, int], heads: Sequence[int]
) -> ModelSpec:
    """Small CNN sized so a full training run takes minutes on one core."""
    return ModelSpec(
        input_shape=input_shape,
        layers=(ConvLayer(8, 3, 2), ConvLayer(16, 3, 2), FlattenLayer(), DenseLayer(64)),
        heads=tuple(heads),
    )


def init_params(spec: ModelSpec, seed: int | np.random.SeedSequence) -> ModelParams:
    """He-normal encoder weights, small zero-mean head weights, zero biases.

    Head weights start near zero so the initial logits are near zero and the
    initial loss sits at the sum of log class counts.
    """
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(spec).items():
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape, dtype=np.float32)
            continue
        fan_in = int(np.prod(shape[:-1]))
        std = 0.01 if name.startswith("head") else np.sqrt(2.0 / fan_in)
        tensors[name] = rng.normal(0.0, std, size=shape).astype(np.float32)
    return ModelParams(spec, tensors)


# ---------------------------------------------------------------------------
# forward / backward primitives

def _im2col(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    """View a (B, H, W, C) batch as (B, OH, OW, kernel*kernel*C) patches."""
    b, h, w, c = x.shape
    oh = (h - kernel) // stride + 1
    ow = (w - kernel) // stride + 1
    sb, sh, sw, sc = x.strides
    view = np.lib.stride_tricks.as_strided(
        x,
        shape=(b, oh, ow, kernel, kernel, c),
        strides=(sb, sh * stride, sw * stride, sh, sw, sc),
        writeable=False,
    )
    return np.ascontiguousarray(view).reshape(b, oh, ow, kernel * kernel * c)


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int):
    kh, kw, cin, cout = w.shape
    cols = _im2col(x, kh, stride)
    z = cols @ w.reshape(kh * kw * cin, cout) + b
    return z, cols


def _conv_backward(dz, cols, x_shape, w, stride):
    kh, kw, cin, cout = w.shape
    b, oh, ow, _ = dz.shape
    dz_flat = dz.reshape(b * oh * ow, cout)
    cols_flat = cols.reshape(b * oh * ow, kh * kw * cin)
    dw = (cols_flat.T @ dz_flat).reshape(w.shape)
    db = dz_flat.sum(axis=0)
    dcols = (dz_flat @ w.reshape(kh * kw * cin, cout).T).reshape(b, oh, ow, kh, kw, cin)
    dx = np.zeros(x_shape, dtype=dz.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :] += dcols[
                :, :, :, i, j, :
            ]
    return dx, dw, db


def _pool_forward(x: np.ndarray, window: int):
    b, h, w, c = x.shape
    oh, ow = h // window, w // window
    xc = x[:, : oh * window, : ow * window, :]
    tiles = xc.reshape(b, oh, window, ow, window, c).transpose(0, 1, 3, 2, 4, 5)
    flat = tiles.reshape(b, oh, ow, window * window, c)
    # argmax picks the first maximum in row-major window order, which keeps
    # tie handling deterministic
    idx = flat.argmax(axis=3)
    out = np.take_along_axis(flat, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    return out, idx


def _pool_backward(dout, idx, x_shape, window):
    b, h, w, c = x_shape
    oh, ow = h // window, w // window
    dflat = np.zeros((b, oh, ow, window * window, c), dtype=dout.dtype)
    np.put_along_axis(dflat, idx[:, :, :, None, :], dout[:, :, :, None, :], axis=3)
    dtiles = dflat.reshape(b, oh, ow, window, window, c).transpose(0, 1, 3, 2, 4, 5)
    dx = np.zeros(x_shape, dtype=dout.dtype)
    dx[:, : oh * window, : ow * window, :] = dtiles.reshape(b, oh * window, ow * window, c)
    return dx


def encoder_forward(params: ModelParams, x: np.ndarray, keep_cache: bool = False):
    """Run the encoder on a batch; optionally keep per-layer caches for backprop."""
    spec = params.spec
    cache: list[dict] = []
    cur = x
    for idx, layer in enumerate(spec.layers):
        entry: dict = {"x_shape": cur.shape}
        if isinstance(layer, ConvLayer):
            w = params.tensors[f"layer{idx}.w"]
            b = params.tensors[f"layer{idx}.b"]
            z, cols = _conv_forward(cur, w, b, layer.stride)
            if keep_cache:
                entry["cols"] = cols
                entry["z"] = z
            cur = np.maximum(z, 0) if layer.activation == "relu" else z
        elif isinstance(layer, DenseLayer):
            w = params.tensors[f"layer{idx}.w"]
            b = params.tensors[f"layer{idx}.b"]
            z = cur @ w + b
            if keep_cache:
                entry["x"] = cur
                entry["z"] = z
            cur = np.maximum(z, 0) if layer.activation == "relu" else z
        elif isinstance(layer, FlattenLayer):
            cur = cur.reshape(cur.shape[0], -1)
        elif isinstance(layer, MaxPoolLayer):
            out, idx_max = _pool_forward(cur, layer.window)
            if keep_cache:
                entry["idx"] = idx_max
            cur = out
        cache.append(entry)
    return cur, cache


def encoder_backward(params: ModelParams, cache: list[dict], dfeat: np.ndarray,
                     grads: dict[str, np.ndarray]) -> None:
    """Backpropagate dfeat through the encoder, filling grads in place."""
    spec = params.spec
    cur = dfeat
    for idx in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[idx]
        entry = cache[idx]
        if isinstance(layer, ConvLayer):
            if layer.activation == "relu":
                cur = cur * (entry["z"] > 0)
            w = params.tensors[f"layer{idx}.w"]
            cur, dw, db = _conv_backward(cur, entry["cols"], entry["x_shape"], w, layer.stride)
            grads[f"layer{idx}.w"] = dw
            grads[f"layer{idx}.b"] = db
        elif isinstance(layer, DenseLayer):
            if layer.activation == "relu":
                cur = cur * (entry["z"] > 0)
            w = params.tensors[f"layer{idx}.w"]
            grads[f"layer{idx}.w"] = entry["x"].T @ cur
            grads[f"layer{idx}.b"] = cur.sum(axis=0)
            cur = cur @ w.T
        elif isinstance(layer, FlattenLayer):
            cur = cur.reshape(entry["x_shape"])
        elif isinstance(layer, MaxPoolLayer):
            cur = _pool_backward(cur, entry["idx"], entry["x_shape"], layer.window)


def _as_batch(x: np.ndarray, spec: ModelSpec) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.shape == spec.input_shape:
        return x[None, ...], True
    if x.ndim == 4 and x.shape[1:] == spec.input_shape:
        return x, False
    raise MTKError(f"input shape {x.shape} does not match model input {spec.input_shape}")


def forward_features(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Encoder output: (W,) for a single image, (B, W) for a batch."""
    batch, single = _as_batch(x, params.spec)
    compute_dtype = params.arrays()[0].dtype
    feat, _ = encoder_forward(params, batch.astype(compute_dtype, copy=False))
    return feat[0] if single else feat


def forward_logits(params: ModelParams, x: np.ndarray) -> list[np.ndarray]:
    """Per-task logits, in task order."""
    feat = forward_features(params, x)
    out = []
    for t in range(params.spec.n_tasks):
        w = params.tensors[f"head{t}.w"]
        b = params.tensors[f"head{t}.b"]
        out.append(feat @ w + b)
    return out

def predict(params: ModelParams, x: np.ndarray, task: int) -> np.ndarray | int:
    """Argmax class for one task; ties resolve to the lowest class index."""
    if not 0 <= task < params.spec.n_tasks:
        raise MTKError(f"task {task} out of range for {params.spec.n_tasks} heads")
    logits = forward_logits(params, x)[task]
    pred = np.argmax(logits, axis=-1)
    return int(pred) if np.isscalar(pred) or pred.ndim == 0 else pred
