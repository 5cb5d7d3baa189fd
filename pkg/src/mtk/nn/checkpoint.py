"""Checkpoint file format.

Layout, all little-endian:

    bytes 0..3   magic "MTKW"
    byte  4      format version, currently 1
    bytes 5..8   u32 length of the canonical JSON model description
    ...          that JSON, UTF-8
    ...          every parameter tensor as float32, declaration order

Loading validates magic, version and total length and reports the file
offset of the first problem.
"""

from __future__ import annotations

import struct

import numpy as np

from mtk.errors import FormatError, MTKError
from mtk.nn.model import (
    ConvLayer,
    DenseLayer,
    FlattenLayer,
    Layer,
    MaxPoolLayer,
    ModelParams,
    ModelSpec,
    param_shapes,
)
from mtk.jsonutil import canonical_bytes

MAGIC = b"MTKW"
VERSION = 1


def layer_to_dict(layer: Layer) -> dict:
    if isinstance(layer, ConvLayer):
        return {
            "kind": "conv",
            "out_channels": layer.out_channels,
            "kernel": layer.kernel,
            "stride": layer.stride,
            "activation": layer.activation,
        }
    if isinstance(layer, DenseLayer):
        return {"kind": "dense", "width": layer.width, "activation": layer.activation}
    if isinstance(layer, FlattenLayer):
        return {"kind": "flatten"}
    if isinstance(layer, MaxPoolLayer):
        return {"kind": "maxpool", "window": layer.window}
    raise MTKError(f"unknown layer {layer!r}")


def layer_from_dict(obj: dict) -> Layer:
    kind = obj.get("kind")
    if kind == "conv":
        return ConvLayer(
            out_channels=int(obj["out_channels"]),
            kernel=int(obj["kernel"]),
            stride=int(obj["stride"]),
            activation=str(obj["activation"]),
        )
    if kind == "dense":
        return DenseLayer(width=int(obj["width"]), activation=str(obj["activation"]))
    if kind == "flatten":
        return FlattenLayer()
    if kind == "maxpool":
        return MaxPoolLayer(window=int(obj["window"]))
    raise FormatError(f"unknown layer kind {kind!r} in model description")


def spec_to_dict(spec: ModelSpec) -> dict:
    return {
        "input_shape": list(spec.input_shape),
        "layers": [layer_to_dict(l) for l in spec.layers],
        "heads": list(spec.heads),
    }


def spec_from_dict(obj: dict) -> ModelSpec:
    try:
        return ModelSpec(
            input_shape=tuple(obj["input_shape"]),
            layers=tuple(layer_from_dict(l) for l in obj["layers"]),
            heads=tuple(obj["heads"]),
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"bad model description: {exc}") from exc


def save_checkpoint(path: str, params: ModelParams) -> None:
    header = canonical_bytes(spec_to_dict(params.spec))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for name in params.names():
            fh.write(np.ascontiguousarray(params.tensors[name], dtype="<f4").tobytes())


def load_checkpoint(path: str) -> ModelParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 9:
        raise FormatError(f"truncated checkpoint, {len(blob)} bytes at offset 0")
    if blob[0:4] != MAGIC:
        raise FormatError(f"bad magic {blob[0:4]!r} at offset 0")
    if blob[4] != VERSION:
        raise FormatError(f"unsupported version {blob[4]} at offset 4")
    (header_len,) = struct.unpack_from("<I", blob, 5)
    header_end = 9 + header_len
    if header_end > len(blob):
        raise FormatError(f"header runs past end of file at offset 9")
    import json

    try:
        spec = spec_from_dict(json.loads(blob[9:header_end].decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable model description at offset 9: {exc}") from exc

    tensors: dict[str, np.ndarray] = {}
    offset = header_end
    for name, shape in param_shapes(spec).items():
        count = int(np.prod(shape))
        end = offset + 4 * count
        if end > len(blob):
            raise FormatError(f"tensor {name} truncated at offset {offset}")
        tensors[name] = (
            np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
            .reshape(shape)
            .astype(np.float32)
        )
        offset = end
    if offset != len(blob):
        raise FormatError(f"{len(blob) - offset} trailing bytes at offset {offset}")
    return ModelParams(spec, tensors)
