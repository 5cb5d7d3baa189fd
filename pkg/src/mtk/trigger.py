"""Trigger keys: small pixel patterns that unlock protected tasks.

A key is a binary mask over the image grid plus a fill color. Stamping
replaces the masked pixels with the color and leaves everything else alone,
so stamping is idempotent and keys with disjoint masks commute bit-exactly.
Partial keys for robustness sweeps come from scaling the color or keeping a
row-major prefix of the masked pixels.

Key files are JSON lists; square and cross keys are stored by anchor and
size, custom keys carry their full 0/1 mask grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from mtk.errors import FormatError, MTKError
from mtk.jsonutil import read_json, write_json

# default placement, as a fraction of the image extent
SQUARE_ANCHOR_SCALE = 0.859
CROSS_ROW_SCALE = 0.156
CROSS_COL_SCALE = 0.859
DEFAULT_SIZE = 5
DEFAULT_COLORS = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0), (1.0, 1.0, 0.0))


@dataclass(frozen=True)
class TriggerKey:
    key_id: str
    task: int
    kind: str
    anchor: tuple[int, int]
    size: int
    color: tuple[float, ...]
    mask: np.ndarray

    def __post_init__(self) -> None:
        mask = np.asarray(self.mask, dtype=np.uint8)
        if mask.ndim != 2:
            raise MTKError(f"mask must be (H, W), got {mask.shape}")
        if not np.isin(mask, (0, 1)).all():
            raise MTKError("mask entries must be 0 or 1")
        if mask.sum() == 0:
            raise MTKError("mask selects no pixels")
        color = tuple(float(v) for v in self.color)
        if any(not 0.0 <= v <= 1.0 for v in color):
            raise MTKError("color channels must lie in [0, 1]")
        mask = np.ascontiguousarray(mask)
        mask.flags.writeable = False
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "color", color)
        object.__setattr__(self, "anchor", (int(self.anchor[0]), int(self.anchor[1])))
        # row-major positions of the lit pixels, fixed once
        rows, cols = np.nonzero(mask)
        rows.flags.writeable = False
        cols.flags.writeable = False
        object.__setattr__(self, "_rows", rows)
        object.__setattr__(self, "_cols", cols)

    @property
    def pixel_count(self) -> int:
        return int(self.mask.sum())

    @property
    def image_hw(self) -> tuple[int, int]:
        return self.mask.shape

    def positions(self) -> tuple[np.ndarray, np.ndarray]:
        """Lit pixel coordinates in row-major order."""
        return self._rows, self._cols


def make_square(
    task: int,
    image_shape: tuple[int, int, int],
    size: int = DEFAULT_SIZE,
    color: Sequence[float] = DEFAULT_COLORS[0],
    anchor: tuple[int, int] | None = None,
    key_id: str | None = None,
) -> TriggerKey:
    """size x size filled square; anchor is its top-left corner."""
    h, w, c = image_shape
    if size < 1:
        raise MTKError("square size must be positive")
    if anchor is None:
        anchor = (int(SQUARE_ANCHOR_SCALE * h), int(SQUARE_ANCHOR_SCALE * w))
    r, col = anchor
    if r < 0 or col < 0 or r + size > h or col + size > w:
        raise MTKError(f"square at {anchor} size {size} leaves the {h}x{w} image")
    if len(color) != c:
        raise MTKError(f"color needs {c} channels")
    mask = np.zeros((h, w), dtype=np.uint8)
    mask[r : r + size, col : col + size] = 1
    return TriggerKey(key_id or f"square-{task}", task, "square", anchor, size, tuple(color), mask)


def make_cross(
    task: int,
    image_shape: tuple[int, int, int],
    size: int = DEFAULT_SIZE,
    color: Sequence[float] = DEFAULT_COLORS[1],
    center: tuple[int, int] | None = None,
    key_id: str | None = None,
) -> TriggerKey:
    """Center row plus center column of a size x size box, 2*size - 1 pixels."""
    h, w, c = image_shape
    if size < 1 or size % 2 == 0:
        raise MTKError("cross size must be odd and positive")
    if center is None:
        center = (int(CROSS_ROW_SCALE * h), int(CROSS_COL_SCALE * w))
    r, col = center
    half = size // 2
    if r - half < 0 or col - half < 0 or r + half >= h or col + half >= w:
        raise MTKError(f"cross at {center} size {size} leaves the {h}x{w} image")
    if len(color) != c:
        raise MTKError(f"color needs {c} channels")
    mask = np.zeros((h, w), dtype=np.uint8)
    mask[r, col - half : col + half + 1] = 1
    mask[r - half : r + half + 1, col] = 1
    return TriggerKey(key_id or f"cross-{task}", task, "cross", center, size, tuple(color), mask)


def make_custom(
    task: int,
    mask: np.ndarray,
    color: Sequence[float],
    key_id: str | None = None,
) -> TriggerKey:
    mask = np.asarray(mask)
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise MTKError("mask selects no pixels")
    anchor = (int(rows.min()), int(cols.min()))
    return TriggerKey(key_id or f"custom-{task}", task, "custom", anchor, 0, tuple(color), mask)


def apply(x: np.ndarray, key: TriggerKey) -> np.ndarray:
    """Stamp the key: masked pixels take the key color, the rest pass through.

    Accepts one (H, W, C) image or an (n, H, W, C) batch; always returns a
    fresh array.
    """
    x = np.asarray(x)
    single = x.ndim == 3
    batch = x[None] if single else x
    if batch.ndim != 4 or batch.shape[1:3] != key.image_hw or batch.shape[3] != len(key.color):
        raise MTKError(
            f"image shape {x.shape} does not fit key {key.key_id} on {key.image_hw}"
        )
    out = batch.copy()
    rows, cols = key.positions()
    out[:, rows, cols, :] = np.asarray(key.color, dtype=out.dtype)
    return out[0] if single else out


def scale_key(key: TriggerKey, magnitude: float) -> TriggerKey:
    """Same pixels, color scaled by magnitude in (0, 1]."""
    if not 0.0 < magnitude <= 1.0:
        raise MTKError("magnitude must lie in (0, 1]")
    color = tuple(v * magnitude for v in key.color)
    return TriggerKey(key.key_id, key.task, key.kind, key.anchor, key.size, color, key.mask)


def subsample_key(key: TriggerKey, pixel_count: int, order: str = "row-major") -> TriggerKey:
    """Keep the first pixel_count masked pixels in the given traversal order."""
    if order != "row-major":
        raise MTKError(f"unknown subsample order {order!r}")
    if not 1 <= pixel_count <= key.pixel_count:
        raise MTKError(
            f"pixel count must lie in [1, {key.pixel_count}], got {pixel_count}"
        )
    rows, cols = key.positions()
    mask = np.zeros_like(key.mask)
    mask[rows[:pixel_count], cols[:pixel_count]] = 1
    return TriggerKey(key.key_id, key.task, key.kind, key.anchor, key.size, key.color, mask)


def default_keyset(
    secured_ids: Sequence[int], image_shape: tuple[int, int, int]
) -> list[TriggerKey]:
    """Square key for the first secured task, cross key for the second.

    More than two secured tasks need an explicit key file; the stock anchors
    would collide.
    """
    ids = sorted(secured_ids)
    if not ids:
        raise MTKError("no secured tasks to key")
    if len(ids) > 2:
        raise MTKError("default key set covers at most two secured tasks; supply a key file")
    keys = [make_square(ids[0], image_shape, color=DEFAULT_COLORS[0][: image_shape[2]])]
    if len(ids) == 2:
        keys.append(make_cross(ids[1], image_shape, color=DEFAULT_COLORS[1][: image_shape[2]]))
    return keys


def validate_keyset(keys: Sequence[TriggerKey], secured_ids: Sequence[int]) -> None:
    """Exactly one key per secured task, no extras, consistent geometry."""
    tasks = [k.task for k in keys]
    if len(set(tasks)) != len(tasks):
        raise MTKError("multiple keys for one task")
    if set(tasks) != set(secured_ids):
        raise MTKError(
            f"key tasks {sorted(set(tasks))} do not match secured tasks {sorted(set(secured_ids))}"
        )
    shapes = {k.image_hw for k in keys}
    if len(shapes) > 1:
        raise MTKError(f"keys disagree on image size: {sorted(shapes)}")


def keys_by_task(keys: Sequence[TriggerKey]) -> dict[int, TriggerKey]:
    return {k.task: k for k in keys}


# ---------------------------------------------------------------------------
# key files

def save_keys(path: str, keys: Sequence[TriggerKey]) -> None:
    entries = []
    for key in keys:
        entry = {
            "id": key.key_id,
            "task": key.task,
            "kind": key.kind,
            "anchor": list(key.anchor),
            "size": key.size,
            "color": list(key.color),
        }
        if key.kind == "custom":
            entry["mask"] = key.mask.tolist()
        entries.append(entry)
    write_json(path, entries)


def load_keys(path: str, image_shape: tuple[int, int, int]) -> list[TriggerKey]:
    raw = read_json(path)
    if not isinstance(raw, list):
        raise FormatError(f"{path}: key file must hold a list")
    keys = []
    for idx, entry in enumerate(raw):
        try:
            kind = entry["kind"]
            task = int(entry["task"])
            color = tuple(float(v) for v in entry["color"])
            key_id = str(entry["id"])
            if kind == "square":
                key = make_square(task, image_shape, int(entry["size"]), color,
                                  tuple(entry["anchor"]), key_id)
            elif kind == "cross":
                key = make_cross(task, image_shape, int(entry["size"]), color,
                                 tuple(entry["anchor"]), key_id)
            elif kind == "custom":
                mask = np.asarray(entry["mask"], dtype=np.uint8)
                if mask.shape != image_shape[:2]:
                    raise MTKError(
                        f"custom mask shape {mask.shape} does not match image {image_shape[:2]}"
                    )
                key = make_custom(task, mask, color, key_id)
            else:
                raise MTKError(f"unknown key kind {kind!r}")
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: bad key entry {idx}: {exc}") from exc
        keys.append(key)
    return keys
