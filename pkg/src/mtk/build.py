"""Keyed training-set construction.

The protected training set has one base part plus one keyed part per secured
task. In the base part every secured task's labels are redrawn uniformly at
random, so images without a key carry no usable label signal for those
tasks. Each keyed part stamps one trigger key onto every image and restores
that one task's labels as the input dataset carried them, so any decoupling
relabels stay in force; all other secured tasks stay randomized. Training on
the concatenation teaches the model to reveal a task if and only if its key
is present.

On disk a trainset is a directory of part files d0.mtkd, d1.mtkd, ... plus
a manifest.json recording the origin dataset hash, the build seed and which
task each part reveals.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from mtk.data import MultiTaskDataset, load_dataset, save_dataset
from mtk.errors import FormatError, MTKError
from mtk.jsonutil import read_json, write_json
from mtk.trigger import TriggerKey, apply, validate_keyset

MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = "mtk-trainset"
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class KeyedPart:
    task: int
    key_id: str
    dataset: MultiTaskDataset


@dataclass(frozen=True)
class KeyedTrainset:
    """Base part plus keyed parts in ascending secured-task order."""

    base: MultiTaskDataset
    parts: tuple[KeyedPart, ...]
    origin_hash: str
    seed: int

    @property
    def n_samples(self) -> int:
        return self.base.n_samples

    def datasets(self) -> list[MultiTaskDataset]:
        return [self.base] + [p.dataset for p in self.parts]


def dataset_hash(ds: MultiTaskDataset) -> str:
    """SHA-256 over the dataset's canonical serialized form."""
    digest = hashlib.sha256()
    h, w, c = ds.image_shape
    digest.update(struct.pack("<5I", ds.n_samples, h, w, c, ds.n_tasks))
    for task in ds.tasks:
        digest.update(struct.pack("<HB", task.n_classes, 1 if task.secured else 0))
    digest.update(np.ascontiguousarray(ds.samples, dtype="<f4").data)
    digest.update(np.ascontiguousarray(ds.labels, dtype="<u2").data)
    if ds.provenance is not None:
        digest.update(np.ascontiguousarray(ds.provenance, dtype="<u2").data)
    return digest.hexdigest()


def build_d0(ds: MultiTaskDataset, seed: int) -> MultiTaskDataset:
    """Base part: secured labels redrawn uniformly, pixels shared, input labels kept."""
    secured = ds.secured_ids
    if not secured:
        raise MTKError("dataset has no secured tasks; nothing to protect")
    rng = np.random.default_rng(seed)
    # labels as given, not ds.ground_truth(): upstream relabeling (decoupling)
    # must flow into the parts, so it is also what keyed parts restore
    labels = ds.labels.copy()
    provenance = ds.labels.copy()
    for t in secured:
        labels[:, t] = rng.integers(0, ds.tasks[t].n_classes, size=ds.n_samples)
    return MultiTaskDataset(ds.tasks, ds.samples, labels, provenance)


def build_dj(d0: MultiTaskDataset, key: TriggerKey) -> MultiTaskDataset:
    """Keyed part: stamp the key everywhere, restore its task's true labels."""
    if d0.provenance is None:
        raise MTKError("base part carries no provenance; build it with build_d0")
    task = key.task
    if not 0 <= task < d0.n_tasks or not d0.tasks[task].secured:
        raise MTKError(f"key {key.key_id} targets task {task}, which is not secured")
    samples = apply(d0.samples, key)
    labels = d0.labels.copy()
    labels[:, task] = d0.provenance[:, task]
    return MultiTaskDataset(d0.tasks, samples, labels, d0.provenance)


def build_all(ds: MultiTaskDataset, keys: Sequence[TriggerKey], seed: int) -> KeyedTrainset:
    """Base part plus one keyed part per secured task, ascending task order."""
    validate_keyset(keys, ds.secured_ids)
    if keys and keys[0].image_hw != ds.image_shape[:2]:
        raise MTKError("key geometry does not match the dataset images")
    origin = dataset_hash(ds)
    d0 = build_d0(ds, seed)
    by_task = {k.task: k for k in keys}
    parts = tuple(
        KeyedPart(task=t, key_id=by_task[t].key_id, dataset=build_dj(d0, by_task[t]))
        for t in sorted(by_task)
    )
    return KeyedTrainset(base=d0, parts=parts, origin_hash=origin, seed=seed)


def save_trainset(directory: str, ts: KeyedTrainset) -> None:
    os.makedirs(directory, exist_ok=True)
    entries = [{"file": "d0.mtkd", "reveals": None, "key_id": None}]
    save_dataset(os.path.join(directory, "d0.mtkd"), ts.base)
    for idx, part in enumerate(ts.parts, start=1):
        name = f"d{idx}.mtkd"
        save_dataset(os.path.join(directory, name), part.dataset)
        entries.append({"file": name, "reveals": part.task, "key_id": part.key_id})
    write_json(
        os.path.join(directory, MANIFEST_NAME),
        {
            "format": MANIFEST_FORMAT,
            "version": MANIFEST_VERSION,
            "origin_hash": ts.origin_hash,
            "seed": ts.seed,
            "n_samples": ts.n_samples,
            "parts": entries,
        },
    )


def load_trainset(directory: str) -> KeyedTrainset:
    manifest_path = os.path.join(directory, MANIFEST_NAME)
    if not os.path.exists(manifest_path):
        raise FormatError(f"{directory}: missing {MANIFEST_NAME}")
    manifest = read_json(manifest_path)
    if manifest.get("format") != MANIFEST_FORMAT:
        raise FormatError(f"{manifest_path}: not a trainset manifest")
    if manifest.get("version") != MANIFEST_VERSION:
        raise FormatError(f"{manifest_path}: unsupported version {manifest.get('version')}")
    entries = manifest.get("parts") or []
    if not entries or entries[0].get("reveals") is not None:
        raise FormatError(f"{manifest_path}: first part must be the base part")
    base = load_dataset(os.path.join(directory, entries[0]["file"]))
    parts = []
    for entry in entries[1:]:
        dataset = load_dataset(os.path.join(directory, entry["file"]))
        task = entry.get("reveals")
        if task is None or not 0 <= int(task) < base.n_tasks:
            raise FormatError(f"{manifest_path}: part {entry.get('file')} reveals no valid task")
        parts.append(KeyedPart(task=int(task), key_id=str(entry.get("key_id")), dataset=dataset))
    return KeyedTrainset(
        base=base,
        parts=tuple(parts),
        origin_hash=str(manifest.get("origin_hash")),
        seed=int(manifest.get("seed")),
    )
