"""Multi-task image datasets: synthetic generation, splits, statistics, file IO.

A dataset couples per-task class labels with small channels-last images. The
synthetic generator draws labels from a chain-factorized joint distribution
and renders each task's class into its own horizontal band, so every task is
visually decodable from disjoint rows. An optional provenance table carries
the original labels through later relabeling stages.

Datasets are immutable once constructed; operations that change labels or
pixels return new instances, sharing the untouched arrays.

File format (.mtkd), all little-endian:

    bytes 0..3   magic "MTKD"
    byte  4      format version, currently 1
    bytes 5..7   zero padding
    u32 x 5      n, H, W, C, n_tasks
    per task     u16 class count, u8 secured flag, u8 zero
    u8           provenance-present flag
    ...          samples as float32, row-major (sample, row, col, channel)
    ...          labels as u16 per (sample, task)
    ...          provenance in the same layout, only if flagged
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from mtk.errors import FormatError, MTKError, UndefinedConditionalError

MAGIC = b"MTKD"
VERSION = 1


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    name: str
    n_classes: int
    secured: bool

    def __post_init__(self) -> None:
        if self.n_classes < 2:
            raise MTKError(f"task {self.task_id}: need at least two classes")
        if not 0 <= self.n_classes <= 0xFFFF:
            raise MTKError(f"task {self.task_id}: class count does not fit the file format")


def default_tasks(
    class_counts: Sequence[int] = (4, 2, 5), secured: Sequence[int] = (0, 2)
) -> tuple[TaskSpec, ...]:
    secured_set = set(secured)
    if not secured_set.issubset(range(len(class_counts))):
        raise MTKError(f"secured ids {sorted(secured_set)} out of range")
    return tuple(
        TaskSpec(i, f"task{i}", int(k), i in secured_set) for i, k in enumerate(class_counts)
    )


class _Frozen:
    @staticmethod
    def freeze(arr: np.ndarray) -> np.ndarray:
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        return arr


@dataclass(frozen=True)
class MultiTaskDataset:
    """Samples, labels and optional provenance for a fixed task list.

    samples      (n, H, W, C) float32 in [0, 1]
    labels       (n, n_tasks) int64
    provenance   (n, n_tasks) int64 or None; original labels before any
                 relabeling, used as ground truth by evaluation
    """

    tasks: tuple[TaskSpec, ...]
    samples: np.ndarray
    labels: np.ndarray
    provenance: np.ndarray | None = None

    def __post_init__(self) -> None:
        tasks = tuple(self.tasks)
        object.__setattr__(self, "tasks", tasks)
        samples = np.asarray(self.samples, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.int64)
        if samples.ndim != 4:
            raise MTKError(f"samples must be (n, H, W, C), got {samples.shape}")
        n = samples.shape[0]
        if labels.shape != (n, len(tasks)):
            raise MTKError(f"labels shape {labels.shape}, expected {(n, len(tasks))}")
        if samples.size and (samples.min() < 0.0 or samples.max() > 1.0):
            raise MTKError("sample values fall outside [0, 1]")
        for t, task in enumerate(tasks):
            col = labels[:, t]
            if col.size and (col.min() < 0 or col.max() >= task.n_classes):
                raise MTKError(f"task {t} labels out of range [0, {task.n_classes})")
        object.__setattr__(self, "samples", _Frozen.freeze(samples))
        object.__setattr__(self, "labels", _Frozen.freeze(labels))
        if self.provenance is not None:
            prov = np.asarray(self.provenance, dtype=np.int64)
            if prov.shape != labels.shape:
                raise MTKError(f"provenance shape {prov.shape}, expected {labels.shape}")
            for t, task in enumerate(tasks):
                col = prov[:, t]
                if col.size and (col.min() < 0 or col.max() >= task.n_classes):
                    raise MTKError(f"task {t} provenance out of range [0, {task.n_classes})")
            object.__setattr__(self, "provenance", _Frozen.freeze(prov))

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.samples.shape[1:]

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    @property
    def secured_ids(self) -> tuple[int, ...]:
        return tuple(t.task_id for t in self.tasks if t.secured)

    def ground_truth(self) -> np.ndarray:
        """Original labels: provenance when present, labels otherwise."""
        return self.provenance if self.provenance is not None else self.labels

    def with_labels(self, labels: np.ndarray, provenance: np.ndarray | None) -> "MultiTaskDataset":
        return MultiTaskDataset(self.tasks, self.samples, labels, provenance)

    def with_samples(self, samples: np.ndarray) -> "MultiTaskDataset":
        return MultiTaskDataset(self.tasks, samples, self.labels, self.provenance)

    def take(self, index: np.ndarray) -> "MultiTaskDataset":
        prov = self.provenance[index] if self.provenance is not None else None
        return MultiTaskDataset(self.tasks, self.samples[index], self.labels[index], prov)


# ---------------------------------------------------------------------------
# joint label model

@dataclass(frozen=True)
class JointLabelModel:
    """Chain-factorized label distribution.

    tables[0] is the marginal of task 0, shape (K0,). tables[t] conditions
    task t on every previous task, shape (K0, ..., K_{t-1}, K_t). Rows along
    the last axis sum to one within 1e-9.
    """

    tables: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        tables = tuple(np.asarray(t, dtype=np.float64) for t in self.tables)
        if not tables:
            raise MTKError("need at least one task table")
        counts = self.class_counts_of(tables)
        for t, table in enumerate(tables):
            expected = tuple(counts[:t]) + (counts[t],)
            if table.shape != expected:
                raise MTKError(f"table {t} has shape {table.shape}, expected {expected}")
            if (table < 0).any():
                raise MTKError(f"table {t} has negative entries")
            sums = table.sum(axis=-1)
            if not np.allclose(sums, 1.0, atol=1e-9):
                raise MTKError(f"table {t} rows do not sum to one")
        object.__setattr__(self, "tables", tuple(_Frozen.freeze(t) for t in tables))

    @staticmethod
    def class_counts_of(tables: Sequence[np.ndarray]) -> tuple[int, ...]:
        return tuple(int(t.shape[-1]) for t in tables)

    @property
    def class_counts(self) -> tuple[int, ...]:
        return self.class_counts_of(self.tables)

    @classmethod
    def independent(cls, marginals: Sequence[Sequence[float]]) -> "JointLabelModel":
        """Independent tasks; each entry is one task's marginal distribution."""
        tables = []
        counts: list[int] = []
        for m in marginals:
            m = np.asarray(m, dtype=np.float64)
            tables.append(np.broadcast_to(m, tuple(counts) + m.shape).copy())
            counts.append(m.shape[0])
        return cls(tuple(tables))

    @classmethod
    def independent_uniform(cls, class_counts: Sequence[int]) -> "JointLabelModel":
        return cls.independent([np.full(k, 1.0 / k) for k in class_counts])

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if n < 1:
            raise MTKError("need a positive sample count")
        counts = self.class_counts
        labels = np.zeros((n, len(counts)), dtype=np.int64)
        for t, table in enumerate(self.tables):
            rows = table[tuple(labels[:, :t].T)] if t else np.broadcast_to(table, (n,) + table.shape)
            cdf = np.cumsum(rows, axis=1)
            u = rng.random(n)
            labels[:, t] = np.minimum((u[:, None] > cdf).sum(axis=1), counts[t] - 1)
        return labels


# ---------------------------------------------------------------------------
# rendering

class ClassPattern(NamedTuple):
    """How one class looks inside its task band: one channel at one intensity."""

    channel: int
    intensity: float


@dataclass(frozen=True)
class RenderSpec:
    """Visual encoding of labels.

    Task t owns the horizontal band band_of_task[t]; band b covers rows
    floor(b*H/N) to floor((b+1)*H/N), so the bands tile the image. Within a
    band, the class pattern fills the band rows (or just the first
    signal_rows[t] of them) on its channel; Gaussian noise is added
    everywhere and the result is clipped to [0, 1].
    """

    image_shape: tuple[int, int, int]
    patterns: tuple[tuple[ClassPattern, ...], ...]
    noise_sigma: float = 0.05
    band_of_task: tuple[int, ...] = ()
    signal_rows: tuple[int | None, ...] = ()

    def __post_init__(self) -> None:
        h, w, c = self.image_shape
        n = len(self.patterns)
        patterns = tuple(tuple(ClassPattern(*p) for p in task_p) for task_p in self.patterns)
        object.__setattr__(self, "patterns", patterns)
        band = tuple(self.band_of_task) if self.band_of_task else tuple(range(n))
        if sorted(band) != list(range(n)):
            raise MTKError("band_of_task must be a permutation of the task ids")
        object.__setattr__(self, "band_of_task", band)
        rows = tuple(self.signal_rows) if self.signal_rows else (None,) * n
        if len(rows) != n:
            raise MTKError("signal_rows must have one entry per task")
        object.__setattr__(self, "signal_rows", rows)
        if self.noise_sigma < 0:
            raise MTKError("noise sigma must be non-negative")
        if h < n:
            raise MTKError(f"{n} bands do not fit {h} rows")
        for t, task_p in enumerate(patterns):
            for cls, pat in enumerate(task_p):
                if not 0 <= pat.channel < c:
                    raise MTKError(f"task {t} class {cls}: channel {pat.channel} out of range")
                if not 0.0 <= pat.intensity <= 1.0:
                    raise MTKError(f"task {t} class {cls}: intensity outside [0, 1]")

    def band_rows(self, task: int) -> tuple[int, int]:
        h = self.image_shape[0]
        n = len(self.patterns)
        b = self.band_of_task[task]
        return b * h // n, (b + 1) * h // n


def default_render_spec(
    tasks: Sequence[TaskSpec],
    image_shape: tuple[int, int, int] = (32, 32, 3),
    noise_sigma: float = 0.05,
) -> RenderSpec:
    """Class c of task t lights channel c mod C at intensity (c+1)/(K_t+1)."""
    c = image_shape[2]
    patterns = tuple(
        tuple(ClassPattern(cls % c, (cls + 1) / (task.n_classes + 1)) for cls in range(task.n_classes))
        for task in tasks
    )
    return RenderSpec(image_shape=image_shape, patterns=patterns, noise_sigma=noise_sigma)


def render_labels(labels: np.ndarray, spec: RenderSpec, rng: np.random.Generator) -> np.ndarray:
    n = labels.shape[0]
    h, w, c = spec.image_shape
    canvas = np.zeros((n, h, w, c), dtype=np.float32)
    for t, task_patterns in enumerate(spec.patterns):
        r0, r1 = spec.band_rows(t)
        if spec.signal_rows[t] is not None:
            r1 = min(r1, r0 + spec.signal_rows[t])
        for cls, pat in enumerate(task_patterns):
            mask = labels[:, t] == cls
            canvas[mask, r0:r1, :, pat.channel] = np.float32(pat.intensity)
    if spec.noise_sigma > 0:
        # float32 noise keeps peak memory at two image-sized arrays
        canvas += np.float32(spec.noise_sigma) * rng.standard_normal(canvas.shape, dtype=np.float32)
    np.clip(canvas, 0.0, 1.0, out=canvas)
    return canvas


def generate_synthetic(
    tasks: Sequence[TaskSpec],
    joint: JointLabelModel,
    render: RenderSpec,
    n: int,
    seed: int,
) -> MultiTaskDataset:
    """Draw labels from the joint model, render them, keep labels as provenance."""
    tasks = tuple(tasks)
    if joint.class_counts != tuple(t.n_classes for t in tasks):
        raise MTKError("joint model class counts do not match the task list")
    if len(render.patterns) != len(tasks):
        raise MTKError("render spec task count does not match the task list")
    for t, task in enumerate(tasks):
        if len(render.patterns[t]) != task.n_classes:
            raise MTKError(f"render spec patterns for task {t} do not cover every class")
    rng = np.random.default_rng(seed)
    labels = joint.sample(n, rng)
    samples = render_labels(labels, render, rng)
    return MultiTaskDataset(tasks, samples, labels, provenance=labels.copy())


# ---------------------------------------------------------------------------
# splits and statistics

def split(
    ds: MultiTaskDataset, fraction: float, seed: int
) -> tuple[MultiTaskDataset, MultiTaskDataset]:
    """Shuffled two-way split; the first part gets round(n * fraction) samples."""
    if not 0.0 < fraction < 1.0:
        raise MTKError("split fraction must be strictly between 0 and 1")
    n = ds.n_samples
    n_first = int(round(n * fraction))
    if n_first < 1 or n - n_first < 1:
        raise MTKError(f"split of {n} samples at {fraction} leaves an empty side")
    perm = np.random.default_rng(seed).permutation(n)
    return ds.take(perm[:n_first]), ds.take(perm[n_first:])


def empirical_marginal(ds: MultiTaskDataset, task: int) -> np.ndarray:
    if not 0 <= task < ds.n_tasks:
        raise MTKError(f"task {task} out of range")
    k = ds.tasks[task].n_classes
    return np.bincount(ds.labels[:, task], minlength=k) / ds.n_samples


def empirical_conditional(ds: MultiTaskDataset, i: int, j: int, k: int) -> np.ndarray:
    """Distribution of task i's label among samples whose task j label is k."""
    if i == j:
        raise MTKError("conditional needs two distinct tasks")
    for t in (i, j):
        if not 0 <= t < ds.n_tasks:
            raise MTKError(f"task {t} out of range")
    if not 0 <= k < ds.tasks[j].n_classes:
        raise MTKError(f"class {k} out of range for task {j}")
    sel = ds.labels[:, j] == k
    count = int(sel.sum())
    if count == 0:
        raise UndefinedConditionalError(f"no samples have task {j} label {k}")
    ki = ds.tasks[i].n_classes
    return np.bincount(ds.labels[sel, i], minlength=ki) / count


# ---------------------------------------------------------------------------
# file IO

def save_dataset(path: str, ds: MultiTaskDataset) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B3x", VERSION))
        h, w, c = ds.image_shape
        fh.write(struct.pack("<5I", ds.n_samples, h, w, c, ds.n_tasks))
        for task in ds.tasks:
            fh.write(struct.pack("<HBB", task.n_classes, 1 if task.secured else 0, 0))
        fh.write(struct.pack("<B", 0 if ds.provenance is None else 1))
        fh.write(np.ascontiguousarray(ds.samples, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(ds.labels, dtype="<u2").tobytes())
        if ds.provenance is not None:
            fh.write(np.ascontiguousarray(ds.provenance, dtype="<u2").tobytes())


def load_dataset(path: str) -> MultiTaskDataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 28:
        raise FormatError(f"truncated dataset header, {len(blob)} bytes at offset 0")
    if blob[0:4] != MAGIC:
        raise FormatError(f"bad magic {blob[0:4]!r} at offset 0")
    version = blob[4]
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    if blob[5:8] != b"\x00\x00\x00":
        raise FormatError("nonzero padding at offset 5")
    n, h, w, c, n_tasks = struct.unpack_from("<5I", blob, 8)
    offset = 28
    tasks = []
    for t in range(n_tasks):
        if offset + 4 > len(blob):
            raise FormatError(f"task table truncated at offset {offset}")
        k, secured, pad = struct.unpack_from("<HBB", blob, offset)
        if pad != 0:
            raise FormatError(f"nonzero task padding at offset {offset + 3}")
        tasks.append(TaskSpec(t, f"task{t}", k, bool(secured)))
        offset += 4
    if offset + 1 > len(blob):
        raise FormatError(f"missing provenance flag at offset {offset}")
    has_prov = blob[offset]
    if has_prov not in (0, 1):
        raise FormatError(f"bad provenance flag {has_prov} at offset {offset}")
    offset += 1

    def block(count: int, dtype: str, what: str) -> np.ndarray:
        nonlocal offset
        nbytes = count * np.dtype(dtype).itemsize
        if offset + nbytes > len(blob):
            raise FormatError(f"{what} block truncated at offset {offset}")
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
        offset += nbytes
        return arr

    samples = block(n * h * w * c, "<f4", "samples").reshape(n, h, w, c).astype(np.float32)
    labels = block(n * n_tasks, "<u2", "labels").reshape(n, n_tasks).astype(np.int64)
    provenance = None
    if has_prov:
        provenance = block(n * n_tasks, "<u2", "provenance").reshape(n, n_tasks).astype(np.int64)
    if offset != len(blob):
        raise FormatError(f"{len(blob) - offset} trailing bytes at offset {offset}")
    return MultiTaskDataset(tuple(tasks), samples, labels, provenance)
