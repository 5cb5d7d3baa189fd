"""Accuracy, correlation-gap, and feature-similarity reports.

All functions here are pure and read-only over parameters and datasets.
Accuracies are always measured against ground_truth(), so relabeled or
randomized training labels never contaminate an evaluation. Multi-key
conditions are sequential: each secured task is predicted from an input
carrying only its own key, never stacked keys.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from mtk.data import MultiTaskDataset
from mtk.errors import MTKError, UndefinedConditionalError
from mtk.nn import ModelParams, forward_features, forward_logits
from mtk.trigger import TriggerKey, apply, keys_by_task, scale_key, subsample_key

PRED_BATCH = 1024

SEQUENCE_CONDITION = "sequence"
NO_KEY_CONDITION = "none"

CSV_HEADER = "report_kind,condition,task,value,halfwidth"


# ---------------------------------------------------------------------------
# prediction plumbing

def _predict_tasks(params: ModelParams, samples: np.ndarray) -> np.ndarray:
    """(n, n_tasks) argmax predictions, computed in fixed-size chunks."""
    n = samples.shape[0]
    out = np.empty((n, params.spec.n_tasks), dtype=np.int64)
    for start in range(0, n, PRED_BATCH):
        chunk = samples[start : start + PRED_BATCH]
        for t, logits in enumerate(forward_logits(params, chunk)):
            out[start : start + PRED_BATCH, t] = np.argmax(logits, axis=1)
    return out


def _features(params: ModelParams, samples: np.ndarray) -> np.ndarray:
    n = samples.shape[0]
    chunks = [
        forward_features(params, samples[start : start + PRED_BATCH])
        for start in range(0, n, PRED_BATCH)
    ]
    return np.concatenate(chunks, axis=0)


def task_accuracy(
    params: ModelParams,
    ds: MultiTaskDataset,
    task: int,
    key: TriggerKey | None = None,
) -> float:
    """Fraction of samples where the task prediction matches ground truth.

    With a key, predictions run on the keyed copies; the key's task may
    differ from the evaluated task (cross-key probes are intended).
    """
    if ds.n_samples == 0:
        raise MTKError("cannot evaluate an empty dataset")
    if not 0 <= task < ds.n_tasks:
        raise MTKError(f"task {task} out of range for {ds.n_tasks} tasks")
    samples = apply(ds.samples, key) if key is not None else ds.samples
    preds = _predict_tasks(params, samples)[:, task]
    truth = ds.ground_truth()[:, task]
    return float(np.mean(preds == truth))


# ---------------------------------------------------------------------------
# protection / revelation report

@dataclass(frozen=True)
class ConditionAccuracy:
    condition: str
    task: int
    mean: float
    halfwidth: float
    trial_values: tuple[float, ...]


@dataclass(frozen=True)
class ProtectionReport:
    conditions: tuple[str, ...]
    entries: tuple[ConditionAccuracy, ...]
    n_trials: int

    def accuracy(self, condition: str, task: int) -> ConditionAccuracy:
        for e in self.entries:
            if e.condition == condition and e.task == task:
                return e
        raise MTKError(f"no entry for condition {condition!r}, task {task}")

    def rows(self) -> list[tuple[str, str, int, float, float]]:
        return [
            ("protection", e.condition, e.task, e.mean, e.halfwidth)
            for e in self.entries
        ]

    def to_dict(self) -> dict:
        return {
            "n_trials": self.n_trials,
            "conditions": list(self.conditions),
            "entries": [
                {
                    "condition": e.condition,
                    "task": e.task,
                    "mean": e.mean,
                    "halfwidth": e.halfwidth,
                    "trials": list(e.trial_values),
                }
                for e in self.entries
            ],
        }


def _halfwidth(values: np.ndarray) -> float:
    """95% confidence halfwidth from the t distribution; 0 for one trial."""
    if values.size < 2:
        return 0.0
    sd = float(values.std(ddof=1))
    q = float(stats.t.ppf(0.975, values.size - 1))
    return q * sd / math.sqrt(values.size)


def protection_report(
    models: ModelParams | Sequence[ModelParams],
    test: MultiTaskDataset,
    keys: Sequence[TriggerKey],
) -> ProtectionReport:
    """Per-task accuracy under no key, each single key, and the key sequence.

    Each model counts as one trial; means and 95% halfwidths are taken
    across trials. The sequence condition predicts every secured task from
    its own singly-keyed input and unprotected tasks from the plain input.
    """
    trials = [models] if isinstance(models, ModelParams) else list(models)
    if not trials:
        raise MTKError("need at least one trial model")
    if test.n_samples == 0:
        raise MTKError("cannot evaluate an empty dataset")
    by_task = keys_by_task(keys)
    ordered_keys = [by_task[t] for t in sorted(by_task)]

    conditions = [NO_KEY_CONDITION] + [k.key_id for k in ordered_keys]
    if len(ordered_keys) > 1:
        conditions.append(SEQUENCE_CONDITION)

    truth = test.ground_truth()
    # acc[condition][task] -> list over trials
    acc: dict[str, list[list[float]]] = {
        c: [[] for _ in range(test.n_tasks)] for c in conditions
    }
    for params in trials:
        plain = _predict_tasks(params, test.samples)
        keyed = {
            k.key_id: _predict_tasks(params, apply(test.samples, k))
            for k in ordered_keys
        }
        per_condition = {NO_KEY_CONDITION: plain}
        per_condition.update(keyed)
        if SEQUENCE_CONDITION in acc:
            seq = plain.copy()
            for k in ordered_keys:
                seq[:, k.task] = keyed[k.key_id][:, k.task]
            per_condition[SEQUENCE_CONDITION] = seq
        for cond, preds in per_condition.items():
            for t in range(test.n_tasks):
                acc[cond][t].append(float(np.mean(preds[:, t] == truth[:, t])))

    entries = []
    for cond in conditions:
        for t in range(test.n_tasks):
            vals = np.asarray(acc[cond][t], dtype=np.float64)
            entries.append(
                ConditionAccuracy(
                    condition=cond,
                    task=t,
                    mean=float(vals.mean()),
                    halfwidth=_halfwidth(vals),
                    trial_values=tuple(float(v) for v in vals),
                )
            )
    return ProtectionReport(
        conditions=tuple(conditions), entries=tuple(entries), n_trials=len(trials)
    )


# ---------------------------------------------------------------------------
# prediction gap (correlation leakage between two tasks)

@dataclass(frozen=True)
class GapRow:
    cond_task: int
    cond_class: int
    target_task: int
    target_class: int
    conditional: float
    marginal: float

    @property
    def gap(self) -> float:
        return self.conditional - self.marginal

    def rows(self) -> list[tuple[str, str, int, float, float]]:
        cond = f"pred{self.cond_task}={self.cond_class}=>class{self.target_class}"
        return [("gap", cond, self.target_task, self.gap, 0.0)]

    def to_dict(self) -> dict:
        return {
            "cond_task": self.cond_task,
            "cond_class": self.cond_class,
            "target_task": self.target_task,
            "target_class": self.target_class,
            "conditional": self.conditional,
            "marginal": self.marginal,
            "gap": self.gap,
        }


def _revealed_predictions(
    params: ModelParams,
    ds: MultiTaskDataset,
    task: int,
    by_task: dict[int, TriggerKey],
) -> np.ndarray:
    """Predictions for one task under its revealing key when it has one."""
    secured = task in ds.secured_ids
    if secured and task not in by_task:
        raise MTKError(f"secured task {task} has no key in the key set")
    samples = apply(ds.samples, by_task[task]) if secured else ds.samples
    return _predict_tasks(params, samples)[:, task]


def prediction_gap(
    params: ModelParams,
    test: MultiTaskDataset,
    cond_task: int,
    cond_class: int,
    target_task: int,
    target_class: int,
    keys: Sequence[TriggerKey],
) -> GapRow:
    """How much predicting cond_class on one task shifts another task's rate.

    Both tasks are predicted under their revealing keys (secured tasks get
    their own key, unprotected tasks run plain); the statistic is
    P(pred_target = c | pred_cond = k) - P(pred_target = c) over the set.
    """
    if cond_task == target_task:
        raise MTKError("gap requires two distinct tasks")
    for t, c in ((cond_task, cond_class), (target_task, target_class)):
        if not 0 <= t < test.n_tasks:
            raise MTKError(f"task {t} out of range for {test.n_tasks} tasks")
        if not 0 <= c < test.tasks[t].n_classes:
            raise MTKError(f"class {c} out of range for task {t}")
    by_task = keys_by_task(keys)
    pred_cond = _revealed_predictions(params, test, cond_task, by_task)
    pred_target = _revealed_predictions(params, test, target_task, by_task)

    hits = pred_target == target_class
    sel = pred_cond == cond_class
    if not sel.any():
        raise UndefinedConditionalError(
            f"no sample predicted class {cond_class} on task {cond_task}"
        )
    return GapRow(
        cond_task=cond_task,
        cond_class=cond_class,
        target_task=target_task,
        target_class=target_class,
        conditional=float(hits[sel].mean()),
        marginal=float(hits.mean()),
    )


# ---------------------------------------------------------------------------
# feature cosine and sweeps

def _pairwise_cosines(fa: np.ndarray, fb: np.ndarray) -> np.ndarray:
    """Row-wise cosine; rows where either side is a zero vector give 0."""
    if np.array_equal(fa, fb):
        # exact-identity fast path keeps the full-key endpoint at 1 bit-exact
        norms = np.linalg.norm(fa.astype(np.float64), axis=1)
        return np.where(norms > 0.0, 1.0, 0.0)
    a = fa.astype(np.float64)
    b = fb.astype(np.float64)
    dots = np.einsum("ij,ij->i", a, b)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    denom = na * nb
    out = np.zeros(a.shape[0], dtype=np.float64)
    ok = denom > 0.0
    out[ok] = dots[ok] / denom[ok]
    return out


def feature_cosine(
    params: ModelParams,
    x: np.ndarray,
    key_a: TriggerKey | None = None,
    key_b: TriggerKey | None = None,
) -> float:
    """Cosine between encoder features of two keyed variants of one image.

    Degenerate zero-norm features yield 0.0 by definition.
    """
    xa = apply(x, key_a) if key_a is not None else x
    xb = apply(x, key_b) if key_b is not None else x
    fa = forward_features(params, xa[None] if x.ndim == 3 else xa)
    fb = forward_features(params, xb[None] if x.ndim == 3 else xb)
    return float(_pairwise_cosines(np.atleast_2d(fa), np.atleast_2d(fb))[0])


@dataclass(frozen=True)
class SweepPoint:
    value: float
    cosine_vs_full: float
    cosine_vs_plain: float
    accuracy: float


@dataclass(frozen=True)
class SimilarityCurve:
    kind: str
    key_id: str
    task: int
    points: tuple[SweepPoint, ...]

    def rows(self) -> list[tuple[str, str, int, float, float]]:
        kind = f"sweep_{self.kind}"
        out = []
        for p in self.points:
            v = f"{p.value!r}"
            out.append((kind, f"{v}:cosine_vs_full", self.task, p.cosine_vs_full, 0.0))
            out.append((kind, f"{v}:cosine_vs_plain", self.task, p.cosine_vs_plain, 0.0))
            out.append((kind, f"{v}:accuracy", self.task, p.accuracy, 0.0))
        return out

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "key_id": self.key_id,
            "task": self.task,
            "points": [
                {
                    "value": p.value,
                    "cosine_vs_full": p.cosine_vs_full,
                    "cosine_vs_plain": p.cosine_vs_plain,
                    "accuracy": p.accuracy,
                }
                for p in self.points
            ],
        }


def similarity_accuracy_sweep(
    params: ModelParams,
    test: MultiTaskDataset,
    key: TriggerKey,
    kind: str,
    values: Sequence[float],
) -> SimilarityCurve:
    """Feature similarity and secured-task accuracy under a weakened key.

    kind "pixels" keeps only the first v mask pixels; kind "magnitude"
    scales the key color by v. Each sweep point reports the mean cosine of
    the partial-key features against the full-key and plain features, plus
    the accuracy of the key's task under the partial key.
    """
    if kind not in ("pixels", "magnitude"):
        raise MTKError(f"unknown sweep kind {kind!r}")
    if not values:
        raise MTKError("sweep needs at least one value")
    if test.n_samples == 0:
        raise MTKError("cannot evaluate an empty dataset")

    full = apply(test.samples, key)
    feat_full = _features(params, full)
    feat_plain = _features(params, test.samples)
    truth = test.ground_truth()[:, key.task]

    points = []
    for v in values:
        if kind == "pixels":
            partial = subsample_key(key, int(v))
        else:
            partial = scale_key(key, float(v))
        keyed = apply(test.samples, partial)
        if np.array_equal(keyed, full):
            feat_part = feat_full
        else:
            feat_part = _features(params, keyed)
        cos_full = float(_pairwise_cosines(feat_part, feat_full).mean())
        cos_plain = float(_pairwise_cosines(feat_part, feat_plain).mean())
        preds = _predict_tasks(params, keyed)[:, key.task]
        points.append(
            SweepPoint(
                value=float(v),
                cosine_vs_full=cos_full,
                cosine_vs_plain=cos_plain,
                accuracy=float(np.mean(preds == truth)),
            )
        )
    return SimilarityCurve(
        kind=kind, key_id=key.key_id, task=key.task, points=tuple(points)
    )


# ---------------------------------------------------------------------------
# report emission

def rows_to_csv(rows: Iterable[tuple[str, str, int, float, float]]) -> str:
    """Stable five-column CSV; floats via repr so reruns are byte-identical."""
    lines = [CSV_HEADER]
    for kind, condition, task, value, halfwidth in rows:
        lines.append(f"{kind},{condition},{task},{value!r},{halfwidth!r}")
    return "\n".join(lines) + "\n"


def save_rows_csv(path: str, rows: Iterable[tuple[str, str, int, float, float]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(rows_to_csv(rows))
