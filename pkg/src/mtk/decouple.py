"""Label-correlation decoupling.

Training labels can leak one task's information through another when the
tasks are statistically dependent. The decoupling pass measures, for every
ordered task pair, how much the conditional frequency of a target class
exceeds its marginal (that excess is alpha, clamped at zero). Per
conditioning task, the single largest excess above the threshold tau is
turned into a relabel action: a fraction beta of the conditioning set gets
the target task's label redrawn uniformly. The fraction is

    gamma = min(alpha - tau, 0.1)
    beta  = gamma * n_cond / (n_joint + gamma * n_cond)

so that, under the remove-from-denominator idealization, the planned excess
absorbed is exactly gamma:

    n_joint / (n_cond * (1 - beta)) - n_joint / n_cond == gamma

Relabeling touches labels only; pixels and provenance pass through.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from mtk.data import MultiTaskDataset, empirical_marginal
from mtk.errors import MTKError

_LOG = logging.getLogger(__name__)

GAMMA_CAP = 0.1
DEFAULT_TAU = 0.15
BETA_WARN = 0.1


@dataclass(frozen=True)
class CorrelationEntry:
    """One ordered conditional excess: target task/class given cond task/class."""

    target_task: int
    target_class: int
    cond_task: int
    cond_class: int
    alpha: float
    n_cond: int
    n_joint: int


@dataclass
class DecoupleAction:
    """A planned (and, after apply, executed) relabel for one conditioning task."""

    entry: CorrelationEntry
    gamma: float
    beta: float
    n_relabel: int
    relabeled_ids: list[int] = field(default_factory=list)
    new_labels: list[int] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        e = self.entry
        return {
            "target_task": e.target_task,
            "target_class": e.target_class,
            "cond_task": e.cond_task,
            "cond_class": e.cond_class,
            "alpha": e.alpha,
            "n_cond": e.n_cond,
            "n_joint": e.n_joint,
            "gamma": self.gamma,
            "beta": self.beta,
            "n_relabel": self.n_relabel,
            "relabeled_ids": self.relabeled_ids,
            "new_labels": self.new_labels,
            "warnings": self.warnings,
        }


def compute_alpha(ds: MultiTaskDataset, i: int, c: int, j: int, k: int) -> float:
    """Excess of P(T_i = c | T_j = k) over P(T_i = c), clamped at zero."""
    from mtk.data import empirical_conditional

    cond = empirical_conditional(ds, i, j, k)
    marg = empirical_marginal(ds, i)
    if not 0 <= c < ds.tasks[i].n_classes:
        raise MTKError(f"class {c} out of range for task {i}")
    return max(float(cond[c] - marg[c]), 0.0)


def compute_gamma(alpha: float, tau: float) -> float:
    """Excess above the threshold, capped so a single pass cannot overshoot."""
    if alpha <= tau:
        raise MTKError(f"alpha {alpha} does not exceed tau {tau}; nothing to absorb")
    return min(alpha - tau, GAMMA_CAP)


def compute_beta(n_cond: int, n_joint: int, gamma: float) -> float:
    """Relabel fraction of the conditioning set that absorbs exactly gamma."""
    if n_cond < 1 or n_joint < 0 or n_joint > n_cond:
        raise MTKError(f"bad counts n_cond={n_cond}, n_joint={n_joint}")
    if gamma <= 0:
        raise MTKError("gamma must be positive")
    if n_joint == 0:
        raise MTKError("empty joint cell; beta would relabel the whole conditioning set")
    return (gamma * n_cond) / (n_joint + gamma * n_cond)


def scan(ds: MultiTaskDataset, tau: float = DEFAULT_TAU) -> list[DecoupleAction]:
    """Plan at most one relabel action per conditioning task.

    For each conditioning task j the scan considers every (target task i,
    target class c, conditioning class k) triple and keeps the largest alpha
    strictly above tau; exact ties resolve to the lexicographically smallest
    (i, c, k). Conditioning classes that never occur are skipped.
    """
    if tau <= 0:
        raise MTKError("tau must be positive")
    labels = ds.labels
    n = ds.n_samples
    marginals = [empirical_marginal(ds, t) for t in range(ds.n_tasks)]
    counts = [np.bincount(labels[:, t], minlength=ds.tasks[t].n_classes) for t in range(ds.n_tasks)]

    actions: list[DecoupleAction] = []
    for j in range(ds.n_tasks):
        kj = ds.tasks[j].n_classes
        best: tuple[float, int, int, int] | None = None  # alpha, i, c, k
        joint_count_best = 0
        for i in range(ds.n_tasks):
            if i == j:
                continue
            ki = ds.tasks[i].n_classes
            joint = np.bincount(labels[:, i] * kj + labels[:, j], minlength=ki * kj).reshape(ki, kj)
            for c in range(ki):
                for k in range(kj):
                    n_cond = int(counts[j][k])
                    if n_cond == 0:
                        continue
                    alpha = max(float(joint[c, k] / n_cond - marginals[i][c]), 0.0)
                    if alpha <= tau:
                        continue
                    if best is None or alpha > best[0]:
                        best = (alpha, i, c, k)
                        joint_count_best = int(joint[c, k])
        if best is None:
            continue
        alpha, i, c, k = best
        entry = CorrelationEntry(
            target_task=i,
            target_class=c,
            cond_task=j,
            cond_class=k,
            alpha=alpha,
            n_cond=int(counts[j][k]),
            n_joint=joint_count_best,
        )
        gamma = compute_gamma(alpha, tau)
        beta = compute_beta(entry.n_cond, entry.n_joint, gamma)
        action = DecoupleAction(
            entry=entry,
            gamma=gamma,
            beta=beta,
            n_relabel=math.floor(beta * entry.n_cond),
        )
        if beta > BETA_WARN:
            msg = f"beta {beta:.4f} exceeds {BETA_WARN}; applying anyway"
            action.warnings.append(msg)
            _LOG.warning("conditioning task %d: %s", j, msg)
        actions.append(action)
    return actions


def apply_decouple(
    ds: MultiTaskDataset, action: DecoupleAction, seed: int
) -> tuple[MultiTaskDataset, DecoupleAction]:
    """Relabel floor(beta * n_cond) members of the conditioning set.

    Membership is taken from the dataset as given, so actions applied in
    sequence see each other's effects. Selected samples get the target
    task's label redrawn uniformly (the old label may reappear). Returns the
    relabeled dataset and the action with the executed ids filled in.
    """
    e = action.entry
    if not 0.0 < action.beta < 1.0:
        raise MTKError(f"beta must lie strictly inside (0, 1), got {action.beta}")
    cond_ids = np.nonzero(ds.labels[:, e.cond_task] == e.cond_class)[0]
    n_cond = cond_ids.size
    if n_cond == 0:
        raise MTKError(
            f"no samples left with task {e.cond_task} label {e.cond_class}; cannot apply"
        )
    n_sel = math.floor(action.beta * n_cond)
    executed = DecoupleAction(
        entry=e, gamma=action.gamma, beta=action.beta, n_relabel=n_sel,
        warnings=list(action.warnings),
    )
    if n_sel == 0:
        executed.warnings.append("relabel count rounded to zero; dataset unchanged")
        _LOG.warning("action on task %d given task %d: relabel count is zero",
                     e.target_task, e.cond_task)
        return ds, executed

    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(cond_ids, size=n_sel, replace=False))
    k_target = ds.tasks[e.target_task].n_classes
    drawn = rng.integers(0, k_target, size=n_sel)

    labels = ds.labels.copy()
    labels[chosen, e.target_task] = drawn
    executed.relabeled_ids = [int(v) for v in chosen]
    executed.new_labels = [int(v) for v in drawn]
    prov = ds.provenance if ds.provenance is not None else ds.labels
    return ds.with_labels(labels, prov), executed


def decouple_pipeline(
    ds: MultiTaskDataset, tau: float, seed: int
) -> tuple[MultiTaskDataset, list[DecoupleAction]]:
    """Scan once, then apply every planned action in conditioning-task order."""
    actions = scan(ds, tau)
    executed: list[DecoupleAction] = []
    current = ds
    for offset, action in enumerate(actions):
        current, done = apply_decouple(current, action, seed + offset)
        executed.append(done)
    return current, executed


def report_dict(tau: float, actions: list[DecoupleAction]) -> dict:
    return {"tau": tau, "actions": [a.to_dict() for a in actions]}
