"""Authorization-gated inference over a TCP line protocol.

The server owns the model, the dataset, the key set, and a grants table;
clients reference samples by index and are identified by a user name. A
user's grant set decides which secured tasks get their key applied before
prediction. Predictions for non-granted secured tasks are still returned
(the model output on the plain input is effectively random for them) but
flagged revealed=false. Key material never leaves the server.

Grants are a trust stub: there is no authentication, the user string is
taken at face value.
"""

from __future__ import annotations

import json
import socketserver
import threading
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from mtk.data import MultiTaskDataset, TaskSpec
from mtk.errors import MTKError
from mtk.jsonutil import canonical_dumps, read_json
from mtk.nn import ModelParams, forward_logits
from mtk.trigger import TriggerKey, apply, keys_by_task

GrantsTable = Mapping[str, Sequence[int]]


@dataclass(frozen=True)
class TaskPrediction:
    task: int
    prediction: int
    revealed: bool


@dataclass(frozen=True)
class InferenceResponse:
    tasks: tuple[TaskPrediction, ...]

    def to_dict(self) -> dict:
        return {
            "tasks": [
                {"task": p.task, "prediction": p.prediction, "revealed": p.revealed}
                for p in self.tasks
            ]
        }


def load_grants(path: str) -> dict[str, tuple[int, ...]]:
    """Grants file: {"users": {name: [task ids]}}."""
    obj = read_json(path)
    if not isinstance(obj, dict) or not isinstance(obj.get("users"), dict):
        raise MTKError(f"{path}: grants file must be an object with a 'users' map")
    table: dict[str, tuple[int, ...]] = {}
    for user, granted in obj["users"].items():
        if not isinstance(granted, list) or not all(
            isinstance(t, int) and not isinstance(t, bool) for t in granted
        ):
            raise MTKError(f"{path}: grant list for {user!r} must hold task ids")
        table[user] = tuple(sorted(set(granted)))
    return table


def validate_grants(
    grants: GrantsTable, tasks: Sequence[TaskSpec], keys: Sequence[TriggerKey]
) -> None:
    """Every granted id must be a secured task covered by the key set."""
    keyed = set(keys_by_task(keys))
    secured = {t.task_id for t in tasks if t.secured}
    for user, granted in grants.items():
        bad = set(granted) - (secured & keyed)
        if bad:
            raise MTKError(
                f"user {user!r} granted non-securable tasks {sorted(bad)}"
            )


def authorize(
    user: str, grants: GrantsTable, keys: Sequence[TriggerKey]
) -> tuple[TriggerKey, ...]:
    """Keys for the user's granted tasks; unknown users get zero authority."""
    granted = set(grants.get(user, ()))
    by_task = keys_by_task(keys)
    return tuple(by_task[t] for t in sorted(granted) if t in by_task)


def infer(
    params: ModelParams,
    x: np.ndarray,
    granted_keys: Sequence[TriggerKey],
    tasks: Sequence[TaskSpec],
) -> InferenceResponse:
    """Predict every task, applying each granted key one at a time.

    Unprotected tasks and non-granted secured tasks are predicted from the
    plain input; each granted secured task is predicted from a copy carrying
    only its own key. revealed is a pure function of the task metadata and
    the grant, never of the model output.
    """
    x = np.asarray(x, dtype=np.float32)
    if x.shape != params.spec.input_shape:
        raise MTKError(
            f"sample shape {x.shape} does not match model input {params.spec.input_shape}"
        )
    if len(tasks) != params.spec.n_tasks:
        raise MTKError("task list does not match the model head count")
    plain = [int(np.argmax(l)) for l in forward_logits(params, x)]
    keyed = {
        k.task: int(np.argmax(forward_logits(params, apply(x, k))[k.task]))
        for k in granted_keys
    }
    out = []
    for t, task in enumerate(tasks):
        if not task.secured:
            out.append(TaskPrediction(t, plain[t], True))
        elif t in keyed:
            out.append(TaskPrediction(t, keyed[t], True))
        else:
            out.append(TaskPrediction(t, plain[t], False))
    return InferenceResponse(tasks=tuple(out))


class InferenceServer(socketserver.ThreadingTCPServer):
    """Line-delimited JSON over TCP; one response line per request line.

    Requests: {"user": str, "sample_index": int} or, when raw uploads are
    enabled, {"user": str, "sample": nested lists}. Responses: the infer()
    payload or {"error": "..."} with the connection kept open.
    """

    allow_reuse_address = True
    daemon_threads = True

    def __init__(
        self,
        address: tuple[str, int],
        params: ModelParams,
        dataset: MultiTaskDataset,
        grants: GrantsTable,
        keys: Sequence[TriggerKey],
        allow_upload: bool = False,
        max_workers: int | None = None,
    ) -> None:
        if dataset.image_shape != params.spec.input_shape:
            raise MTKError("dataset images do not match the model input shape")
        if max_workers is not None and max_workers < 1:
            raise MTKError("max_workers must be positive")
        validate_grants(grants, dataset.tasks, keys)
        self.params = params
        self.dataset = dataset
        self.grants = dict(grants)
        self.keys = tuple(keys)
        self.allow_upload = allow_upload
        # connections are unbounded; this gates concurrent inference work
        self.work_gate = (
            threading.BoundedSemaphore(max_workers) if max_workers else None
        )
        super().__init__(address, _RequestHandler)

    def handle_line(self, line: bytes) -> dict:
        if self.work_gate is not None:
            with self.work_gate:
                return self._handle_line(line)
        return self._handle_line(line)

    def _handle_line(self, line: bytes) -> dict:
        try:
            obj = json.loads(line)
        except ValueError:
            return {"error": "bad_request: line is not valid JSON"}
        if not isinstance(obj, dict):
            return {"error": "bad_request: expected a JSON object"}
        user = obj.get("user")
        if not isinstance(user, str):
            return {"error": "bad_request: 'user' must be a string"}
        try:
            x = self._resolve_sample(obj)
        except MTKError as err:
            return {"error": str(err)}
        granted = authorize(user, self.grants, self.keys)
        response = infer(self.params, x, granted, self.dataset.tasks)
        return response.to_dict()

    def _resolve_sample(self, obj: dict) -> np.ndarray:
        if "sample" in obj:
            if not self.allow_upload:
                raise MTKError("bad_request: raw sample uploads are disabled")
            try:
                x = np.asarray(obj["sample"], dtype=np.float32)
            except (TypeError, ValueError):
                raise MTKError("bad_request: 'sample' is not a numeric array")
            if x.shape != self.dataset.image_shape:
                raise MTKError(
                    f"bad_request: sample shape {x.shape} does not match "
                    f"{self.dataset.image_shape}"
                )
            return x
        idx = obj.get("sample_index")
        if not isinstance(idx, int) or isinstance(idx, bool):
            raise MTKError("bad_request: 'sample_index' must be an integer")
        if not 0 <= idx < self.dataset.n_samples:
            raise MTKError(
                f"unknown_sample: index {idx} not in [0, {self.dataset.n_samples})"
            )
        return self.dataset.samples[idx]


class _RequestHandler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        for raw in self.rfile:
            line = raw.strip()
            if not line:
                continue
            payload = self.server.handle_line(line)
            self.wfile.write(canonical_dumps(payload).encode("utf-8") + b"\n")
            self.wfile.flush()


def serve(
    params: ModelParams,
    dataset: MultiTaskDataset,
    grants: GrantsTable,
    keys: Sequence[TriggerKey],
    host: str = "127.0.0.1",
    port: int = 0,
    allow_upload: bool = False,
    max_workers: int | None = None,
) -> InferenceServer:
    """Bind a server; the caller runs serve_forever() (or a thread does)."""
    return InferenceServer(
        (host, port), params, dataset, grants, keys, allow_upload, max_workers
    )
