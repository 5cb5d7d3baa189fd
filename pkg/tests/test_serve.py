import json
import socket
import threading

import numpy as np
import pytest

from mtk.data import (
    JointLabelModel,
    default_render_spec,
    default_tasks,
    generate_synthetic,
)
from mtk.errors import MTKError
from mtk.jsonutil import write_json
from mtk.nn import ConvLayer, DenseLayer, FlattenLayer, ModelSpec, init_params, predict
from mtk.serve import (
    InferenceServer,
    authorize,
    infer,
    load_grants,
    serve,
    validate_grants,
)
from mtk.trigger import apply, make_square

IMAGE = (8, 8, 3)


def tiny_spec():
    return ModelSpec(
        input_shape=IMAGE,
        layers=(ConvLayer(4, 3, 2), FlattenLayer(), DenseLayer(16)),
        heads=(4, 2, 5),
    )


def tiny_dataset(n=40, seed=0):
    tasks = default_tasks((4, 2, 5), secured=(0, 2))
    joint = JointLabelModel.independent_uniform((4, 2, 5))
    render = default_render_spec(tasks, image_shape=IMAGE, noise_sigma=0.05)
    return generate_synthetic(tasks, joint, render, n, seed)


def keyset():
    return [
        make_square(task=0, image_shape=IMAGE, size=3, anchor=(0, 0), key_id="sq0"),
        make_square(task=2, image_shape=IMAGE, size=3, anchor=(4, 4), key_id="sq2"),
    ]


GRANTS = {"root": (0, 2), "half": (2,), "none": ()}


class TestAuthorize:
    def test_unknown_user_gets_nothing(self):
        assert authorize("ghost", GRANTS, keyset()) == ()

    def test_full_grant_gets_both_keys_in_task_order(self):
        keys = authorize("root", GRANTS, keyset())
        assert [k.key_id for k in keys] == ["sq0", "sq2"]

    def test_partial_grant(self):
        keys = authorize("half", GRANTS, keyset())
        assert [k.key_id for k in keys] == ["sq2"]

    def test_explicit_zero_grant(self):
        assert authorize("none", GRANTS, keyset()) == ()


class TestGrantsFile:
    def test_roundtrip(self, tmp_path):
        path = tmp_path / "grants.json"
        write_json(str(path), {"users": {"alice": [2, 0], "bob": []}})
        table = load_grants(str(path))
        assert table == {"alice": (0, 2), "bob": ()}

    def test_rejects_missing_users_map(self, tmp_path):
        path = tmp_path / "grants.json"
        write_json(str(path), {"members": {}})
        with pytest.raises(MTKError, match="users"):
            load_grants(str(path))

    def test_rejects_non_integer_grants(self, tmp_path):
        path = tmp_path / "grants.json"
        write_json(str(path), {"users": {"alice": ["face"]}})
        with pytest.raises(MTKError, match="task ids"):
            load_grants(str(path))

    def test_validate_rejects_unprotected_grant(self):
        ds = tiny_dataset(n=4)
        with pytest.raises(MTKError, match="non-securable"):
            validate_grants({"alice": (1,)}, ds.tasks, keyset())

    def test_validate_rejects_grant_without_key(self):
        ds = tiny_dataset(n=4)
        with pytest.raises(MTKError, match="non-securable"):
            validate_grants({"alice": (0, 2)}, ds.tasks, keyset()[:1])


class TestInfer:
    def test_zero_grants_reveal_only_unprotected(self):
        ds = tiny_dataset()
        params = init_params(tiny_spec(), 1)
        resp = infer(params, ds.samples[0], (), ds.tasks)
        flags = {p.task: p.revealed for p in resp.tasks}
        assert flags == {0: False, 1: True, 2: False}

    def test_all_grants_reveal_everything(self):
        ds = tiny_dataset()
        params = init_params(tiny_spec(), 1)
        resp = infer(params, ds.samples[0], keyset(), ds.tasks)
        assert all(p.revealed for p in resp.tasks)

    def test_granted_prediction_uses_only_its_own_key(self):
        ds = tiny_dataset()
        params = init_params(tiny_spec(), 2)
        keys = keyset()
        x = ds.samples[3]
        resp = infer(params, x, keys, ds.tasks)
        by_task = {p.task: p.prediction for p in resp.tasks}
        assert by_task[0] == predict(params, apply(x, keys[0]), 0)
        assert by_task[2] == predict(params, apply(x, keys[1]), 2)
        assert by_task[1] == predict(params, x, 1)

    def test_non_granted_secured_prediction_comes_from_plain_input(self):
        ds = tiny_dataset()
        params = init_params(tiny_spec(), 2)
        x = ds.samples[5]
        resp = infer(params, x, (), ds.tasks)
        by_task = {p.task: p.prediction for p in resp.tasks}
        assert by_task[0] == predict(params, x, 0)
        assert by_task[2] == predict(params, x, 2)

    def test_matches_eval_prediction_path_per_sample(self):
        ds = tiny_dataset(n=20, seed=3)
        params = init_params(tiny_spec(), 4)
        key = keyset()[0]
        for i in range(ds.n_samples):
            resp = infer(params, ds.samples[i], (key,), ds.tasks)
            want = predict(params, apply(ds.samples[i], key), 0)
            assert resp.tasks[0].prediction == want

    def test_pure_given_inputs(self):
        ds = tiny_dataset()
        params = init_params(tiny_spec(), 5)
        a = infer(params, ds.samples[0], keyset(), ds.tasks)
        b = infer(params, ds.samples[0], keyset(), ds.tasks)
        assert a == b

    def test_rejects_wrong_shape(self):
        ds = tiny_dataset()
        params = init_params(tiny_spec(), 1)
        with pytest.raises(MTKError, match="shape"):
            infer(params, np.zeros((4, 4, 3), dtype=np.float32), (), ds.tasks)


# ---------------------------------------------------------------------------
# socket protocol

@pytest.fixture(scope="module")
def server():
    ds = tiny_dataset(n=16, seed=9)
    params = init_params(tiny_spec(), 6)
    srv = serve(params, ds, GRANTS, keyset(), port=0, allow_upload=False)
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    yield srv
    srv.shutdown()
    srv.server_close()


class Client:
    def __init__(self, srv: InferenceServer):
        self.sock = socket.create_connection(srv.server_address, timeout=5)
        self.fh = self.sock.makefile("rwb")

    def ask_raw(self, line: bytes) -> dict:
        self.fh.write(line + b"\n")
        self.fh.flush()
        return json.loads(self.fh.readline())

    def ask(self, payload: dict) -> dict:
        return self.ask_raw(json.dumps(payload).encode("utf-8"))

    def close(self):
        self.fh.close()
        self.sock.close()


class TestProtocol:
    def test_zero_authority_response(self, server):
        c = Client(server)
        try:
            resp = c.ask({"user": "none", "sample_index": 0})
            revealed = {t["task"]: t["revealed"] for t in resp["tasks"]}
            assert revealed == {0: False, 1: True, 2: False}
        finally:
            c.close()

    def test_malformed_line_keeps_connection_open(self, server):
        c = Client(server)
        try:
            err = c.ask_raw(b"{not json")
            assert err["error"].startswith("bad_request")
            resp = c.ask({"user": "root", "sample_index": 1})
            assert {t["task"] for t in resp["tasks"]} == {0, 1, 2}
        finally:
            c.close()

    def test_missing_user_and_bad_index_types(self, server):
        c = Client(server)
        try:
            assert c.ask({"sample_index": 0})["error"].startswith("bad_request")
            assert c.ask({"user": "root"})["error"].startswith("bad_request")
            assert (
                c.ask({"user": "root", "sample_index": True})["error"]
                .startswith("bad_request")
            )
        finally:
            c.close()

    def test_unknown_sample_index(self, server):
        c = Client(server)
        try:
            err = c.ask({"user": "root", "sample_index": 99})
            assert err["error"].startswith("unknown_sample")
            err = c.ask({"user": "root", "sample_index": -1})
            assert err["error"].startswith("unknown_sample")
        finally:
            c.close()

    def test_unknown_user_degrades_to_zero_authority(self, server):
        c = Client(server)
        try:
            resp = c.ask({"user": "stranger", "sample_index": 0})
            assert all(
                not t["revealed"] for t in resp["tasks"] if t["task"] in (0, 2)
            )
        finally:
            c.close()

    def test_no_key_material_in_responses(self, server):
        c = Client(server)
        try:
            raw = json.dumps({"user": "root", "sample_index": 2}).encode()
            c.fh.write(raw + b"\n")
            c.fh.flush()
            text = c.fh.readline().decode("utf-8")
            for secret in ("color", "anchor", "mask", "key_id"):
                assert secret not in text
        finally:
            c.close()

    def test_response_matches_direct_infer(self, server):
        c = Client(server)
        try:
            resp = c.ask({"user": "half", "sample_index": 3})
            granted = authorize("half", GRANTS, keyset())
            want = infer(
                server.params, server.dataset.samples[3], granted, server.dataset.tasks
            ).to_dict()
            assert resp == want
        finally:
            c.close()

    def test_upload_disabled(self, server):
        c = Client(server)
        try:
            sample = np.zeros(IMAGE, dtype=np.float32).tolist()
            err = c.ask({"user": "root", "sample": sample})
            assert err["error"].startswith("bad_request")
            assert "disabled" in err["error"]
        finally:
            c.close()

    def test_concurrent_identical_requests_agree(self, server):
        request = {"user": "root", "sample_index": 4}
        results = [None] * 30

        def worker(slot):
            c = Client(server)
            try:
                results[slot] = c.ask(request)
            finally:
                c.close()

        threads = [threading.Thread(target=worker, args=(i,)) for i in range(30)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert all(r == results[0] for r in results)
        assert results[0] is not None and "tasks" in results[0]


class TestUploadMode:
    def test_uploaded_sample_matches_indexed_prediction(self):
        ds = tiny_dataset(n=8, seed=10)
        params = init_params(tiny_spec(), 7)
        srv = serve(params, ds, GRANTS, keyset(), port=0, allow_upload=True)
        thread = threading.Thread(target=srv.serve_forever, daemon=True)
        thread.start()
        try:
            c = Client(srv)
            try:
                by_index = c.ask({"user": "root", "sample_index": 0})
                uploaded = c.ask(
                    {"user": "root", "sample": ds.samples[0].tolist()}
                )
                assert uploaded == by_index
                bad = c.ask({"user": "root", "sample": [[1, 2], [3]]})
                assert bad["error"].startswith("bad_request")
            finally:
                c.close()
        finally:
            srv.shutdown()
            srv.server_close()

    def test_server_rejects_bad_grants_at_startup(self):
        ds = tiny_dataset(n=4)
        params = init_params(tiny_spec(), 0)
        with pytest.raises(MTKError, match="non-securable"):
            serve(params, ds, {"alice": (1,)}, keyset(), port=0)
