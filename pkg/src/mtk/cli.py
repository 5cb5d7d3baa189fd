"""Pipeline subcommands: generate, inspect, decouple, build, train, report, serve.

Option values resolve in three layers: hard defaults, then a --config JSON
file (top-level keys apply everywhere, a section named after the subcommand
overrides them), then explicit flags. Every artifact writer is
deterministic given the same inputs and seeds, so reruns are byte-identical;
the run manifest written next to each artifact carries timings and
provenance and is exempt from that guarantee.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

import mtk
from mtk.build import build_all, load_trainset, save_trainset
from mtk.data import (
    JointLabelModel,
    MultiTaskDataset,
    default_render_spec,
    default_tasks,
    generate_synthetic,
    load_dataset,
    save_dataset,
    split,
)
from mtk.decouple import DEFAULT_TAU, decouple_pipeline, report_dict, scan
from mtk.errors import MTKError
from mtk.evaluate import (
    prediction_gap,
    protection_report,
    rows_to_csv,
    save_rows_csv,
    similarity_accuracy_sweep,
)
from mtk.jsonutil import read_json, write_json
from mtk.nn import (
    default_model_spec,
    load_checkpoint,
    save_checkpoint,
    spec_from_dict,
)
from mtk.serve import load_grants, serve
from mtk.trainer import (
    DEFAULT_BASELINE_EPOCHS,
    TrainConfig,
    keyed_epochs,
    train,
    train_baseline,
)
from mtk.trigger import default_keyset, keys_by_task, load_keys, save_keys


# ---------------------------------------------------------------------------
# option plumbing

def _int_tuple(value) -> tuple[int, ...]:
    if isinstance(value, str):
        return tuple(int(x) for x in value.split(",") if x != "")
    return tuple(int(x) for x in value)


def _float_tuple(value) -> tuple[float, ...]:
    if isinstance(value, str):
        return tuple(float(x) for x in value.split(",") if x != "")
    return tuple(float(x) for x in value)


def _resolve(cmd: str, args: argparse.Namespace, defaults: dict) -> dict:
    opts = dict(defaults)
    cfg_path = getattr(args, "config", None)
    if cfg_path:
        cfg = read_json(cfg_path)
        if not isinstance(cfg, dict):
            raise MTKError(f"{cfg_path}: config must be a JSON object")
        section = cfg.get(cmd, {})
        if not isinstance(section, dict):
            raise MTKError(f"{cfg_path}: section {cmd!r} must be an object")
        for source in (cfg, section):
            for key, value in source.items():
                key = key.replace("-", "_")
                if key in opts:
                    opts[key] = value
    for key in opts:
        given = getattr(args, key, None)
        if given is not None:
            opts[key] = given
    return opts


def _require(opts: dict, *names: str) -> None:
    for name in names:
        if opts[name] is None:
            flag = "--" + name.replace("_", "-")
            raise MTKError(f"missing required option {flag}")


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=10,
        )
    except OSError:
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 else "unknown"


def _manifest_path(cmd: str, out: str) -> Path:
    target = Path(out)
    if target.is_dir():
        return target / f"run-{cmd}.manifest.json"
    return Path(str(target) + ".manifest.json")


def _write_manifest(
    cmd: str, opts: dict, outputs: Sequence[str], started: float
) -> None:
    serializable = {
        k: (list(v) if isinstance(v, tuple) else v)
        for k, v in sorted(opts.items())
    }
    write_json(
        str(_manifest_path(cmd, opts["out"])),
        {
            "subcommand": cmd,
            "options": serializable,
            "outputs": list(outputs),
            "git": _git_describe(),
            "duration_s": round(time.perf_counter() - started, 3),
            "version": mtk.__version__,
        },
    )


def _load_joint(path: str | None, class_counts: tuple[int, ...]) -> JointLabelModel:
    if path is None:
        return JointLabelModel.independent_uniform(class_counts)
    obj = read_json(path)
    if not isinstance(obj, dict) or "tables" not in obj:
        raise MTKError(f"{path}: joint file must be an object with 'tables'")
    joint = JointLabelModel(tuple(np.asarray(t, dtype=np.float64) for t in obj["tables"]))
    if joint.class_counts != class_counts:
        raise MTKError(
            f"{path}: joint class counts {joint.class_counts} do not match {class_counts}"
        )
    return joint


def _train_config(opts: dict, default_epochs: int) -> TrainConfig:
    epochs = opts["epochs"] if opts["epochs"] is not None else default_epochs
    return TrainConfig(
        epochs=int(epochs),
        batch_size=int(opts["batch_size"]),
        optimizer=opts["optimizer"],
        lr=float(opts["lr"]),
        momentum=float(opts["momentum"]),
        seed=int(opts["seed"]),
    )


def _model_spec_for(opts: dict, ds: MultiTaskDataset):
    if opts["model_spec"] is not None:
        return spec_from_dict(read_json(opts["model_spec"]))
    return default_model_spec(ds.image_shape, tuple(t.n_classes for t in ds.tasks))


# ---------------------------------------------------------------------------
# subcommands

def _cmd_gen_data(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    opts = _resolve("gen-data", args, {
        "out": None, "n": 15000, "seed": 7, "train_fraction": 0.8,
        "sigma": 0.05, "classes": (4, 2, 5), "secured": (0, 2),
        "image": (32, 32, 3), "joint": None,
    })
    _require(opts, "out")
    classes = _int_tuple(opts["classes"])
    secured = _int_tuple(opts["secured"])
    image = _int_tuple(opts["image"])
    if len(image) != 3:
        raise MTKError("--image must be H,W,C")

    tasks = default_tasks(classes, secured)
    joint = _load_joint(opts["joint"], classes)
    render = default_render_spec(tasks, image_shape=image, noise_sigma=float(opts["sigma"]))
    ds = generate_synthetic(tasks, joint, render, int(opts["n"]), int(opts["seed"]))
    train_ds, test_ds = split(ds, float(opts["train_fraction"]), int(opts["seed"]) + 1)

    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    train_path, test_path = out / "train.mtkd", out / "test.mtkd"
    save_dataset(str(train_path), train_ds)
    save_dataset(str(test_path), test_ds)
    _write_manifest("gen-data", opts, [str(train_path), str(test_path)], started)
    print(f"wrote {train_path} ({train_ds.n_samples} samples), "
          f"{test_path} ({test_ds.n_samples} samples)")
    return 0


def _cmd_stats(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    opts = _resolve("stats", args, {"data": None, "tau": DEFAULT_TAU, "out": None})
    _require(opts, "data")
    ds = load_dataset(opts["data"])
    actions = scan(ds, float(opts["tau"]))
    if not actions:
        print(f"no conditional excess above tau={float(opts['tau'])}")
    for a in actions:
        e = a.entry
        print(
            f"alpha={e.alpha:.4f} task{e.target_task}={e.target_class} "
            f"given task{e.cond_task}={e.cond_class} "
            f"gamma={a.gamma:.4f} beta={a.beta:.4f} relabel={a.n_relabel}"
        )
    if opts["out"] is not None:
        write_json(opts["out"], report_dict(float(opts["tau"]), actions))
        _write_manifest("stats", opts, [opts["out"]], started)
    return 0


def _cmd_decouple(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    opts = _resolve("decouple", args, {
        "data": None, "out": None, "tau": DEFAULT_TAU, "seed": 0,
    })
    _require(opts, "data", "out")
    ds = load_dataset(opts["data"])
    decoupled, actions = decouple_pipeline(ds, float(opts["tau"]), int(opts["seed"]))
    save_dataset(opts["out"], decoupled)
    report_path = opts["out"] + ".report.json"
    write_json(report_path, report_dict(float(opts["tau"]), actions))
    _write_manifest("decouple", opts, [opts["out"], report_path], started)
    print(f"applied {len(actions)} decoupling action(s); wrote {opts['out']}")
    return 0


def _cmd_build(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    opts = _resolve("build", args, {
        "data": None, "out": None, "keys": None, "seed": 0,
    })
    _require(opts, "data", "out")
    ds = load_dataset(opts["data"])
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    if opts["keys"] is not None:
        keys = load_keys(opts["keys"], ds.image_shape)
        keys_path = opts["keys"]
    else:
        keys = default_keyset(ds.secured_ids, ds.image_shape)
        keys_path = str(out / "keys.json")
        save_keys(keys_path, keys)
    ts = build_all(ds, keys, int(opts["seed"]))
    save_trainset(str(out), ts)
    _write_manifest("build", opts, [str(out), keys_path], started)
    print(f"built trainset with {len(ts.parts)} keyed part(s) at {out} "
          f"({ts.n_samples} samples total)")
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    opts = _resolve("train", args, {
        "trainset": None, "out": None, "epochs": None, "batch_size": 64,
        "optimizer": "sgd", "lr": 0.05, "momentum": 0.9, "seed": 0,
        "model_spec": None, "history": None,
    })
    _require(opts, "trainset", "out")
    ts = load_trainset(opts["trainset"])
    spec = _model_spec_for(opts, ts.base)
    cfg = _train_config(opts, keyed_epochs(DEFAULT_BASELINE_EPOCHS))
    params, history = train(spec, ts, cfg)
    save_checkpoint(opts["out"], params)
    history_path = opts["history"] or opts["out"] + ".history.csv"
    history.save_csv(history_path)
    _write_manifest("train", opts, [opts["out"], history_path], started)
    print(f"trained {cfg.epochs} epoch(s), final loss {history.final_loss():.4f}; "
          f"wrote {opts['out']}")
    return 0


def _cmd_train_baseline(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    opts = _resolve("train-baseline", args, {
        "data": None, "out": None, "epochs": None, "batch_size": 64,
        "optimizer": "sgd", "lr": 0.05, "momentum": 0.9, "seed": 0,
        "model_spec": None, "history": None,
    })
    _require(opts, "data", "out")
    ds = load_dataset(opts["data"])
    spec = _model_spec_for(opts, ds)
    cfg = _train_config(opts, DEFAULT_BASELINE_EPOCHS)
    params, history = train_baseline(spec, ds, cfg)
    save_checkpoint(opts["out"], params)
    history_path = opts["history"] or opts["out"] + ".history.csv"
    history.save_csv(history_path)
    _write_manifest("train-baseline", opts, [opts["out"], history_path], started)
    print(f"trained {cfg.epochs} epoch(s), final loss {history.final_loss():.4f}; "
          f"wrote {opts['out']}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    opts = _resolve("eval", args, {
        "model": None, "test": None, "keys": None, "out": None,
        "json": None, "gap": None,
    })
    _require(opts, "model", "test", "keys", "out")
    paths = opts["model"] if isinstance(opts["model"], list) else [opts["model"]]
    models = [load_checkpoint(p) for p in paths]
    test = load_dataset(opts["test"])
    keys = load_keys(opts["keys"], test.image_shape)

    report = protection_report(models, test, keys)
    rows = report.rows()
    gap_dicts = []
    for g in opts["gap"] or []:
        j, k, i, c = _int_tuple(g)
        for trial, params in enumerate(models):
            gap = prediction_gap(params, test, j, k, i, c, keys)
            kind, cond, task, value, halfwidth = gap.rows()[0]
            rows.append((kind, f"trial{trial}:{cond}", task, value, halfwidth))
            gap_dicts.append({"trial": trial, **gap.to_dict()})
    save_rows_csv(opts["out"], rows)
    if opts["json"] is not None:
        write_json(opts["json"], {"protection": report.to_dict(), "gaps": gap_dicts})
    _write_manifest("eval", opts, [opts["out"]], started)
    print(f"evaluated {len(models)} model(s) under {len(report.conditions)} "
          f"condition(s); wrote {opts['out']}")
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    opts = _resolve("sweep", args, {
        "model": None, "test": None, "keys": None, "task": None,
        "kind": "pixels", "values": None, "out": None, "json": None,
    })
    _require(opts, "model", "test", "keys", "task", "values", "out")
    params = load_checkpoint(opts["model"])
    test = load_dataset(opts["test"])
    keys = load_keys(opts["keys"], test.image_shape)
    by_task = keys_by_task(keys)
    task = int(opts["task"])
    if task not in by_task:
        raise MTKError(f"no key for task {task} in {opts['keys']}")
    values = _float_tuple(opts["values"])
    curve = similarity_accuracy_sweep(params, test, by_task[task], opts["kind"], values)
    save_rows_csv(opts["out"], curve.rows())
    if opts["json"] is not None:
        write_json(opts["json"], curve.to_dict())
    _write_manifest("sweep", opts, [opts["out"]], started)
    print(f"swept {len(values)} {opts['kind']} value(s) on task {task}; "
          f"wrote {opts['out']}")
    return 0


def _cmd_serve(args: argparse.Namespace) -> int:
    opts = _resolve("serve", args, {
        "model": None, "data": None, "keys": None, "grants": None,
        "host": "127.0.0.1", "port": 7700, "allow_upload": False,
    })
    _require(opts, "model", "data", "keys", "grants")
    params = load_checkpoint(opts["model"])
    ds = load_dataset(opts["data"])
    keys = load_keys(opts["keys"], ds.image_shape)
    grants = load_grants(opts["grants"])
    workers = os.environ.get("MTK_THREADS")
    server = serve(
        params, ds, grants, keys,
        host=opts["host"], port=int(opts["port"]),
        allow_upload=bool(opts["allow_upload"]),
        max_workers=int(workers) if workers else None,
    )
    host, port = server.server_address
    print(f"serving on {host}:{port}", file=sys.stderr)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mtk",
        description="Multi-task classification with trigger-key access control.",
    )
    parser.add_argument("--version", action="version", version=f"mtk {mtk.__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON file with option defaults")
        p.set_defaults(func=func)
        return p

    p = add("gen-data", _cmd_gen_data, "generate a synthetic train/test pair")
    p.add_argument("--out", help="output directory")
    p.add_argument("--n", type=int, help="total samples before the split")
    p.add_argument("--seed", type=int)
    p.add_argument("--train-fraction", type=float, dest="train_fraction")
    p.add_argument("--sigma", type=float, help="pixel noise level")
    p.add_argument("--classes", help="classes per task, e.g. 4,2,5")
    p.add_argument("--secured", help="secured task ids, e.g. 0,2")
    p.add_argument("--image", help="image shape H,W,C")
    p.add_argument("--joint", help="JSON file with chain-factorized label tables")

    p = add("stats", _cmd_stats, "scan a dataset for excess conditionals")
    p.add_argument("--data", help="dataset path (.mtkd)")
    p.add_argument("--tau", type=float)
    p.add_argument("--out", help="optional JSON report path")

    p = add("decouple", _cmd_decouple, "relabel away excess conditionals")
    p.add_argument("--data", help="dataset path (.mtkd)")
    p.add_argument("--out", help="decoupled dataset path (.mtkd)")
    p.add_argument("--tau", type=float)
    p.add_argument("--seed", type=int)

    p = add("build", _cmd_build, "build the keyed trainset")
    p.add_argument("--data", help="training dataset path (.mtkd)")
    p.add_argument("--out", help="trainset directory")
    p.add_argument("--keys", help="key file; omitted -> default keys written to out")
    p.add_argument("--seed", type=int)

    def train_flags(p, source_flag, source_help):
        p.add_argument(source_flag, help=source_help)
        p.add_argument("--out", help="checkpoint path (.mtkw)")
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", type=int, dest="batch_size")
        p.add_argument("--optimizer", choices=("sgd", "adam"))
        p.add_argument("--lr", type=float)
        p.add_argument("--momentum", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--model-spec", dest="model_spec",
                       help="JSON model description; omitted -> stock CNN")
        p.add_argument("--history", help="history CSV path")

    p = add("train", _cmd_train, "train on a keyed trainset")
    train_flags(p, "--trainset", "trainset directory")

    p = add("train-baseline", _cmd_train_baseline, "train on a plain dataset")
    train_flags(p, "--data", "dataset path (.mtkd)")

    p = add("eval", _cmd_eval, "protection/revelation report, optional gaps")
    p.add_argument("--model", action="append",
                   help="checkpoint path; repeat for multi-trial confidence")
    p.add_argument("--test", help="test dataset path (.mtkd)")
    p.add_argument("--keys", help="key file")
    p.add_argument("--out", help="CSV report path")
    p.add_argument("--json", help="optional JSON report path")
    p.add_argument("--gap", action="append",
                   help="gap probe 'condTask,condClass,targetTask,targetClass'; repeatable")

    p = add("sweep", _cmd_sweep, "similarity/accuracy sweep for one key")
    p.add_argument("--model", help="checkpoint path")
    p.add_argument("--test", help="test dataset path (.mtkd)")
    p.add_argument("--keys", help="key file")
    p.add_argument("--task", type=int, help="secured task whose key is swept")
    p.add_argument("--kind", choices=("pixels", "magnitude"))
    p.add_argument("--values", help="sweep values, e.g. 1,5,9,13,25")
    p.add_argument("--out", help="CSV path")
    p.add_argument("--json", help="optional JSON path")

    p = add("serve", _cmd_serve, "serve authorization-gated predictions")
    p.add_argument("--model", help="checkpoint path")
    p.add_argument("--data", help="dataset the server answers about (.mtkd)")
    p.add_argument("--keys", help="key file")
    p.add_argument("--grants", help="grants JSON path")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.add_argument("--allow-upload", dest="allow_upload",
                   action="store_const", const=True,
                   help="accept raw samples in requests")

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except MTKError as err:
        print(f"mtk: {err}", file=sys.stderr)
        return 1
    except OSError as err:
        name = err.filename or "i/o error"
        print(f"mtk: {name}: {err.strerror or err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
