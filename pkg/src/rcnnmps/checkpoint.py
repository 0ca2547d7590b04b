"""Versioned model checkpoints.

A checkpoint is a zip archive holding ``meta.json`` (format tag, config,
per-link architecture, Adam scalars, training log) and one ``.npy`` member
per array: ``cnn<i>/param/<name>``, ``cnn<i>/buffer/<name>``,
``cnn<i>/adam_m/<name>`` and ``cnn<i>/adam_v/<name>``.  Member timestamps are
fixed so identical models give byte-identical files.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np

from .rcnn import RCNNConfig, RCNNModel

FORMAT = "rcnnmps-checkpoint"
VERSION = 1
_STAMP = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    pass


def _write_member(zf, name, data: bytes):
    info = zipfile.ZipInfo(name, date_time=_STAMP)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(model: RCNNModel, path) -> None:
    meta = {
        "format": FORMAT,
        "version": VERSION,
        "config": model.config.to_dict(),
        "epochs_done": model.epochs_done,
        "loss_log": [list(r) for r in model.loss_log],
        "ema_history": list(model.ema_history),
        "links": [],
    }
    arrays = {}
    for i, (stack, opt) in enumerate(zip(model.chain, model.optimizers), start=1):
        meta["links"].append({
            "architecture": {k: list(v) if isinstance(v, tuple) else v
                             for k, v in stack.arch.to_dict().items()},
            "adam": {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2,
                     "epsilon": opt.epsilon, "t": opt.t},
        })
        for name, arr in stack.params.items():
            arrays[f"cnn{i}/param/{name}"] = arr
        for name, arr in stack.buffers.items():
            arrays[f"cnn{i}/buffer/{name}"] = arr
        for name in opt.m:
            arrays[f"cnn{i}/adam_m/{name}"] = opt.m[name]
            arrays[f"cnn{i}/adam_v/{name}"] = opt.v[name]

    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        _write_member(zf, "meta.json", json.dumps(meta, sort_keys=True, indent=1).encode())
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            _write_member(zf, name + ".npy", buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path) -> RCNNModel:
    try:
        zf = zipfile.ZipFile(path)
    except (zipfile.BadZipFile, FileNotFoundError) as exc:
        raise CheckpointError(f"{path}: not a checkpoint ({exc})") from exc
    with zf:
        try:
            meta = json.loads(zf.read("meta.json"))
        except KeyError:
            raise CheckpointError(f"{path}: missing meta.json")
        if meta.get("format") != FORMAT:
            raise CheckpointError(f"{path}: unknown format {meta.get('format')!r}")
        if meta.get("version") != VERSION:
            raise CheckpointError(f"{path}: unsupported version {meta.get('version')}")
        arrays = {
            n[: -len(".npy")]: np.lib.format.read_array(io.BytesIO(zf.read(n)), allow_pickle=False)
            for n in zf.namelist() if n.endswith(".npy")
        }

    config = RCNNConfig.from_dict(meta["config"])
    model = RCNNModel.create(config)
    for i, (stack, opt, link) in enumerate(zip(model.chain, model.optimizers, meta["links"]), start=1):
        saved_arch = link["architecture"]
        current = {k: list(v) if isinstance(v, tuple) else v for k, v in stack.arch.to_dict().items()}
        if saved_arch != current:
            raise CheckpointError(f"{path}: architecture of cnn{i} does not match its config")
        params = {k.split("/", 2)[2]: v for k, v in arrays.items() if k.startswith(f"cnn{i}/param/")}
        buffers = {k.split("/", 2)[2]: v for k, v in arrays.items() if k.startswith(f"cnn{i}/buffer/")}
        stack.load_state(params, buffers)
        a = link["adam"]
        opt.lr, opt.beta1, opt.beta2, opt.epsilon, opt.t = a["lr"], a["beta1"], a["beta2"], a["epsilon"], a["t"]
        opt.m = {k.split("/", 2)[2]: v.copy() for k, v in arrays.items() if k.startswith(f"cnn{i}/adam_m/")}
        opt.v = {k.split("/", 2)[2]: v.copy() for k, v in arrays.items() if k.startswith(f"cnn{i}/adam_v/")}
    model.epochs_done = meta["epochs_done"]
    model.loss_log = [(int(e), int(i), float(l)) for e, i, l in meta["loss_log"]]
    model.ema_history = [float(v) for v in meta["ema_history"]]
    return model


def write_loss_csv(model: RCNNModel, path) -> None:
    lines = ["epoch,cnn_index,mean_loss"]
    lines += [f"{e},{i},{l!r}" for e, i, l in model.loss_log]
    Path(path).write_text("\n".join(lines) + "\n")
