"""Byte-reproducible checkpoints.

A checkpoint is an uncompressed zip holding one ``.npy`` member per parameter
and Adam moment buffer plus a JSON metadata member. Member order and
timestamps are fixed, so identical training state always produces an
identical file and therefore an identical hash.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import Module
from .training import AdamState
from .volume_io import atomic_write_bytes

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    adam: AdamState
    config: dict = field(default_factory=dict)
    epoch: int = 0
    step: int = 0
    best_val_loss: float | None = None
    format_version: int = FORMAT_VERSION


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def _member(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    adam = ckpt.adam
    meta = {"format_version": ckpt.format_version, "epoch": ckpt.epoch, "step": ckpt.step,
            "best_val_loss": ckpt.best_val_loss, "config": ckpt.config,
            "adam": {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps,
                     "weight_decay": adam.weight_decay, "t": adam.t},
            "params": sorted(ckpt.params), "moments": sorted(adam.m)}
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _member(zf, "meta.json", json.dumps(meta, sort_keys=True, indent=1).encode())
        for name in sorted(ckpt.params):
            _member(zf, f"params/{name}.npy", _npy_bytes(ckpt.params[name]))
        for name in sorted(adam.m):
            _member(zf, f"adam_m/{name}.npy", _npy_bytes(adam.m[name]))
            _member(zf, f"adam_v/{name}.npy", _npy_bytes(adam.v[name]))
    return buf.getvalue()


def decode_checkpoint(payload: bytes) -> Checkpoint:
    with zipfile.ZipFile(io.BytesIO(payload)) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta["format_version"] != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['format_version']}")

        def load(member: str) -> np.ndarray:
            return np.lib.format.read_array(io.BytesIO(zf.read(member)), allow_pickle=False)

        params = {name: load(f"params/{name}.npy") for name in meta["params"]}
        adam = AdamState(**meta["adam"],
                         m={name: load(f"adam_m/{name}.npy") for name in meta["moments"]},
                         v={name: load(f"adam_v/{name}.npy") for name in meta["moments"]})
    return Checkpoint(params, adam, meta["config"], meta["epoch"], meta["step"], meta["best_val_loss"],
                      meta["format_version"])


def save_checkpoint(path: str | Path, model: Module, adam: AdamState, config: dict | None = None,
                    epoch: int = 0, step: int = 0, best_val_loss: float | None = None) -> str:
    """Write a checkpoint atomically and return its SHA-256."""
    payload = encode_checkpoint(Checkpoint(model.state_dict(), adam, config or {}, epoch, step, best_val_loss))
    atomic_write_bytes(path, payload)
    return hashlib.sha256(payload).hexdigest()


def load_checkpoint(path: str | Path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
