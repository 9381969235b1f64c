"""Checkpoint files.

Layout::

    KGMLCKPT <version>\\n
    <header length in bytes>\\n
    <JSON header: config, extra metadata, tensor table>
    <raw little-endian float64 data, tensors concatenated in table order>

Each tensor-table entry carries name, group, shape, trainable flag and the
byte offset of its data relative to the start of the data block.
"""
from __future__ import annotations

import json

import numpy as np

from .autodiff import ParameterStore

MAGIC = b"KGMLCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, store: ParameterStore, config: dict, extra: dict | None = None) -> None:
    table, blobs, offset = [], [], 0
    for name in store.names():
        arr = np.ascontiguousarray(store[name], dtype="<f8")
        table.append({"name": name, "group": store.group_of(name), "shape": list(arr.shape),
                      "trainable": store.trainable(name), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"config": config, "extra": extra or {}, "tensors": table},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC + b" " + str(VERSION).encode() + b"\n")
        fh.write(str(len(header)).encode() + b"\n")
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> tuple[ParameterStore, dict, dict]:
    try:
        with open(path, "rb") as fh:
            first = fh.readline().split()
            if len(first) != 2 or first[0] != MAGIC:
                raise CheckpointError(f"{path}: not a checkpoint file")
            version = int(first[1])
            if version != VERSION:
                raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
            n = int(fh.readline())
            header = json.loads(fh.read(n).decode("utf-8"))
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    except (ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    store = ParameterStore()
    for entry in header["tensors"]:
        size = int(np.prod(entry["shape"])) * 8
        start = entry["offset"]
        if start + size > len(data):
            raise CheckpointError(f"{path}: truncated tensor {entry['name']}")
        arr = np.frombuffer(data, dtype="<f8", count=size // 8, offset=start).reshape(entry["shape"])
        store.add(entry["group"], entry["name"], arr.astype(np.float64), entry["trainable"])
    return store, header["config"], header["extra"]
