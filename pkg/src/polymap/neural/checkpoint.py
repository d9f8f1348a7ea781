"""Single-file checkpoints: one JSON header line, then raw float64 data.

The header carries the model configuration, the optimizer step counter,
and a manifest of (name, kind, shape, byte offset) entries; array bytes
follow in manifest order as little-endian 64-bit floats.  Round-trips are
bit-exact.
"""
from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from .head import PolygonHeadConfig
from .params import ParamStore

FORMAT_NAME = "polymap-checkpoint-v1"


def _entries(store: ParamStore):
    for name, t in store.params.items():
        yield name, "param", t.data
    for name, arr in store.buffers.items():
        yield name, "buffer", arr
    for name, arr in store.moment1.items():
        yield name, "moment1", arr
    for name, arr in store.moment2.items():
        yield name, "moment2", arr


def save_checkpoint(path: str | Path, cfg: PolygonHeadConfig, store: ParamStore) -> None:
    manifest = []
    blobs = []
    offset = 0
    for name, kind, arr in _entries(store):
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        manifest.append({"name": name, "kind": kind, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format": FORMAT_NAME,
        "config": dataclasses.asdict(cfg),
        "step": store.step,
        "manifest": manifest,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, separators=(",", ":"), sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path: str | Path) -> tuple[PolygonHeadConfig, ParamStore]:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        data = fh.read()
    header = json.loads(header_line.decode("utf-8"))
    if header.get("format") != FORMAT_NAME:
        raise ValueError(f"not a {FORMAT_NAME} file: {path}")
    cfg_dict = dict(header["config"])
    cfg_dict["stem_channels"] = tuple(cfg_dict.get("stem_channels", ()))
    cfg = PolygonHeadConfig(**cfg_dict)
    store = ParamStore()
    store.step = int(header["step"])
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=start).reshape(shape).copy()
        kind = entry["kind"]
        name = entry["name"]
        if kind == "param":
            store.add_param(name, arr)
        elif kind == "buffer":
            store.add_buffer(name, arr)
        elif kind == "moment1":
            store.moment1[name] = arr
        elif kind == "moment2":
            store.moment2[name] = arr
        else:
            raise ValueError(f"unknown checkpoint entry kind {kind!r}")
    return cfg, store
