"""Versioned single-file container for named float64 tensors.

Layout: magic bytes, an 8-byte little-endian header length, a JSON header
(sorted keys), then the raw little-endian float64 buffers back to back.
No timestamps are stored, so identical contents give identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .optim import AdamState

MAGIC = b"SPACAP-CKPT\n"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: dict | None = None,
                    adam: AdamState | None = None, param_order: list[str] | None = None) -> None:
    tensors = dict(tensors)
    adam_header = None
    if adam is not None:
        adam_header = {k: getattr(adam, k) for k in ("lr", "weight_decay", "beta1", "beta2", "eps", "step")}
        if adam.m:
            if param_order is None or len(param_order) != len(adam.m):
                raise CheckpointError("param_order must name every ADAM moment buffer")
            for name, m, v in zip(param_order, adam.m, adam.v):
                tensors[f"adam.m/{name}"] = m
                tensors[f"adam.v/{name}"] = v
        adam_header["param_order"] = list(param_order or [])
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    header = {"format_version": FORMAT_VERSION, "meta": meta or {}, "adam": adam_header,
              "tensors": entries}
    raw = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Returns ``(tensors, meta, adam_state_or_None)``."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint file (bad magic)")
    pos = len(MAGIC)
    (hlen,) = struct.unpack("<Q", data[pos:pos + 8])
    pos += 8
    header = json.loads(data[pos:pos + hlen])
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')}")
    base = pos + hlen
    tensors = {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        start = base + e["offset"]
        tensors[e["name"]] = np.frombuffer(data, dtype="<f8", count=n, offset=start) \
            .reshape(e["shape"]).astype(np.float64)
    adam = None
    ah = header.get("adam")
    if ah is not None:
        order = ah.pop("param_order")
        adam = AdamState(**ah)
        if order:
            adam.m = [tensors.pop(f"adam.m/{n}") for n in order]
            adam.v = [tensors.pop(f"adam.v/{n}") for n in order]
    return tensors, header["meta"], adam
