"""Single-file checkpoint container with a versioned header.

Layout: magic, format version, header length, JSON header (module tag, config
snapshot, array directory, corpus-stats hash), then raw little-endian array
payloads in directory order. Saving the result of a load is byte-identical.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MLCK"
FORMAT_VERSION = 1

_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8"), "<i8": np.dtype("<i8")}


class CheckpointError(Exception):
    pass


def stats_hash(mean: np.ndarray, std: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(np.asarray(mean, dtype="<f4").tobytes())
    h.update(np.asarray(std, dtype="<f4").tobytes())
    return h.hexdigest()


@dataclass
class Checkpoint:
    module: str
    config: dict
    arrays: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    corpus_stats_hash: str | None = None


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> Path:
    names = sorted(ckpt.arrays)
    directory = []
    payloads = []
    for name in names:
        arr = np.ascontiguousarray(ckpt.arrays[name])
        code = arr.dtype.newbyteorder("<").str
        if code not in _DTYPES:
            arr = np.ascontiguousarray(arr, dtype="<f4")
            code = "<f4"
        directory.append({"name": name, "shape": list(arr.shape), "dtype": code})
        payloads.append(arr.astype(_DTYPES[code], copy=False).tobytes())
    header = {
        "format_version": FORMAT_VERSION,
        "module": ckpt.module,
        "config": ckpt.config,
        "meta": ckpt.meta,
        "corpus_stats_hash": ckpt.corpus_stats_hash,
        "arrays": directory,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        f.write(blob)
        for p in payloads:
            f.write(p)
    return path


def load_checkpoint(path: str | Path, expect_module: str | None = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version, header_len = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    header = json.loads(raw[12:12 + header_len].decode("utf-8"))
    if expect_module is not None and header["module"] != expect_module:
        raise CheckpointError(
            f"{path}: module tag {header['module']!r}, expected {expect_module!r}")
    arrays = {}
    offset = 12 + header_len
    for d in header["arrays"]:
        dtype = _DTYPES[d["dtype"]]
        count = int(np.prod(d["shape"])) if d["shape"] else 1
        nbytes = count * dtype.itemsize
        arr = np.frombuffer(raw[offset:offset + nbytes], dtype=dtype).reshape(d["shape"])
        arrays[d["name"]] = np.array(arr)
        offset += nbytes
    return Checkpoint(module=header["module"], config=header["config"], arrays=arrays,
                      meta=header["meta"], corpus_stats_hash=header["corpus_stats_hash"])


def state_dict_arrays(module) -> dict[str, np.ndarray]:
    """Torch state dict as float32 numpy arrays, prefixed for the envelope."""
    out = {}
    for name, tensor in module.state_dict().items():
        out[f"param.{name}"] = tensor.detach().cpu().numpy().astype("<f4")
    return out


def load_state_dict_arrays(module, arrays: dict[str, np.ndarray]) -> None:
    import torch

    state = {}
    for name, arr in arrays.items():
        if name.startswith("param."):
            state[name[len("param."):]] = torch.from_numpy(np.array(arr, dtype=np.float32))
    module.load_state_dict(state)
