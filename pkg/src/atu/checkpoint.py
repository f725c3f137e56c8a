"""Portable checkpoint container.

Byte layout (all integers little-endian)::

    offset 0   8 bytes   magic b"ATUCKPT\\x01" (last byte is the format version)
    offset 8   8 bytes   u64 H, length of the JSON header in bytes
    offset 16  H bytes   UTF-8 JSON header
    offset 16+H          data section: float64 little-endian values, row-major

The header is an object with two keys:

* ``"tensors"``: list of ``{"name", "shape", "offset", "count"}`` where
  ``offset`` counts float64 values from the start of the data section and
  ``count`` equals the product of ``shape``;
* ``"meta"``: free-form JSON (optimizer scalars, RNG states, config, ...).

Any language that can read a JSON object and little-endian doubles can
round-trip the file.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"ATUCKPT\x01"


class CheckpointError(ValueError):
    pass


def save(path: str | Path, tensors: dict[str, np.ndarray], meta: dict[str, Any] | None = None) -> None:
    """Write atomically (temp file + rename) so an interrupted save never leaves a torn file."""
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype="<f8", order="C")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
        chunks.append(a.tobytes())
        offset += a.size
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)
    os.replace(tmp, path)


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    data = np.frombuffer(raw, dtype="<f8", offset=16 + hlen)
    out = {}
    for e in header["tensors"]:
        if int(np.prod(e["shape"], dtype=np.int64)) != e["count"]:
            raise CheckpointError(f"{path}: tensor {e['name']!r} count does not match its shape")
        if e["offset"] + e["count"] > len(data):
            raise CheckpointError(f"{path}: tensor {e['name']!r} runs past the end of the file")
        vals = data[e["offset"] : e["offset"] + e["count"]]
        out[e["name"]] = vals.astype(np.float64).reshape(e["shape"])
    return out, header["meta"]


# ---------------------------------------------------------------------------
# helpers for packing training state
# ---------------------------------------------------------------------------

def rng_state(rng: np.random.Generator | None):
    return None if rng is None else rng.bit_generator.state


def rng_from_state(state) -> np.random.Generator | None:
    if state is None:
        return None
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)


def pack_optimizer(prefix: str, opt, tensors: dict[str, np.ndarray]) -> dict[str, Any]:
    for k, m in opt.m.items():
        tensors[f"{prefix}/m/{k}"] = m
        tensors[f"{prefix}/v/{k}"] = opt.v[k]
    return {
        "kind": opt.kind,
        "lr": opt.lr,
        "beta1": opt.beta1,
        "beta2": opt.beta2,
        "eps": opt.eps,
        "t": opt.t,
        "keys": list(opt.m),
    }


def unpack_optimizer(prefix: str, meta: dict[str, Any], tensors: dict[str, np.ndarray]):
    from .autodiff import Optimizer

    opt = Optimizer(meta["kind"], meta["lr"], meta["beta1"], meta["beta2"], meta["eps"])
    opt.t = meta["t"]
    for k in meta["keys"]:
        opt.m[k] = tensors[f"{prefix}/m/{k}"].copy()
        opt.v[k] = tensors[f"{prefix}/v/{k}"].copy()
    return opt


def pack_model(model, tensors: dict[str, np.ndarray]) -> dict[str, Any]:
    for k, p in model.params.items():
        tensors[f"theta/{k}"] = p.data
    if model.inner_rates is not None:
        for k, r in model.inner_rates.items():
            tensors[f"rate/{k}"] = r.data
    return {"alpha": model.alpha, "arch": list(model.arch), "loss": model.loss, "metasgd": model.metasgd}


def unpack_model(meta: dict[str, Any], tensors: dict[str, np.ndarray]):
    from .autodiff import Tensor
    from .meta import MetaModel

    params = {k[6:]: Tensor(v, requires_grad=True) for k, v in tensors.items() if k.startswith("theta/")}
    rates = None
    if meta["metasgd"]:
        rates = {k[5:]: Tensor(v, requires_grad=True) for k, v in tensors.items() if k.startswith("rate/")}
    return MetaModel(params, meta["alpha"], rates, tuple(meta["arch"]), meta["loss"])
