"""Checkpoint container.

Layout (all integers little-endian):

    8 bytes   magic  b"MAMLCKPT"
    4 bytes   format version (uint32, currently 1)
    8 bytes   header length H (uint64)
    H bytes   UTF-8 JSON header, keys sorted:
                model    ModelConfig fields
                seed     RNG seed the parameters were produced with
                tensors  [{"name", "shape", "offset", "count"}, ...]  offsets in float64 units
                optimizer  {"inner_t", "outer_t", "shared"} or null
                extra    free-form metadata
    rest      float64 '<f8' values of every tensor, concatenated in header order

Optimizer moments are stored as tensors named ``opt.<inner|outer>.<m|v>.<param>``.
Nothing time- or host-dependent is written, so equal inputs give equal bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .optim import OptimizerPair, OptState
from .params import Params
from .tinylm import ModelConfig, param_shapes

MAGIC = b"MAMLCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _opt_tensors(pair: OptimizerPair | None) -> tuple[dict, dict | None]:
    if pair is None:
        return {}, None
    out = {}
    roles = [("inner", pair.inner_state)]
    if pair.outer_state is not pair.inner_state:
        roles.append(("outer", pair.outer_state))
    for role, st in roles:
        for which in ("m", "v"):
            for k in sorted(getattr(st, which)):
                out[f"opt.{role}.{which}.{k}"] = getattr(st, which)[k]
    meta = {"inner_t": pair.inner_state.t, "outer_t": pair.outer_state.t,
            "shared": pair.outer_state is pair.inner_state}
    return out, meta


def to_bytes(config: ModelConfig, params, seed: int, optimizer: OptimizerPair | None = None,
             extra: dict | None = None) -> bytes:
    tensors = {k: np.asarray(getattr(v, "data", v), dtype="<f8") for k, v in params.items()}
    opt, opt_meta = _opt_tensors(optimizer)
    tensors.update({k: np.asarray(v, dtype="<f8") for k, v in opt.items()})
    index, offset = [], 0
    for name, arr in tensors.items():
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        offset += arr.size
    header = {"model": asdict(config), "seed": int(seed), "tensors": index, "optimizer": opt_meta,
              "extra": extra or {}}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = b"".join(np.ascontiguousarray(a).tobytes() for a in tensors.values())
    return MAGIC + struct.pack("<IQ", VERSION, len(hbytes)) + hbytes + body


def save_checkpoint(path, config: ModelConfig, params, seed: int, optimizer: OptimizerPair | None = None,
                    extra: dict | None = None) -> None:
    Path(path).write_bytes(to_bytes(config, params, seed, optimizer, extra))


def from_bytes(raw: bytes) -> dict:
    if raw[:8] != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    if len(raw) < 20:
        raise CheckpointError("truncated checkpoint header")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[20:20 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"corrupt checkpoint header: {err}") from None
    body = np.frombuffer(raw, dtype="<f8", offset=20 + hlen) if len(raw) > 20 + hlen else np.zeros(0)
    config = ModelConfig(**header["model"])
    arrays = {}
    for t in header["tensors"]:
        end = t["offset"] + t["count"]
        if end > body.size:
            raise CheckpointError(f"truncated checkpoint: tensor {t['name']} runs past the end")
        arrays[t["name"]] = body[t["offset"]:end].astype(np.float64).reshape(t["shape"])
    shapes = param_shapes(config)
    missing = set(shapes) - set(arrays)
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters {sorted(missing)}")
    for name, shape in shapes.items():
        if tuple(arrays[name].shape) != shape:
            raise CheckpointError(f"{name}: stored shape {arrays[name].shape} != config shape {shape}")
    params = Params.from_arrays({k: arrays[k] for k in shapes})
    opt = None
    if header.get("optimizer"):
        meta = header["optimizer"]
        inner = OptState(t=meta["inner_t"])
        outer = inner if meta["shared"] else OptState(t=meta["outer_t"])
        for name, arr in arrays.items():
            if name.startswith("opt."):
                _, role, which, pname = name.split(".", 3)
                getattr(inner if role == "inner" else outer, which)[pname] = arr
        opt = {"inner": inner, "outer": outer}
    return {"config": config, "params": params, "seed": header["seed"], "optimizer": opt, "extra": header["extra"]}


def load_checkpoint(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise CheckpointError(f"checkpoint not found: {p}")
    return from_bytes(p.read_bytes())
