"""Checkpoint file: JSON header plus raw little-endian float32 payload.

Layout (all integers little-endian)::

    offset 0   4 bytes   magic b"GSAW"
    offset 4   4 bytes   uint32 header length L
    offset 8   L bytes   UTF-8 JSON header
    offset 8+L ...       float32 payload, tensors back to back

The header is ``{"format": 1, "tensors": [{"name", "shape", "offset",
"count"}, ...], "meta": {...}}`` where ``offset`` and ``count`` are measured
in float32 elements from the start of the payload.  Model parameters are
stored under ``model/<name>``; Adam moments under ``optim/<index>/exp_avg``
and ``optim/<index>/exp_avg_sq`` with the step count kept in ``meta``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"GSAW"
FORMAT = 1


class CheckpointError(ValueError):
    pass


def write_tensors(path: str | Path, tensors: dict[str, torch.Tensor], meta: dict | None = None):
    entries, chunks, offset = [], [], 0
    for name, t in tensors.items():
        arr = t.detach().cpu().to(torch.float32).numpy().astype("<f4", copy=False).ravel()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size
    header = json.dumps({"format": FORMAT, "tensors": entries, "meta": meta or {}}).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for c in chunks:
            f.write(c)
    tmp.replace(path)


def read_tensors(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    if header.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unsupported format {header.get('format')}")
    payload = np.frombuffer(raw, dtype="<f4", offset=8 + hlen)
    out = {}
    for e in header["tensors"]:
        end = e["offset"] + e["count"]
        if end > payload.size:
            raise CheckpointError(f"{path}: tensor {e['name']} runs past the payload")
        out[e["name"]] = torch.from_numpy(payload[e["offset"] : end].copy()).reshape(e["shape"])
    return out, header["meta"]


def save_checkpoint(path, model: torch.nn.Module, optimizer: torch.optim.Optimizer | None = None, meta: dict | None = None):
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    meta = dict(meta or {})
    if optimizer is not None:
        steps = {}
        for i, p in enumerate(optimizer.param_groups[0]["params"]):
            st = optimizer.state.get(p)
            if not st:
                continue
            tensors[f"optim/{i}/exp_avg"] = st["exp_avg"]
            tensors[f"optim/{i}/exp_avg_sq"] = st["exp_avg_sq"]
            steps[str(i)] = int(st["step"])
        meta["optim_steps"] = steps
    write_tensors(path, tensors, meta)


def load_checkpoint(path, model: torch.nn.Module, optimizer: torch.optim.Optimizer | None = None) -> dict:
    tensors, meta = read_tensors(path)
    own = model.state_dict()
    state = {}
    for k, ref in own.items():
        key = f"model/{k}"
        if key not in tensors:
            raise CheckpointError(f"checkpoint lacks {k}")
        state[k] = tensors[key].to(ref.dtype)
    model.load_state_dict(state)
    if optimizer is not None:
        params = optimizer.param_groups[0]["params"]
        for i, step in meta.get("optim_steps", {}).items():
            p = params[int(i)]
            optimizer.state[p] = {
                "step": torch.tensor(float(step)),
                "exp_avg": tensors[f"optim/{i}/exp_avg"].to(p.dtype),
                "exp_avg_sq": tensors[f"optim/{i}/exp_avg_sq"].to(p.dtype),
            }
    return meta
