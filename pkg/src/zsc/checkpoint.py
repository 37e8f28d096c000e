"""Checkpoint container.

Layout::

    b"ZSCCKPT1" | uint64 LE header length | UTF-8 JSON header | tensor blobs

The header carries artifact version, module name, config hash, seed, free-form
``meta`` and a tensor table ``[{name, shape, offset}]``. Blobs are 64-bit
little-endian floats, so float32 weights round-trip exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import __version__

MAGIC = b"ZSCCKPT1"


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    header: dict
    tensors: dict[str, np.ndarray]

    @property
    def meta(self) -> dict:
        return self.header.get("meta", {})


def save_checkpoint(path: str | Path, module: str, tensors: dict[str, np.ndarray],
                    config_hash: str, seed: int, meta: dict | None = None) -> Path:
    table, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8")
        # ascontiguousarray would promote 0-d arrays to 1-d
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        arr = np.ascontiguousarray(arr)
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {"artifact_version": __version__, "module": module, "config_hash": config_hash,
              "seed": seed, "meta": meta or {}, "tensors": table}
    raw = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for b in blobs:
            fh.write(b)
    return path


def load_checkpoint(path: str | Path, module: str | None = None, config_hash: str | None = None,
                    force: bool = False) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (n,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + n])
    if module is not None and header["module"] != module:
        raise CheckpointError(f"{path}: holds module {header['module']!r}, expected {module!r}")
    if config_hash is not None and header["config_hash"] != config_hash and not force:
        raise CheckpointError(f"{path}: config hash {header['config_hash']} does not match "
                              f"current config {config_hash}; retrain or pass --force")
    base = 16 + n
    tensors = {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"], dtype=np.int64))
        start = base + t["offset"]
        tensors[t["name"]] = np.frombuffer(data, dtype="<f8", count=count,
                                           offset=start).reshape(tuple(t["shape"])).copy()
    return Checkpoint(header, tensors)


def save_model(path: str | Path, module: str, model: nn.Module, config_hash: str, seed: int,
               extra_meta: dict | None = None) -> Path:
    tensors = {k: v.detach().double().numpy() for k, v in model.state_dict().items()}
    meta = {"arch": model.arch(), **(extra_meta or {})}
    return save_checkpoint(path, module, tensors, config_hash, seed, meta)


def _model_classes():
    from .counter import BaseCountingModel
    from .embedding import EmbeddingNetwork
    from .prototype import ConditionalVAE
    from .selector import ErrorPredictor
    return {"embedding": EmbeddingNetwork, "counter": BaseCountingModel, "vae": ConditionalVAE,
            "counting_vae": ConditionalVAE, "predictor": ErrorPredictor}


def load_model(path: str | Path, module: str, config_hash: str | None = None,
               force: bool = False, dtype: torch.dtype = torch.float32) -> nn.Module:
    ckpt = load_checkpoint(path, module, config_hash, force)
    cls = _model_classes()[module]
    model = cls(**ckpt.meta["arch"])
    state = {k: torch.from_numpy(v).to(dtype) for k, v in ckpt.tensors.items()}
    model.load_state_dict(state)
    if hasattr(model, "trained"):
        model.trained = True
    return model.to(dtype).eval()
