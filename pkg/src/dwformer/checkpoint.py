"""Binary checkpoint container.

Layout (little-endian throughout):

    magic    4 bytes  b"DWCK"
    version  uint32   currently 1
    header   uint32 length + UTF-8 JSON: {"config": ..., "step": ..., "metrics": ...}
    nparams  uint32
    per parameter:
        uint32 name length + UTF-8 name (canonical; aliased params stored once)
        uint32 ndim + uint32 extents...
        row-major float32 payload

Round trips are bit-exact for float32 models.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np
import torch

from .errors import InputError
from .model import Model, ModelConfig

MAGIC = b"DWCK"
VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, torch.Tensor]  # float32, canonical names
    step: int = 0
    metrics: dict | None = None


def model_params(model: Model) -> dict[str, torch.Tensor]:
    """Canonically named parameters; aliases appear once under their first name."""
    return dict(model.named_parameters())  # remove_duplicate=True by default


def save_checkpoint(path: str, model: Model, step: int = 0,
                    metrics: dict | None = None) -> None:
    header = json.dumps(
        {"config": model.cfg.to_dict(), "step": step, "metrics": metrics or {}},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        params = model_params(model)
        f.write(struct.pack("<I", len(params)))
        for name, p in params.items():
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", p.dim()))
            f.write(struct.pack(f"<{p.dim()}I", *p.shape))
            f.write(
                p.detach().to(torch.float32).contiguous().numpy().astype(
                    "<f4", copy=False).tobytes())


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        data = f.read()
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        chunk = data[off : off + n]
        if len(chunk) != n:
            raise InputError(f"truncated checkpoint file {path}")
        off += n
        return chunk

    if take(4) != MAGIC:
        raise InputError(f"{path} is not a checkpoint file")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise InputError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<I", take(4))
    header = json.loads(take(hlen).decode("utf-8"))
    (nparams,) = struct.unpack("<I", take(4))
    params: dict[str, torch.Tensor] = {}
    for _ in range(nparams):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape)
        params[name] = torch.from_numpy(arr.copy())
    return Checkpoint(
        config=ModelConfig.from_dict(header["config"]),
        params=params,
        step=header["step"],
        metrics=header.get("metrics") or {},
    )


def apply_params(model: Model, params: dict[str, torch.Tensor]) -> None:
    """Copy checkpoint parameters into a model (aliases follow automatically)."""
    own = model_params(model)
    if set(own) != set(params):
        missing = set(own) ^ set(params)
        raise InputError(f"checkpoint schema mismatch; differing names: {sorted(missing)[:5]}")
    with torch.no_grad():
        for name, p in own.items():
            if tuple(p.shape) != tuple(params[name].shape):
                raise InputError(f"shape mismatch for {name}")
            p.copy_(params[name].to(p.dtype))


def restore_model(ckpt: Checkpoint, dtype=torch.float32) -> Model:
    from .model import build_model

    model = build_model(ckpt.config, seed=0, dtype=dtype)
    apply_params(model, ckpt.params)
    return model
