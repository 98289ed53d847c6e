"""Checkpoint files: a text header followed by raw weight blocks.

::

    MESHDIFF-CHECKPOINT 1
    arch={"V": 15, "d_id": 16, ...}
    target_mode=epsilon
    seed=0
    params=E_id:15x16,Wq:34x16,...
    END
    <float64 little-endian blocks, row-major, in the order listed by params>
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .denoiser import PARAM_ORDER, DenoiserConfig, TokenDenoiser

MAGIC = "MESHDIFF-CHECKPOINT 1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: TokenDenoiser, path, target_mode: str = "epsilon", seed: int = 0) -> None:
    arch = json.dumps(vars(model.config), sort_keys=True)
    shapes = ",".join(f"{n}:{'x'.join(str(s) for s in model.params[n].shape)}" for n in PARAM_ORDER)
    header = f"{MAGIC}\narch={arch}\ntarget_mode={target_mode}\nseed={seed}\nparams={shapes}\nEND\n"
    blob = b"".join(np.ascontiguousarray(model.params[n], dtype="<f8").tobytes() for n in PARAM_ORDER)
    Path(path).write_bytes(header.encode() + blob)


def load_checkpoint(path, expect: DenoiserConfig | None = None):
    """Return ``(model, header)``; ``expect`` guards against architecture mismatch."""
    raw = Path(path).read_bytes()
    end = raw.find(b"\nEND\n")
    if not raw.startswith(MAGIC.encode()) or end < 0:
        raise CheckpointError(f"{path}: not a checkpoint file")
    lines = raw[:end].decode().splitlines()[1:]
    header = dict(line.split("=", 1) for line in lines)
    config = DenoiserConfig(**json.loads(header["arch"]))
    if expect is not None and config != expect:
        raise CheckpointError(f"checkpoint architecture {config} does not match expected {expect}")
    data = np.frombuffer(raw[end + 5 :], dtype="<f8")
    params, offset = {}, 0
    for entry in header["params"].split(","):
        name, dims = entry.split(":")
        shape = tuple(int(d) for d in dims.split("x"))
        size = int(np.prod(shape))
        params[name] = data[offset : offset + size].reshape(shape).astype(np.float64)
        offset += size
    if offset != data.size:
        raise CheckpointError(f"{path}: {data.size - offset} trailing values after weights")
    meta = {"target_mode": header["target_mode"], "seed": int(header["seed"]), "arch": config}
    return TokenDenoiser(config, params), meta
