"""Bit-exact tensor (de)serialization for checkpoints and snapshots.

Tensors are stored as base64 of their little-endian raw bytes alongside
dtype and shape, so save/load round-trips preserve every bit.
"""

from __future__ import annotations

import base64

import numpy as np
import torch

_DTYPES = {
    "float64": np.float64,
    "float32": np.float32,
    "int64": np.int64,
}


def tensor_to_payload(t: torch.Tensor) -> dict:
    arr = t.detach().cpu().numpy()
    dtype = str(arr.dtype)
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported tensor dtype {dtype}")
    little = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    return {
        "dtype": dtype,
        "shape": list(arr.shape),
        "data": base64.b64encode(little.tobytes()).decode("ascii"),
    }


def tensor_from_payload(payload: dict) -> torch.Tensor:
    dtype = _DTYPES[payload["dtype"]]
    raw = base64.b64decode(payload["data"])
    arr = np.frombuffer(raw, dtype=np.dtype(dtype).newbyteorder("<"))
    arr = arr.astype(dtype).reshape(payload["shape"])
    return torch.from_numpy(arr.copy())


def state_to_payload(state: dict[str, torch.Tensor]) -> dict:
    return {name: tensor_to_payload(t) for name, t in state.items()}


def state_from_payload(payload: dict) -> dict[str, torch.Tensor]:
    return {name: tensor_from_payload(p) for name, p in payload.items()}
