"""Versioned text checkpoints.

Every container is a single UTF-8 file: the first line is a magic string such
as ``OMGRL-NET v1``, the rest is JSON. Arrays are stored as base64 of their
little-endian bytes so fp64 values round-trip bitwise.
"""

from __future__ import annotations

import base64
import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import StateError
from .nn import AdamState, DenseNet

NET_MAGIC = "OMGRL-NET v1"


def _encode(obj):
    if isinstance(obj, np.ndarray):
        arr = np.ascontiguousarray(obj)
        dtype = arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in "|" else arr.dtype
        return {"__ndarray__": base64.b64encode(arr.astype(dtype).tobytes()).decode("ascii"),
                "dtype": dtype.str, "shape": list(arr.shape)}
    if isinstance(obj, dict):
        return {str(k): _encode(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_encode(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _decode(obj):
    if isinstance(obj, dict):
        if "__ndarray__" in obj:
            raw = base64.b64decode(obj["__ndarray__"])
            return np.frombuffer(raw, dtype=np.dtype(obj["dtype"])).reshape(obj["shape"]).copy()
        return {k: _decode(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_decode(v) for v in obj]
    return obj


def dumps(magic: str, payload: dict) -> str:
    return magic + "\n" + json.dumps(_encode(payload), sort_keys=True) + "\n"


def loads(text: str, magic: str) -> dict:
    head, _, body = text.partition("\n")
    if head.strip() != magic:
        raise StateError(f"expected checkpoint header {magic!r}, found {head.strip()!r}")
    return _decode(json.loads(body))


def save(path, magic: str, payload: dict) -> str:
    """Write a container and return the sha256 of its bytes."""
    data = dumps(magic, payload).encode("utf-8")
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load(path, magic: str) -> dict:
    return loads(Path(path).read_text(encoding="utf-8"), magic)


def net_to_dict(net: DenseNet) -> dict:
    return {"layer_sizes": list(net.layer_sizes), "hidden_activation": net.hidden_activation,
            "output_activation": net.output_activation, "params": net.params}


def net_from_dict(d: dict) -> DenseNet:
    params = d["params"]
    return DenseNet(tuple(d["layer_sizes"]), list(params[0::2]), list(params[1::2]),
                    d["hidden_activation"], d["output_activation"])


def adam_to_dict(state: AdamState) -> dict:
    return {"m": state.m, "v": state.v, "t": state.t, "lr": state.lr, "beta1": state.beta1,
            "beta2": state.beta2, "eps": state.eps, "names": state.names}


def adam_from_dict(d: dict) -> AdamState:
    return AdamState(m=list(d["m"]), v=list(d["v"]), t=int(d["t"]), lr=d["lr"], beta1=d["beta1"],
                     beta2=d["beta2"], eps=d["eps"], names=list(d["names"]))


def save_net(path, net: DenseNet, adam: AdamState | None = None) -> str:
    payload = {"net": net_to_dict(net)}
    if adam is not None:
        payload["adam"] = adam_to_dict(adam)
    return save(path, NET_MAGIC, payload)


def load_net(path) -> tuple[DenseNet, AdamState | None]:
    d = load(path, NET_MAGIC)
    adam = adam_from_dict(d["adam"]) if "adam" in d else None
    return net_from_dict(d["net"]), adam
