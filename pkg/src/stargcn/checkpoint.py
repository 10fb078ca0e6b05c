"""Self-describing binary checkpoint container.

Layout: a magic line, a 4-byte little-endian header length, a JSON header
(sorted keys, compact separators) and the raw little-endian array payload
in header order. No timestamps or platform-dependent fields anywhere, so
writing the same store twice produces byte-identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import SpecMismatchError
from .model import ModelSpec, ParameterStore, init_parameters
from .tape import RngStream

MAGIC = b"SGCNCKPT1\n"
FORMAT_VERSION = 1


def save_checkpoint(path, store: ParameterStore, rng_state: dict | None = None):
    path = Path(path)
    raw_u, raw_i = store.feature_raw_dims()
    arrays = []
    payload = bytearray()
    for name, tensor in store.named_parameters():
        data = np.ascontiguousarray(tensor.value, dtype=store.dtype).astype(
            store.dtype.newbyteorder("<"), copy=False
        )
        buf = data.tobytes()
        arrays.append({
            "name": name,
            "shape": list(tensor.value.shape),
            "offset": len(payload),
            "nbytes": len(buf),
        })
        payload.extend(buf)
    header = {
        "format": FORMAT_VERSION,
        "model_spec": store.spec.to_dict(),
        "num_users": store.num_users,
        "num_items": store.num_items,
        "dtype": store.dtype.name,
        "user_raw_dim": raw_u,
        "item_raw_dim": raw_i,
        "rng_state": rng_state,
        "arrays": arrays,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        f.write(bytes(payload))


def load_checkpoint(path):
    """Returns (ParameterStore, rng_state or None)."""
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise SpecMismatchError(f"{path} is not a checkpoint file (bad magic)")
        (header_len,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(header_len).decode("utf-8"))
        if header["format"] != FORMAT_VERSION:
            raise SpecMismatchError(
                f"unsupported checkpoint format {header['format']}"
            )
        payload = f.read()
    spec = ModelSpec.from_dict(header["model_spec"])
    dtype = np.dtype(header["dtype"])
    store = init_parameters(
        spec, RngStream(0), header["num_users"], header["num_items"],
        user_raw_dim=header["user_raw_dim"], item_raw_dim=header["item_raw_dim"],
        dtype=dtype,
    )
    arrays = {}
    for meta in header["arrays"]:
        raw = payload[meta["offset"]:meta["offset"] + meta["nbytes"]]
        arr = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(dtype)
        arrays[meta["name"]] = arr.reshape(meta["shape"])
    store.load_snapshot(arrays)
    rng_state = header.get("rng_state")
    return store, rng_state
