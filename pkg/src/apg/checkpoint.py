"""Binary checkpoints.

Layout::

    b"APG1" | u32 header length | header (UTF-8 JSON) | float64 LE payload

The header carries the format version, schema, model config, the ordered
list of parameter names and shapes, the payload size and its CRC-32.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .data import Schema
from .model import CtrModel, ModelConfig, build_model

MAGIC = b"APG1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: CtrModel, path: str | Path) -> None:
    params = model.params()
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in params.values())
    header = {
        "format": FORMAT_VERSION,
        "schema": model.schema.to_dict(),
        "config": model.config.to_dict(),
        "params": [{"name": k, "shape": list(v.shape)} for k, v in params.items()],
        "payload_bytes": len(payload),
        "crc32": zlib.crc32(payload),
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(payload)


def read_header(path: str | Path) -> dict:
    return _read(path)[0]


def _read(path: str | Path) -> tuple[dict, bytes]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an APG checkpoint (bad magic)")
    (hlen,) = struct.unpack("<I", blob[4:8])
    if len(blob) < 8 + hlen:
        raise CheckpointError(f"{path}: truncated header ({len(blob) - 8} of {hlen} bytes)")
    try:
        header = json.loads(blob[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from None
    if header.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format')!r}")
    payload = blob[8 + hlen:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(
            f"{path}: truncated payload ({len(payload)} of {header['payload_bytes']} bytes)"
        )
    if zlib.crc32(payload) != header["crc32"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    return header, payload


def load_checkpoint(path: str | Path, collapse: bool = False) -> CtrModel:
    """Rebuild the model; with ``collapse`` a v5 model comes back folded to v4."""
    header, payload = _read(path)
    try:
        schema = Schema.from_dict(header["schema"])
        config = ModelConfig.from_dict(header["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad schema/config section: {exc}") from None
    model = build_model(schema, config)
    params = model.params()
    listed = [p["name"] for p in header["params"]]
    if listed != list(params):
        raise CheckpointError(f"{path}: parameter list does not match the declared config")
    offset = 0
    for entry in header["params"]:
        arr = params[entry["name"]]
        if list(arr.shape) != entry["shape"]:
            raise CheckpointError(f"{path}: {entry['name']} has shape {entry['shape']}, expected {list(arr.shape)}")
        nbytes = arr.size * 8
        arr[...] = np.frombuffer(payload, dtype="<f8", count=arr.size, offset=offset).reshape(arr.shape)
        offset += nbytes
    if collapse:
        model = model.collapsed()
    return model
