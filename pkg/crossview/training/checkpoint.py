"""
Checkpoint codec.

Layout: an 8-byte little-endian header length, a UTF-8 JSON header with sorted
keys, then the raw little-endian bytes of every tensor in name order. The
header lists each tensor's dtype, shape and byte offset. Saving a loaded
checkpoint reproduces the file byte for byte.
"""

import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Union

import numpy as np
import torch

from crossview.core.errors import ConfigurationError, DataError

FORMAT = "crossview-checkpoint"
FORMAT_VERSION = 1

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.uint8: "|u1",
    torch.bool: "|b1",
}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


def _tensor_bytes(tensor: torch.Tensor) -> tuple[str, bytes]:
    tensor = tensor.detach().cpu().contiguous()
    if tensor.dtype not in _DTYPES:
        raise ConfigurationError(f"Unsupported checkpoint dtype {tensor.dtype}")
    code = _DTYPES[tensor.dtype]
    return code, tensor.numpy().astype(np.dtype(code), copy=False).tobytes()


def encode(header: dict[str, Any], tensors: dict[str, torch.Tensor]) -> bytes:
    entries = {}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        code, raw = _tensor_bytes(tensors[name])
        entries[name] = {
            "dtype": code,
            "shape": list(tensors[name].shape),
            "offset": offset,
            "nbytes": len(raw),
        }
        chunks.append(raw)
        offset += len(raw)

    full_header = dict(header)
    full_header["format"] = FORMAT
    full_header["format_version"] = FORMAT_VERSION
    full_header["tensors"] = entries
    blob = json.dumps(full_header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack("<Q", len(blob)) + blob + b"".join(chunks)


def decode(data: bytes, source: str = "<bytes>") -> tuple[dict[str, Any], dict[str, torch.Tensor]]:
    if len(data) < 8:
        raise DataError(f"{source}: truncated checkpoint")
    (length,) = struct.unpack("<Q", data[:8])
    try:
        header = json.loads(data[8 : 8 + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"{source}: corrupt checkpoint header ({e})") from e
    if header.get("format") != FORMAT:
        raise ConfigurationError(f"{source}: not a {FORMAT} file")
    if header.get("format_version") != FORMAT_VERSION:
        raise ConfigurationError(f"{source}: unsupported format version {header.get('format_version')}")

    payload = memoryview(data)[8 + length :]
    tensors = {}
    for name, entry in header["tensors"].items():
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise DataError(f"{source}: tensor {name} extends past the end of the file")
        array = np.frombuffer(payload[start : start + nbytes], dtype=np.dtype(entry["dtype"]))
        array = array.reshape(entry["shape"]).copy()
        tensors[name] = torch.from_numpy(array).to(_TORCH_DTYPES[entry["dtype"]])
    return header, tensors


def save(path: Union[str, Path], header: dict[str, Any], tensors: dict[str, torch.Tensor]) -> str:
    """Writes the checkpoint atomically and returns its SHA-256."""
    path = Path(path)
    data = encode(header, tensors)
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_bytes(data)
        tmp.replace(path)
    except OSError as e:
        raise DataError(f"Cannot write checkpoint {path}: {e}") from e
    return hashlib.sha256(data).hexdigest()


def load(path: Union[str, Path]) -> tuple[dict[str, Any], dict[str, torch.Tensor]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"Checkpoint not found: {path}")
    return decode(path.read_bytes(), str(path))


def file_hash(path: Union[str, Path]) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def optimizer_to_checkpoint(optimizer: torch.optim.Optimizer, prefix: str) -> tuple[dict[str, Any], dict[str, torch.Tensor]]:
    """
    Splits an optimizer state dict into a JSON part and named tensors.
    """
    state = optimizer.state_dict()
    tensors = {}
    scalars: dict[str, dict[str, Any]] = {}
    for index, values in state["state"].items():
        for key, value in values.items():
            if isinstance(value, torch.Tensor):
                tensors[f"{prefix}/{index}/{key}"] = value
            else:
                scalars.setdefault(str(index), {})[key] = value
    header = {"param_groups": state["param_groups"], "scalars": scalars}
    return header, tensors


def optimizer_from_checkpoint(
    optimizer: torch.optim.Optimizer, header: dict[str, Any], tensors: dict[str, torch.Tensor], prefix: str
):
    state: dict[int, dict[str, Any]] = {}
    for name, value in tensors.items():
        if not name.startswith(prefix + "/"):
            continue
        _, index, key = name.split("/", 2)
        state.setdefault(int(index), {})[key] = value
    for index, values in header.get("scalars", {}).items():
        state.setdefault(int(index), {}).update(values)
    optimizer.load_state_dict({"state": state, "param_groups": header["param_groups"]})
