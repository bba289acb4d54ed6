"""
Checkpoint - Versioned little-endian container for named float64 tensors.

Layout:
    magic  b"AFAL"              4 bytes
    version                     uint32 LE
    header length               uint64 LE
    header                      UTF-8 JSON: {"metadata": {...}, "tensors": [{name, shape, offset}]}
    payload                     float64 LE arrays, concatenated in directory order

Parameters round-trip bit-exactly; metadata holds anything JSON-serialisable
(config snapshots, optimizer counters, RNG state).
"""

import json
import struct
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np

from .errors import ParseError

MAGIC = b"AFAL"
FORMAT_VERSION = 1

PathLike = Union[str, Path]


def save_tensors(path: PathLike, tensors: Dict[str, np.ndarray], metadata: Dict[str, Any] = None):
    """Write named arrays plus a JSON metadata block."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    directory = []
    payload = []
    offset = 0
    for name, array in tensors.items():
        data = np.ascontiguousarray(array, dtype="<f8")
        directory.append({"name": name, "shape": list(data.shape), "offset": offset})
        payload.append(data.tobytes())
        offset += data.nbytes

    header = json.dumps({"metadata": metadata or {}, "tensors": directory},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for chunk in payload:
            f.write(chunk)


def load_tensors(path: PathLike) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """Read a container written by save_tensors."""
    path = Path(path)
    with open(path, "rb") as f:
        raw = f.read()

    if raw[:4] != MAGIC:
        raise ParseError("not a checkpoint file (bad magic)", path=str(path))
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", path=str(path))
    (header_len,) = struct.unpack_from("<Q", raw, 8)
    start = 16
    try:
        header = json.loads(raw[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise ParseError("corrupt checkpoint header", path=str(path)) from None
    base = start + header_len

    tensors: Dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        begin = base + entry["offset"]
        if begin + 8 * count > len(raw):
            raise ParseError(f"truncated payload for tensor '{entry['name']}'", path=str(path))
        array = np.frombuffer(raw, dtype="<f8", count=count, offset=begin)
        tensors[entry["name"]] = array.reshape(shape).astype(np.float64)
    return tensors, header.get("metadata", {})
