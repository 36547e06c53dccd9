"""Binary container shared by both model checkpoints.

Layout: ``MAGIC\\n`` + one line of JSON header + ``\\n`` + the tensors as
little-endian float64, concatenated in the order listed under
``header["tensors"]``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import FormatError

_LE = np.dtype("<f8")


def save_container(path, magic: bytes, header: dict, tensors: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    header = dict(header)
    header["tensors"] = [{"name": k, "shape": list(np.shape(v))} for k, v in tensors.items()]
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(magic + b"\n")
        fh.write(blob + b"\n")
        for v in tensors.values():
            fh.write(np.ascontiguousarray(v, dtype=_LE).tobytes())
    return path


def load_container(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if not raw.startswith(magic + b"\n"):
        raise FormatError(f"{path}: bad magic, expected {magic.decode()}")
    rest = raw[len(magic) + 1 :]
    cut = rest.find(b"\n")
    if cut < 0:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(rest[:cut])
    except json.JSONDecodeError as err:
        raise FormatError(f"{path}: header is not JSON ({err})") from err
    body = rest[cut + 1 :]
    tensors = {}
    offset = 0
    for spec in header.get("tensors", []):
        count = int(np.prod(spec["shape"], dtype=np.int64))
        nbytes = count * 8
        if offset + nbytes > len(body):
            raise FormatError(f"{path}: body too short for tensor {spec['name']}")
        arr = np.frombuffer(body, dtype=_LE, count=count, offset=offset).astype(np.float64)
        tensors[spec["name"]] = arr.reshape(spec["shape"])
        offset += nbytes
    if offset != len(body):
        raise FormatError(f"{path}: {len(body) - offset} trailing bytes")
    return header, tensors
