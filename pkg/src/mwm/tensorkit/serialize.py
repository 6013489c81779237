"""Binary serialization of named float64 tensors.

Record layout, little-endian throughout:

    u32   name length in bytes
    bytes UTF-8 name
    u32   rank
    u64[] extents
    f64[] row-major data

A file is just the concatenation of records; readers consume until EOF.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from ..errors import ContractError


def write_named_tensor(fp: BinaryIO, name: str, array: np.ndarray) -> None:
    data = np.asarray(array, dtype=np.float64)
    shape = data.shape  # ascontiguousarray would promote rank 0 to rank 1
    raw_name = name.encode("utf-8")
    fp.write(struct.pack("<I", len(raw_name)))
    fp.write(raw_name)
    fp.write(struct.pack("<I", len(shape)))
    fp.write(struct.pack(f"<{len(shape)}Q", *shape))
    fp.write(np.ascontiguousarray(data).astype("<f8").tobytes())


def read_named_tensor(fp: BinaryIO) -> tuple[str, np.ndarray] | None:
    """Read one record; None at a clean EOF, ContractError on a torn one."""
    head = fp.read(4)
    if len(head) == 0:
        return None
    if len(head) != 4:
        raise ContractError("truncated tensor record header")
    (name_len,) = struct.unpack("<I", head)
    raw_name = fp.read(name_len)
    if len(raw_name) != name_len:
        raise ContractError("truncated tensor name")
    (rank,) = struct.unpack("<I", _read_exact(fp, 4))
    shape = struct.unpack(f"<{rank}Q", _read_exact(fp, 8 * rank))
    count = int(np.prod(shape)) if rank else 1
    buf = _read_exact(fp, 8 * count)
    array = np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64)
    return raw_name.decode("utf-8"), array


def _read_exact(fp: BinaryIO, n: int) -> bytes:
    buf = fp.read(n)
    if len(buf) != n:
        raise ContractError("truncated tensor record body")
    return buf


def write_tensor_dict(fp: BinaryIO, tensors: dict[str, np.ndarray]) -> None:
    """Write records sorted by name so byte output is order-independent."""
    for name in sorted(tensors):
        write_named_tensor(fp, name, tensors[name])


def read_tensor_dict(fp: BinaryIO) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    while True:
        rec = read_named_tensor(fp)
        if rec is None:
            return out
        name, array = rec
        if name in out:
            raise ContractError(f"duplicate tensor name {name!r}")
        out[name] = array
