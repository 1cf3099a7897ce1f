"""Binary tensor files.

Layout of one record (all integers little-endian)::

    b"SGMA" | version:u32 | dtype:u8 (0=f32, 1=f64) | rank:u8 | dims:u64*rank | payload

A file may hold several records back to back (codebooks use one per level).
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO, Iterable

import numpy as np

MAGIC = b"SGMA"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class TensorFormatError(ValueError):
    pass


def _write_record(fh: BinaryIO, array: np.ndarray) -> None:
    a = np.asarray(array)
    if a.dtype not in _TAGS:
        a = a.astype(np.float64)
    tag = _TAGS[a.dtype]
    fh.write(MAGIC)
    fh.write(struct.pack("<IBB", VERSION, tag, a.ndim))
    fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
    fh.write(np.ascontiguousarray(a, dtype=_DTYPES[tag]).tobytes(order="C"))


def _read_record(fh: BinaryIO) -> np.ndarray | None:
    magic = fh.read(4)
    if not magic:
        return None
    if magic != MAGIC:
        raise TensorFormatError(f"bad magic {magic!r}")
    version, tag, rank = struct.unpack("<IBB", fh.read(6))
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}")
    if tag not in _DTYPES:
        raise TensorFormatError(f"unknown dtype tag {tag}")
    dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
    dtype = _DTYPES[tag]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = fh.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise TensorFormatError("truncated payload")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))


def write_tensor(path, array: np.ndarray) -> None:
    write_tensors(path, [array])


def write_tensors(path, arrays: Iterable[np.ndarray]) -> None:
    with open(Path(path), "wb") as fh:
        for a in arrays:
            _write_record(fh, a)


def read_tensors(path) -> list[np.ndarray]:
    out = []
    with open(Path(path), "rb") as fh:
        while (rec := _read_record(fh)) is not None:
            out.append(rec)
    return out


def read_tensor(path) -> np.ndarray:
    records = read_tensors(path)
    if len(records) != 1:
        raise TensorFormatError(f"{path}: expected 1 tensor, found {len(records)}")
    return records[0]


def save_params(directory, params: dict[str, np.ndarray], manifest: dict[str, object] | None = None) -> None:
    """Write a parameter dict as one tensor file per entry plus ``manifest.txt``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for key in sorted(manifest or {}):
        lines.append(f"{key}={manifest[key]}")
    for name in sorted(params):
        fname = name.replace("/", "__") + ".sgma"
        write_tensor(d / fname, params[name])
        lines.append(f"param:{name}={fname}")
    (d / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_params(directory) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    d = Path(directory)
    params, meta = {}, {}
    for line in (d / "manifest.txt").read_text().splitlines():
        if not line:
            continue
        key, _, value = line.partition("=")
        if key.startswith("param:"):
            params[key[len("param:"):]] = read_tensor(d / value)
        else:
            meta[key] = value
    return params, meta
