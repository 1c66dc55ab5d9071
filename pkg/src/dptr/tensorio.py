"""Header-plus-payload binary files.

Layout: one line of compact JSON terminated by ``\\n``, followed by raw
little-endian float32 data. Two flavours share that framing:

* checkpoints: header lists tensor names and shapes in payload order,
  plus dims, seed, config and metrics;
* embedding caches: header ``{count, rows_per_entry, D, seed}`` and an
  entry-major ``count x rows_per_entry x D`` payload.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Mapping

import numpy as np

_LE_F32 = np.dtype("<f4")


class FormatError(ValueError):
    pass


def _atomic_write(path: Path, chunks) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    with open(tmp, "wb") as fh:
        for chunk in chunks:
            fh.write(chunk)
    os.replace(tmp, path)


def _split(raw: bytes, path) -> tuple[dict, memoryview]:
    nl = raw.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: missing JSON header line")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad header ({exc})") from None
    return header, memoryview(raw)[nl + 1 :]


def save_tensors(path: str | Path, tensors: Mapping[str, np.ndarray], **meta: Any) -> None:
    names = list(tensors)
    arrays = [np.ascontiguousarray(tensors[n], dtype=_LE_F32) for n in names]
    header = dict(meta)
    header["tensors"] = [{"name": n, "shape": list(a.shape)} for n, a in zip(names, arrays)]
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n"
    _atomic_write(Path(path), [head, *(a.tobytes() for a in arrays)])


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    header, payload = _split(raw, path)
    if "tensors" not in header:
        raise FormatError(f"{path}: header has no tensor table")
    out = {}
    offset = 0
    for spec in header["tensors"]:
        n = int(np.prod(spec["shape"], dtype=np.int64))
        if offset + 4 * n > len(payload):
            raise FormatError(f"{path}: payload truncated at {spec['name']}")
        arr = np.frombuffer(payload, dtype=_LE_F32, count=n, offset=offset)
        out[spec["name"]] = arr.reshape(spec["shape"]).astype(np.float32)
        offset += 4 * n
    if offset != len(payload):
        raise FormatError(f"{path}: {len(payload) - offset} trailing payload bytes")
    return out, header


CACHE_KEYS = ("count", "rows_per_entry", "D", "seed")


def save_cache_array(path: str | Path, bank: np.ndarray, seed: int) -> None:
    if bank.ndim != 3:
        raise FormatError("cache bank must be count x rows x D")
    count, rows, dim = bank.shape
    header = {"count": count, "rows_per_entry": rows, "D": dim, "seed": seed}
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n"
    _atomic_write(Path(path), [head, np.ascontiguousarray(bank, dtype=_LE_F32).tobytes()])


def load_cache_array(path: str | Path) -> tuple[np.ndarray, dict]:
    raw = Path(path).read_bytes()
    header, payload = _split(raw, path)
    missing = [k for k in CACHE_KEYS if k not in header]
    if missing:
        raise FormatError(f"{path}: cache header missing {missing}")
    count, rows, dim = (int(header[k]) for k in ("count", "rows_per_entry", "D"))
    if min(count, rows, dim) < 1:
        raise FormatError(f"{path}: non-positive cache dimensions")
    if len(payload) != 4 * count * rows * dim:
        raise FormatError(
            f"{path}: payload has {len(payload)} bytes, expected {4 * count * rows * dim}"
        )
    bank = np.frombuffer(payload, dtype=_LE_F32).reshape(count, rows, dim).astype(np.float32)
    return bank, header
