"""Binary bundle of named arrays with a JSON header.

Layout::

    b"EPTBNDL1"
    u64 header length, then UTF-8 JSON header
    one matrix record per entry (see ``tensor_core.write_matrix``)

Arrays of rank other than 2 are stored flattened to 2-D; the header keeps
the true shape. The header's ``content_hash`` is a git-style blob hash
(``sha1(b"blob <len>\\0" + payload)``) over the matrix records.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np

from .errors import CompatibilityError
from .tensor_core import matrix_to_bytes, read_matrix

MAGIC = b"EPTBNDL1"


def content_hash(payload: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(payload) + payload).hexdigest()


def _as_2d(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 2:
        return arr
    if arr.ndim < 2:
        return arr.reshape(1, -1)
    return arr.reshape(-1, arr.shape[-1])


def dumps(header: dict, arrays: dict[str, np.ndarray]) -> bytes:
    payload = b"".join(matrix_to_bytes(_as_2d(a)) for a in arrays.values())
    meta = dict(header)
    meta["entries"] = [{"name": k, "shape": list(np.shape(v))} for k, v in arrays.items()]
    meta["content_hash"] = content_hash(payload)
    head = json.dumps(meta, sort_keys=True).encode()
    return MAGIC + struct.pack("<Q", len(head)) + head + payload


def loads(blob: bytes):
    if blob[:8] != MAGIC:
        raise CompatibilityError("not an EPT bundle (bad magic)")
    (n,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + n].decode())
    payload = blob[16 + n:]
    if content_hash(payload) != header.get("content_hash"):
        raise CompatibilityError("bundle content hash mismatch")
    fh = io.BytesIO(payload)
    arrays = {}
    for entry in header["entries"]:
        arrays[entry["name"]] = read_matrix(fh).reshape(entry["shape"])
    return header, arrays


def save(path, header: dict, arrays: dict[str, np.ndarray]) -> str:
    blob = dumps(header, arrays)
    Path(path).write_bytes(blob)
    return json.loads(blob[16:16 + struct.unpack("<Q", blob[8:16])[0]])["content_hash"]


def load(path):
    return loads(Path(path).read_bytes())
