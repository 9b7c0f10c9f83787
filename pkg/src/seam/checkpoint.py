"""Checkpoint archive: magic, length-prefixed JSON manifest, raw float32 arrays.

Layout::

    b"SEAMCKPT1" | uint64 LE manifest length | manifest JSON (utf-8) | arrays

Arrays are little-endian float32, C order, in manifest order.
"""
import json
import struct

import numpy as np

MAGIC = b"SEAMCKPT1"
_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, entries, step=0, meta=None):
    """Write ``entries`` (iterable of ``(name, array, group)``) to ``path``."""
    manifest = {"dtype": "float32", "step": int(step), "meta": meta or {}, "tensors": []}
    arrays = []
    names = set()
    for name, arr, group in entries:
        if name in names:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        names.add(name)
        a = np.ascontiguousarray(np.asarray(arr), dtype=_DTYPE)
        manifest["tensors"].append({"name": name, "shape": list(a.shape), "group": group})
        arrays.append(a)
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for a in arrays:
            f.write(a.tobytes())


def load_checkpoint(path):
    """Return ``(tensors, manifest)`` with ``tensors`` an ordered name -> array dict."""
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    off = len(MAGIC)
    if len(raw) < off + 8:
        raise CheckpointError(f"{path}: truncated header")
    (n,) = struct.unpack_from("<Q", raw, off)
    off += 8
    manifest = json.loads(raw[off : off + n].decode("utf-8"))
    off += n
    tensors = {}
    for spec in manifest["tensors"]:
        count = int(np.prod(spec["shape"], dtype=np.int64))
        nbytes = count * _DTYPE.itemsize
        if off + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated data for {spec['name']!r}")
        tensors[spec["name"]] = np.frombuffer(raw, _DTYPE, count, off).reshape(spec["shape"]).copy()
        off += nbytes
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return tensors, manifest
