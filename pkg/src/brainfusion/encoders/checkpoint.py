"""Parameter checkpoints: one NGT1 file per array plus a JSON index.

``index.json`` maps each parameter name to ``{"file", "shape"}`` and carries
free-form ``metadata``. Arrays are stored as float32, so float32 parameters
reload bit-exactly.
"""

import hashlib
import json
import os
import re

import numpy as np

from ..numerics.tensorfile import atomic_write_bytes, encode_tensor, load_tensor

INDEX = "index.json"


class CheckpointError(ValueError):
    pass


def _file_name(name):
    return re.sub(r"[^A-Za-z0-9_.-]", "_", name) + ".ngt"


def save_checkpoint(directory, params, metadata=None):
    os.makedirs(directory, exist_ok=True)
    index = {}
    for name in sorted(params):
        fname = _file_name(name)
        atomic_write_bytes(os.path.join(directory, fname), encode_tensor(params[name]))
        index[name] = {"file": fname, "shape": list(np.shape(params[name]))}
    doc = {"params": index, "metadata": metadata or {}}
    atomic_write_bytes(os.path.join(directory, INDEX), json.dumps(doc, indent=1, sort_keys=True).encode())
    return directory


def load_checkpoint(directory):
    """Returns ``(params, metadata)``."""
    path = os.path.join(directory, INDEX)
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise CheckpointError(f"no checkpoint index at {path}") from None
    params = {}
    for name, entry in doc["params"].items():
        arr = load_tensor(os.path.join(directory, entry["file"]))
        if list(arr.shape) != entry["shape"]:
            raise CheckpointError(f"{name}: stored shape {arr.shape} != indexed {entry['shape']}")
        params[name] = arr
    return params, doc.get("metadata", {})


def params_digest(params):
    """SHA-256 over names, shapes and float32 bytes, in name order."""
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        h.update(name.encode())
        h.update(repr(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()
