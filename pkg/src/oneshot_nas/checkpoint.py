"""Versioned checkpoint files.

A checkpoint is a numpy ``.npz`` archive:

* ``__meta__``: UTF-8 JSON (as a uint8 array) holding ``format`` (always
  ``"oneshot-nas-checkpoint"``), ``version``, and caller metadata such as
  configs, step counters and the random-stream scheme.
* every other key is a float array: ``omega/<param>``, ``alpha/<param>``,
  ``opt_omega/<buffer>/<param>``, ``opt_alpha/<buffer>/<param>``.
"""

from __future__ import annotations

import io
import json
import os
import zipfile
from typing import Dict, Tuple

import numpy as np

FORMAT = "oneshot-nas-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str, meta: dict, arrays: Dict[str, np.ndarray]) -> None:
    meta = {"format": FORMAT, "version": VERSION, **meta}
    blob = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        np.savez(fh, __meta__=blob, **arrays)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> Tuple[dict, Dict[str, np.ndarray]]:
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint {path} does not exist")
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
        with np.load(io.BytesIO(raw), allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except (OSError, ValueError, zipfile.BadZipFile, EOFError) as exc:
        raise CheckpointError(f"checkpoint {path} is unreadable: {exc}") from None
    if "__meta__" not in arrays:
        raise CheckpointError(f"checkpoint {path} has no metadata record")
    try:
        meta = json.loads(arrays.pop("__meta__").tobytes().decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"checkpoint {path} metadata is corrupt: {exc}") from None
    if meta.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} file")
    if meta.get("version") != VERSION:
        raise CheckpointError(f"checkpoint version {meta.get('version')} does not match supported version {VERSION}")
    return meta, arrays
