"""Versioned text checkpoints: parameters, optimizer moments, and the run seed.

Layout: a magic first line, then one JSON document. Floats are serialized
with shortest round-trip repr, so save/load is bit-exact and repeated
saves of identical state are byte-identical.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .optim import ParamStore

MAGIC = "REVISE-CKPT-1"


class CheckpointError(ValueError):
    """Malformed or wrong-version checkpoint file."""


def atomic_write_text(path: str | Path, text: str) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path: str | Path, store: ParamStore, extra: dict | None = None) -> None:
    payload = {
        "seed": store.seed,
        "params": {
            name: {"shape": list(t.data.shape), "data": t.data.reshape(-1).tolist()}
            for name, t in store.items()
        },
        "opt_state": {
            name: {
                "m": store.state(name).m.reshape(-1).tolist(),
                "v": store.state(name).v.reshape(-1).tolist(),
                "step": store.state(name).step,
            }
            for name in store.names()
        },
    }
    if extra:
        payload["extra"] = extra
    atomic_write_text(path, MAGIC + "\n" + json.dumps(payload) + "\n")


def load(path: str | Path) -> tuple[ParamStore, dict]:
    """Rebuild a ParamStore (values, moments, seed) from a checkpoint file."""
    text = Path(path).read_text()
    newline = text.find("\n")
    header = text[:newline] if newline >= 0 else text
    if header.strip() != MAGIC:
        raise CheckpointError(f"{path}: expected header {MAGIC!r}, found {header.strip()!r}")
    try:
        payload = json.loads(text[newline + 1:])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: body is not valid JSON: {exc}") from exc

    store = ParamStore(seed=int(payload.get("seed", 0)))
    for name, rec in payload["params"].items():
        shape = tuple(rec["shape"])
        t = store.create(name, shape, init="zeros")
        t.data[...] = np.asarray(rec["data"], dtype=np.float64).reshape(shape)
    for name, rec in payload.get("opt_state", {}).items():
        st = store.state(name)
        shape = store[name].data.shape
        st.m = np.asarray(rec["m"], dtype=np.float64).reshape(shape)
        st.v = np.asarray(rec["v"], dtype=np.float64).reshape(shape)
        st.step = int(rec.get("step", 0))
    return store, payload.get("extra", {})
