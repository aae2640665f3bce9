"""Checkpoint container: one ``.npz`` holding named arrays plus a JSON metadata blob."""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

META_KEY = "__meta__"


class CheckpointMismatch(RuntimeError):
    """The checkpoint was written under a different configuration."""


def write_container(path: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays, **{META_KEY: blob})
    os.replace(tmp, path)
    return path


def read_container(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files if k != META_KEY}
        if META_KEY not in z.files:
            raise ValueError(f"{path}: missing checkpoint metadata")
        meta = json.loads(z[META_KEY].tobytes().decode())
    return arrays, meta


def latest_checkpoint(directory: str | Path) -> Path | None:
    files = sorted(Path(directory).glob("ckpt_*.npz"), key=lambda p: int(p.stem.split("_")[1]))
    return files[-1] if files else None
