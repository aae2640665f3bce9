"""Append-only binary log of ``(frame, action, reward, done)`` records.

Layout: ``b"GLAMLOG1"``, a little-endian ``uint32`` header length, a JSON
header (frame shape, env name, free-form metadata), then fixed-size records of
``int32 action, float32 reward, uint8 done, uint8 reset`` followed by the raw
``uint8`` frame bytes. ``reset`` marks the first record of an episode.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .processing import to_uint8

MAGIC = b"GLAMLOG1"
_REC = struct.Struct("<ifBB")


@dataclass
class LogRecord:
    frame: np.ndarray
    action: int
    reward: float
    done: bool
    reset: bool


class EpisodeLogWriter:
    def __init__(self, path: str | Path, frame_shape: tuple[int, int], meta: dict | None = None):
        self.path = Path(path)
        self.frame_shape = tuple(frame_shape)
        if self.path.exists() and self.path.stat().st_size > 0:
            hdr = read_header(self.path)
            if tuple(hdr["frame_shape"]) != self.frame_shape:
                raise ValueError(f"{self.path}: existing log has frame shape {hdr['frame_shape']}")
            self._fh = open(self.path, "ab")
        else:
            self._fh = open(self.path, "wb")
            blob = json.dumps({"frame_shape": list(self.frame_shape), **(meta or {})}).encode()
            self._fh.write(MAGIC + struct.pack("<I", len(blob)) + blob)

    def append(self, frame, action: int, reward: float, done: bool, reset: bool = False) -> None:
        f = np.asarray(frame)
        f = f if f.dtype == np.uint8 else to_uint8(f)
        if f.shape != self.frame_shape:
            raise ValueError(f"frame shape {f.shape} != {self.frame_shape}")
        self._fh.write(_REC.pack(int(action), float(reward), int(bool(done)), int(bool(reset))))
        self._fh.write(f.tobytes())

    def flush(self) -> None:
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_header(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not an episode log")
        (n,) = struct.unpack("<I", fh.read(4))
        return json.loads(fh.read(n))


def read_log(path: str | Path) -> tuple[dict, Iterator[LogRecord]]:
    header = read_header(path)
    shape = tuple(header["frame_shape"])
    nbytes = int(np.prod(shape))

    def records():
        with open(path, "rb") as fh:
            fh.seek(len(MAGIC))
            (n,) = struct.unpack("<I", fh.read(4))
            fh.seek(n, 1)
            while True:
                head = fh.read(_REC.size)
                if len(head) < _REC.size:
                    return
                a, r, d, rs = _REC.unpack(head)
                raw = fh.read(nbytes)
                if len(raw) < nbytes:
                    raise ValueError(f"{path}: truncated record")
                yield LogRecord(np.frombuffer(raw, dtype=np.uint8).reshape(shape), a, r, bool(d), bool(rs))

    return header, records()
