"""Line-delimited JSON metrics."""

from __future__ import annotations

import json
from pathlib import Path

VOLATILE = ("wall_clock",)


class MetricsWriter:
    """Appends one JSON object per line and flushes after each record."""

    def __init__(self, path: str | Path, truncate_after: int | None = None):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if truncate_after is not None and self.path.exists():
            # on resume, drop records written after the checkpoint
            kept = [r for r in read_metrics(self.path) if r["env_step"] <= truncate_after]
            with open(self.path, "w") as fh:
                for r in kept:
                    fh.write(json.dumps(r) + "\n")
        self._last_step = max((r["env_step"] for r in read_metrics(self.path)), default=-1) \
            if self.path.exists() else -1

    def write(self, record: dict) -> None:
        step = record["env_step"]
        if step <= self._last_step:
            raise ValueError(f"metrics must have increasing env_step ({step} after {self._last_step})")
        self._last_step = step
        with open(self.path, "a") as fh:
            fh.write(json.dumps(record) + "\n")
            fh.flush()


def read_metrics(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def stable_view(records: list[dict]) -> list[dict]:
    """Records without fields that legitimately differ between identical runs."""
    return [{k: v for k, v in r.items() if k not in VOLATILE} for r in records]
