"""Deterministic artifact writers and the run manifest.

Artifact JSON/CSV writers are byte-stable for identical inputs (sorted
keys, repr floats); the run manifest records wall-clock and is the one
output excluded from byte-identity guarantees.
"""

from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path


def fmt_value(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, rows, columns) -> None:
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(fmt_value(row[c]) for c in columns))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_json(path, obj) -> None:
    Path(path).write_text(
        json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n", encoding="utf-8"
    )


def write_aligned_table(path, rows, columns) -> None:
    cells = [[c for c in columns]] + [[fmt_value(r[c]) for c in columns] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
    lines = []
    for ri, row in enumerate(cells):
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip())
        if ri == 0:
            lines.append("  ".join("-" * widths[i] for i in range(len(columns))))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class RunManifest:
    """Collects resolved config and artifact hashes for one command run."""

    def __init__(self, command: str, config: dict, out_dir):
        self.command = command
        self.config = config
        self.out_dir = Path(out_dir)
        self.artifacts: dict[str, str] = {}
        self._t0 = time.time()
        self._started = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(self._t0))

    def add(self, path) -> str:
        path = Path(path)
        self.artifacts[path.name] = sha256_file(path)
        return str(path)

    def write(self) -> str:
        path = self.out_dir / f"manifest-{self.command}.json"
        write_json(path, {
            "command": self.command,
            "config": self.config,
            "artifacts": self.artifacts,
            "started_at": self._started,
            "wall_clock_s": round(time.time() - self._t0, 3),
        })
        return str(path)


def ensure_out_dir(out) -> Path:
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path
