"""Run manifests and run-directory locking.

Every pipeline stage appends an entry to `manifest.json` in the run directory:
what it consumed (paths + content hashes), what it produced (paths + content
hashes), the seed and config hash it ran under, and when it finished.
Timestamps live only here — the data files themselves are byte-deterministic,
so two runs from the same inputs produce identical output hashes and the
manifests differ only in their clock fields.

A run directory is guarded by a lock file created with O_EXCL; a second
process refusing to share the directory fails fast instead of interleaving
writes.
"""

from __future__ import annotations

import hashlib
import json
import os
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping

from . import __version__


class LockError(RuntimeError):
    """The run directory is already locked by another process."""


def sha256_file(path: Path | str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def file_stamp(path: Path | str, base: Path | str | None = None) -> dict:
    """Path (relative to the run dir when possible) plus content hash."""
    p = Path(path)
    shown = p
    if base is not None:
        try:
            shown = p.relative_to(base)
        except ValueError:
            pass
    return {"path": str(shown), "sha256": sha256_file(p)}


class RunManifest:
    """The per-run-directory ledger of stage inputs and outputs."""

    def __init__(self, out_dir: Path | str):
        self.out_dir = Path(out_dir)
        self.path = self.out_dir / "manifest.json"
        if self.path.exists():
            self.data = json.loads(self.path.read_text())
        else:
            self.data = {"tool": "archsearch", "version": __version__, "stages": {}}

    def record_stage(
        self,
        stage: str,
        seed: int | None,
        config_path: Path | str | None,
        inputs: Mapping[str, Path | str],
        outputs: Mapping[str, Path | str],
        extra: Mapping | None = None,
    ) -> None:
        entry = {
            "completed_utc": datetime.now(timezone.utc).isoformat(),
            "seed": seed,
            "inputs": {k: file_stamp(v, self.out_dir) for k, v in sorted(inputs.items())},
            "outputs": {k: file_stamp(v, self.out_dir) for k, v in sorted(outputs.items())},
        }
        if config_path is not None:
            entry["config"] = file_stamp(config_path)
        if extra:
            entry["extra"] = dict(extra)
        self.data["stages"][stage] = entry
        self.save()

    def save(self) -> None:
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")


class RunLock:
    """Exclusive lock on a run directory, held for the life of one command."""

    def __init__(self, out_dir: Path | str):
        self.lock_path = Path(out_dir) / ".lock"
        self._fd: int | None = None

    def __enter__(self) -> "RunLock":
        try:
            self._fd = os.open(self.lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise LockError(
                f"run directory is locked ({self.lock_path} exists); "
                "another command may be running — remove the file if it is stale"
            ) from None
        os.write(self._fd, f"{os.getpid()}\n".encode())
        return self

    def __exit__(self, *exc_info) -> None:
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None
        try:
            self.lock_path.unlink()
        except FileNotFoundError:
            pass
