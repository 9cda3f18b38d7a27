"""Dataset manifest: the single source of truth for shard generation state.

The manifest is a pretty-printed JSON file living beside the shards.  Shard
entries move through pending -> in_progress -> done; recovery paths
(releasing a crashed claim, downgrading a corrupt shard) move entries back
to pending explicitly.  A done entry records the verified content hash and
is never re-marked done with a different hash.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from typing import Optional

STATUS_PENDING = "pending"
STATUS_IN_PROGRESS = "in_progress"
STATUS_DONE = "done"
STATUSES = (STATUS_PENDING, STATUS_IN_PROGRESS, STATUS_DONE)

MANIFEST_NAME = "manifest.json"


@dataclass
class ShardEntry:
    path: str
    record_count: int
    status: str = STATUS_PENDING
    content_hash: Optional[str] = None
    worker_id: Optional[str] = None
    completed_at: Optional[str] = None
    note: Optional[str] = None

    def to_dict(self) -> dict:
        d = {"path": self.path, "record_count": self.record_count, "status": self.status}
        for key in ("content_hash", "worker_id", "completed_at", "note"):
            value = getattr(self, key)
            if value is not None:
                d[key] = value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ShardEntry":
        if d.get("status") not in STATUSES:
            raise ValueError(f"unknown shard status {d.get('status')!r}")
        return cls(
            path=str(d["path"]),
            record_count=int(d["record_count"]),
            status=d["status"],
            content_hash=d.get("content_hash"),
            worker_id=d.get("worker_id"),
            completed_at=d.get("completed_at"),
            note=d.get("note"),
        )


@dataclass
class Manifest:
    dataset_id: str
    config: dict  # world config, teacher roster, captioner, A, N, shard geometry
    entries: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "config": self.config,
            "shards": [e.to_dict() for e in self.entries],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Manifest":
        return cls(
            dataset_id=str(d["dataset_id"]),
            config=dict(d["config"]),
            entries=[ShardEntry.from_dict(e) for e in d.get("shards", [])],
        )

    def save(self, path: str) -> None:
        data = json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
        directory = os.path.dirname(os.path.abspath(path)) or "."
        fd, tmp = tempfile.mkstemp(prefix=MANIFEST_NAME + ".", dir=directory)
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write(data)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    @classmethod
    def load(cls, path: str) -> "Manifest":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    # -- status transitions ------------------------------------------------

    def _entry(self, index: int) -> ShardEntry:
        return self.entries[index]

    def claim(self, index: int, worker_id: str) -> None:
        entry = self._entry(index)
        if entry.status != STATUS_PENDING:
            raise ValueError(f"shard {index} is {entry.status}, cannot claim")
        entry.status = STATUS_IN_PROGRESS
        entry.worker_id = worker_id
        entry.note = None

    def release(self, index: int, note: Optional[str] = None) -> None:
        entry = self._entry(index)
        if entry.status != STATUS_IN_PROGRESS:
            raise ValueError(f"shard {index} is {entry.status}, cannot release")
        entry.status = STATUS_PENDING
        entry.worker_id = None
        entry.note = note

    def complete(self, index: int, content_hash: str, completed_at: str) -> None:
        entry = self._entry(index)
        if entry.status == STATUS_DONE:
            if entry.content_hash != content_hash:
                raise ValueError(
                    f"shard {index} already done with hash {entry.content_hash}, "
                    f"refusing different hash {content_hash}"
                )
            return
        if entry.status != STATUS_IN_PROGRESS:
            raise ValueError(f"shard {index} is {entry.status}, cannot complete")
        entry.status = STATUS_DONE
        entry.content_hash = content_hash
        entry.completed_at = completed_at
        entry.worker_id = None
        entry.note = None

    def downgrade(self, index: int, note: str) -> None:
        entry = self._entry(index)
        if entry.status != STATUS_DONE:
            raise ValueError(f"shard {index} is {entry.status}, cannot downgrade")
        entry.status = STATUS_PENDING
        entry.content_hash = None
        entry.completed_at = None
        entry.note = note

    # -- queries -----------------------------------------------------------

    def pending_indices(self) -> list:
        return [i for i, e in enumerate(self.entries) if e.status == STATUS_PENDING]

    def all_done(self) -> bool:
        return all(e.status == STATUS_DONE for e in self.entries)

    def hashes(self) -> dict:
        return {i: e.content_hash for i, e in enumerate(self.entries) if e.status == STATUS_DONE}


def config_conflicts(existing: dict, proposed: dict, prefix: str = "") -> list:
    """Field paths on which two config snapshots disagree."""
    diffs = []
    keys = sorted(set(existing) | set(proposed))
    for key in keys:
        path = f"{prefix}{key}"
        if key not in existing:
            diffs.append(f"{path} (missing in existing)")
        elif key not in proposed:
            diffs.append(f"{path} (missing in proposed)")
        else:
            a, b = existing[key], proposed[key]
            if isinstance(a, dict) and isinstance(b, dict):
                diffs.extend(config_conflicts(a, b, prefix=path + "."))
            elif a != b:
                diffs.append(f"{path} ({a!r} != {b!r})")
    return diffs
