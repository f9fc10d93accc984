"""Sub-server content directories: honest reads, single-page heals, full reboots.

Each replica is a plain directory ``<data_dir>/replica-<id>/`` mirroring the
page paths. Nothing here caches file contents; corruption can happen between
any two calls and every read must observe it.
"""

from __future__ import annotations

import logging
import os
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

from .hashstore import GoldenStore, RecordMissing

log = logging.getLogger(__name__)


class ReplicaError(Exception):
    pass


class PageMissing(ReplicaError):
    """The replica has no file for a page the hash store knows about."""


class HealFailed(ReplicaError):
    pass


class RebootFailed(ReplicaError):
    """Re-materialization failed; the replica stays isolated."""


class UnknownReplica(ReplicaError, KeyError):
    pass


@dataclass
class ReplicaHandle:
    replica_id: int
    content_root: Path
    isolated: bool = False
    load_counter: int = 0


def _page_file(root: Path, page_path: str) -> Path:
    return root.joinpath(*page_path.strip("/").split("/"))


def _write_atomic(target: Path, data: bytes) -> None:
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = target.with_name(target.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, target)


def materialize(root: Path, contents: Mapping[str, bytes]) -> int:
    """Make ``root`` hold exactly ``contents``; return how many files changed."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    changed = 0
    wanted = set()
    for page_path, data in contents.items():
        target = _page_file(root, page_path)
        wanted.add(target)
        try:
            if target.is_file() and target.read_bytes() == data:
                continue
        except OSError:
            pass
        if target.is_dir():
            shutil.rmtree(target)
        _write_atomic(target, data)
        changed += 1
    # drop anything an attacker planted alongside the pages
    for dirpath, dirnames, filenames in os.walk(root, topdown=False):
        for name in filenames:
            full = Path(dirpath, name)
            if full not in wanted:
                full.unlink()
                changed += 1
        for name in dirnames:
            full = Path(dirpath, name)
            if not any(full.iterdir()):
                full.rmdir()
    return changed


class ReplicaSet:
    """The N sub-servers behind the gateway."""

    def __init__(self, data_dir: str | os.PathLike, golden: GoldenStore, count: int):
        if count < 1:
            raise ValueError("need at least one replica")
        self.data_dir = Path(data_dir)
        self.golden = golden
        self.handles = {
            rid: ReplicaHandle(rid, self.data_dir / f"replica-{rid}") for rid in range(1, count + 1)
        }
        self.on_reboot: list[Callable[[int], None]] = []

    def __len__(self) -> int:
        return len(self.handles)

    def ids(self) -> list[int]:
        return sorted(self.handles)

    def handle(self, replica_id: int) -> ReplicaHandle:
        try:
            return self.handles[replica_id]
        except KeyError:
            raise UnknownReplica(replica_id) from None

    def page_file(self, replica_id: int, page_path: str) -> Path:
        return _page_file(self.handle(replica_id).content_root, page_path)

    def read_page(self, replica_id: int, page_path: str) -> bytes:
        target = self.page_file(replica_id, page_path)
        try:
            return target.read_bytes()
        except (FileNotFoundError, IsADirectoryError, NotADirectoryError):
            raise PageMissing(f"replica {replica_id}: {page_path}") from None

    def heal_page(self, replica_id: int, page_path: str) -> bool:
        """Restore one page from the golden copy. Returns False if it was already intact."""
        golden, _ = self.golden.golden_bytes(page_path)
        target = self.page_file(replica_id, page_path)
        try:
            if target.is_file() and target.read_bytes() == golden:
                return False
            if target.is_dir():
                shutil.rmtree(target)
            _write_atomic(target, golden)
        except OSError as exc:
            raise HealFailed(f"replica {replica_id}: {page_path}: {exc}") from exc
        log.info("healed %s on replica %d", page_path, replica_id)
        return True

    def reboot_replica(self, replica_id: int) -> int:
        """Re-materialize every page from golden and reset the replica's state.

        Returns the number of files that had to change. On a write failure the
        replica is left isolated and :class:`RebootFailed` is raised.
        """
        h = self.handle(replica_id)
        try:
            contents = {p: self.golden.golden_bytes(p)[0] for p in self.golden.paths()}
            changed = materialize(h.content_root, contents)
        except (OSError, RecordMissing) as exc:
            h.isolated = True
            log.error("reboot of replica %d failed, replica stays isolated: %s", replica_id, exc)
            raise RebootFailed(f"replica {replica_id}: {exc}") from exc
        h.isolated = False
        h.load_counter = 0
        for callback in self.on_reboot:
            callback(replica_id)
        log.warning("replica %d rebooted (%d files restored)", replica_id, changed)
        return changed
