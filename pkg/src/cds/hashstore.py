"""Encrypted hash-code store and the golden content it was built from.

On-disk store format (little-endian)::

    "CDSH" | version u16 | replica_count u16 | entry_count u32 | key_fingerprint[16]
    entry*: path_len u16 | path utf-8 | replica_count x cipher_digest[16]

Entries are written sorted by path, so provisioning the same content twice
yields identical files.
"""

from __future__ import annotations

import logging
import mimetypes
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from urllib.parse import unquote

from .crypto import AesKey128, Digest128, aes128_decrypt_block, aes128_encrypt_block, md5_digest

log = logging.getLogger(__name__)

MAGIC = b"CDSH"
FORMAT_VERSION = 1
TYPES_FILE = ".cds-types"
_HEADER = struct.Struct("<4sHHI16s")


class StoreError(Exception):
    """Base class for hash-store failures."""


class RecordMissing(StoreError, KeyError):
    """No record for the requested page (or page/replica pair)."""


class KeyMismatch(StoreError):
    """The supplied AES key is not the one the store was provisioned with."""


class ProvisionError(StoreError):
    pass


class InvalidPath(ValueError):
    pass


def normalize_path(raw: str) -> str:
    """Map a request target or relative file path to a store key.

    Percent-decodes once, drops any query string, collapses duplicate slashes
    and rejects ``..`` segments.
    """
    path = raw.split("?", 1)[0].split("#", 1)[0]
    path = unquote(path).replace("\\", "/")
    if "\x00" in path:
        raise InvalidPath(raw)
    parts = [p for p in path.split("/") if p not in ("", ".")]
    if any(p == ".." for p in parts):
        raise InvalidPath(raw)
    return "/" + "/".join(parts)


def key_fingerprint(key: AesKey128) -> Digest128:
    return md5_digest(key.key)


def load_key_file(path: str | os.PathLike) -> AesKey128:
    """Read a store key: 16 raw octets or 32 hex characters."""
    data = Path(path).read_bytes()
    if len(data) == 16:
        return AesKey128(data)
    text = data.decode("ascii", errors="replace").strip()
    try:
        return AesKey128.fromhex(text)
    except ValueError as exc:
        raise StoreError(f"{path}: not a 128-bit key ({exc})") from None


@dataclass(frozen=True)
class PageRecord:
    page_path: str
    replica_id: int
    cipher_digest: Digest128


@dataclass(frozen=True)
class GoldenEntry:
    page_path: str
    content_bytes: bytes
    content_type: str


@dataclass(frozen=True)
class StoreManifest:
    version: int
    replica_count: int
    entry_count: int
    store_key_fingerprint: Digest128


class GoldenStore:
    """Pristine page copies, keyed by normalized path, plus their media types."""

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self._types: dict[str, str] = {}
        types_file = self.root / TYPES_FILE
        if types_file.exists():
            for line in types_file.read_text("utf-8").splitlines():
                if line.strip():
                    path, ctype = line.split("\t", 1)
                    self._types[path] = ctype

    def paths(self) -> list[str]:
        return sorted(self._types)

    def file_for(self, page_path: str) -> Path:
        return self.root.joinpath(*page_path.strip("/").split("/"))

    def __contains__(self, page_path: str) -> bool:
        return page_path in self._types

    def golden_bytes(self, page_path: str) -> tuple[bytes, str]:
        if page_path not in self._types:
            raise RecordMissing(page_path)
        try:
            data = self.file_for(page_path).read_bytes()
        except OSError as exc:
            raise RecordMissing(f"{page_path}: golden copy unreadable ({exc})") from exc
        return data, self._types[page_path]

    def entry(self, page_path: str) -> GoldenEntry:
        data, ctype = self.golden_bytes(page_path)
        return GoldenEntry(page_path, data, ctype)

    def content_type(self, page_path: str) -> str:
        if page_path not in self._types:
            raise RecordMissing(page_path)
        return self._types[page_path]


class HashStore:
    """In-memory view of a hash-store file. Read-only after load."""

    def __init__(self, manifest: StoreManifest, records: dict[str, tuple[Digest128, ...]]):
        self.manifest = manifest
        self._records = records
        self._checked_key: bytes | None = None

    @property
    def replica_count(self) -> int:
        return self.manifest.replica_count

    def paths(self) -> list[str]:
        return sorted(self._records)

    def __contains__(self, page_path: str) -> bool:
        return page_path in self._records

    def records(self):
        for path in self.paths():
            for rid, cd in enumerate(self._records[path], start=1):
                yield PageRecord(path, rid, cd)

    def check_key(self, key: AesKey128) -> None:
        if key.key == self._checked_key:
            return
        if key_fingerprint(key) != self.manifest.store_key_fingerprint:
            raise KeyMismatch("store key does not match the key fingerprint in the store")
        self._checked_key = key.key

    def lookup_expected(self, page_path: str, replica_id: int, key: AesKey128) -> Digest128:
        """Decrypt and return the expected MD5 for one replica's copy of a page."""
        row = self._records.get(page_path)
        if row is None or not 1 <= replica_id <= len(row):
            raise RecordMissing(f"{page_path} (replica {replica_id})")
        cipher = row[replica_id - 1]
        self.check_key(key)
        return aes128_decrypt_block(cipher, key)

    # -- persistence -----------------------------------------------------

    def to_bytes(self) -> bytes:
        m = self.manifest
        out = [_HEADER.pack(MAGIC, m.version, m.replica_count, m.entry_count, bytes(m.store_key_fingerprint))]
        for path in self.paths():
            raw = path.encode("utf-8")
            out.append(struct.pack("<H", len(raw)))
            out.append(raw)
            out.extend(bytes(d) for d in self._records[path])
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "HashStore":
        if len(data) < _HEADER.size:
            raise StoreError("hash store truncated (header)")
        magic, version, n, count, fp = _HEADER.unpack_from(data, 0)
        if magic != MAGIC:
            raise StoreError(f"bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise StoreError(f"unsupported store version {version}")
        pos = _HEADER.size
        records: dict[str, tuple[Digest128, ...]] = {}
        for _ in range(count):
            try:
                (plen,) = struct.unpack_from("<H", data, pos)
            except struct.error:
                raise StoreError("hash store truncated (entry)") from None
            pos += 2
            path = data[pos : pos + plen].decode("utf-8")
            pos += plen
            digests = []
            for _r in range(n):
                chunk = data[pos : pos + 16]
                if len(chunk) != 16:
                    raise StoreError(f"hash store truncated at {path}")
                digests.append(Digest128(chunk))
                pos += 16
            if path in records:
                raise StoreError(f"duplicate entry {path}")
            records[path] = tuple(digests)
        if pos != len(data):
            raise StoreError(f"{len(data) - pos} trailing octets after last entry")
        return cls(StoreManifest(version, n, count, Digest128(fp)), records)

    def save(self, path: str | os.PathLike) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        os.replace(tmp, path)

    @classmethod
    def open(cls, path: str | os.PathLike, key: AesKey128 | None = None) -> "HashStore":
        store = cls.from_bytes(Path(path).read_bytes())
        if key is not None:
            store.check_key(key)
        return store


def guess_content_type(path: str) -> str:
    ctype, _ = mimetypes.guess_type(path)
    return ctype or "application/octet-stream"


def scan_golden(golden_root: str | os.PathLike) -> dict[str, Path]:
    """Map normalized page paths to source files under ``golden_root``."""
    root = Path(golden_root)
    if not root.is_dir():
        raise ProvisionError(f"{root}: not a directory")
    found: dict[str, Path] = {}
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            full = Path(dirpath, name)
            rel = full.relative_to(root).as_posix()
            if rel == TYPES_FILE or name.endswith(".tmp"):
                continue
            try:
                page = normalize_path(rel)
            except InvalidPath:
                raise ProvisionError(f"{full}: cannot be mapped to a page path") from None
            if page in found:
                raise ProvisionError(f"{full}: duplicate page path {page} (also {found[page]})")
            found[page] = full
    return found


def provision(
    golden_root: str | os.PathLike,
    replica_count: int,
    store_key: AesKey128,
    store_path: str | os.PathLike,
    data_dir: str | os.PathLike | None = None,
) -> StoreManifest:
    """Build the hash store from ``golden_root`` and materialize replica directories.

    Writes ``store_path``, the golden type manifest, and (when ``data_dir`` is
    given) ``data_dir/replica-<id>/`` copies of every page.
    """
    if replica_count < 1:
        raise ProvisionError("replica_count must be >= 1")
    pages = scan_golden(golden_root)
    records: dict[str, tuple[Digest128, ...]] = {}
    types: dict[str, str] = {}
    contents: dict[str, bytes] = {}
    for page, src in pages.items():
        try:
            data = src.read_bytes()
        except OSError as exc:
            raise ProvisionError(f"{src}: unreadable ({exc.strerror})") from exc
        cipher = aes128_encrypt_block(md5_digest(data), store_key)
        records[page] = (cipher,) * replica_count
        types[page] = guess_content_type(page)
        contents[page] = data

    manifest = StoreManifest(FORMAT_VERSION, replica_count, len(records), key_fingerprint(store_key))
    HashStore(manifest, records).save(store_path)
    types_text = "".join(f"{p}\t{types[p]}\n" for p in sorted(types))
    (Path(golden_root) / TYPES_FILE).write_text(types_text, "utf-8")

    if data_dir is not None:
        from .replicas import materialize

        for rid in range(1, replica_count + 1):
            materialize(Path(data_dir) / f"replica-{rid}", contents)
    log.info("provisioned %d pages x %d replicas into %s", len(records), replica_count, store_path)
    return manifest
