import hashlib
import struct

import pytest

from cds.crypto import AesKey128, aes128_encrypt_block
from cds.hashstore import (
    GoldenStore,
    HashStore,
    InvalidPath,
    KeyMismatch,
    ProvisionError,
    RecordMissing,
    StoreError,
    key_fingerprint,
    load_key_file,
    normalize_path,
    provision,
)

from conftest import KEY, PAGES, write_golden

HARNESS_KEY = AesKey128.fromhex("2b7e151628aed2a6abf7158809cf4f3c")


@pytest.fixture
def golden(tmp_path):
    g = tmp_path / "golden"
    g.mkdir()
    write_golden(g, PAGES)
    return g


def test_provision_round_trip(golden, tmp_path):
    manifest = provision(golden, 3, KEY, tmp_path / "s.cdsh", tmp_path / "data")
    assert manifest.replica_count == 3
    assert manifest.entry_count == len(PAGES)
    store = HashStore.open(tmp_path / "s.cdsh", KEY)
    assert store.paths() == sorted(PAGES)
    for page, data in PAGES.items():
        for rid in (1, 2, 3):
            assert store.lookup_expected(page, rid, KEY) == hashlib.md5(data).digest()
            assert (tmp_path / "data" / f"replica-{rid}").joinpath(*page.strip("/").split("/")).read_bytes() == data


def test_hello_record_value(tmp_path):
    g = tmp_path / "g"
    g.mkdir()
    (g / "index.html").write_bytes(b"hello")
    provision(g, 1, HARNESS_KEY, tmp_path / "s.cdsh")
    store = HashStore.open(tmp_path / "s.cdsh")
    (rec,) = list(store.records())
    assert rec.page_path == "/index.html"
    # md5("hello") = 5d41402a..., encrypted with an independent AES implementation
    assert rec.cipher_digest.hex() == "155d137761d1c727f7fb5170f89e2fbf"
    assert store.lookup_expected("/index.html", 1, HARNESS_KEY).hex() == "5d41402abc4b2a76b9719d911017c592"


def test_reload_is_bit_identical(golden, tmp_path):
    provision(golden, 2, KEY, tmp_path / "a.cdsh")
    raw = (tmp_path / "a.cdsh").read_bytes()
    assert HashStore.from_bytes(raw).to_bytes() == raw
    provision(golden, 2, KEY, tmp_path / "b.cdsh")
    assert (tmp_path / "b.cdsh").read_bytes() == raw


def test_binary_layout(golden, tmp_path):
    provision(golden, 2, KEY, tmp_path / "s.cdsh")
    raw = (tmp_path / "s.cdsh").read_bytes()
    magic, version, n, count, fp = struct.unpack_from("<4sHHI16s", raw, 0)
    assert (magic, version, n, count) == (b"CDSH", 1, 2, 3)
    assert fp == hashlib.md5(KEY.key).digest()
    pos = 28
    (plen,) = struct.unpack_from("<H", raw, pos)
    assert raw[pos + 2 : pos + 2 + plen] == b"/about.html"
    want = aes128_encrypt_block(hashlib.md5(PAGES["/about.html"]).digest(), KEY)
    assert raw[pos + 2 + plen : pos + 2 + plen + 16] == want
    assert len(raw) == 28 + sum(2 + len(p) + 32 for p in PAGES)


def test_tamper_changes_decrypted_digest(golden, tmp_path):
    provision(golden, 1, KEY, tmp_path / "s.cdsh")
    raw = bytearray((tmp_path / "s.cdsh").read_bytes())
    raw[-1] ^= 0x01
    store = HashStore.from_bytes(bytes(raw))
    last = store.paths()[-1]
    assert store.lookup_expected(last, 1, KEY) != hashlib.md5(PAGES[last]).digest()


def test_wrong_key_rejected(golden, tmp_path):
    provision(golden, 1, KEY, tmp_path / "s.cdsh")
    wrong = AesKey128.fromhex("000102030405060708090a0b0c0d0e0e")
    with pytest.raises(KeyMismatch):
        HashStore.open(tmp_path / "s.cdsh", wrong)
    store = HashStore.open(tmp_path / "s.cdsh")
    with pytest.raises(KeyMismatch):
        store.lookup_expected("/index.html", 1, wrong)


@pytest.mark.parametrize("mutate", [
    lambda b: b[:10],
    lambda b: b"XXXX" + b[4:],
    lambda b: b[:4] + b"\x09\x00" + b[6:],
    lambda b: b + b"\x00",
    lambda b: b[:-3],
])
def test_malformed_store_rejected(golden, tmp_path, mutate):
    provision(golden, 2, KEY, tmp_path / "s.cdsh")
    with pytest.raises(StoreError):
        HashStore.from_bytes(mutate((tmp_path / "s.cdsh").read_bytes()))


def test_missing_records(golden, tmp_path):
    provision(golden, 2, KEY, tmp_path / "s.cdsh")
    store = HashStore.open(tmp_path / "s.cdsh", KEY)
    for page, rid in [("/nope.html", 1), ("/index.html", 0), ("/index.html", 3), ("/index.html", -1)]:
        with pytest.raises(RecordMissing):
            store.lookup_expected(page, rid, KEY)
    with pytest.raises(KeyError):
        store.lookup_expected("/nope.html", 1, KEY)


def test_empty_golden(tmp_path):
    (tmp_path / "g").mkdir()
    m = provision(tmp_path / "g", 3, KEY, tmp_path / "s.cdsh")
    assert m.entry_count == 0
    assert len((tmp_path / "s.cdsh").read_bytes()) == 28
    assert HashStore.open(tmp_path / "s.cdsh", KEY).paths() == []


def test_provision_errors(tmp_path, golden):
    with pytest.raises(ProvisionError):
        provision(tmp_path / "absent", 1, KEY, tmp_path / "s.cdsh")
    with pytest.raises(ProvisionError):
        provision(golden, 0, KEY, tmp_path / "s.cdsh")


def test_golden_store_types(golden, tmp_path):
    provision(golden, 1, KEY, tmp_path / "s.cdsh")
    gs = GoldenStore(golden)
    assert gs.paths() == sorted(PAGES)
    assert gs.content_type("/index.html") == "text/html"
    assert gs.content_type("/css/site.css") == "text/css"
    assert gs.golden_bytes("/index.html") == (b"hello", "text/html")
    with pytest.raises(RecordMissing):
        gs.golden_bytes("/missing")


def test_reprovision_removes_planted_files(golden, tmp_path):
    provision(golden, 1, KEY, tmp_path / "s.cdsh", tmp_path / "data")
    planted = tmp_path / "data" / "replica-1" / "evil.php"
    planted.write_text("<?php ?>")
    provision(golden, 1, KEY, tmp_path / "s.cdsh", tmp_path / "data")
    assert not planted.exists()


@pytest.mark.parametrize("raw,expected", [
    ("/index.html", "/index.html"),
    ("/index.html?x=1#frag", "/index.html"),
    ("//a///b.html", "/a/b.html"),
    ("/a%20b.html", "/a b.html"),
    ("css\\site.css", "/css/site.css"),
    ("/./a.html", "/a.html"),
    ("", "/"),
])
def test_normalize_path(raw, expected):
    assert normalize_path(raw) == expected


@pytest.mark.parametrize("raw", ["/../etc/passwd", "/a/%2e%2e/b", "/a\x00b", "/a/..\\b"])
def test_normalize_path_rejects(raw):
    with pytest.raises(InvalidPath):
        normalize_path(raw)


def test_load_key_file(tmp_path):
    (tmp_path / "raw").write_bytes(KEY.key)
    (tmp_path / "hex").write_text(KEY.key.hex() + "\n")
    (tmp_path / "bad").write_text("nothex")
    assert load_key_file(tmp_path / "raw") == KEY
    assert load_key_file(tmp_path / "hex") == KEY
    with pytest.raises(StoreError):
        load_key_file(tmp_path / "bad")
    assert key_fingerprint(KEY) == hashlib.md5(KEY.key).digest()
