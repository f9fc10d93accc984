import pytest

from cds.hashstore import GoldenStore, provision
from cds.replicas import PageMissing, RebootFailed, ReplicaSet, UnknownReplica

from conftest import KEY, PAGES, write_golden


def make_set(tmp_path, n=3):
    g = tmp_path / "golden"
    g.mkdir()
    write_golden(g, PAGES)
    provision(g, n, KEY, tmp_path / "s.cdsh", tmp_path / "data")
    return ReplicaSet(tmp_path / "data", GoldenStore(g), n)


def test_read_page(tmp_path):
    rs = make_set(tmp_path)
    assert rs.ids() == [1, 2, 3]
    assert rs.read_page(2, "/index.html") == b"hello"
    with pytest.raises(PageMissing):
        rs.read_page(2, "/nope.html")
    with pytest.raises(UnknownReplica):
        rs.read_page(4, "/index.html")


def test_read_is_not_cached(tmp_path):
    rs = make_set(tmp_path)
    assert rs.read_page(1, "/index.html") == b"hello"
    rs.page_file(1, "/index.html").write_bytes(b"changed")
    assert rs.read_page(1, "/index.html") == b"changed"


def test_heal_page(tmp_path):
    rs = make_set(tmp_path)
    assert rs.heal_page(1, "/index.html") is False
    rs.page_file(1, "/index.html").write_bytes(b"defaced")
    assert rs.heal_page(1, "/index.html") is True
    assert rs.read_page(1, "/index.html") == b"hello"
    rs.page_file(3, "/css/site.css").unlink()
    assert rs.heal_page(3, "/css/site.css") is True
    assert rs.read_page(3, "/css/site.css") == PAGES["/css/site.css"]
    # other replicas untouched
    assert rs.read_page(2, "/index.html") == b"hello"


def test_reboot_restores_everything(tmp_path):
    rs = make_set(tmp_path)
    rs.page_file(2, "/index.html").write_bytes(b"x")
    rs.page_file(2, "/about.html").unlink()
    (rs.handle(2).content_root / "shell.php").write_text("planted")
    rs.handle(2).isolated = True
    rs.handle(2).load_counter = 7
    seen = []
    rs.on_reboot.append(seen.append)
    assert rs.reboot_replica(2) == 3
    for page, data in PAGES.items():
        assert rs.read_page(2, page) == data
    assert not (rs.handle(2).content_root / "shell.php").exists()
    h = rs.handle(2)
    assert (h.isolated, h.load_counter) == (False, 0)
    assert seen == [2]
    assert rs.reboot_replica(2) == 0


def test_reboot_failure_leaves_replica_isolated(tmp_path):
    rs = make_set(tmp_path)
    (tmp_path / "golden" / "index.html").unlink()
    with pytest.raises(RebootFailed):
        rs.reboot_replica(1)
    assert rs.handle(1).isolated


@pytest.mark.parametrize("n", [1, 5])
def test_replica_counts(tmp_path, n):
    rs = make_set(tmp_path, n)
    assert len(rs) == n
    assert all(rs.read_page(r, "/index.html") == b"hello" for r in rs.ids())


def test_zero_replicas_rejected(tmp_path):
    with pytest.raises(ValueError):
        ReplicaSet(tmp_path, GoldenStore(tmp_path), 0)
