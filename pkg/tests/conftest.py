from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import pytest

from cds.analyzer import ActivityLog
from cds.clock import VirtualClock
from cds.controller import ControllerConfig, ControllerTrace
from cds.crypto import AesKey128
from cds.gateway import Gateway, build_gateway
from cds.hashstore import provision

KEY = AesKey128(bytes.fromhex("000102030405060708090a0b0c0d0e0f"))


@dataclass
class Site:
    root: Path
    golden: Path
    store: Path
    data: Path
    gateway: Gateway
    clock: VirtualClock
    trace: ControllerTrace
    activity: ActivityLog

    @property
    def controller(self):
        return self.gateway.controller

    @property
    def replicas(self):
        return self.gateway.controller.replicas

    def page_file(self, rid: int, page: str) -> Path:
        return self.replicas.page_file(rid, page)

    def corrupt(self, rid: int, page: str, data: bytes = b"defaced") -> None:
        self.page_file(rid, page).write_bytes(data)

    def get(self, target: str, method: str = "GET"):
        sent: list[bytes] = []
        ex = self.gateway.handle(method, target, "127.0.0.1", sent.append)
        return ex, b"".join(sent)


def write_golden(golden: Path, pages: dict[str, bytes]) -> None:
    for path, data in pages.items():
        f = golden.joinpath(*path.strip("/").split("/"))
        f.parent.mkdir(parents=True, exist_ok=True)
        f.write_bytes(data)


def make_site(tmp_path: Path, pages: dict[str, bytes], replicas: int = 3, config: ControllerConfig | None = None) -> Site:
    golden = tmp_path / "golden"
    golden.mkdir(exist_ok=True)
    write_golden(golden, pages)
    config = config or ControllerConfig(replicas=replicas)
    provision(golden, replicas, KEY, tmp_path / "store.cdsh", tmp_path / "data")
    clock = VirtualClock()
    trace = ControllerTrace()
    activity = ActivityLog(tmp_path / "logs" / "activity.log", fsync=False)
    gw = build_gateway(
        tmp_path / "store.cdsh", golden, tmp_path / "data", KEY, config,
        clock=clock, activity=activity, trace=trace, record_gate=True,
    )
    return Site(tmp_path, golden, tmp_path / "store.cdsh", tmp_path / "data", gw, clock, trace, activity)


PAGES = {
    "/index.html": b"hello",
    "/about.html": b"<html>about us</html>",
    "/css/site.css": b"body { color: black }",
}


@pytest.fixture
def site(tmp_path) -> Site:
    return make_site(tmp_path, PAGES)


def pytest_terminal_summary(terminalreporter):
    from criteria import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
