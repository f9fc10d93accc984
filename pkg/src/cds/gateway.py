"""HTTP front end and the exclusivity gate ("disconnected data access").

A request is held, verified by the controller and only then transmitted. The
gate guarantees two things:

* verify-and-transmit critical sections (and controller scans) run one at a
  time, in FIFO order, with at most ``max_queue`` waiters;
* no response bytes go out while a controller session is active, including
  error responses produced outside the critical section.
"""

from __future__ import annotations

import logging
import signal
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, HTTPServer, ThreadingHTTPServer
from pathlib import Path
from typing import Callable

from .analyzer import NONE_FIELD, ActivityLog, ActivityRecord, timestamp_parts
from .clock import VirtualClock, WallClock
from .controller import (
    REBOOT,
    Controller,
    ControllerConfig,
    ControllerTrace,
    NoReplicaAvailable,
    UnknownPage,
    VerdictTrace,
)
from .crypto import AesKey128
from .hashstore import GoldenStore, HashStore, InvalidPath, normalize_path
from .replicas import ReplicaSet

log = logging.getLogger(__name__)

DEFAULT_QUEUE = 64


class GateFull(RuntimeError):
    pass


@dataclass
class GateEvent:
    seq: int
    kind: str  # "ctl-begin" | "ctl-end" | "tx-begin" | "tx-end" | "enter" | "leave"
    label: str = ""


def find_overlaps(events: list[GateEvent]) -> list[int]:
    """Sequence numbers of events where a controller session and a transmission overlap."""
    ctl = tx = 0
    bad = []
    for ev in sorted(events, key=lambda e: e.seq):
        if ev.kind == "ctl-begin":
            ctl += 1
        elif ev.kind == "ctl-end":
            ctl -= 1
        elif ev.kind == "tx-begin":
            tx += 1
        elif ev.kind == "tx-end":
            tx -= 1
        if ctl and tx:
            bad.append(ev.seq)
    return bad


class Gate:
    def __init__(self, max_queue: int = DEFAULT_QUEUE, *, record: bool = False):
        self.max_queue = max_queue
        self._cond = threading.Condition()
        self._next_ticket = 0
        self._serving = 0
        self._controller_active = False
        self._transmitting = 0
        self._seq = 0
        self.events: list[GateEvent] | None = [] if record else None

    def _note(self, kind: str, label: str = "") -> None:
        self._seq += 1
        if self.events is not None:
            self.events.append(GateEvent(self._seq, kind, label))

    @property
    def waiting(self) -> int:
        with self._cond:
            return self._next_ticket - self._serving

    def enter(self, label: str = "", *, force: bool = False) -> int:
        """Take a FIFO ticket and block until it is served."""
        with self._cond:
            queued = self._next_ticket - self._serving - 1
            if not force and queued >= self.max_queue:
                raise GateFull(f"{queued} requests already waiting")
            ticket = self._next_ticket
            self._next_ticket += 1
            while self._serving != ticket:
                self._cond.wait()
            self._note("enter", label)
            return ticket

    def leave(self, label: str = "") -> None:
        with self._cond:
            self._note("leave", label)
            self._serving += 1
            self._cond.notify_all()

    @contextmanager
    def controller_session(self, label: str = ""):
        with self._cond:
            while self._transmitting:
                self._cond.wait()
            self._controller_active = True
            self._note("ctl-begin", label)
        try:
            yield
        finally:
            with self._cond:
                self._note("ctl-end", label)
                self._controller_active = False
                self._cond.notify_all()

    @contextmanager
    def transmitting(self, label: str = ""):
        with self._cond:
            while self._controller_active:
                self._cond.wait()
            self._transmitting += 1
            self._note("tx-begin", label)
        try:
            yield
        finally:
            with self._cond:
                self._note("tx-end", label)
                self._transmitting -= 1
                self._cond.notify_all()


@dataclass
class HttpExchange:
    client_address: str
    method: str
    target: str
    received_at: float
    status: int
    response_length: int
    session_duration: float
    content_type: str = ""
    verdict: VerdictTrace | None = None
    body: bytes = field(default=b"", repr=False)


def build_response(status: int, body: bytes, content_type: str, extra: dict[str, str] | None = None) -> bytes:
    phrase = HTTPStatus(status).phrase
    headers = [f"HTTP/1.1 {status} {phrase}", f"Content-Type: {content_type}", f"Content-Length: {len(body)}"]
    for k, v in (extra or {}).items():
        headers.append(f"{k}: {v}")
    headers.append("Connection: close")
    return ("\r\n".join(headers) + "\r\n\r\n").encode("latin-1") + body


def _error_body(status: int) -> bytes:
    return f"{status} {HTTPStatus(status).phrase}\n".encode("ascii")


class Gateway:
    """Transport-independent request handling: the HTTP server and the harness both call :meth:`handle`."""

    def __init__(
        self,
        controller: Controller,
        clock,
        activity: ActivityLog | None = None,
        gate: Gate | None = None,
        *,
        before_request: Callable[[], None] | None = None,
    ):
        self.controller = controller
        self.clock = clock
        self.activity = activity
        self.gate = gate or Gate()
        self.before_request = before_request
        self.exchanges_served = 0

    def maybe_scan(self) -> str | None:
        """Run a change-and-response scan if one is due. Returns the trigger reason."""
        if self.controller.crp_due() is None:
            return None
        self.gate.enter("crp", force=True)
        try:
            reason = self.controller.crp_due()
            if reason is not None:
                with self.gate.controller_session("crp"):
                    self.controller.run_crp(reason)
            return reason
        finally:
            self.gate.leave("crp")

    def handle(self, method: str, target: str, client_address: str, send: Callable[[bytes], None]) -> HttpExchange:
        if self.before_request is not None:
            self.before_request()
        received = self.clock.now()
        started = self.clock.perf()
        verdict = None
        body = b""
        content_type = "text/plain; charset=ascii"
        extra: dict[str, str] = {}
        label = f"{method} {target}"
        sent = False

        if method != "GET":
            status = 405
            extra["Allow"] = "GET"
        else:
            try:
                page = normalize_path(target)
                if page == "/":
                    page = "/index.html"
            except InvalidPath:
                status, page = 404, None
            if page is not None:
                try:
                    self.gate.enter(label)
                except GateFull:
                    status = 503
                else:
                    try:
                        try:
                            with self.gate.controller_session(label):
                                body, content_type, verdict = self.controller.run_agreement(page)
                            status = 200
                            served = verdict.served_by
                            extra["X-CDS-Replica"] = REBOOT if served == REBOOT else str(served)
                        except UnknownPage:
                            status = 404
                        except NoReplicaAvailable:
                            status = 503
                        except Exception:
                            log.exception("verification of %s failed", page)
                            status = 500
                        if status != 200:
                            body, content_type, extra = b"", "text/plain; charset=ascii", {}
                        self._transmit(status, body, content_type, extra, send, label)
                        sent = True
                    finally:
                        self.gate.leave(label)

        if not sent:
            self._transmit(status, b"", content_type, extra, send, label)
        if status != 200:
            body = _error_body(status)
        exchange = HttpExchange(
            client_address, method, target, received, status, len(body), self.clock.perf() - started,
            content_type if status == 200 else "text/plain; charset=ascii", verdict, body,
        )
        self.exchanges_served += 1
        self._log(exchange, parsed=True)
        return exchange

    def reject(self, status: int, client_address: str, target: str, send: Callable[[bytes], None]) -> HttpExchange:
        """Answer a request that could not be parsed."""
        received = self.clock.now()
        started = self.clock.perf()
        self._transmit(status, b"", "text/plain; charset=ascii", {}, send, "reject")
        exchange = HttpExchange(
            client_address, "", target, received, status, len(_error_body(status)),
            self.clock.perf() - started, "text/plain; charset=ascii",
        )
        self._log(exchange, parsed=False)
        return exchange

    def _transmit(self, status, body, content_type, extra, send, label) -> None:
        if status != 200:
            body = _error_body(status)
        raw = build_response(status, body, content_type, extra)
        with self.gate.transmitting(label):
            try:
                send(raw)
            except OSError as exc:
                log.info("client went away during %s: %s", label, exc)

    def _log(self, ex: HttpExchange, *, parsed: bool) -> None:
        if self.activity is None:
            return
        d, t = timestamp_parts(ex.received_at)
        v = ex.verdict
        if v is not None:
            attacks, reliability = v.attacks_in_window, v.reliability
            infected = tuple(sorted(v.mismatched))
            record = ActivityRecord(
                d, t, ex.content_type, v.page_path, ex.session_duration * 1000, parsed, ex.status,
                bool(infected), infected, v.page_path if infected else None, attacks, reliability,
                v.flags, v.failure_percent, v.action,
            )
        else:
            attacks, reliability = self.controller.window_stats()
            record = ActivityRecord(
                d, t, ex.content_type, ex.target, ex.session_duration * 1000, parsed, ex.status,
                False, (), None, attacks, reliability, (), 0, NONE_FIELD,
            )
        self.activity.append_activity(record)


# --------------------------------------------------------------------------
# runtime assembly and the HTTP server


def build_gateway(
    store_path,
    golden_dir,
    data_dir,
    key: AesKey128,
    config: ControllerConfig,
    *,
    clock=None,
    activity: ActivityLog | None = None,
    trace: ControllerTrace | None = None,
    record_gate: bool = False,
    verify: bool = True,
) -> Gateway:
    clock = clock or WallClock()
    store = HashStore.open(store_path, key)
    golden = GoldenStore(golden_dir)
    replicas = ReplicaSet(data_dir, golden, config.replicas)
    for rid in replicas.ids():
        if not replicas.handle(rid).content_root.exists():
            replicas.reboot_replica(rid)
    controller = Controller(config, store, replicas, key, clock, activity, verify=verify, trace=trace)
    return Gateway(controller, clock, activity, Gate(record=record_gate))


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "cds/0.1"

    def handle_one_request(self) -> None:
        gateway: Gateway = self.server.gateway
        self.close_connection = True
        try:
            self.raw_requestline = self.rfile.readline(65537)
        except OSError:
            return
        if not self.raw_requestline:
            return
        if len(self.raw_requestline) > 65536:
            gateway.reject(414, self.client_address[0], "", self._send)
            return
        if not self.parse_request():
            return
        gateway.handle(self.command, self.path, self.client_address[0], self._send)

    def send_error(self, code, message=None, explain=None) -> None:
        # parse failures end up here; route them through the gate as well
        self.close_connection = True
        self.server.gateway.reject(int(code), self.client_address[0], getattr(self, "path", ""), self._send)

    def _send(self, data: bytes) -> None:
        self.wfile.write(data)
        self.wfile.flush()

    def log_message(self, fmt, *args) -> None:
        log.debug("%s - " + fmt, self.client_address[0], *args)


class CDSServer(ThreadingHTTPServer):
    daemon_threads = True
    request_queue_size = 128

    def __init__(self, address, gateway: Gateway):
        self.gateway = gateway
        super().__init__(address, _Handler)


class DeterministicCDSServer(HTTPServer):
    """Single-threaded variant for reproducible runs."""

    def __init__(self, address, gateway: Gateway):
        self.gateway = gateway
        super().__init__(address, _Handler)


def parse_listen(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return host or "127.0.0.1", int(port)


def load_clock_script(path) -> list[int]:
    """One virtual timestamp (ms from start) per line; each request consumes the next one."""
    times = []
    for line in Path(path).read_text("utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            times.append(int(line))
    return times


def banner(config: ControllerConfig, listen: str, deterministic: bool) -> str:
    lines = [f"cds serving on {listen} ({'deterministic' if deterministic else 'threaded'})"]
    lines += [f"  {line}" for line in config.to_text().splitlines()]
    return "\n".join(lines)


def make_server(
    listen: str,
    config: ControllerConfig,
    store_path,
    golden_dir,
    data_dir,
    key: AesKey128,
    *,
    log_path=None,
    deterministic: bool = False,
    clock_script: list[int] | None = None,
) -> tuple[HTTPServer, Gateway]:
    data_dir = Path(data_dir)
    activity = ActivityLog(log_path or data_dir / "activity.log")
    clock = VirtualClock() if deterministic else WallClock()
    gateway = build_gateway(store_path, golden_dir, data_dir, key, config, clock=clock, activity=activity)
    if not deterministic:
        return CDSServer(parse_listen(listen), gateway), gateway

    start_ms = clock.ms
    script = iter(clock_script or [])

    def advance() -> None:
        nxt = next(script, None)
        if nxt is not None:
            target = start_ms + nxt
            # run every scan that falls due before the scripted time
            while (due := int(round(gateway.controller.next_crp_due() * 1000))) <= target:
                clock.set_ms(max(clock.ms, due))
                gateway.maybe_scan()
            clock.set_ms(target)
        gateway.maybe_scan()

    gateway.before_request = advance
    return DeterministicCDSServer(parse_listen(listen), gateway), gateway


def run_server(server: HTTPServer, gateway: Gateway, *, deterministic: bool = False, stop: threading.Event | None = None) -> None:
    """Serve until ``stop`` is set, SIGTERM arrives or the process is interrupted."""
    stop = stop or threading.Event()
    if not deterministic:
        def scheduler() -> None:
            while not stop.wait(0.1):
                try:
                    gateway.maybe_scan()
                except Exception:
                    log.exception("scheduled scan failed")

        threading.Thread(target=scheduler, name="crp-scheduler", daemon=True).start()

    def watch_stop() -> None:
        stop.wait()
        server.shutdown()

    threading.Thread(target=watch_stop, name="stop-watch", daemon=True).start()
    if threading.current_thread() is threading.main_thread():
        signal.signal(signal.SIGTERM, lambda *_: stop.set())
    try:
        server.serve_forever(poll_interval=0.05)
    except KeyboardInterrupt:
        pass
    finally:
        stop.set()
        server.server_close()


def serve(listen: str, config: ControllerConfig, store_path, golden_dir, data_dir, key: AesKey128, **kwargs) -> None:
    deterministic = kwargs.get("deterministic", False)
    server, gateway = make_server(listen, config, store_path, golden_dir, data_dir, key, **kwargs)
    print(banner(config, "%s:%d" % server.server_address[:2], deterministic), flush=True)
    run_server(server, gateway, deterministic=deterministic)
