"""Deterministic fault-injection harness and the latency benchmark.

Scenario files are line oriented::

    # comment
    seed 42                       # default seed (the CLI may override it)
    replicas 3
    config window=10              # any controller config key
    page /index.html 2048         # 2048 seeded random octets
    page /about.html text Hello   # literal text
    0     request /index.html [METHOD]
    100   corrupt 1 /index.html flip|truncate|append
    150   delete 2 /index.html
    5000  idle
    expect heal-count 1

Event times are virtual milliseconds from the start of the run. Scans that
fall due between two events run at their exact due time. Requests may name
any target (unknown pages exercise the 404 path); ``corrupt`` and ``delete``
must name a known page and replica.
"""

from __future__ import annotations

import io
import logging
import random
import shlex
import shutil
import statistics
import tempfile
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .analyzer import ActivityLog
from .clock import VirtualClock, WallClock
from .controller import REBOOT, ControllerConfig, ControllerTrace
from .crypto import AesKey128, md5_digest
from .gateway import Gateway, HttpExchange, build_gateway, find_overlaps
from .hashstore import normalize_path, provision

log = logging.getLogger(__name__)

HARNESS_KEY = AesKey128(bytes.fromhex("2b7e151628aed2a6abf7158809cf4f3c"))
MUTATIONS = ("flip", "truncate", "append")
EVENT_KINDS = ("request", "corrupt", "delete", "idle")


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class Event:
    at: int
    kind: str
    replica_id: int | None = None
    page_path: str | None = None
    payload: str | None = None  # mutation for corrupt, method for request


@dataclass(frozen=True)
class Expect:
    name: str
    args: tuple[str, ...] = ()

    def __str__(self) -> str:
        return " ".join((self.name, *self.args))


@dataclass
class Scenario:
    seed: int = 0
    replicas: int = 3
    config: dict[str, str] = field(default_factory=dict)
    pages: list[tuple[str, str, str]] = field(default_factory=list)  # (path, "size"|"text", value)
    events: list[Event] = field(default_factory=list)
    expected: list[Expect] = field(default_factory=list)
    name: str = "scenario"

    @classmethod
    def parse(cls, text: str, name: str = "scenario") -> "Scenario":
        sc = cls(name=name)
        for lineno, raw in enumerate(text.splitlines(), start=1):
            try:
                toks = shlex.split(raw, comments=True)
            except ValueError as exc:
                raise ScenarioError(f"{name}:{lineno}: {exc}") from None
            if not toks:
                continue
            head, rest = toks[0], toks[1:]
            try:
                if head == "seed":
                    sc.seed = int(rest[0])
                elif head == "replicas":
                    sc.replicas = int(rest[0])
                elif head == "config":
                    for item in rest:
                        k, v = item.split("=", 1)
                        sc.config[k] = v
                elif head == "page":
                    path = normalize_path(rest[0])
                    if rest[1] == "text":
                        sc.pages.append((path, "text", " ".join(rest[2:])))
                    else:
                        sc.pages.append((path, "size", str(int(rest[1]))))
                elif head == "expect":
                    sc.expected.append(Expect(rest[0], tuple(rest[1:])))
                else:
                    sc.events.append(_parse_event(int(head), rest))
            except (IndexError, ValueError) as exc:
                raise ScenarioError(f"{name}:{lineno}: cannot parse {raw.strip()!r} ({exc})") from None
        sc.validate()
        return sc

    @classmethod
    def from_file(cls, path: str | Path) -> "Scenario":
        path = Path(path)
        return cls.parse(path.read_text("utf-8"), name=path.stem)

    def controller_config(self) -> ControllerConfig:
        text = "".join(f"{k}={v}\n" for k, v in self.config.items()) + f"replicas={self.replicas}\n"
        return ControllerConfig.from_text(text)

    def validate(self) -> None:
        known = {p for p, _, _ in self.pages}
        if len(known) != len(self.pages):
            raise ScenarioError(f"{self.name}: duplicate page declarations")
        if self.replicas < 1:
            raise ScenarioError(f"{self.name}: replicas must be >= 1")
        last = 0
        for ev in self.events:
            if ev.at < last:
                raise ScenarioError(f"{self.name}: events out of time order at {ev.at}")
            last = ev.at
            if ev.kind in ("corrupt", "delete"):
                if ev.page_path not in known:
                    raise ScenarioError(f"{self.name}: event at {ev.at} names unknown page {ev.page_path}")
                if not 1 <= ev.replica_id <= self.replicas:
                    raise ScenarioError(f"{self.name}: event at {ev.at} names unknown replica {ev.replica_id}")
            if ev.kind == "corrupt" and ev.payload not in MUTATIONS:
                raise ScenarioError(f"{self.name}: unknown mutation {ev.payload!r}")


def _parse_event(at: int, toks: list[str]) -> Event:
    kind = toks[0]
    if kind == "request":
        return Event(at, kind, page_path=toks[1], payload=toks[2] if len(toks) > 2 else "GET")
    if kind == "corrupt":
        return Event(at, kind, int(toks[1]), normalize_path(toks[2]), toks[3] if len(toks) > 3 else "flip")
    if kind == "delete":
        return Event(at, kind, int(toks[1]), normalize_path(toks[2]))
    if kind == "idle":
        return Event(at, kind)
    raise ValueError(f"unknown event kind {kind!r}")


@dataclass
class AssertionResult:
    expect: Expect
    passed: bool
    expected: str
    observed: str

    def render(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        line = f"{mark}  {self.expect}"
        if not self.passed:
            line += f"\n      expected: {self.expected}\n      observed: {self.observed}"
        return line


@dataclass
class ScenarioResult:
    scenario: Scenario
    seed: int
    assertions: list[AssertionResult]
    exchanges: list[HttpExchange]
    trace: ControllerTrace
    gate_events: list
    activity_log: str
    alarm_log: str
    remaining_mismatches: int
    final_trust: dict[int, tuple[float, str]]
    crp_period_ms: int

    @property
    def passed(self) -> bool:
        return all(a.passed for a in self.assertions)

    def render(self) -> str:
        out = io.StringIO()
        out.write(f"scenario {self.scenario.name} seed {self.seed}: {'PASS' if self.passed else 'FAIL'}\n")
        for a in self.assertions:
            out.write(a.render() + "\n")
        out.write("-- exchanges\n")
        for i, ex in enumerate(self.exchanges, start=1):
            served = ex.verdict.served_by if ex.verdict else "-"
            out.write(f"{i}\t{ex.method}\t{ex.target}\t{ex.status}\t{served}\t{md5_digest(ex.body).hex()}\n")
        out.write("-- scans\n")
        for scan in self.trace.scans:
            out.write(f"{scan.reason}\t{scan.started_at!r}\t{scan.pages_checked}\t{scan.healed}\n")
        out.write("-- heals\n")
        for rid, page, source in self.trace.heals:
            out.write(f"{rid}\t{page}\t{source}\n")
        out.write("-- reboots\n")
        for rid, reason in self.trace.reboots:
            out.write(f"{rid}\t{reason}\n")
        out.write("-- trust\n")
        for rid, (level, state) in sorted(self.final_trust.items()):
            out.write(f"{rid}\t{level:g}\t{state}\n")
        out.write("-- activity\n" + self.activity_log)
        out.write("-- alarms\n" + self.alarm_log)
        return out.getvalue()


def mutate(data: bytes, how: str, rng: random.Random, golden_digest) -> bytes:
    """Corrupt ``data``; re-rolls until the result no longer hashes to the golden digest."""
    for _ in range(1000):
        if how == "flip" and data:
            pos = rng.randrange(len(data))
            out = data[:pos] + bytes([data[pos] ^ rng.randrange(1, 256)]) + data[pos + 1 :]
        elif how == "truncate" and data:
            out = data[: rng.randrange(len(data))]
        else:
            out = data + rng.randbytes(rng.randint(1, 16))
        if md5_digest(out) != golden_digest:
            return out
    raise RuntimeError("could not produce a detectable mutation")


def _page_bytes(rng: random.Random, kind: str, value: str) -> bytes:
    if kind == "text":
        return value.encode("utf-8")
    return rng.randbytes(int(value))


class _Run:
    def __init__(self, scenario: Scenario, seed: int, workdir: Path):
        self.sc = scenario
        self.rng = random.Random(seed)
        self.workdir = workdir
        golden = workdir / "golden"
        golden.mkdir(parents=True)
        self.golden_bytes: dict[str, bytes] = {}
        for path, kind, value in scenario.pages:
            data = _page_bytes(self.rng, kind, value)
            self.golden_bytes[path] = data
            target = golden.joinpath(*path.strip("/").split("/"))
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(data)
        config = scenario.controller_config()
        provision(golden, config.replicas, HARNESS_KEY, workdir / "store.cdsh", workdir / "data")
        self.clock = VirtualClock()
        self.start_ms = self.clock.ms
        self.activity = ActivityLog(workdir / "logs" / "activity.log", fsync=False)
        self.trace = ControllerTrace()
        self.gateway: Gateway = build_gateway(
            workdir / "store.cdsh", golden, workdir / "data", HARNESS_KEY, config,
            clock=self.clock, activity=self.activity, trace=self.trace, record_gate=True,
        )
        self.controller = self.gateway.controller
        self.exchanges: list[HttpExchange] = []

    def advance_to(self, at_ms: int) -> None:
        target = self.start_ms + at_ms
        while (due := int(round(self.controller.next_crp_due() * 1000))) <= target:
            self.clock.set_ms(max(self.clock.ms, due))
            self.gateway.maybe_scan()
        self.clock.set_ms(target)

    def apply(self, ev: Event) -> None:
        self.advance_to(ev.at)
        if ev.kind == "request":
            self.exchanges.append(self.gateway.handle(ev.payload, ev.page_path, "127.0.0.1", lambda raw: None))
        elif ev.kind == "corrupt":
            f = self.controller.replicas.page_file(ev.replica_id, ev.page_path)
            current = f.read_bytes() if f.is_file() else self.golden_bytes[ev.page_path]
            f.parent.mkdir(parents=True, exist_ok=True)
            f.write_bytes(mutate(current, ev.payload, self.rng, md5_digest(self.golden_bytes[ev.page_path])))
        elif ev.kind == "delete":
            f = self.controller.replicas.page_file(ev.replica_id, ev.page_path)
            if f.is_file():
                f.unlink()
        elif ev.kind == "idle":
            self.gateway.maybe_scan()

    def remaining_mismatches(self) -> int:
        c = self.controller
        bad = 0
        for rid in c.replicas.ids():
            for page in c.store.paths():
                if not c._check(rid, page)[0].match:
                    bad += 1
        return bad


def run_scenario(scenario: Scenario, seed: int | None = None, workdir: str | Path | None = None) -> ScenarioResult:
    """Provision a fresh store, replay the scenario in virtual time and evaluate its expectations."""
    seed = scenario.seed if seed is None else seed
    owned = workdir is None
    root = Path(tempfile.mkdtemp(prefix="cds-harness-")) if owned else Path(workdir)
    try:
        run = _Run(scenario, seed, root)
        for ev in scenario.events:
            run.apply(ev)
        c = run.controller
        result = ScenarioResult(
            scenario=scenario,
            seed=seed,
            assertions=[],
            exchanges=run.exchanges,
            trace=run.trace,
            gate_events=list(run.gateway.gate.events or []),
            activity_log=_read(run.activity.path),
            alarm_log=_read(run.activity.alarm_path),
            remaining_mismatches=run.remaining_mismatches(),
            final_trust={rid: (t.alert_level, t.state.value) for rid, t in c.trust.items()},
            crp_period_ms=c.crp_period_ms,
        )
        expected_digest = {p: c.store.lookup_expected(p, 1, HARNESS_KEY) for p in c.store.paths()}
        result.assertions = [_evaluate(e, result, expected_digest) for e in scenario.expected]
        return result
    finally:
        if owned:
            shutil.rmtree(root, ignore_errors=True)


def _read(path: Path) -> str:
    try:
        return path.read_text("utf-8")
    except FileNotFoundError:
        return ""


def _served_verified(result: ScenarioResult, expected_digest) -> tuple[bool, str]:
    bad = []
    for i, ex in enumerate(result.exchanges, start=1):
        if ex.status != 200:
            continue
        page = ex.verdict.page_path
        if md5_digest(ex.body) != expected_digest[page]:
            bad.append(f"#{i} {page}")
    return not bad, "all 200 bodies verified" if not bad else "unverified: " + ", ".join(bad)


def _evaluate(e: Expect, r: ScenarioResult, expected_digest) -> AssertionResult:
    t = r.trace

    def check(expected, observed) -> AssertionResult:
        return AssertionResult(e, str(expected) == str(observed), str(expected), str(observed))

    name, args = e.name, e.args
    try:
        if name == "served-verified":
            ok, msg = _served_verified(r, expected_digest)
            return AssertionResult(e, ok, "all 200 bodies verified", msg)
        if name == "exclusive":
            overlaps = find_overlaps(r.gate_events)
            return check("no overlaps", "no overlaps" if not overlaps else f"overlaps at {overlaps}")
        if name == "heal-count":
            return check(int(args[0]), len(t.heals))
        if name == "reboot-count":
            return check(int(args[0]), len(t.reboots))
        if name == "reboot-actions":
            return check(int(args[0]), sum(v.served_by == REBOOT for v in t.verdicts))
        if name == "served-by":
            ex = r.exchanges[int(args[0]) - 1]
            return check(args[1], ex.verdict.served_by if ex.verdict else "-")
        if name == "healed":
            ex = r.exchanges[int(args[0]) - 1]
            want = args[1] if len(args) > 1 else "-"
            return check(want, ",".join(map(str, ex.verdict.healed)) or "-")
        if name == "status":
            return check(int(args[1]), r.exchanges[int(args[0]) - 1].status)
        if name == "flags":
            ex = r.exchanges[int(args[0]) - 1]
            return check(args[1], ",".join(ex.verdict.flags))
        if name == "alarm-tiers":
            tiers = [a.tier.value for a in t.alarms if a.subject == "system"]
            return check(args[0] if args else "-", ",".join(tiers) or "-")
        if name == "report-tiers":
            return check(args[0] if args else "-", ",".join(rep.tier.value for rep in t.reports) or "-")
        if name == "crp-scans":
            return check(int(args[1]), sum(s.reason == args[0] for s in t.scans))
        if name == "crp-heals":
            # heals performed by the scan with the given 1-based index
            return check(int(args[1]), t.scans[int(args[0]) - 1].healed)
        if name == "mismatches":
            return check(int(args[0]), r.remaining_mismatches)
        if name == "trust":
            level, state = r.final_trust[int(args[0])]
            return check(args[1], state)
        if name == "alert-level":
            return check(float(args[1]), float(r.final_trust[int(args[0])][0]))
        if name == "states-seen":
            seen = sorted(s.value for s in t.states_seen)
            want = sorted(args[0].split(","))
            return AssertionResult(e, set(want) <= set(seen), f"at least {','.join(want)}", ",".join(seen))
        if name == "intrusions":
            return check(int(args[0]), sum(o.confirmed for o in t.intrusions))
        if name == "false-alarms":
            return check(int(args[0]), sum(not o.confirmed for o in t.intrusions))
        if name == "intrusion-period":
            periods = [o.crp_period_ms for o in t.intrusions if o.confirmed]
            return check(int(args[0]), periods[0] if periods else "-")
        if name == "crp-period":
            return check(int(args[0]), r.crp_period_ms)
        if name == "activity-rows":
            return check(int(args[0]), len(r.activity_log.splitlines()))
        if name == "log-row":
            # request index, then flags / failure percent / action as they appear in the log
            row = r.activity_log.splitlines()[int(args[0]) - 1].split("\t")
            return check(" ".join(args[1:]), " ".join(row[12:]))
    except (IndexError, KeyError, ValueError) as exc:
        return AssertionResult(e, False, str(e), f"cannot evaluate: {exc}")
    return AssertionResult(e, False, str(e), "unknown expectation")


def bundled_scenarios() -> list[Scenario]:
    """The scenario suite shipped with the package, sorted by name."""
    folder = resources.files("cds") / "scenarios"
    out = []
    for entry in sorted(folder.iterdir(), key=lambda p: p.name):
        if entry.name.endswith(".scn"):
            out.append(Scenario.parse(entry.read_text("utf-8"), name=entry.name[:-4]))
    return out


def random_single_replica_scenario(seed: int, replicas: int = 3) -> Scenario:
    """A seeded scenario that corrupts (or deletes) pages on exactly one replica."""
    rng = random.Random(seed)
    sc = Scenario(seed=seed, replicas=replicas, name=f"random-{seed}")
    npages = rng.randint(1, 6)
    for i in range(npages):
        if rng.random() < 0.3:
            sc.pages.append((f"/p{i}.txt", "text", f"page {i} " * rng.randint(0, 20)))
        else:
            sc.pages.append((f"/dir{i % 2}/p{i}.html", "size", str(rng.randint(0, 4096))))
    victim = rng.randint(1, replicas)
    t = 0
    for _ in range(rng.randint(5, 25)):
        t += rng.randint(0, 3000)
        page = rng.choice(sc.pages)[0]
        roll = rng.random()
        if roll < 0.35:
            sc.events.append(Event(t, "corrupt", victim, page, rng.choice(MUTATIONS)))
        elif roll < 0.45:
            sc.events.append(Event(t, "delete", victim, page))
        else:
            sc.events.append(Event(t, "request", page_path=page, payload="GET"))
    sc.events.append(Event(t + 1, "request", page_path=sc.pages[0][0], payload="GET"))
    sc.expected = [Expect("served-verified"), Expect("exclusive")]
    sc.validate()
    return sc


# --------------------------------------------------------------------------
# latency benchmark


@dataclass
class LatencyRow:
    page: str
    size_mb: float
    verified_median_ms: float
    verified_p95_ms: float
    bypass_median_ms: float
    bypass_p95_ms: float

    @property
    def overhead_ms(self) -> float:
        return self.verified_median_ms - self.bypass_median_ms


def render_latency_table(rows: Sequence[LatencyRow]) -> str:
    head = (
        f"{'No':>3}  {'Page':<28} {'Size (MB)':>9}  {'verified med (ms)':>17}  {'verified p95':>12}"
        f"  {'bypass med (ms)':>15}  {'bypass p95':>10}  {'overhead (ms)':>13}"
    )
    lines = [head, "-" * len(head)]
    for i, r in enumerate(rows, start=1):
        lines.append(
            f"{i:>3}  {r.page:<28} {r.size_mb:>9.2f}  {r.verified_median_ms:>17.3f}  {r.verified_p95_ms:>12.3f}"
            f"  {r.bypass_median_ms:>15.3f}  {r.bypass_p95_ms:>10.3f}  {r.overhead_ms:>13.3f}"
        )
    return "\n".join(lines) + "\n"


def measure_latency(pages: Iterable[str | Path], repetitions: int = 20, replicas: int = 3) -> list[LatencyRow]:
    """Median and p95 in-process serve times per page, with and without hash verification."""
    pages = [Path(p) for p in pages]
    if not pages:
        return []
    root = Path(tempfile.mkdtemp(prefix="cds-bench-"))
    try:
        golden = root / "golden"
        golden.mkdir()
        names = []
        for i, src in enumerate(pages):
            name = f"{i:02d}-{src.name}"
            shutil.copyfile(src, golden / name)
            names.append(name)
        config = ControllerConfig(replicas=replicas, crp_idle_trigger_ms=10**9, crp_period_max_ms=10**9)
        provision(golden, replicas, HARNESS_KEY, root / "store.cdsh", root / "data")
        clock = WallClock()
        verified = build_gateway(root / "store.cdsh", golden, root / "data", HARNESS_KEY, config, clock=clock)
        bypass = build_gateway(
            root / "store.cdsh", golden, root / "data", HARNESS_KEY, config, clock=clock, verify=False
        )
        rows = []
        sink = lambda raw: None  # noqa: E731
        for src, name in zip(pages, names):
            target = "/" + name
            timings: dict[str, list[float]] = {"v": [], "b": []}
            verified.handle("GET", target, "bench", sink)  # warm caches
            for _ in range(repetitions):
                for key, gw in (("v", verified), ("b", bypass)):
                    ex = gw.handle("GET", target, "bench", sink)
                    if ex.status != 200:
                        raise RuntimeError(f"benchmark request for {target} returned {ex.status}")
                    timings[key].append(ex.session_duration * 1000)
            rows.append(
                LatencyRow(
                    page=src.name,
                    size_mb=src.stat().st_size / 1e6,
                    verified_median_ms=statistics.median(timings["v"]),
                    verified_p95_ms=float(np.percentile(timings["v"], 95)),
                    bypass_median_ms=statistics.median(timings["b"]),
                    bypass_p95_ms=float(np.percentile(timings["b"], 95)),
                )
            )
        return rows
    finally:
        shutil.rmtree(root, ignore_errors=True)
