"""The virtual controller.

Owns every decision about replica integrity:

* per-request agreement: verify the requested page on every available
  replica in selection order, serve the first intact copy, heal the rest, and
  reboot everything when no copy is intact;
* change-and-response scans over the whole store, triggered by idleness or
  by the maximum scan period;
* windowed failure-rate assessment with three alarm tiers;
* per-replica alert levels driving trustworthy/suspected/corrupted states,
  with the intrusion-manager sequence (vote, isolate, reboot, alarm) when a
  replica crosses the corruption threshold.

The controller is a single logical actor. Callers must hold the gateway's
exclusivity gate around :meth:`Controller.run_agreement` and
:meth:`Controller.run_crp`.
"""

from __future__ import annotations

import enum
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .analyzer import ActivityLog, AlarmRecord, FailureReport, Tier
from .crypto import AesKey128, md5_digest
from .hashstore import HashStore, RecordMissing
from .replicas import HealFailed, PageMissing, RebootFailed, ReplicaSet

log = logging.getLogger(__name__)

REBOOT = "REBOOT"
HASH_MISMATCH = "hash-mismatch"
PAGE_MISSING = "page-missing"
HEAL_FAILED = "heal-failed"


class ConfigError(ValueError):
    pass


class UnknownPage(LookupError):
    pass


class NoReplicaAvailable(RuntimeError):
    pass


class IntegrityFailure(RuntimeError):
    """Even the golden copy does not match the stored hash; nothing can be served."""


class TrustState(str, enum.Enum):
    TRUSTWORTHY = "trustworthy"
    SUSPECTED = "suspected"
    CORRUPTED = "corrupted"


class Priority(str, enum.Enum):
    HIGH = "high"
    MEDIUM = "medium"
    LOW = "low"


_PRIORITY = {
    TrustState.TRUSTWORTHY: Priority.HIGH,
    TrustState.SUSPECTED: Priority.MEDIUM,
    TrustState.CORRUPTED: Priority.LOW,
}
_PRIORITY_RANK = {Priority.HIGH: 0, Priority.MEDIUM: 1, Priority.LOW: 2}


def classify(alert_level: float, tc: float) -> TrustState:
    if alert_level == 0:
        return TrustState.TRUSTWORTHY
    if alert_level > tc:
        return TrustState.CORRUPTED
    return TrustState.SUSPECTED


def tier_for_rate(rate: float, th_low: float, th_high: float) -> Tier:
    """Rates exactly on a threshold belong to the middle (beep) band."""
    if rate < th_low:
        return Tier.LOG_ONLY
    if rate > th_high:
        return Tier.HIGH_BEEP
    return Tier.BEEP


@dataclass
class ControllerConfig:
    th_low: float = 0.05
    th_high: float = 0.20
    tc: float = 10.0
    alert_weights: dict[str, float] = field(
        default_factory=lambda: {HASH_MISMATCH: 3.0, PAGE_MISSING: 5.0, HEAL_FAILED: 5.0}
    )
    window: int = 100
    crp_idle_trigger_ms: int = 2_000
    crp_period_max_ms: int = 60_000
    replicas: int = 3

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if not 0 <= self.th_low < self.th_high <= 1:
            raise ConfigError(f"need 0 <= th_low < th_high <= 1 (got {self.th_low}, {self.th_high})")
        if not self.alert_weights:
            raise ConfigError("no alert weights configured")
        for kind, w in self.alert_weights.items():
            if w <= 0:
                raise ConfigError(f"weight for {kind} must be > 0")
        if self.tc <= max(self.alert_weights.values()):
            raise ConfigError("tc must exceed every single alert weight")
        if self.window < 1:
            raise ConfigError("window must be >= 1")
        if self.crp_idle_trigger_ms <= 0 or self.crp_period_max_ms <= 0:
            raise ConfigError("scan timings must be positive")
        if self.replicas < 1:
            raise ConfigError("replicas must be >= 1")

    @classmethod
    def from_text(cls, text: str) -> "ControllerConfig":
        values: dict = {}
        weights: dict[str, float] = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            try:
                if key.startswith("weights."):
                    weights[key[len("weights.") :]] = float(value)
                elif key in ("th_low", "th_high", "tc"):
                    values[key] = float(value)
                elif key in ("window", "crp_idle_trigger_ms", "crp_period_max_ms", "replicas"):
                    values[key] = int(value)
                else:
                    raise ConfigError(f"line {lineno}: unknown key {key!r}")
            except ValueError as exc:
                if isinstance(exc, ConfigError):
                    raise
                raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from None
        if weights:
            merged = cls().alert_weights
            merged.update(weights)
            values["alert_weights"] = merged
        return cls(**values)

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "ControllerConfig":
        return cls.from_text(Path(path).read_text("utf-8"))

    def to_text(self) -> str:
        lines = [
            f"th_low={self.th_low}",
            f"th_high={self.th_high}",
            f"tc={self.tc}",
            f"window={self.window}",
            f"crp_idle_trigger_ms={self.crp_idle_trigger_ms}",
            f"crp_period_max_ms={self.crp_period_max_ms}",
            f"replicas={self.replicas}",
        ]
        lines += [f"weights.{k}={v}" for k, v in sorted(self.alert_weights.items())]
        return "\n".join(lines) + "\n"


@dataclass
class ReplicaTrust:
    replica_id: int
    alert_level: float = 0.0
    state: TrustState = TrustState.TRUSTWORTHY

    @property
    def priority(self) -> Priority:
        return _PRIORITY[self.state]


@dataclass(frozen=True)
class ReplicaCheck:
    replica_id: int
    match: bool
    problem: str | None = None  # alert kind when match is False


@dataclass
class VerdictTrace:
    page_path: str
    checks: list[ReplicaCheck]
    served_by: int | str
    healed: list[int]
    duration: float
    flags: tuple[str, ...] = ()
    rebooted: list[int] = field(default_factory=list)
    attacks_in_window: int = 0
    reliability: float = 1.0

    @property
    def primary_failed(self) -> bool:
        return bool(self.checks) and not self.checks[0].match

    @property
    def mismatched(self) -> list[int]:
        return [c.replica_id for c in self.checks if not c.match]

    @property
    def failure_percent(self) -> int:
        if not self.checks:
            return 0
        return round(100 * len(self.mismatched) / len(self.checks))

    @property
    def action(self) -> str:
        return REBOOT if self.served_by == REBOOT else f"SubServer-{self.served_by}"


@dataclass
class IntrusionOutcome:
    replica_id: int
    pages_checked: int
    mismatches: int
    confirmed: bool
    countermeasures: list[str]
    rebooted: bool
    crp_period_ms: int


@dataclass
class ReplicaScan:
    replica_id: int
    pages_checked: int = 0
    healed: list[str] = field(default_factory=list)
    alerts: int = 0
    rebooted: bool = False


@dataclass
class CrpReport:
    reason: str
    started_at: float
    replicas: list[ReplicaScan]

    @property
    def pages_checked(self) -> int:
        return sum(r.pages_checked for r in self.replicas)

    @property
    def healed(self) -> int:
        return sum(len(r.healed) for r in self.replicas)


@dataclass
class ControllerTrace:
    """Everything the controller did, kept for harness assertions."""

    verdicts: list[VerdictTrace] = field(default_factory=list)
    heals: list[tuple[int, str, str]] = field(default_factory=list)  # (replica, page, source)
    reboots: list[tuple[int, str]] = field(default_factory=list)  # (replica, reason)
    scans: list[CrpReport] = field(default_factory=list)
    intrusions: list[IntrusionOutcome] = field(default_factory=list)
    reports: list[FailureReport] = field(default_factory=list)
    alarms: list[AlarmRecord] = field(default_factory=list)
    states_seen: set = field(default_factory=set)


def select_primary(
    trust_table: Mapping[int, ReplicaTrust],
    load_counters: Mapping[int, int],
    isolated: Sequence[int] = (),
) -> list[int]:
    """Verification order: priority, then load, then replica id. First entry is the primary."""
    blocked = set(isolated)
    candidates = [rid for rid in trust_table if rid not in blocked]
    if not candidates:
        raise NoReplicaAvailable("every replica is isolated")
    return sorted(
        candidates,
        key=lambda rid: (_PRIORITY_RANK[trust_table[rid].priority], load_counters.get(rid, 0), rid),
    )


def assess_failure_rate(
    verdicts: Sequence[VerdictTrace], th_low: float, th_high: float, start: float = 0.0, end: float = 0.0
) -> FailureReport:
    if not verdicts:
        raise ValueError("failure rate needs a non-empty window")
    failures = sum(v.primary_failed for v in verdicts)
    rate = failures / len(verdicts)
    return FailureReport(start, end, rate, tier_for_rate(rate, th_low, th_high), len(verdicts), failures)


class Controller:
    def __init__(
        self,
        config: ControllerConfig,
        store: HashStore,
        replicas: ReplicaSet,
        key: AesKey128,
        clock,
        activity: ActivityLog | None = None,
        *,
        verify: bool = True,
        trace: ControllerTrace | None = None,
    ):
        if store.replica_count != len(replicas):
            raise ConfigError(f"store has {store.replica_count} replica slots, {len(replicas)} replicas configured")
        store.check_key(key)
        self.config = config
        self.store = store
        self.replicas = replicas
        self.key = key
        self.clock = clock
        self.activity = activity
        self.verify = verify
        self.trace = trace
        self.trust = {rid: ReplicaTrust(rid) for rid in replicas.ids()}
        replicas.on_reboot.append(self._reset_trust)

        self.crp_period_ms = config.crp_period_max_ms
        self.probation: set[int] = set()
        self.reboot_count = 0
        self._scan_heals: list[tuple[int, str]] | None = None
        self.last_scan_at = clock.now()
        self.last_request_at: float | None = None
        self._traffic_since_scan = False
        self._window: list[VerdictTrace] = []
        self._window_start = clock.now()
        self._note_states()

    # -- trust state machine --------------------------------------------

    def _note_states(self) -> None:
        if self.trace is not None:
            self.trace.states_seen.update(t.state for t in self.trust.values())

    def _reset_trust(self, replica_id: int) -> None:
        self.trust[replica_id] = ReplicaTrust(replica_id)
        self._note_states()

    def raise_alert(self, replica_id: int, kind: str) -> ReplicaTrust:
        try:
            weight = self.config.alert_weights[kind]
        except KeyError:
            raise ConfigError(f"no weight configured for alert kind {kind!r}") from None
        t = self.trust[replica_id]
        t.alert_level += weight
        t.state = classify(t.alert_level, self.config.tc)
        self._note_states()
        log.info("alert %s on replica %d: level %g (%s)", kind, replica_id, t.alert_level, t.state.value)
        if t.state is TrustState.CORRUPTED:
            self.intrusion_manager(replica_id)
        return self.trust[replica_id]

    def intrusion_manager(self, replica_id: int) -> IntrusionOutcome:
        """Vote on a replica flagged corrupted and apply countermeasures."""
        pages = self.store.paths()
        bad = [p for p in pages if not self._check(replica_id, p)[0].match]
        confirmed = 2 * len(bad) > len(pages)
        handle = self.replicas.handle(replica_id)
        rebooted = False
        if not confirmed:
            countermeasures = ["heal-all"] if bad else []
            for p in bad:
                self._heal(replica_id, p, "intrusion-manager")
            t = self.trust[replica_id]
            t.alert_level = self.config.tc
            t.state = classify(t.alert_level, self.config.tc)
            self._note_states()
            action = f"false alarm: {len(bad)}/{len(pages)} pages mismatched, demoted to suspected"
            self._alarm(Tier.LOG_ONLY, str(replica_id), action)
        else:
            countermeasures = ["isolate", "reboot"]
            handle.isolated = True
            self.probation.add(replica_id)
            self.crp_period_ms = max(1, self.config.crp_period_max_ms // 2)
            log.warning("replica %d corrupted (%d/%d pages), isolating", replica_id, len(bad), len(pages))
            rebooted = self._reboot(replica_id, "intrusion-manager")
            action = "isolated and rebooted" if rebooted else "isolated; reboot FAILED, replica out of service"
            self._alarm(Tier.HIGH_BEEP, str(replica_id), action)
        outcome = IntrusionOutcome(
            replica_id, len(pages), len(bad), confirmed, countermeasures, rebooted, self.crp_period_ms
        )
        if self.trace is not None:
            self.trace.intrusions.append(outcome)
        return outcome

    # -- verification primitives ----------------------------------------

    def _check(self, replica_id: int, page_path: str) -> tuple[ReplicaCheck, bytes | None]:
        try:
            data = self.replicas.read_page(replica_id, page_path)
        except PageMissing:
            return ReplicaCheck(replica_id, False, PAGE_MISSING), None
        expected = self.store.lookup_expected(page_path, replica_id, self.key)
        if md5_digest(data) == expected:
            return ReplicaCheck(replica_id, True), data
        return ReplicaCheck(replica_id, False, HASH_MISMATCH), data

    def _heal(self, replica_id: int, page_path: str, source: str) -> bool:
        """Heal one page; a failed heal raises an alert and reboots the replica."""
        try:
            changed = self.replicas.heal_page(replica_id, page_path)
        except HealFailed as exc:
            log.error("%s", exc)
            self.raise_alert(replica_id, HEAL_FAILED)
            self._reboot(replica_id, "heal-failed")
            return False
        if changed and self.trace is not None:
            self.trace.heals.append((replica_id, page_path, source))
        if changed and self._scan_heals is not None:
            self._scan_heals.append((replica_id, page_path))
        return changed

    def _reboot(self, replica_id: int, reason: str) -> bool:
        try:
            self.replicas.reboot_replica(replica_id)
        except RebootFailed as exc:
            log.critical("replica %d refused: %s", replica_id, exc)
            self._alarm(Tier.HIGH_BEEP, str(replica_id), f"reboot failed: {exc}")
            return False
        self.reboot_count += 1
        if self.trace is not None:
            self.trace.reboots.append((replica_id, reason))
        return True

    def _alarm(self, tier: Tier, subject: str, action: str) -> AlarmRecord:
        alarm = AlarmRecord(self.clock.now(), tier, self.window_failure_rate(), subject, action)
        if self.activity is not None:
            self.activity.append_alarm(alarm)
        if self.trace is not None:
            self.trace.alarms.append(alarm)
        return alarm

    # -- agreement protocol ---------------------------------------------

    def run_agreement(self, page_path: str) -> tuple[bytes, str, VerdictTrace]:
        """Verify ``page_path`` across replicas and return bytes that are safe to serve."""
        started = self.clock.perf()
        if page_path not in self.store:
            raise UnknownPage(page_path)
        try:
            content_type = self.replicas.golden.content_type(page_path)
        except RecordMissing:
            raise IntegrityFailure(f"{page_path}: in hash store but not in golden store") from None
        now = self.clock.now()
        self.last_request_at = now
        self._traffic_since_scan = True

        handles = self.replicas.handles
        order = select_primary(
            self.trust,
            {rid: h.load_counter for rid, h in handles.items()},
            [rid for rid, h in handles.items() if h.isolated],
        )

        if not self.verify:
            # benchmark bypass: serve the primary's bytes unchecked
            rid = order[0]
            data = self.replicas.read_page(rid, page_path)
            handles[rid].load_counter += 1
            verdict = VerdictTrace(page_path, [ReplicaCheck(rid, True)], rid, [], self.clock.perf() - started)
            return data, content_type, verdict

        checks: list[ReplicaCheck] = []
        served_by: int | str | None = None
        body: bytes | None = None
        for rid in order:
            check, data = self._check(rid, page_path)
            checks.append(check)
            if check.match and served_by is None:
                served_by, body = rid, data

        flags = {rid: "SKIP" for rid in handles}
        flags.update({c.replica_id: "TRUE" if c.match else "FALSE" for c in checks})

        for c in checks:
            if not c.match:
                self.raise_alert(c.replica_id, c.problem)

        healed: list[int] = []
        rebooted: list[int] = []
        if served_by is None:
            log.warning("no intact copy of %s on any replica, rebooting all", page_path)
            for rid in self.replicas.ids():
                if self._reboot(rid, "agreement"):
                    rebooted.append(rid)
            body, _ = self.replicas.golden.golden_bytes(page_path)
            expected = self.store.lookup_expected(page_path, 1, self.key)
            if md5_digest(body) != expected:
                raise IntegrityFailure(f"{page_path}: golden copy does not match stored hash")
            served_by = REBOOT
        else:
            for c in checks:
                if not c.match and self._heal(c.replica_id, page_path, "agreement"):
                    healed.append(c.replica_id)
            handles[served_by].load_counter += 1

        verdict = VerdictTrace(
            page_path,
            checks,
            served_by,
            healed,
            self.clock.perf() - started,
            flags=tuple(flags[rid] for rid in sorted(flags)),
            rebooted=rebooted,
        )
        self._record_verdict(verdict)
        if self.trace is not None:
            self.trace.verdicts.append(verdict)
        return body, content_type, verdict

    # -- failure-rate windows -------------------------------------------

    def window_failure_rate(self) -> float:
        if not self._window:
            return 0.0
        return sum(v.primary_failed for v in self._window) / len(self._window)

    def window_stats(self) -> tuple[int, float]:
        """(requests with intrusion activity, reliability) for the current window."""
        attacks = sum(bool(v.mismatched) for v in self._window)
        return attacks, 1.0 - self.window_failure_rate()

    def _record_verdict(self, verdict: VerdictTrace) -> None:
        if not self._window:
            self._window_start = self.clock.now()
        self._window.append(verdict)
        verdict.attacks_in_window, verdict.reliability = self.window_stats()
        if len(self._window) >= self.config.window:
            self._close_window()

    def _close_window(self) -> FailureReport:
        report = assess_failure_rate(
            self._window, self.config.th_low, self.config.th_high, self._window_start, self.clock.now()
        )
        if self.activity is not None:
            self.activity.append_report(report)
        if self.trace is not None:
            self.trace.reports.append(report)
        if report.tier is not Tier.LOG_ONLY:
            log.warning("failure rate %.3f over %d requests: %s", report.failure_rate, report.requests, report.tier)
            self._alarm(report.tier, "system", f"{report.tier.value} alarm: failure rate {report.failure_rate:.4f}")
        self._window = []
        return report

    # -- change and response protocol -----------------------------------

    def crp_due(self, now: float | None = None) -> str | None:
        now = self.clock.now() if now is None else now
        if self._traffic_since_scan and now - self.last_request_at >= self.config.crp_idle_trigger_ms / 1000:
            return "idle"
        if now - self.last_scan_at >= self.crp_period_ms / 1000:
            return "period"
        return None

    def next_crp_due(self) -> float:
        """Earliest time a scan becomes due if no further requests arrive."""
        due = self.last_scan_at + self.crp_period_ms / 1000
        if self._traffic_since_scan:
            due = min(due, self.last_request_at + self.config.crp_idle_trigger_ms / 1000)
        return due

    def run_crp(self, reason: str = "manual") -> CrpReport:
        """Verify every (page, replica) pair and heal whatever does not match."""
        report = CrpReport(reason, self.clock.now(), [])
        pages = self.store.paths()
        # heals made while the scan runs, including those by the intrusion manager
        self._scan_heals = []
        try:
            for rid in self.replicas.ids():
                scan = ReplicaScan(rid)
                report.replicas.append(scan)
                if self.replicas.handle(rid).isolated:
                    # left isolated by a failed reboot; try again
                    scan.rebooted = self._reboot(rid, "crp-retry")
                for page in pages:
                    check, _ = self._check(rid, page)
                    scan.pages_checked += 1
                    if check.match:
                        continue
                    scan.alerts += 1
                    before = self.reboot_count
                    self.raise_alert(rid, check.problem)
                    self._heal(rid, page, "crp")
                    if self.reboot_count > before:
                        scan.rebooted = True
                scan.healed = [p for r, p in self._scan_heals if r == rid]
                if rid in self.probation and scan.alerts == 0 and not self.replicas.handle(rid).isolated:
                    self.probation.discard(rid)
        finally:
            self._scan_heals = None
        if not self.probation:
            self.crp_period_ms = self.config.crp_period_max_ms
        self.last_scan_at = self.clock.now()
        self._traffic_since_scan = False
        if self.trace is not None:
            self.trace.scans.append(report)
        log.info("scan (%s): %d pairs checked, %d healed", reason, report.pages_checked, report.healed)
        return report
