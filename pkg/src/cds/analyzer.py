"""Activity analysis: the per-request audit log, alarm records, rank correlation
and the report files derived from a log.

Activity log lines are tab separated. The twelve monitored fields come first,
then one verification flag per replica (``TRUE``/``FALSE``/``SKIP``), the
request's failure percentage and the action taken::

    date  time  content-type  page  session-ms  request-ok  status  intrusion
    infected-replicas  infected-page  attacks-in-window  reliability
    flag_1 .. flag_N  failure-percent  action

The alarm file holds two kinds of lines, ``REPORT`` (one per completed
failure-rate window) and ``ALARM``.
"""

from __future__ import annotations

import csv
import enum
import io
import logging
import os
import threading
from collections import Counter
from dataclasses import dataclass, field
from datetime import date, datetime, time, timezone
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

log = logging.getLogger(__name__)

NONE_FIELD = "-"
FIXED_FIELDS = 12


class Tier(str, enum.Enum):
    LOG_ONLY = "log-only"
    BEEP = "beep"
    HIGH_BEEP = "high-beep"

    def __str__(self) -> str:
        return self.value


def _bool(text: str) -> bool:
    if text == "TRUE":
        return True
    if text == "FALSE":
        return False
    raise ValueError(f"not a flag: {text!r}")


def _flag(value: bool) -> str:
    return "TRUE" if value else "FALSE"


_ESCAPES = {"\\": "\\\\", "\t": "\\t", "\n": "\\n", "\r": "\\r"}


def _esc(text: str) -> str:
    return "".join(_ESCAPES.get(ch, ch) for ch in text)


def _unesc(text: str) -> str:
    out = []
    it = iter(text)
    for ch in it:
        if ch == "\\":
            nxt = next(it, "")
            out.append({"\\": "\\", "t": "\t", "n": "\n", "r": "\r"}.get(nxt, nxt))
        else:
            out.append(ch)
    return "".join(out)


def timestamp_parts(ts: float) -> tuple[date, time]:
    dt = datetime.fromtimestamp(ts, tz=timezone.utc)
    return dt.date(), dt.time()


@dataclass(frozen=True)
class ActivityRecord:
    date_of_request: date
    time_of_request: time
    content_type: str
    web_page_requested: str
    session_time: float  # milliseconds
    status_of_request: bool
    status_of_response: int
    intrusion_activity: bool
    infected_sub_server: tuple[int, ...]
    infected_web_page: str | None
    frequency_of_attacks: int
    reliability_of_server: float
    replica_flags: tuple[str, ...] = ()
    failure_percent: int = 0
    action: str = NONE_FIELD

    def __post_init__(self) -> None:
        if self.intrusion_activity != ("FALSE" in self.replica_flags):
            raise ValueError("intrusion_activity must reflect the replica flags")
        if not 0.0 <= self.reliability_of_server <= 1.0:
            raise ValueError("reliability_of_server outside [0, 1]")

    def to_line(self) -> str:
        cols = [
            self.date_of_request.isoformat(),
            self.time_of_request.isoformat(timespec="microseconds"),
            _esc(self.content_type) or NONE_FIELD,
            _esc(self.web_page_requested),
            repr(float(self.session_time)),
            _flag(self.status_of_request),
            str(self.status_of_response),
            _flag(self.intrusion_activity),
            ",".join(map(str, self.infected_sub_server)) or NONE_FIELD,
            NONE_FIELD if self.infected_web_page is None else _esc(self.infected_web_page),
            str(self.frequency_of_attacks),
            repr(float(self.reliability_of_server)),
            *self.replica_flags,
            str(self.failure_percent),
            self.action,
        ]
        return "\t".join(cols) + "\n"

    @classmethod
    def from_line(cls, line: str) -> "ActivityRecord":
        if not line.endswith("\n"):
            raise ValueError("incomplete line")
        cols = line[:-1].split("\t")
        if len(cols) < FIXED_FIELDS + 2:
            raise ValueError(f"expected at least {FIXED_FIELDS + 2} fields, got {len(cols)}")
        flags = tuple(cols[FIXED_FIELDS:-2])
        if any(f not in ("TRUE", "FALSE", "SKIP") for f in flags):
            raise ValueError("bad replica flag")
        infected = () if cols[8] == NONE_FIELD else tuple(int(x) for x in cols[8].split(","))
        return cls(
            date_of_request=date.fromisoformat(cols[0]),
            time_of_request=time.fromisoformat(cols[1]),
            content_type="" if cols[2] == NONE_FIELD else _unesc(cols[2]),
            web_page_requested=_unesc(cols[3]),
            session_time=float(cols[4]),
            status_of_request=_bool(cols[5]),
            status_of_response=int(cols[6]),
            intrusion_activity=_bool(cols[7]),
            infected_sub_server=infected,
            infected_web_page=None if cols[9] == NONE_FIELD else _unesc(cols[9]),
            frequency_of_attacks=int(cols[10]),
            reliability_of_server=float(cols[11]),
            replica_flags=flags,
            failure_percent=int(cols[-2]),
            action=cols[-1],
        )

    @property
    def verified(self) -> bool:
        return self.action != NONE_FIELD


@dataclass(frozen=True)
class FailureReport:
    window_start: float
    window_end: float
    failure_rate: float
    tier: Tier
    requests: int = 0
    failures: int = 0

    def to_line(self) -> str:
        return (
            f"REPORT\t{self.window_start!r}\t{self.window_end!r}\t{self.failure_rate!r}"
            f"\t{self.tier}\t{self.requests}\t{self.failures}\n"
        )


@dataclass(frozen=True)
class AlarmRecord:
    raised_at: float
    tier: Tier
    failure_rate: float
    subject: str  # "system" or a replica id
    action_taken: str

    def to_line(self) -> str:
        return (
            f"ALARM\t{self.raised_at!r}\t{self.tier}\t{self.failure_rate!r}"
            f"\t{self.subject}\t{_esc(self.action_taken)}\n"
        )

    @classmethod
    def from_line(cls, line: str) -> "AlarmRecord":
        kind, raised, tier, rate, subject, action = line.rstrip("\n").split("\t")
        if kind != "ALARM":
            raise ValueError("not an alarm line")
        return cls(float(raised), Tier(tier), float(rate), subject, _unesc(action))


class ActivityLog:
    """Append-only writer for activity and alarm files.

    A failed write (disk full and friends) flips the log into a degraded
    state: serving continues, analysis stops, and the failure is logged once.
    """

    def __init__(self, path: str | os.PathLike, alarm_path: str | os.PathLike | None = None, *, fsync: bool = True):
        self.path = Path(path)
        self.alarm_path = Path(alarm_path) if alarm_path else self.path.with_name("alarms.log")
        self.fsync = fsync
        self.degraded = False
        self._lock = threading.Lock()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.alarm_path.parent.mkdir(parents=True, exist_ok=True)

    def _append(self, target: Path, line: str) -> None:
        with self._lock:
            if self.degraded:
                return
            try:
                with open(target, "a", encoding="utf-8", newline="") as fh:
                    fh.write(line)
                    fh.flush()
                    if self.fsync:
                        os.fsync(fh.fileno())
            except OSError as exc:
                self.degraded = True
                log.critical("activity log write failed, analysis stopped: %s", exc)

    def append_activity(self, record: ActivityRecord) -> None:
        self._append(self.path, record.to_line())

    def append_report(self, report: FailureReport) -> None:
        self._append(self.alarm_path, report.to_line())

    def append_alarm(self, alarm: AlarmRecord) -> None:
        self._append(self.alarm_path, alarm.to_line())


def read_activity(path: str | os.PathLike) -> tuple[list[ActivityRecord], int]:
    """Parse an activity log. Returns the records and the number of skipped lines."""
    records: list[ActivityRecord] = []
    corrupt = 0
    try:
        fh = open(path, "r", encoding="utf-8", errors="replace", newline="")
    except FileNotFoundError:
        return records, 0
    with fh:
        for line in fh:
            try:
                records.append(ActivityRecord.from_line(line))
            except (ValueError, IndexError):
                corrupt += 1
    return records, corrupt


def read_alarms(path: str | os.PathLike) -> tuple[list[AlarmRecord], list[FailureReport]]:
    alarms: list[AlarmRecord] = []
    reports: list[FailureReport] = []
    try:
        text = Path(path).read_text("utf-8", errors="replace")
    except FileNotFoundError:
        return alarms, reports
    for line in text.splitlines():
        cols = line.split("\t")
        try:
            if cols[0] == "ALARM":
                alarms.append(AlarmRecord.from_line(line))
            elif cols[0] == "REPORT":
                reports.append(
                    FailureReport(float(cols[1]), float(cols[2]), float(cols[3]), Tier(cols[4]), int(cols[5]), int(cols[6]))
                )
        except (ValueError, IndexError):
            continue
    return alarms, reports


# --------------------------------------------------------------------------
# rank correlation


def _check_rankings(a: Sequence[int], b: Sequence[int]) -> int:
    if len(a) != len(b):
        raise ValueError(f"rankings differ in length ({len(a)} vs {len(b)})")
    n = len(a)
    if n < 2:
        raise ValueError("need at least two ranked items")
    expected = list(range(1, n + 1))
    for r in (a, b):
        if sorted(r) != expected:
            raise ValueError(f"{list(r)} is not a permutation of 1..{n}")
    return n


def _sum_sq_diff(a: Sequence[int], b: Sequence[int]) -> int:
    return sum((x - y) ** 2 for x, y in zip(a, b))


def rank_correlation(ranking_a: Sequence[int], ranking_b: Sequence[int]) -> float:
    """``1 - sum(d^2) / (N (N^2 - 1))``, without the usual factor of 6.

    This reproduces the availability metric as it was published. Use
    :func:`spearman_standard` for the textbook coefficient; the two agree
    whenever the rankings are identical.
    """
    n = _check_rankings(ranking_a, ranking_b)
    return float(1 - Fraction(_sum_sq_diff(ranking_a, ranking_b), n * (n * n - 1)))


def spearman_standard(ranking_a: Sequence[int], ranking_b: Sequence[int]) -> float:
    """Spearman's rho for tie-free rankings: ``1 - 6 sum(d^2) / (N (N^2 - 1))``."""
    n = _check_rankings(ranking_a, ranking_b)
    return float(1 - Fraction(6 * _sum_sq_diff(ranking_a, ranking_b), n * (n * n - 1)))


def to_ranks(values: Sequence[float]) -> list[int]:
    """Rank values ascending (smallest gets rank 1). Ties are rejected."""
    if len(set(values)) != len(values):
        raise ValueError("tied values cannot be ranked as a permutation")
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0] * len(values)
    for rank, i in enumerate(order, start=1):
        ranks[i] = rank
    return ranks


# --------------------------------------------------------------------------
# reports


@dataclass
class Summary:
    requests: int = 0
    corrupt_lines: int = 0
    verified_requests: int = 0
    intrusions: int = 0
    reboots: int = 0
    status_counts: Counter = field(default_factory=Counter)
    replica_attacks: Counter = field(default_factory=Counter)
    alarm_counts: Counter = field(default_factory=Counter)
    reliability: float = 1.0

    def render(self) -> str:
        rows = [
            ("requests", self.requests),
            ("verified_requests", self.verified_requests),
            ("intrusions", self.intrusions),
            ("reboots", self.reboots),
            ("corrupt_lines", self.corrupt_lines),
            ("current_reliability", f"{self.reliability:.6f}"),
        ]
        for status in sorted(self.status_counts):
            rows.append((f"status_{status}", self.status_counts[status]))
        for rid in sorted(self.replica_attacks):
            rows.append((f"replica_{rid}_attack_frequency", self.replica_attacks[rid]))
        for tier in Tier:
            rows.append((f"alarms_{tier.value}", self.alarm_counts.get(tier, 0)))
        width = max(len(k) for k, _ in rows)
        return "".join(f"{k:<{width}}  {v}\n" for k, v in rows)


@dataclass
class WindowPoint:
    index: int
    start: str
    end: str
    requests: int
    failure_rate: float
    attacks: dict[int, int]


def summarize(records: Iterable[ActivityRecord], corrupt: int = 0, alarms: Iterable[AlarmRecord] = ()) -> Summary:
    s = Summary(corrupt_lines=corrupt)
    for rec in records:
        s.requests += 1
        s.status_counts[rec.status_of_response] += 1
        for rid, flag in enumerate(rec.replica_flags, start=1):
            s.replica_attacks[rid] += 0
            if flag == "FALSE":
                s.replica_attacks[rid] += 1
        if rec.verified:
            s.verified_requests += 1
        if rec.intrusion_activity:
            s.intrusions += 1
        if rec.action == "REBOOT":
            s.reboots += 1
        s.reliability = rec.reliability_of_server
    for alarm in alarms:
        s.alarm_counts[alarm.tier] += 1
    return s


def window_series(records: Sequence[ActivityRecord], window: int) -> list[WindowPoint]:
    """Group verified requests into consecutive windows of ``window`` requests.

    The failure rate of a window is read back from the reliability column of
    its last row, which the server computes over the same window.
    """
    verified = [r for r in records if r.verified]
    points = []
    for idx, start in enumerate(range(0, len(verified), window)):
        chunk = verified[start : start + window]
        attacks: Counter = Counter()
        for rec in chunk:
            for rid, flag in enumerate(rec.replica_flags, start=1):
                attacks[rid] += flag == "FALSE"
        first, last = chunk[0], chunk[-1]
        points.append(
            WindowPoint(
                index=idx,
                start=f"{first.date_of_request.isoformat()}T{first.time_of_request.isoformat()}",
                end=f"{last.date_of_request.isoformat()}T{last.time_of_request.isoformat()}",
                requests=len(chunk),
                failure_rate=round(1.0 - last.reliability_of_server, 12),
                attacks=dict(attacks),
            )
        )
    return points


_PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def render_chart(points: Sequence[WindowPoint], replica_ids: Sequence[int]) -> str:
    """Self-contained SVG: failure rate (top) and per-replica attacks (bottom) per window."""
    w, h, pad = 640, 480, 50
    panel_h = (h - 3 * pad) / 2
    plot_w = w - 2 * pad
    n = len(points)

    def x_at(i: int) -> float:
        return pad + (plot_w * i / (n - 1) if n > 1 else plot_w / 2)

    out = io.StringIO()
    out.write(f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">\n')
    out.write(f'<rect width="{w}" height="{h}" fill="white"/>\n')
    for top, title in ((pad, "failure rate per window"), (2 * pad + panel_h, "attacks per replica per window")):
        out.write(
            f'<rect x="{pad}" y="{top:.2f}" width="{plot_w}" height="{panel_h:.2f}" fill="none" stroke="black"/>\n'
        )
        out.write(f'<text x="{pad}" y="{top - 8:.2f}" font-family="sans-serif" font-size="12">{title}</text>\n')

    # failure rate, fixed 0..1 axis
    top = pad
    out.write(f'<text x="{pad - 6}" y="{top + 4:.2f}" font-family="sans-serif" font-size="10" text-anchor="end">1</text>\n')
    out.write(
        f'<text x="{pad - 6}" y="{top + panel_h + 4:.2f}" font-family="sans-serif" font-size="10" text-anchor="end">0</text>\n'
    )
    if points:
        pts = " ".join(f"{x_at(i):.2f},{top + panel_h * (1 - p.failure_rate):.2f}" for i, p in enumerate(points))
        out.write(f'<polyline fill="none" stroke="#d62728" stroke-width="2" points="{pts}"/>\n')

    top = 2 * pad + panel_h
    peak = max([max(p.attacks.values(), default=0) for p in points] + [1])
    out.write(
        f'<text x="{pad - 6}" y="{top + 4:.2f}" font-family="sans-serif" font-size="10" text-anchor="end">{peak}</text>\n'
    )
    out.write(
        f'<text x="{pad - 6}" y="{top + panel_h + 4:.2f}" font-family="sans-serif" font-size="10" text-anchor="end">0</text>\n'
    )
    for k, rid in enumerate(replica_ids):
        colour = _PALETTE[k % len(_PALETTE)]
        if points:
            pts = " ".join(
                f"{x_at(i):.2f},{top + panel_h * (1 - p.attacks.get(rid, 0) / peak):.2f}" for i, p in enumerate(points)
            )
            out.write(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{pts}"/>\n')
        out.write(
            f'<text x="{w - pad + 4}" y="{top + 12 * (k + 1):.2f}" font-family="sans-serif" font-size="10" '
            f'fill="{colour}">replica {rid}</text>\n'
        )
    out.write("</svg>\n")
    return out.getvalue()


def emit_report(
    log_path: str | os.PathLike,
    out_dir: str | os.PathLike,
    *,
    window: int = 100,
    alarm_path: str | os.PathLike | None = None,
) -> dict[str, Path]:
    """Write ``summary.txt``, ``failure_rate.csv`` and ``chart.svg`` for a log."""
    log_path = Path(log_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records, corrupt = read_activity(log_path)
    alarm_path = Path(alarm_path) if alarm_path else log_path.with_name("alarms.log")
    alarms, _ = read_alarms(alarm_path)
    summary = summarize(records, corrupt, alarms)
    points = window_series(records, window)
    replica_ids = sorted(summary.replica_attacks)

    paths = {"summary": out / "summary.txt", "timeseries": out / "failure_rate.csv", "chart": out / "chart.svg"}
    paths["summary"].write_text(summary.render(), "utf-8")

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["window", "start", "end", "requests", "failure_rate", *[f"attacks_replica_{r}" for r in replica_ids]])
    for p in points:
        writer.writerow([p.index, p.start, p.end, p.requests, f"{p.failure_rate:.6f}", *[p.attacks.get(r, 0) for r in replica_ids]])
    paths["timeseries"].write_text(buf.getvalue(), "utf-8")
    paths["chart"].write_text(render_chart(points, replica_ids), "utf-8")
    return paths
