"""Time sources. All controller scheduling reads one of these."""

from __future__ import annotations

import threading
import time

# 2010-12-05 00:00:00 UTC; start of virtual time in deterministic runs
VIRTUAL_EPOCH_MS = 1_291_507_200_000


class WallClock:
    def now(self) -> float:
        return time.time()

    def perf(self) -> float:
        return time.perf_counter()


class VirtualClock:
    """Manually advanced clock with millisecond resolution."""

    def __init__(self, start_ms: int = VIRTUAL_EPOCH_MS):
        self._ms = int(start_ms)
        self._lock = threading.Lock()

    def now(self) -> float:
        return self._ms / 1000.0

    def perf(self) -> float:
        return self._ms / 1000.0

    @property
    def ms(self) -> int:
        return self._ms

    def advance(self, ms: int) -> None:
        if ms < 0:
            raise ValueError("virtual time cannot run backwards")
        with self._lock:
            self._ms += int(ms)

    def set_ms(self, ms: int) -> None:
        with self._lock:
            if ms < self._ms:
                raise ValueError(f"virtual time cannot run backwards ({ms} < {self._ms})")
            self._ms = int(ms)
