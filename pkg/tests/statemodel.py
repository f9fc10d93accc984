"""Brute-force reference for the per-replica trust state machine.

Written independently of ``cds.controller``: a plain fold over the alert
weights with the threshold rules spelled out by hand.
"""

from __future__ import annotations

import itertools

from cds.controller import HASH_MISMATCH, HEAL_FAILED, PAGE_MISSING, ControllerConfig, ReplicaTrust

from conftest import make_site

WEIGHTS = (1, 3, 5)
TC = 10


def oracle_states(seq, tc, confirmed):
    """State name after each alert. A crossing above ``tc`` resolves immediately."""
    level = 0
    out = []
    for w in seq:
        level += w
        if level > tc:
            level = 0 if confirmed else tc
        if level == 0:
            out.append(("trustworthy", level))
        elif level <= tc:
            out.append(("suspected", level))
        else:
            out.append(("corrupted", level))
    return out


def all_sequences(max_len=6, weights=WEIGHTS):
    for n in range(1, max_len + 1):
        yield from itertools.product(weights, repeat=n)


class TrustRig:
    """One live controller, reset between sequences."""

    def __init__(self, tmp_path):
        weights = {f"w{w}": float(w) for w in WEIGHTS}
        weights.update({HASH_MISMATCH: 3.0, PAGE_MISSING: 5.0, HEAL_FAILED: 5.0})
        cfg = ControllerConfig(tc=TC, alert_weights=weights)
        self.site = make_site(tmp_path, {f"/p{i}.html": f"page {i}".encode() for i in range(3)}, config=cfg)
        self.ctl = self.site.controller

    def _arrange(self, confirmed):
        rs = self.site.replicas
        for page in rs.golden.paths():
            golden = rs.golden.golden_bytes(page)[0]
            rs.page_file(1, page).write_bytes(b"tampered" if confirmed else golden)

    def run(self, seq, confirmed):
        ctl = self.ctl
        ctl.trust[1] = ReplicaTrust(1)
        ctl.replicas.handle(1).isolated = False
        ctl.probation.clear()
        ctl.crp_period_ms = ctl.config.crp_period_max_ms
        out = []
        for w in seq:
            self._arrange(confirmed)
            t = ctl.raise_alert(1, f"w{w}")
            out.append((t.state.value, t.alert_level))
        return out

    def mismatches(self, seq, confirmed):
        bad = []
        for seq_ in seq:
            if self.run(seq_, confirmed) != oracle_states(seq_, TC, confirmed):
                bad.append(seq_)
        return bad
