"""Acceptance criteria for the content server.

Each test checks one criterion at its stated tolerance and records a
PASS/FAIL line that is printed at the end of the pytest run. Expected values
come from independent oracles: ``hashlib`` for MD5, the ``cryptography``
package for AES, and brute-force reference models.
"""

import hashlib
import random
import re
import time
from fractions import Fraction

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from cds.analyzer import Tier, rank_correlation, spearman_standard, to_ranks
from cds.cli import main
from cds.controller import ReplicaCheck, VerdictTrace, assess_failure_rate, tier_for_rate
from cds.crypto import AesKey128, aes128_decrypt_block, aes128_encrypt_block, md5_digest
from cds.gateway import find_overlaps
from cds.harness import HARNESS_KEY, Scenario, bundled_scenarios, random_single_replica_scenario, run_scenario
from cds.hashstore import HashStore

from criteria import criterion
from statemodel import TC, TrustRig, all_sequences, oracle_states

TH_LOW, TH_HIGH = 0.05, 0.20


def oracle_ecb(key: bytes, block: bytes, decrypt: bool = False) -> bytes:
    c = Cipher(algorithms.AES(key), modes.ECB())
    ctx = c.decryptor() if decrypt else c.encryptor()
    return ctx.update(block) + ctx.finalize()


def stored_digests(store_path) -> dict[tuple[str, int], bytes]:
    """Decrypt every store record with the reference AES."""
    store = HashStore.open(store_path)
    return {
        (rec.page_path, rec.replica_id): oracle_ecb(HARNESS_KEY.key, bytes(rec.cipher_digest), decrypt=True)
        for rec in store.records()
    }


def test_integrity_under_single_replica_corruption(tmp_path):
    with criterion("integrity: 200 random single-replica scenarios, all 200 bodies verified, < 60 s") as notes:
        started = time.perf_counter()
        served = 0
        unverified = []
        for seed in range(200):
            sc = random_single_replica_scenario(seed)
            workdir = tmp_path / str(seed)
            r = run_scenario(sc, workdir=workdir)
            expected = stored_digests(workdir / "store.cdsh")
            for ex in r.exchanges:
                if ex.status != 200:
                    continue
                served += 1
                if hashlib.md5(ex.body).digest() != expected[(ex.verdict.page_path, 1)]:
                    unverified.append((seed, ex.target))
        elapsed = time.perf_counter() - started
        notes.append(f"{served} responses verified")
        assert served > 0
        assert unverified == [], f"unverified bodies: {unverified[:5]}"
        assert elapsed < 60, f"took {elapsed:.1f}s"


TOTAL_CORRUPTION = """\
seed 17
page /index.html 4096
page /news.html text breaking news
0   corrupt 1 /index.html flip
0   corrupt 2 /index.html truncate
0   corrupt 3 /index.html append
10  request /index.html
"""


def test_total_corruption_recovery(tmp_path):
    with criterion("total corruption: one REBOOT, correct 200, row FALSE FALSE FALSE 100 REBOOT"):
        r = run_scenario(Scenario.parse(TOTAL_CORRUPTION, "total"), workdir=tmp_path)
        reboot_actions = [v for v in r.trace.verdicts if v.action == "REBOOT"]
        assert len(reboot_actions) == 1, f"{len(reboot_actions)} REBOOT actions"
        (ex,) = r.exchanges
        assert ex.status == 200
        expected = stored_digests(tmp_path / "store.cdsh")[("/index.html", 1)]
        assert hashlib.md5(ex.body).digest() == expected
        (row,) = r.activity_log.splitlines()
        cols = row.split("\t")
        assert cols[12:] == ["FALSE", "FALSE", "FALSE", "100", "REBOOT"], cols[12:]
        assert cols[7] == "TRUE" and cols[8] == "1,2,3"


RFC1321 = {
    b"": "d41d8cd98f00b204e9800998ecf8427e",
    b"a": "0cc175b9c0f1b6a831c399e269772661",
    b"abc": "900150983cd24fb0d6963f7d28e17f72",
    b"message digest": "f96b697d7cb7938d525a2f31aaf161d0",
    b"abcdefghijklmnopqrstuvwxyz": "c3fcd3d76192e4007dfb496cca67e13b",
    b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789": "d174ab98d277d9f5a5611c2c9f419d9f",
    b"1234567890" * 8: "57edf4a22be3c955ac49da2e2107b67a",
}


def test_crypto_conformance():
    with criterion("crypto: RFC 1321 suite + 10,000 MD5 oracle checks, FIPS-197 + 1,000 AES round trips, < 30 s") as notes:
        started = time.perf_counter()
        for msg, want in RFC1321.items():
            assert md5_digest(msg).hex() == want, msg
        rng = random.Random(1321)
        md5_bad = 0
        for _ in range(10_000):
            msg = rng.randbytes(rng.randrange(0, 1024))
            md5_bad += md5_digest(msg) != hashlib.md5(msg).digest()
        assert md5_bad == 0, f"{md5_bad} MD5 mismatches"

        fips = AesKey128.fromhex("000102030405060708090a0b0c0d0e0f")
        pt = bytes.fromhex("00112233445566778899aabbccddeeff")
        assert aes128_encrypt_block(pt, fips).hex() == "69c4e0d86a7b0430d8cdb78070b4c55a"
        aes_bad = 0
        for _ in range(1_000):
            key, block = rng.randbytes(16), rng.randbytes(16)
            ct = aes128_encrypt_block(block, key)
            aes_bad += ct != oracle_ecb(key, block)
            aes_bad += aes128_decrypt_block(ct, key) != block
        assert aes_bad == 0, f"{aes_bad} AES mismatches"
        elapsed = time.perf_counter() - started
        notes.append("0 mismatches")
        assert elapsed < 30, f"took {elapsed:.1f}s"


def test_state_machine_equivalence(tmp_path):
    with criterion("state machine: all alert sequences of length <= 6 over {1,3,5}, TC=10, match the oracle") as notes:
        rig = TrustRig(tmp_path)
        seqs = list(all_sequences(6))
        assert len(seqs) == 3 + 9 + 27 + 81 + 243 + 729
        bad = []
        for confirmed in (True, False):
            for seq in seqs:
                if rig.run(seq, confirmed) != oracle_states(seq, TC, confirmed):
                    bad.append((confirmed, seq))
        notes.append(f"{2 * len(seqs)} sequences, both vote outcomes")
        assert bad == [], f"{len(bad)} diverging sequences, first {bad[:3]}"


def _oracle_tier(hundredths: int) -> Tier:
    # integer comparison avoids any floating-point boundary question
    if hundredths < 5:
        return Tier.LOG_ONLY
    if hundredths <= 20:
        return Tier.BEEP
    return Tier.HIGH_BEEP


def test_alarm_tier_partition():
    with criterion("alarm tiers: rates 0.00..1.00 each map to exactly one tier, boundaries in the beep band"):
        ok_verdict = VerdictTrace("/p", [ReplicaCheck(1, True)], 1, [], 0.0)
        bad_verdict = VerdictTrace("/p", [ReplicaCheck(1, False, "hash-mismatch"), ReplicaCheck(2, True)], 2, [1], 0.0)
        for k in range(101):
            rate = k / 100
            tiers = [t for t in Tier if tier_for_rate(rate, TH_LOW, TH_HIGH) is t]
            assert len(tiers) == 1, rate
            assert tiers[0] is _oracle_tier(k), f"rate {rate}: {tiers[0]} != {_oracle_tier(k)}"
            report = assess_failure_rate([bad_verdict] * k + [ok_verdict] * (100 - k), TH_LOW, TH_HIGH)
            assert report.tier is _oracle_tier(k), f"window with {k} failures"
        assert tier_for_rate(0.05, TH_LOW, TH_HIGH) is Tier.BEEP
        assert tier_for_rate(0.20, TH_LOW, TH_HIGH) is Tier.BEEP


def _brute_rank(a, b, factor):
    n = len(a)
    return 1 - Fraction(factor * sum((x - y) ** 2 for x, y in zip(a, b)), n * (n * n - 1))


def test_rank_correlation():
    with criterion("rank correlation: published table r = 1; reversed 2/3 (published formula) and -1 (standard)"):
        delay, speed = [45, 93, 102], [13, 27, 31]
        ra, rb = to_ranks(delay), to_ranks(speed)
        assert rank_correlation(ra, rb) == 1.0
        rev = [3, 2, 1]
        assert _brute_rank([1, 2, 3], rev, 1) == Fraction(2, 3)
        assert _brute_rank([1, 2, 3], rev, 6) == -1
        assert rank_correlation([1, 2, 3], rev) == float(Fraction(2, 3))
        assert spearman_standard([1, 2, 3], rev) == -1.0


def test_exclusivity_over_scenario_suite():
    with criterion("exclusivity: zero controller/transmission overlap across the scenario suite") as notes:
        suite = bundled_scenarios() + [random_single_replica_scenario(1000 + i) for i in range(20)]
        events = 0
        for sc in suite:
            r = run_scenario(sc)
            assert r.gate_events, f"{sc.name}: no gate trace captured"
            events += len(r.gate_events)
            overlaps = find_overlaps(r.gate_events)
            assert overlaps == [], f"{sc.name}: overlaps at {overlaps}"
        notes.append(f"{len(suite)} scenarios, {events} gate events")


def test_crp_convergence():
    with criterion("CRP convergence: 10 idle-time corruptions, one scan, 0 mismatches, 10 heal records"):
        sc = next(s for s in bundled_scenarios() if s.name == "crp_idle")
        damage = [e for e in sc.events if e.kind in ("corrupt", "delete")]
        assert len(damage) == 10 and len({e.replica_id for e in damage}) > 1
        r = run_scenario(sc)
        assert len(r.trace.scans) == 1, f"{len(r.trace.scans)} scans"
        assert r.trace.scans[0].reason == "idle"
        assert r.remaining_mismatches == 0
        assert len(r.trace.heals) == 10, f"{len(r.trace.heals)} heals"
        assert r.trace.scans[0].healed == 10


def test_latency_honesty(tmp_path, capsys):
    with criterion("latency: cds bench on 5 pages of 2-6 MB, finite per-page overhead, < 5 min") as notes:
        rng = random.Random(2010)
        names = []
        for i, mb in enumerate((2, 3, 4, 5, 6), start=1):
            name = f"page{i}.bin"
            (tmp_path / name).write_bytes(rng.randbytes(mb * 1_000_000))
            names.append(name)
        (tmp_path / "pages.txt").write_text("\n".join(names) + "\n")
        started = time.perf_counter()
        assert main(["bench", "--pages", str(tmp_path / "pages.txt"), "--reps", "20"]) == 0
        elapsed = time.perf_counter() - started
        out = capsys.readouterr().out
        lines = out.splitlines()
        assert "overhead (ms)" in lines[0]
        rows = lines[2:]
        assert len(rows) == 5
        overheads = []
        for row, name in zip(rows, names):
            cols = row.split()
            assert cols[1] == name
            assert 2.0 <= float(cols[2]) <= 6.0
            value = float(cols[-1])
            assert value == value and abs(value) != float("inf")
            overheads.append(value)
        notes.append("overhead ms " + ", ".join(f"{v:.1f}" for v in overheads))
        assert elapsed < 300, f"took {elapsed:.1f}s"
        assert re.match(r"\s*No\s+Page", lines[0])
