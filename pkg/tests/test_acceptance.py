"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v`` (lines appear in the
"acceptance criteria" section of the terminal summary) or directly with
``python tests/test_acceptance.py``.
"""

import csv
import dataclasses
import http.client
import json
import math
import random
import sys
import time
from collections import defaultdict
from contextlib import contextmanager
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))
sys.path.insert(0, str(Path(__file__).parent / "oracles"))

import order_stats_oracle  # noqa: E402
from conftest import ACCEPTANCE_LINES  # noqa: E402
from helpers import (  # noqa: E402
    EchoServer,
    HttpEchoServer,
    ProxyPair,
    http_post,
    make_credentials,
    proxy_pair_configs,
    raw_round_trip,
    record_handshake,
    tamper_rejected,
    write_config,
)
from pqcside import handshake as hs  # noqa: E402
from pqcside.certs import FailureReason, generate_credentials, validate_chain  # noqa: E402
from pqcside.harness import RAW_BREAKDOWNS, RAW_SAMPLES, ScenarioSpec, load_report, run_benchmark  # noqa: E402
from pqcside.provider import DEFAULT_PROVIDER, Alg  # noqa: E402
from pqcside.proxy import ProxyConfig  # noqa: E402
from pqcside.stats import summarize, t_quantile  # noqa: E402
from pqcside.transport import parse_address  # noqa: E402

FAR_FUTURE = 4_000_000_000
HONEST_RUNS = 200
PAYLOADS = 1000
MAX_PAYLOAD = 64 * 1024
CREDENTIAL_KEYS = {"suite", "chain_file", "key_file", "trust_root_file"}


class Outcome:
    def __init__(self) -> None:
        self.details: list[str] = []
        self.started = time.monotonic()

    def note(self, text: str) -> None:
        self.details.append(text)

    @property
    def elapsed(self) -> float:
        return time.monotonic() - self.started


@contextmanager
def criterion(number: int, title: str):
    """Record a PASS/FAIL line for ``number`` whatever the body does."""
    out = Outcome()
    try:
        yield out
    except BaseException as exc:
        reason = f"{type(exc).__name__}: {exc}".splitlines()[0][:300]
        _emit(number, False, title, out.details + [reason], out.elapsed)
        raise
    _emit(number, True, title, out.details, out.elapsed)


def _emit(number: int, ok: bool, title: str, details: list[str], elapsed: float) -> None:
    line = f"criterion {number} {'PASS' if ok else 'FAIL'} {title}: {'; '.join(details)} [{elapsed:.1f} s]"
    ACCEPTANCE_LINES.append(line)
    print(line)


def read_rows(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --- proxy configs on disk ---------------------------------------------------------


@pytest.fixture(scope="module")
def config_files(tmp_path_factory, creds):
    """Server/client proxy config files for every tunnel mode."""
    out = tmp_path_factory.mktemp("configs")
    files = {}
    variants = {
        "passthrough-raw": (None, False),
        "classical-raw": ("classical", False),
        "pqc-raw": ("pqc", False),
        "classical-http": ("classical", True),
        "pqc-http": ("pqc", True),
    }
    for name, (suite, http_aware) in variants.items():
        server, client = proxy_pair_configs(creds.get(suite), suite, "127.0.0.1:9", http_aware=http_aware,
                                            session_policy="per_transaction")
        files[name] = (write_config(out / f"{name}-server.json", server),
                       write_config(out / f"{name}-client.json", client))
    return files


def load_pair(paths) -> tuple[ProxyConfig, ProxyConfig]:
    return ProxyConfig.from_file(paths[0]), ProxyConfig.from_file(paths[1])


# --- criterion 1 -------------------------------------------------------------------


def check_handshake_security(paths, foreign_root: Path, out: Outcome) -> None:
    server_cfg, client_cfg = load_pair(paths)
    shs, chs = server_cfg.handshake_config(), client_cfg.handshake_config()
    suite = server_cfg.suite

    for _ in range(HONEST_RUNS):
        cs, ss, _ = hs.run_in_memory(chs, shs)
        assert cs.phase is ss.phase is hs.Phase.ESTABLISHED
        assert cs.keys == ss.keys, "honest handshake disagreed on session keys"

    rec = record_handshake(chs, shs)
    flips = missed = 0
    for index, frame in enumerate(rec.frames):
        for bit in range(len(frame) * 8):
            flips += 1
            if not tamper_rejected(rec, index, bit):
                missed += 1
    assert missed == 0, f"{missed} of {flips} single-bit tampers went undetected ({suite})"

    foreign = dataclasses.replace(client_cfg, trust_root_file=str(foreign_root))
    cs, ch = hs.client_start(foreign.handshake_config())
    _, sh = hs.server_respond(shs, ch)
    with pytest.raises(hs.ChainInvalid, match=FailureReason.UNTRUSTED_ROOT.value):
        hs.client_key_exchange(cs, sh)

    cs, ch = hs.client_start(dataclasses.replace(chs, now=FAR_FUTURE))
    _, sh = hs.server_respond(shs, ch)
    with pytest.raises(hs.ChainInvalid, match=FailureReason.EXPIRED.value):
        hs.client_key_exchange(cs, sh)
    assert validate_chain(shs.local_chain, chs.trust_root, FAR_FUTURE).failure_reason is FailureReason.EXPIRED

    out.note(f"{suite}: {HONEST_RUNS} honest agree, {flips}/{flips} bit flips rejected, untrusted root and "
             f"expired rejected")


@pytest.fixture(scope="module")
def foreign_root(tmp_path_factory):
    return make_credentials(tmp_path_factory.mktemp("foreign"), "pqc") / "root.cert"


def test_criterion_1_handshake_security(config_files, foreign_root):
    with criterion(1, "handshake security suite") as out:
        for suite in ("classical", "pqc"):
            check_handshake_security(config_files[f"{suite}-raw"], foreign_root, out)
        assert out.elapsed < 300, f"took {out.elapsed:.0f} s, budget 300 s"


# --- criterion 2 -------------------------------------------------------------------


def random_payloads(seed: int) -> list[bytes]:
    rng = random.Random(seed)
    sizes = [0, 1, MAX_PAYLOAD] + [rng.randint(0, MAX_PAYLOAD) for _ in range(PAYLOADS - 3)]
    return [rng.randbytes(n) for n in sizes]


def check_fidelity(paths, payloads: list[bytes]) -> int:
    server_cfg, client_cfg = load_pair(paths)
    upstream = HttpEchoServer() if server_cfg.http_aware else EchoServer()
    bad = 0
    with ProxyPair(server_cfg, client_cfg, upstream) as pair:
        if server_cfg.http_aware:
            host, port = parse_address(pair.address)
            conn = http.client.HTTPConnection(host, port, timeout=30)
            for i, p in enumerate(payloads):
                bad += http_post(conn, p, f"fid-{i}") != (200, p)
            conn.close()
        else:
            for p in payloads:
                bad += raw_round_trip(pair.address, p) != p
        csnap, ssnap = pair.snapshots()
    if server_cfg.mode == "secure" and server_cfg.session_policy == "per_transaction":
        assert csnap["handshakes_performed"] == len(payloads)
    return bad


def check_tamper_closes(paths) -> int:
    """Flip one bit inside the first record at several offsets; each must
    trip the server's record check and end the tunnel without delivery."""
    server_cfg, client_cfg = load_pair(paths)
    ch, _, ck, _ = record_handshake(client_cfg.handshake_config(), server_cfg.handshake_config()).frames
    start = len(ch) + len(ck)
    payload = b"t" * 100
    offsets = [start + 4, start + 40]
    if not server_cfg.http_aware:
        offsets.append(start + 4 + len(payload) + 15)  # last tag byte
    for offset in offsets:
        upstream = HttpEchoServer() if server_cfg.http_aware else EchoServer()
        with ProxyPair(server_cfg, client_cfg, upstream, flip_c2s_at=offset) as pair:
            try:
                if server_cfg.http_aware:
                    host, port = parse_address(pair.address)
                    conn = http.client.HTTPConnection(host, port, timeout=10)
                    try:
                        got = http_post(conn, payload)
                    finally:
                        conn.close()
                else:
                    got = raw_round_trip(pair.address, payload)
            except (ConnectionError, http.client.HTTPException):
                got = None
            _, ssnap = pair.settled(lambda c, s: s["auth_failures"] and s["tunnels_closed"] == s["tunnels_opened"])
        assert got != payload and got != (200, payload), f"tampered record at {offset} was delivered"
        assert ssnap["auth_failures"] == 1, f"offset {offset}: auth_failures={ssnap['auth_failures']}"
        assert ssnap["tunnels_closed"] == ssnap["tunnels_opened"], "tunnel left open after tamper"
    return len(offsets)


FIDELITY_MODES = ("passthrough-raw", "classical-raw", "pqc-raw", "pqc-http")


def check_tunnel_fidelity(config_files, modes, out: Outcome) -> None:
    for i, mode in enumerate(modes):
        bad = check_fidelity(config_files[mode], random_payloads(i))
        assert bad == 0, f"{mode}: {bad} of {PAYLOADS} payloads altered"
        note = f"{mode} {PAYLOADS}/{PAYLOADS} identical"
        if not mode.startswith("passthrough"):
            note += f", {check_tamper_closes(config_files[mode])} tampers closed"
        out.note(note)


def test_criterion_2_tunnel_fidelity(config_files):
    with criterion(2, "tunnel fidelity") as out:
        check_tunnel_fidelity(config_files, FIDELITY_MODES, out)
        assert out.elapsed < 120, f"took {out.elapsed:.0f} s, budget 120 s"


# --- criterion 3 -------------------------------------------------------------------


@pytest.fixture(scope="module")
def ordering_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("ordering")
    common = dict(repetitions=10, transactions=50, warmup=5, nf_roles=("AMF",), session_policy="per_transaction")
    specs = [ScenarioSpec("native-plain", **common), ScenarioSpec("sidecar-classical", **common),
             ScenarioSpec("sidecar-pqc", **common)]
    return out, run_benchmark(specs, out)


def test_criterion_3_scenario_ordering(ordering_run):
    with criterion(3, "scenario ordering") as out:
        _, report = ordering_run
        scen = report.summary["scenarios"]
        order = ["native-plain", "sidecar-classical", "sidecar-pqc-ca65"]
        for name in order:
            assert scen[name]["failed_samples"] == 0, f"{name} had failed transactions"
        med = [scen[n]["l_sbi"]["all"]["median"] for n in order]
        runs = [scen[n]["run_medians"]["stats"] for n in order]
        out.note("median L_SBI " + " < ".join(f"{n} {m:.3f} ms" for n, m in zip(order, med)))
        out.note("run-median IQRs " + ", ".join(f"[{r['q1']:.3f}, {r['q3']:.3f}]" for r in runs))
        for lo, hi, a, b in zip(order, order[1:], med, med[1:]):
            assert b - a > 0, f"median {hi} ({b}) not above {lo} ({a})"
        for lo, hi, a, b in zip(order, order[1:], runs, runs[1:]):
            assert b["q1"] > a["q3"], f"IQR of {hi} {[b['q1'], b['q3']]} overlaps {lo} {[a['q1'], a['q3']]}"


# --- criterion 4 -------------------------------------------------------------------


def test_criterion_4_ca_level_monotonicity():
    with criterion(4, "CA-level monotonicity") as out:
        medians, sig_sizes = [], []
        for level in (Alg.ML_DSA_44, Alg.ML_DSA_65, Alg.ML_DSA_87):
            creds = generate_credentials(["nrf"], ca_alg=level, entity_alg=Alg.ML_DSA_65)
            chain = creds.entities["nrf"][1]
            durations = []
            for _ in range(1000):
                r = validate_chain(chain, creds.root)
                assert r.accepted
                durations.append(r.verify_ns)
            medians.append(summarize(durations).median / 1000)
            sig_sizes.append(len(chain.entity.issuer_signature))
            assert len(chain.entity.issuer_signature) == DEFAULT_PROVIDER.sizes(level).output
        out.note("median verify " + " <= ".join(f"{m:.1f} us" for m in medians))
        out.note("signature bytes " + " < ".join(map(str, sig_sizes)))
        assert medians[0] <= medians[1] <= medians[2], "verify medians not monotone"
        assert sig_sizes[0] < sig_sizes[1] < sig_sizes[2], "signature sizes not strictly increasing"
        assert out.elapsed < 180, f"took {out.elapsed:.0f} s, budget 180 s"


# --- criterion 5 -------------------------------------------------------------------

# frozen from tests/oracles/t_quantile_oracle.py
T_ORACLE = {(0.975, 29): 2.0452296421, (0.975, 1): 12.7062047362}


def test_criterion_5_statistics_oracle():
    with criterion(5, "statistics oracle equivalence") as out:
        rng = random.Random(20251015)
        worst = 0.0
        for _ in range(10_000):
            n = rng.randint(1, 500)
            xs = [rng.lognormvariate(1.5, 0.6) for _ in range(n)]
            got = summarize(xs).as_dict()
            for key, want in order_stats_oracle.summary(xs).items():
                if want is None:
                    assert got[key] is None, key
                    continue
                err = abs(got[key] - want)
                worst = max(worst, err)
                assert err <= 1e-9, f"{key} differs by {err:g} (n={n})"
        t29, t1 = t_quantile(0.975, 29), t_quantile(0.975, 1)
        out.note(f"10000 samples, worst deviation {worst:.2e}")
        out.note(f"t(0.975,29)={t29:.6f}, t(0.975,1)={t1:.5f}")
        assert math.isclose(t29, T_ORACLE[(0.975, 29)], abs_tol=1e-3)
        assert math.isclose(t1, T_ORACLE[(0.975, 1)], abs_tol=1e-2)


# --- criteria 6 and 7 --------------------------------------------------------------


@pytest.fixture(scope="module")
def methodology_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("methodology")
    common = dict(repetitions=30, transactions=100, warmup=5, nf_roles=("AMF",))
    specs = [ScenarioSpec("native-classical", **common), ScenarioSpec("sidecar-classical", **common),
             ScenarioSpec("sidecar-pqc", **common)]
    t0 = time.monotonic()
    report = run_benchmark(specs, out)
    return out, report, time.monotonic() - t0


def test_criterion_6_methodology_shape(methodology_run):
    from pqcside.harness import emit_report

    with criterion(6, "methodology shape") as out:
        path, report, elapsed = methodology_run
        emit_report(report, path)
        measured = [r for r in read_rows(path / RAW_SAMPLES) if r["warmup"] == "0"]
        out.note(f"{len(measured)} measured samples in {elapsed:.0f} s")
        assert len(measured) == 9000
        again = load_report(path).summary_json()
        assert again == (path / "summary.json").read_text(), "re-aggregated summary.json differs"
        out.note("summary.json reproduced byte for byte")
        assert elapsed < 1800, f"run took {elapsed:.0f} s, budget 1800 s"


def test_criterion_7_timing_nesting(methodology_run, ordering_run):
    with criterion(7, "timing nesting") as out:
        checked = nested = covered = 0
        for path in (methodology_run[0], ordering_run[0]):
            samples = {r["transaction_id"]: r for r in read_rows(path / RAW_SAMPLES)}
            sides = defaultdict(dict)
            for b in read_rows(path / RAW_BREAKDOWNS):
                sides[b["transaction_id"]][b["side"]] = b
                crypto = int(b["t_enc_us"]) + int(b["t_sig_us"]) + int(b["t_ver_us"])
                assert int(b["delta_t_us"]) >= crypto, f"{b['transaction_id']} {b['side']}: delta_t < crypto"
                covered += 1
            for tid, s in samples.items():
                if not s["scenario"].startswith("sidecar"):
                    continue
                assert s["success"] == "1", f"{tid} failed"
                pair = sides.get(tid, {})
                assert set(pair) == {"client", "server"}, f"{tid} lacks a proxy breakdown"
                checked += 1
                l_cli, l_srv = int(pair["client"]["delta_t_us"]), int(pair["server"]["delta_t_us"])
                if l_cli + l_srv <= int(s["l_sbi_us"]):
                    nested += 1
        out.note(f"L_Cli + L_Srv <= L_SBI in {nested}/{checked} transactions")
        out.note(f"delta_t >= crypto in {covered}/{covered} breakdowns")
        assert checked > 0 and nested == checked


# --- criterion 8 -------------------------------------------------------------------


def test_criterion_8_crypto_agility(config_files, foreign_root):
    with criterion(8, "crypto-agility") as out:
        for mode in ("raw", "http"):
            for side in (0, 1):
                a = json.loads(config_files[f"classical-{mode}"][side].read_text())
                b = json.loads(config_files[f"pqc-{mode}"][side].read_text())
                changed = {k for k in a.keys() | b.keys() if a.get(k) != b.get(k)}
                assert changed <= CREDENTIAL_KEYS, f"switching suites also changed {sorted(changed - CREDENTIAL_KEYS)}"
                assert "suite" in changed
        out.note("classical and pqc configs differ only in " + ", ".join(sorted(CREDENTIAL_KEYS)))
        # criteria 1 and 2 again, with the secure scenario switched to the other suite by config alone
        for suite in ("pqc", "classical"):
            check_handshake_security(config_files[f"{suite}-raw"], foreign_root, out)
        swapped = ("passthrough-raw", "pqc-raw", "classical-raw", "classical-http")
        check_tunnel_fidelity(config_files, swapped, out)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-p", "no:cacheprovider"]))
