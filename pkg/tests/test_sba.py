import dataclasses
import http.client
import io
import json
import socket

import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import ProxyPair, handshake_configs, proxy_pair_configs
from pqcside.sba import (
    DISC_PATH,
    NF_TYPES,
    NFM_PREFIX,
    NfProfile,
    NrfService,
    SbiTransaction,
    TransactionSample,
    TransactionKind,
    build_default_plan,
    instance_id,
    run_nf_client,
    run_nrf,
    write_samples_csv,
)
from pqcside.transport import parse_address


@pytest.fixture
def nrf():
    handle = run_nrf()
    yield handle
    handle.close()


def request(address, method, path, body=None):
    host, port = parse_address(address)
    conn = http.client.HTTPConnection(host, port, timeout=5)
    conn.request(method, path, json.dumps(body) if body is not None else None)
    resp = conn.getresponse()
    data = resp.read()
    conn.close()
    return resp.status, (json.loads(data) if data else None)


def test_register_discover_heartbeat(nrf):
    nf_id = instance_id("AUSF")
    profile = {"nfInstanceId": nf_id, "nfType": "AUSF", "nfStatus": "REGISTERED"}
    assert request(nrf.address, "PUT", NFM_PREFIX + nf_id, profile)[0] == 201
    assert request(nrf.address, "PUT", NFM_PREFIX + nf_id, profile)[0] == 200
    status, body = request(nrf.address, "GET", DISC_PATH + "?target-nf-type=AUSF")
    assert status == 200 and [p["nfInstanceId"] for p in body["nfInstances"]] == [nf_id]
    status, body = request(nrf.address, "GET", DISC_PATH + "?target-nf-type=UDM")
    assert status == 200 and body["nfInstances"] == []
    assert request(nrf.address, "PATCH", NFM_PREFIX + nf_id, {"nfStatus": "SUSPENDED"})[0] == 204
    assert nrf.store.discover("AUSF")[0].status == "SUSPENDED"
    assert request(nrf.address, "PATCH", NFM_PREFIX + "unknown", {})[0] == 404


def test_bad_requests(nrf):
    nf_id = instance_id("AMF")
    assert request(nrf.address, "PUT", NFM_PREFIX + nf_id, {"nfType": "AMF"})[0] == 400
    other = {"nfInstanceId": instance_id("SMF"), "nfType": "SMF"}
    assert request(nrf.address, "PUT", NFM_PREFIX + nf_id, other)[0] == 400
    assert request(nrf.address, "DELETE", NFM_PREFIX + nf_id)[0] == 405
    assert request(nrf.address, "GET", "/elsewhere")[0] == 404


def test_instance_ids_are_stable_and_distinct():
    ids = [instance_id(r) for r in NF_TYPES]
    assert ids == [instance_id(r) for r in NF_TYPES] and len(set(ids)) == len(ids)


@given(st.sampled_from(NF_TYPES), st.sampled_from(["REGISTERED", "SUSPENDED"]))
def test_profile_round_trip(role, status):
    p = NfProfile(instance_id(role), role, status)
    assert NfProfile.from_json(p.to_json()) == p


@pytest.mark.parametrize("n", [1, 2, 7])
def test_default_plan(n):
    plan = build_default_plan("AMF", n)
    assert len(plan) == n and plan[0].kind is TransactionKind.REGISTER
    assert [t.kind for t in plan[1:3]] == [TransactionKind.HEARTBEAT, TransactionKind.DISCOVER][: n - 1]
    with pytest.raises(ValueError):
        build_default_plan("AMF", 0)


@pytest.mark.parametrize("policy", ["pooled", "per_transaction"])
def test_nf_client_against_nrf(nrf, policy):
    plan = build_default_plan("SMF", 6)
    samples = run_nf_client("SMF", nrf.address, plan, session_policy=policy, id_prefix="x-")
    assert [s.transaction_id for s in samples] == [f"x-{i:04d}" for i in range(6)]
    assert all(s.success and s.l_sbi_us > 0 for s in samples)
    assert [s.status for s in samples[:3]] == [201, 204, 200]
    assert len(nrf.store) == 1


def test_nrf_down_records_failures():
    holder = socket.socket()
    holder.bind(("127.0.0.1", 0))
    address = "127.0.0.1:%d" % holder.getsockname()[1]
    holder.close()
    samples = run_nf_client("AMF", address, build_default_plan("AMF", 3), timeout_ms=500)
    assert len(samples) == 3 and not any(s.success for s in samples)
    assert all(s.l_sbi_us is None for s in samples)


def test_secure_native_nrf():
    client, server = handshake_configs("classical")
    handle = run_nrf(secure=server)
    try:
        samples = run_nf_client("AMF", handle.address, build_default_plan("AMF", 4), secure=client,
                                session_policy="per_transaction")
        assert all(s.success for s in samples)
    finally:
        handle.close()


def test_proxied_responses_match_direct(creds):
    """An NF sees the same NRF bodies whether or not sidecars are in the path."""
    plan = build_default_plan("UDM", 5)
    direct = run_nrf()
    try:
        direct_samples = run_nf_client("UDM", direct.address, plan)
    finally:
        direct.close()
    server, client = proxy_pair_configs(creds["pqc"], "pqc", "127.0.0.1:1")
    with ProxyPair(server, client, NrfService()) as pair:
        proxied_samples = run_nf_client("UDM", pair.address, plan)
        assert len(pair.upstream.store) == 1
    assert [s.status for s in direct_samples] == [s.status for s in proxied_samples]


def test_transaction_header_and_samples_csv():
    txn = SbiTransaction.discover("AMF")
    raw = txn.to_request("127.0.0.1:1", "abc")
    assert b"X-Transaction-Id: abc\r\n" in raw and b"target-nf-type=AUSF" in raw
    buf = io.StringIO()
    write_samples_csv([TransactionSample("a", "AMF", "Register", 12, True),
                       TransactionSample("b", "AMF", "Discover", None, False)], buf)
    assert buf.getvalue() == "transaction_id,nf_role,kind,l_sbi_us,success\na,AMF,Register,12,1\nb,AMF,Discover,,0\n"


def test_secure_client_config_is_checked():
    client, _ = handshake_configs("pqc")
    bad = dataclasses.replace(client, trust_root=None)
    nrf_handle = run_nrf()
    try:
        samples = run_nf_client("AMF", nrf_handle.address, build_default_plan("AMF", 1), secure=bad)
        assert not samples[0].success
    finally:
        nrf_handle.close()
