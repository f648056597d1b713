import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pqcside.provider import (
    DEFAULT_PROVIDER,
    Alg,
    CryptoTimings,
    MalformedInput,
    MalformedKey,
    OpClock,
    UnknownAlgorithm,
    get_suite,
    make_test_double,
    parse_ml_dsa_level,
)

P = DEFAULT_PROVIDER

# FIPS 203 / FIPS 204 / RFC 8032 / RFC 7748 sizes
EXPECTED_SIZES = {
    Alg.ML_KEM_768: (1184, 2400, 1088),
    Alg.ML_DSA_44: (1312, 32, 2420),
    Alg.ML_DSA_65: (1952, 32, 3309),
    Alg.ML_DSA_87: (2592, 32, 4627),
    Alg.ED25519: (32, 32, 64),
    Alg.X25519: (32, 32, 32),
}


@pytest.mark.parametrize("alg", list(EXPECTED_SIZES))
def test_sizes(alg):
    s = P.sizes(alg)
    assert (s.public_key, s.secret_key, s.output) == EXPECTED_SIZES[alg]


@pytest.mark.parametrize("alg", [Alg.ML_KEM_768, Alg.X25519])
def test_kem_round_trip(alg):
    kp = P.generate_kem_keypair(alg)
    ct, ss = P.encapsulate(kp.public_key, alg)
    assert len(ss) == 32
    assert len(ct) == P.sizes(alg).output
    assert P.decapsulate(kp.secret_key, ct, alg) == ss


@pytest.mark.parametrize("alg", [Alg.ML_KEM_768, Alg.X25519])
def test_kem_implicit_rejection(alg):
    kp = P.generate_kem_keypair(alg)
    ct, ss = P.encapsulate(kp.public_key, alg)
    bad = bytes([ct[0] ^ 1]) + ct[1:]
    other = P.decapsulate(kp.secret_key, bad, alg)
    assert len(other) == 32 and other != ss


def test_encapsulate_rejects_short_key():
    with pytest.raises(MalformedKey):
        P.encapsulate(b"\x00" * 10, Alg.ML_KEM_768)


def test_decapsulate_rejects_bad_length():
    kp = P.generate_kem_keypair(Alg.ML_KEM_768)
    with pytest.raises(MalformedInput):
        P.decapsulate(kp.secret_key, b"\x00" * 5, Alg.ML_KEM_768)


@pytest.mark.parametrize("alg", [Alg.ML_DSA_44, Alg.ML_DSA_65, Alg.ML_DSA_87, Alg.ED25519])
def test_sign_verify(alg):
    kp = P.generate_sig_keypair(alg)
    sig = P.sign(kp.secret_key, alg, b"message")
    assert len(sig) == P.sizes(alg).output
    assert P.verify(kp.public_key, alg, b"message", sig)
    assert not P.verify(kp.public_key, alg, b"messagf", sig)
    assert not P.verify(kp.public_key, alg, b"message", sig[:-1] + bytes([sig[-1] ^ 0x80]))


def test_verify_never_raises_on_garbage():
    kp = P.generate_sig_keypair(Alg.ML_DSA_65)
    assert P.verify(b"short", Alg.ML_DSA_65, b"m", b"sig") is False
    assert P.verify(kp.public_key, Alg.ML_DSA_65, b"m", b"") is False


def test_signature_sizes_increase_with_level():
    sizes = [P.sizes(a).output for a in (Alg.ML_DSA_44, Alg.ML_DSA_65, Alg.ML_DSA_87)]
    assert sizes == sorted(sizes) and len(set(sizes)) == 3


def test_unknown_algorithm():
    with pytest.raises(UnknownAlgorithm):
        Alg.parse("ML-KEM-1024")
    with pytest.raises(UnknownAlgorithm):
        P.generate_sig_keypair(Alg.TEST_SIG)


@pytest.mark.parametrize("text,alg", [("44", Alg.ML_DSA_44), (65, Alg.ML_DSA_65), ("ml-dsa-87", Alg.ML_DSA_87)])
def test_parse_level(text, alg):
    assert parse_ml_dsa_level(text) is alg


def test_parse_level_rejects_90():
    with pytest.raises(UnknownAlgorithm):
        parse_ml_dsa_level("90")


def test_suites():
    assert get_suite("pqc").kem_alg is Alg.ML_KEM_768
    assert get_suite("pqc").sig_alg is Alg.ML_DSA_65
    assert get_suite("classical").sig_alg is Alg.ED25519
    with pytest.raises(UnknownAlgorithm):
        get_suite("test-double")


def test_test_double_is_deterministic_and_not_benchmarkable():
    a, b = make_test_double(7), make_test_double(7)
    assert not a.benchmarkable
    ka, kb = a.generate_kem_keypair(Alg.TEST_KEM), b.generate_kem_keypair(Alg.TEST_KEM)
    assert ka == kb
    ct, ss = a.encapsulate(ka.public_key, Alg.TEST_KEM)
    assert a.decapsulate(ka.secret_key, ct, Alg.TEST_KEM) == ss
    sk = a.generate_sig_keypair(Alg.TEST_SIG)
    sig = a.sign(sk.secret_key, Alg.TEST_SIG, b"x")
    assert a.verify(sk.public_key, Alg.TEST_SIG, b"x", sig)
    assert not a.verify(sk.public_key, Alg.TEST_SIG, b"y", sig)


def test_keypair_repr_hides_secret():
    kp = P.generate_sig_keypair(Alg.ED25519)
    assert kp.secret_key.hex() not in repr(kp)


def test_op_clock_accumulates_by_category():
    clock = OpClock()
    with clock.measure("kem"):
        pass
    with clock.measure("verify"):
        sum(range(1000))
    t = clock.timings
    assert t.verify_ns > 0 and t.sign_ns == 0
    assert (t + CryptoTimings(1, 2, 3)).total_ns == t.total_ns + 6


@settings(max_examples=25, deadline=None)
@given(st.binary(max_size=2048))
def test_ed25519_signs_any_message(msg):
    kp = P.generate_sig_keypair(Alg.ED25519)
    assert P.verify(kp.public_key, Alg.ED25519, msg, P.sign(kp.secret_key, Alg.ED25519, msg))
