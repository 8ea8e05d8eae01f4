import ipaddress
import os
import stat
import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hstm.anonymizer import (
    AnonKey,
    AnonTable,
    Anonymizer,
    CryptoPan,
    InsufficientMemoryError,
    KeyFormatError,
    KeyMismatchError,
    TableCoverageError,
    TableFormatError,
    TableMissingError,
    anonymize,
    anonymize_block,
    generate_table,
    load_table,
    save_table,
    table_size_bytes,
    write_table,
)
from oracles import BitWalkCryptoPan, common_prefix
from conftest import SAMPLE_KEY

# (input, output) pairs from the sample trace distributed with the original
# CryptoPAn tool, anonymized under SAMPLE_KEY
SAMPLE_TRACE = [
    ("128.11.68.132", "135.242.180.132"), ("129.118.74.4", "134.136.186.123"),
    ("130.132.252.244", "133.68.164.234"), ("141.223.7.43", "141.167.8.160"),
    ("141.233.145.108", "141.129.237.235"), ("152.163.225.39", "151.140.114.167"),
    ("156.29.3.236", "147.225.12.42"), ("165.247.96.84", "162.9.99.234"),
    ("166.107.77.190", "160.132.178.185"), ("192.102.249.13", "252.138.62.131"),
    ("192.215.32.125", "252.43.47.189"), ("192.233.80.103", "252.25.108.8"),
    ("192.41.57.43", "252.222.221.184"), ("193.150.244.223", "253.169.52.216"),
    ("195.205.63.100", "255.186.223.5"), ("198.200.171.101", "249.199.68.213"),
    ("198.26.132.101", "249.36.123.202"), ("198.36.213.5", "249.7.21.132"),
    ("198.51.77.238", "249.18.186.254"), ("199.217.79.101", "248.38.184.213"),
    ("202.49.198.20", "245.206.7.234"), ("203.12.160.252", "244.248.163.4"),
    ("204.184.162.189", "243.192.77.90"), ("204.202.136.230", "243.178.4.198"),
    ("204.29.20.4", "243.33.20.123"), ("205.178.38.67", "242.108.198.51"),
    ("207.105.49.5", "241.118.205.138"), ("207.135.65.238", "241.202.129.222"),
    ("208.147.89.59", "227.237.98.191"), ("209.12.231.7", "226.243.167.8"),
]


def ip(s):
    return int(ipaddress.IPv4Address(s))


@pytest.mark.parametrize("prefix_bits", [0, 20])
def test_sample_trace_vectors(sample_key, prefix_bits):
    cp = CryptoPan(sample_key, prefix_bits)
    raw = np.array([ip(a) for a, _ in SAMPLE_TRACE], dtype=np.uint32)
    want = [ip(b) for _, b in SAMPLE_TRACE]
    assert cp(raw).tolist() == want
    assert [cp.anonymize(int(a)) for a in raw] == want


def test_bit_walk_oracle_agrees_on_sample_trace():
    oracle = BitWalkCryptoPan(SAMPLE_KEY)
    for a, b in SAMPLE_TRACE:
        assert oracle(ip(a)) == ip(b)


@pytest.mark.parametrize("prefix_bits", [0, 1, 2, 8, 16, 20, 24])
def test_matches_bit_walk_oracle(key, rng, prefix_bits):
    oracle = BitWalkCryptoPan(key.material)
    addrs = rng.integers(0, 1 << 32, 300, dtype=np.uint32)
    addrs[:4] = [0, 1, 0xFFFFFFFF, 0x80000000]
    got = CryptoPan(key, prefix_bits)(addrs)
    assert got.tolist() == [oracle(int(a)) for a in addrs]


def test_deterministic(key):
    a = ip("203.0.113.9")
    assert anonymize(key, a) == anonymize(key, a)


def test_shared_30_bit_prefix(key):
    a, b = ip("10.0.0.1"), ip("10.0.0.2")
    assert common_prefix(a, b) == 30
    assert common_prefix(anonymize(key, a), anonymize(key, b)) == 30


def test_prefix_preservation_random_pairs(key, rng):
    n = 100_000
    a = rng.integers(0, 1 << 32, n, dtype=np.uint32)
    # mix in pairs with long shared prefixes; uniform pairs mostly share 0-3 bits
    k = rng.integers(0, 33, n)
    flip = rng.integers(0, 1 << 32, n, dtype=np.uint64)
    mask = ((np.uint64(1) << (32 - k).astype(np.uint64)) - np.uint64(1)).astype(np.uint64)
    b = (a.astype(np.uint64) ^ (flip & mask)).astype(np.uint32)
    cp = CryptoPan(key, prefix_bits=20)
    fa, fb = cp(a), cp(b)

    def cpl(x, y):
        d = (x ^ y).astype(np.float64)
        return 32 - np.where(d > 0, np.frexp(d)[1], 0)

    assert np.array_equal(cpl(a, b), cpl(fa, fb))


def test_exhaustive_16_bit_subspace(key):
    base = ip("172.16.0.0")
    addrs = np.arange(base, base + (1 << 16), dtype=np.uint32)
    out = CryptoPan(key)(addrs)
    assert np.unique(out).size == 1 << 16
    assert np.unique(out >> np.uint32(16)).size == 1


def test_injective_on_million_inputs(key, rng):
    addrs = np.unique(rng.integers(0, 1 << 32, 1_000_000, dtype=np.uint32))
    assert np.unique(CryptoPan(key, 20)(addrs)).size == addrs.size


def test_key_sensitivity(rng):
    addrs = rng.integers(0, 1 << 32, 1000, dtype=np.uint32)
    a = CryptoPan(AnonKey.from_seed(1))(addrs)
    b = CryptoPan(AnonKey.from_seed(2))(addrs)
    assert np.any(a != b)


def test_call_preserves_order_and_shape(key):
    addrs = np.array([[5, 1], [5, 9]], dtype=np.uint32)
    out = CryptoPan(key)(addrs)
    assert out.shape == (2, 2)
    assert out[0, 0] == out[1, 0] == anonymize(key, 5)
    assert out[0, 1] == anonymize(key, 1)


@given(st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1))
def test_prefix_property(a, b):
    key = AnonKey.from_seed(99)
    assert common_prefix(anonymize(key, a), anonymize(key, b)) == common_prefix(a, b)


def test_anonymize_rejects_out_of_range(key):
    with pytest.raises(ValueError):
        anonymize(key, 1 << 32)


def test_thread_safety(key, rng):
    cp = CryptoPan(key, 8)
    addrs = rng.integers(0, 1 << 32, 20000, dtype=np.uint32)
    want = cp(addrs)
    bad = []

    def run():
        for _ in range(5):
            if not np.array_equal(cp(addrs), want):
                bad.append(1)

    ts = [threading.Thread(target=run) for _ in range(4)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    assert not bad


def test_prefix_bits_bounds(key):
    with pytest.raises(ValueError):
        CryptoPan(key, 25)


# keys


def test_key_generate_and_io(tmp_path):
    k = AnonKey.generate()
    assert len(k.material) == 32
    assert AnonKey.generate() != k
    p = tmp_path / "k.key"
    k.save(p)
    assert stat.S_IMODE(os.stat(p).st_mode) == 0o600
    assert AnonKey.load(p) == k
    assert len(k.fingerprint) == 8
    assert k.material.hex() not in repr(k)


def test_key_format_errors(tmp_path):
    with pytest.raises(KeyFormatError):
        AnonKey(b"short")
    p = tmp_path / "bad.key"
    p.write_bytes(b"x" * 31)
    with pytest.raises(KeyFormatError):
        AnonKey.load(p)


def test_seeded_keys_reproducible():
    assert AnonKey.from_seed(7) == AnonKey.from_seed(7)
    assert AnonKey.from_seed(7) != AnonKey.from_seed(8)


# tables


def test_table_size_arithmetic():
    assert table_size_bytes(32) == 16 * 2**30


def test_table_8_bits(key):
    t = generate_table(key, 8)
    assert t.entries.size == 256
    # entries are full 32-bit outputs; the 2^8 domain shares a 24-bit zero
    # prefix, so outputs share one 24-bit prefix and their low bits permute 0..255
    low = t.entries & np.uint32(0xFF)
    assert sorted(low.tolist()) == list(range(256))
    assert np.unique(t.entries >> np.uint32(8)).size == 1
    assert t.entries.tolist() == [anonymize(key, a) for a in range(256)]


def test_table_matches_direct(key, rng):
    t = generate_table(key, 20, workers=2, chunk_bits=16)
    addrs = rng.integers(0, 1 << 20, 100_000, dtype=np.uint32)
    assert np.array_equal(t.lookup(addrs), CryptoPan(key)(addrs))
    assert np.array_equal(anonymize_block(addrs, "table", table=t),
                          anonymize_block(addrs, "direct", key=key))


def test_table_coverage_error(key):
    t = generate_table(key, 4)
    with pytest.raises(TableCoverageError):
        t.lookup([16])


def test_table_file_round_trip(key, tmp_path):
    t = generate_table(key, 12)
    p1, p2 = tmp_path / "a.tbl", tmp_path / "b.tbl"
    save_table(t, p1)
    write_table(key, 12, p2, chunk_bits=8)
    assert p1.read_bytes() == p2.read_bytes()
    assert p1.stat().st_size == 16 + 4 * 4096
    for mm in (False, True):
        back = load_table(p1, key, mmap=mm)
        assert back.table_bits == 12
        assert np.array_equal(back.entries, t.entries)


def test_table_key_mismatch(key, tmp_path):
    p = tmp_path / "t.tbl"
    write_table(key, 6, p)
    with pytest.raises(KeyMismatchError):
        load_table(p, AnonKey.from_seed(0))
    with pytest.raises(KeyMismatchError):
        Anonymizer(AnonKey.from_seed(0), load_table(p), mode="table")


def test_table_format_errors(key, tmp_path):
    p = tmp_path / "t.tbl"
    write_table(key, 6, p)
    data = p.read_bytes()
    for bad in (b"XXXX" + data[4:], data[:-4], data[:10]):
        p.write_bytes(bad)
        with pytest.raises(TableFormatError):
            load_table(p)
    with pytest.raises(TableFormatError):
        AnonTable(3, np.zeros(7, np.uint32), key.fingerprint)


def test_insufficient_memory_reported_first(key, monkeypatch):
    import hstm.anonymizer as mod
    monkeypatch.setattr(mod, "available_memory", lambda: 1 << 20)
    with pytest.raises(InsufficientMemoryError):
        generate_table(key, 24)


def test_table_bits_bounds(key):
    with pytest.raises(ValueError):
        generate_table(key, 0)
    with pytest.raises(ValueError):
        generate_table(key, 33)


# runtime modes


def test_anonymize_block_empty_and_window(key):
    assert anonymize_block([], "direct", key=key).size == 0
    addrs = np.arange(2 * 2**17, dtype=np.uint32)
    assert anonymize_block(addrs, "direct", key=key).size == 2 * 2**17


def test_anonymize_block_table_missing():
    with pytest.raises(TableMissingError):
        anonymize_block([1], "table")
    with pytest.raises(TableMissingError):
        Anonymizer(mode="table")


def test_anonymizer_auto_mode(key):
    assert Anonymizer(key).mode == "direct"
    assert Anonymizer(key, generate_table(key, 8)).mode == "direct"
    t = generate_table(key, 8)
    assert Anonymizer(key, t, mode="table").mode == "table"
    with pytest.raises(ValueError):
        Anonymizer(key, mode="fast")
