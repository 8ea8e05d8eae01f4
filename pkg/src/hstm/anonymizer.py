"""Prefix-preserving IPv4 anonymization (CryptoPAn construction).

Output bit ``i`` is input bit ``i`` XOR the top bit of
``AES_K(prefix_i(addr) || pad[i:])``, where ``pad = AES_K(second key half)``.
Two addresses sharing a k-bit prefix therefore map to outputs sharing exactly
a k-bit prefix.

The vectorized path sorts the unique addresses once and encrypts each
distinct prefix (trie node) exactly once, so a batch costs one AES block per
trie node rather than 32 per address.
"""
from __future__ import annotations

import hashlib
import os
import secrets
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

KEY_SIZE = 32
TABLE_MAGIC = b"HSAT"
TABLE_VERSION = 1
_TABLE_HEADER = struct.Struct("<4sHBx8s")

# 4 MiB of precomputed pad bits for the top 21 trie levels
DEFAULT_PREFIX_BITS = 20

_MASKS = np.array([(0xFFFFFFFF << (32 - p)) & 0xFFFFFFFF for p in range(32)], dtype=np.uint32)


class AnonymizerError(Exception):
    pass


class KeyFormatError(AnonymizerError, ValueError):
    pass


class TableFormatError(AnonymizerError, ValueError):
    pass


class KeyMismatchError(AnonymizerError, ValueError):
    pass


class TableMissingError(AnonymizerError):
    pass


class TableCoverageError(AnonymizerError, ValueError):
    pass


class InsufficientMemoryError(AnonymizerError, MemoryError):
    pass


@dataclass(frozen=True)
class AnonKey:
    """256 bits of secret material: AES-128 key followed by the pad seed block."""

    material: bytes

    def __post_init__(self):
        if not isinstance(self.material, (bytes, bytearray)) or len(self.material) != KEY_SIZE:
            raise KeyFormatError(f"key must be exactly {KEY_SIZE} bytes")
        object.__setattr__(self, "material", bytes(self.material))

    @classmethod
    def generate(cls) -> "AnonKey":
        return cls(secrets.token_bytes(KEY_SIZE))

    @classmethod
    def from_seed(cls, seed: int) -> "AnonKey":
        """Deterministic key for reproducible runs; not for production secrets."""
        return cls(hashlib.shake_256(b"hstm-key-seed:%d" % seed).digest(KEY_SIZE))

    @classmethod
    def load(cls, path) -> "AnonKey":
        data = Path(path).read_bytes()
        if len(data) != KEY_SIZE:
            raise KeyFormatError(f"{path}: key file must hold {KEY_SIZE} raw bytes, found {len(data)}")
        return cls(data)

    def save(self, path) -> None:
        fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
        with os.fdopen(fd, "wb") as fh:
            fh.write(self.material)

    @property
    def fingerprint(self) -> bytes:
        return hashlib.sha256(self.material).digest()[:8]

    def __repr__(self):
        return f"AnonKey(fingerprint={self.fingerprint.hex()})"


class CryptoPan:
    """Keyed prefix-preserving bijection on 32-bit addresses.

    Immutable; safe to call from several threads (each call builds its own
    cipher context).
    """

    def __init__(self, key: AnonKey, prefix_bits: int = 0):
        if not 0 <= prefix_bits <= 24:
            raise ValueError("prefix_bits must be in [0, 24]")
        self.key = key
        self.prefix_bits = prefix_bits
        self._cipher = Cipher(algorithms.AES(key.material[:16]), modes.ECB())
        pad = self._cipher.encryptor().update(key.material[16:])
        self._pad_head = np.uint32(int.from_bytes(pad[:4], "big"))
        self._pad_tail = np.frombuffer(pad[4:], dtype=np.uint32).copy()
        self._prefix_otp = self._build_prefix_otp(prefix_bits) if prefix_bits else None

    def _prf_bits(self, heads: np.ndarray) -> np.ndarray:
        """Top output bit of AES over blocks ``head || pad[4:]``, one per head word."""
        blocks = np.empty((heads.size, 4), dtype=np.uint32)
        blocks[:, 0] = heads
        blocks[:, 0].byteswap(inplace=True)
        blocks[:, 1:] = self._pad_tail
        return np.frombuffer(self._cipher.encryptor().update(blocks), dtype=np.uint8)[::16] >> 7

    def _build_prefix_otp(self, bits: int) -> np.ndarray:
        # levels 0..bits depend only on the top `bits` address bits
        acc = np.zeros(1, dtype=np.uint32)
        for p in range(bits + 1):
            prefixes = (np.arange(1 << p, dtype=np.uint64) << np.uint64(32 - p)).astype(np.uint32)
            m = _MASKS[p]
            heads = prefixes | (self._pad_head & ~m)
            level = self._prf_bits(heads).astype(np.uint32)
            if p:
                acc = np.repeat(acc, 2)
            acc = (acc << np.uint32(1)) | level
        return acc

    def anonymize(self, addr: int) -> int:
        if not 0 <= addr < 1 << 32:
            raise ValueError(f"address {addr} is not a 32-bit value")
        return int(self(np.array([addr], dtype=np.uint32))[0])

    def __call__(self, addrs) -> np.ndarray:
        addrs = np.asarray(addrs, dtype=np.uint32)
        if addrs.size == 0:
            return addrs.copy()
        uniq, inverse = np.unique(addrs, return_inverse=True)
        return self._anonymize_sorted_unique(uniq)[inverse.reshape(addrs.shape)]

    def _anonymize_sorted_unique(self, u: np.ndarray) -> np.ndarray:
        n = u.size
        x = np.empty(n, dtype=np.uint32)
        x[0] = 0xFFFFFFFF
        np.bitwise_xor(u[1:], u[:-1], out=x[1:])
        # x in [2^(e-1), 2^e)  ->  shared leading bits with predecessor = 32 - e
        _, e = np.frexp(x.astype(np.float64))
        shared = (32 - e).astype(np.int8)

        # a level-p trie node starts wherever the predecessor shares fewer than p bits
        first = 0
        otp = np.zeros(n, dtype=np.uint32)
        if self._prefix_otp is not None:
            b = self.prefix_bits
            otp |= self._prefix_otp[u >> np.uint32(32 - b)] << np.uint32(31 - b)
            first = b + 1
        starts = [np.flatnonzero(shared < p) if p else np.zeros(1, dtype=np.intp)
                  for p in range(first, 32)]
        total = sum(s.size for s in starts)

        heads = np.empty(total, dtype=np.uint32)
        off = 0
        for p, s in enumerate(starts, first):
            m = _MASKS[p]
            heads[off:off + s.size] = (u[s] & m) | (self._pad_head & ~m)
            off += s.size
        out = self._prf_bits(heads)

        off = 0
        for p, s in enumerate(starts, first):
            bits = out[off:off + s.size].astype(np.uint32)
            off += s.size
            runs = np.diff(np.append(s, n))
            otp |= np.repeat(bits, runs) << np.uint32(31 - p)
        return u ^ otp


def anonymize(key: AnonKey, addr: int) -> int:
    return CryptoPan(key).anonymize(addr)


@dataclass(frozen=True, eq=False)
class AnonTable:
    """Materialized lookup table: ``entries[a] == anonymize(key, a)`` for a < 2^table_bits."""

    table_bits: int
    entries: np.ndarray
    fingerprint: bytes

    def __post_init__(self):
        if not 1 <= self.table_bits <= 32:
            raise TableFormatError(f"table_bits must be in [1, 32], got {self.table_bits}")
        if self.entries.shape != (1 << self.table_bits,):
            raise TableFormatError("entry count does not match table_bits")

    @property
    def nbytes(self) -> int:
        return 4 << self.table_bits

    def lookup(self, addrs) -> np.ndarray:
        addrs = np.asarray(addrs, dtype=np.uint32)
        if self.table_bits < 32 and addrs.size and int(addrs.max()) >> self.table_bits:
            raise TableCoverageError(
                f"address {int(addrs.max())} outside the {self.table_bits}-bit table domain")
        return self.entries[addrs]


def table_size_bytes(table_bits: int) -> int:
    return 4 << table_bits


def available_memory() -> int:
    try:
        return os.sysconf("SC_AVPHYS_PAGES") * os.sysconf("SC_PAGE_SIZE")
    except (ValueError, OSError, AttributeError):
        return 1 << 62


def _check_bits(table_bits: int) -> None:
    if not 1 <= table_bits <= 32:
        raise ValueError(f"table_bits must be in [1, 32], got {table_bits}")


def _table_chunks(table_bits: int, chunk_bits: int):
    step = 1 << min(chunk_bits, table_bits)
    for lo in range(0, 1 << table_bits, step):
        yield lo, lo + step


def generate_table(key: AnonKey, table_bits: int, *, workers: int = 1,
                   chunk_bits: int = 20) -> AnonTable:
    """Materialize the anonymization of every address below 2^table_bits.

    Chunks are disjoint index ranges, so ``workers > 1`` fills them in parallel.
    """
    _check_bits(table_bits)
    need = table_size_bytes(table_bits)
    have = available_memory()
    if need > have:
        raise InsufficientMemoryError(
            f"a {table_bits}-bit table needs {need} bytes; only {have} available")
    cp = CryptoPan(key)
    entries = np.empty(1 << table_bits, dtype=np.uint32)

    def fill(bounds):
        lo, hi = bounds
        entries[lo:hi] = cp._anonymize_sorted_unique(np.arange(lo, hi, dtype=np.uint32))

    chunks = list(_table_chunks(table_bits, chunk_bits))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(fill, chunks))
    else:
        for c in chunks:
            fill(c)
    return AnonTable(table_bits, entries, key.fingerprint)


def write_table(key: AnonKey, table_bits: int, path, *, chunk_bits: int = 20) -> None:
    """Stream a table file to disk chunk by chunk (no full in-memory copy)."""
    _check_bits(table_bits)
    cp = CryptoPan(key)
    with open(path, "wb") as fh:
        fh.write(_TABLE_HEADER.pack(TABLE_MAGIC, TABLE_VERSION, table_bits, key.fingerprint))
        for lo, hi in _table_chunks(table_bits, chunk_bits):
            out = cp._anonymize_sorted_unique(np.arange(lo, hi, dtype=np.uint32))
            fh.write(out.astype("<u4").tobytes())


def save_table(table: AnonTable, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_TABLE_HEADER.pack(TABLE_MAGIC, TABLE_VERSION, table.table_bits, table.fingerprint))
        fh.write(table.entries.astype("<u4").tobytes())


def load_table(path, key: AnonKey | None = None, *, mmap: bool = False) -> AnonTable:
    """Read a table file; with ``key`` given, reject tables built from another key."""
    path = Path(path)
    with open(path, "rb") as fh:
        header = fh.read(_TABLE_HEADER.size)
    if len(header) < _TABLE_HEADER.size:
        raise TableFormatError(f"{path}: truncated header")
    magic, version, bits, fp = _TABLE_HEADER.unpack(header)
    if magic != TABLE_MAGIC:
        raise TableFormatError(f"{path}: bad magic")
    if version != TABLE_VERSION:
        raise TableFormatError(f"{path}: unsupported version {version}")
    if not 1 <= bits <= 32:
        raise TableFormatError(f"{path}: table_bits {bits} out of range")
    if key is not None and key.fingerprint != fp:
        raise KeyMismatchError(f"{path}: table was generated with a different key")
    expected = _TABLE_HEADER.size + table_size_bytes(bits)
    if path.stat().st_size != expected:
        raise TableFormatError(f"{path}: size {path.stat().st_size} != expected {expected}")
    if mmap:
        entries = np.memmap(path, dtype="<u4", mode="r", offset=_TABLE_HEADER.size,
                            shape=(1 << bits,))
    else:
        if table_size_bytes(bits) > available_memory():
            raise InsufficientMemoryError(f"{path}: table does not fit in memory; use mmap")
        entries = np.fromfile(path, dtype="<u4", offset=_TABLE_HEADER.size)
        entries = entries.astype(np.uint32, copy=False)
    return AnonTable(bits, entries, fp)


class Anonymizer:
    """Runtime anonymization in ``table`` or ``direct`` mode.

    ``mode="auto"`` picks the table when one covering all 32 bits is supplied
    and falls back to direct computation otherwise.
    """

    def __init__(self, key: AnonKey | None = None, table: AnonTable | None = None,
                 mode: str = "auto", prefix_bits: int = DEFAULT_PREFIX_BITS):
        if mode not in ("auto", "table", "direct"):
            raise ValueError(f"unknown anonymization mode {mode!r}")
        if mode == "auto":
            mode = "table" if table is not None and table.table_bits == 32 else "direct"
        if mode == "table" and table is None:
            raise TableMissingError("table mode requires a loaded anonymization table")
        if mode == "direct" and key is None:
            raise ValueError("direct mode requires a key")
        if key is not None and table is not None and key.fingerprint != table.fingerprint:
            raise KeyMismatchError("table fingerprint does not match key")
        self.mode = mode
        self.key = key
        self.table = table
        self._cp = CryptoPan(key, prefix_bits) if key is not None and mode == "direct" else None

    def __call__(self, addrs) -> np.ndarray:
        if self.mode == "table":
            return self.table.lookup(addrs)
        return self._cp(addrs)


def anonymize_block(addrs, mode: str, *, key: AnonKey | None = None,
                    table: AnonTable | None = None) -> np.ndarray:
    """Anonymize a block of addresses elementwise, preserving order."""
    if mode == "table":
        if table is None:
            raise TableMissingError("table mode requires a loaded anonymization table")
        return table.lookup(addrs)
    if mode == "direct":
        if key is None:
            raise ValueError("direct mode requires a key")
        return CryptoPan(key)(addrs)
    raise ValueError(f"unknown anonymization mode {mode!r}")
