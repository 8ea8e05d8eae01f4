"""Hypersparse traffic matrices in doubly-compressed sparse-row form.

A traffic matrix counts packets per (source, destination) pair over a
2^dim_log2 x 2^dim_log2 address space. Only active rows are stored, so a
window of 2^17 packets costs O(nnz) memory regardless of the dimension.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import _lz4

MAGIC = b"HSTMATRX"
FORMAT_VERSION = 1
FLAG_ANONYMIZED = 0x01

_HEADER = struct.Struct("<8sHBB4xQQ")
_SECTION = struct.Struct("<QQ")
HEADER_SIZE = _HEADER.size

U32 = np.uint32
U64 = np.uint64


class MatrixError(ValueError):
    pass


class MatrixIndexError(MatrixError):
    """An address does not fit the configured dimension."""

    def __init__(self, message: str, position: int):
        super().__init__(message)
        self.position = position


class DimensionMismatchError(MatrixError):
    pass


class MatrixOverflowError(MatrixError, OverflowError):
    pass


class SerializationError(MatrixError):
    pass


class BadMagicError(SerializationError):
    pass


class UnsupportedVersionError(SerializationError):
    pass


class TruncatedError(SerializationError):
    pass


class LengthMismatchError(SerializationError):
    pass


class CorruptBlockError(SerializationError):
    pass


class InvariantError(SerializationError):
    pass


def _frozen(a, dtype) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=dtype)
    if a.flags.writeable:
        a = a.copy()
        a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TrafficMatrix:
    """Immutable packet-count matrix with explicit active-row indices.

    ``row_ptr`` has ``len(row_ids) + 1`` offsets into ``col_ids``/``values``.
    ``anonymized`` records which address space the indices live in.
    """

    row_ids: np.ndarray
    row_ptr: np.ndarray
    col_ids: np.ndarray
    values: np.ndarray
    dim_log2: int = 32
    anonymized: bool = False
    _validated: bool = field(default=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "row_ids", _frozen(self.row_ids, U32))
        object.__setattr__(self, "row_ptr", _frozen(self.row_ptr, U64))
        object.__setattr__(self, "col_ids", _frozen(self.col_ids, U32))
        object.__setattr__(self, "values", _frozen(self.values, U64))
        if not 1 <= self.dim_log2 <= 32:
            raise MatrixError(f"dim_log2 must be in [1, 32], got {self.dim_log2}")
        if not self._validated:
            self.validate()

    @classmethod
    def empty(cls, dim_log2: int = 32, anonymized: bool = False) -> "TrafficMatrix":
        return cls(
            np.empty(0, U32), np.zeros(1, U64), np.empty(0, U32), np.empty(0, U64),
            dim_log2, anonymized, _validated=True,
        )

    @classmethod
    def from_sorted_keys(cls, keys: np.ndarray, values: np.ndarray, dim_log2: int = 32,
                         anonymized: bool = False) -> "TrafficMatrix":
        """Build from strictly increasing ``row << 32 | col`` keys."""
        if keys.size == 0:
            return cls.empty(dim_log2, anonymized)
        rows = (keys >> U64(32)).astype(U32)
        cols = keys.astype(U32)
        starts = np.flatnonzero(rows[1:] != rows[:-1]) + 1
        row_ptr = np.empty(starts.size + 2, U64)
        row_ptr[0] = 0
        row_ptr[1:-1] = starts
        row_ptr[-1] = keys.size
        row_ids = rows[row_ptr[:-1].astype(np.intp)]
        return cls(row_ids, row_ptr, cols, values, dim_log2, anonymized, _validated=True)

    def validate(self) -> None:
        """Raise :class:`InvariantError` unless every structural invariant holds."""
        nrows = self.row_ids.size
        nnz = self.col_ids.size
        rp = self.row_ptr
        if rp.size != nrows + 1:
            raise InvariantError(f"row_ptr has {rp.size} entries for {nrows} rows")
        if self.values.size != nnz:
            raise InvariantError("col_ids and values differ in length")
        if rp[0] != 0 or rp[-1] != nnz:
            raise InvariantError("row_ptr must start at 0 and end at nnz")
        if nrows and not np.all(rp[1:] > rp[:-1]):
            raise InvariantError("row_ptr must be strictly increasing (no empty active rows)")
        if nrows > 1 and not np.all(self.row_ids[1:] > self.row_ids[:-1]):
            raise InvariantError("row_ids must be strictly increasing")
        if nnz:
            limit = 1 << self.dim_log2
            if int(self.row_ids[-1]) >= limit or int(self.col_ids.max()) >= limit:
                raise InvariantError(f"index out of range for dim_log2={self.dim_log2}")
            if int(self.values.min()) < 1:
                raise InvariantError("stored values must be >= 1")
            rising = self.col_ids[1:] > self.col_ids[:-1]
            boundary = np.zeros(nnz - 1, dtype=bool)
            inner = rp[1:-1].astype(np.intp) - 1
            boundary[inner] = True
            if not np.all(rising | boundary):
                raise InvariantError("col_ids must be strictly increasing within each row")

    @property
    def nnz(self) -> int:
        return int(self.col_ids.size)

    @property
    def nrows(self) -> int:
        return int(self.row_ids.size)

    @property
    def total(self) -> int:
        """Sum of all entries (the packet count)."""
        return int(self.values.sum(dtype=U64))

    def row_of_entry(self) -> np.ndarray:
        """Row index of every stored entry, aligned with ``col_ids``."""
        return np.repeat(self.row_ids, np.diff(self.row_ptr).astype(np.intp))

    def keys(self) -> np.ndarray:
        return (self.row_of_entry().astype(U64) << U64(32)) | self.col_ids.astype(U64)

    def to_dict(self) -> dict[tuple[int, int], int]:
        return {(int(i), int(j)): int(v)
                for i, j, v in zip(self.row_of_entry(), self.col_ids, self.values)}

    def entries(self) -> Iterator[tuple[int, int, int]]:
        for i, j, v in zip(self.row_of_entry(), self.col_ids, self.values):
            yield int(i), int(j), int(v)

    def __eq__(self, other):
        if not isinstance(other, TrafficMatrix):
            return NotImplemented
        return (self.dim_log2 == other.dim_log2
                and self.anonymized == other.anonymized
                and np.array_equal(self.row_ids, other.row_ids)
                and np.array_equal(self.row_ptr, other.row_ptr)
                and np.array_equal(self.col_ids, other.col_ids)
                and np.array_equal(self.values, other.values))

    __hash__ = None

    def __repr__(self):
        return (f"TrafficMatrix(dim_log2={self.dim_log2}, nrows={self.nrows}, "
                f"nnz={self.nnz}, total={self.total}, anonymized={self.anonymized})")


def _as_src_dst(pairs, dst) -> tuple[np.ndarray, np.ndarray]:
    if dst is not None:
        return np.asarray(pairs), np.asarray(dst)
    arr = np.asarray(pairs)
    if arr.size == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise MatrixError(f"expected a sequence of (src, dst) pairs, got shape {arr.shape}")
    return arr[:, 0], arr[:, 1]


def _check_range(a: np.ndarray, dim_log2: int, what: str) -> np.ndarray:
    if a.dtype == U32 and dim_log2 == 32:
        return a
    if a.size:
        limit = 1 << dim_log2
        bad = np.flatnonzero((a < 0) | (a >= limit))
        if bad.size:
            pos = int(bad[0])
            raise MatrixIndexError(
                f"{what} index {int(a[pos])} at position {pos} is outside [0, 2^{dim_log2})", pos)
    return a.astype(U32)


def build_matrix(pairs, dst=None, *, dim_log2: int = 32, anonymized: bool = False) -> TrafficMatrix:
    """Count (src, dst) pairs into a matrix, summing duplicates.

    Accepts either one sequence of pairs or two aligned address arrays.
    Keys are packed as ``src << 32 | dst`` and sorted, then run-length counted.
    """
    src, dst = _as_src_dst(pairs, dst)
    if src.shape != dst.shape:
        raise MatrixError("src and dst must have the same length")
    src = _check_range(src, dim_log2, "source")
    dst = _check_range(dst, dim_log2, "destination")
    if src.size == 0:
        return TrafficMatrix.empty(dim_log2, anonymized)
    keys = (src.astype(U64) << U64(32)) | dst.astype(U64)
    keys.sort()
    starts = np.flatnonzero(keys[1:] != keys[:-1]) + 1
    starts = np.concatenate(([0], starts))
    counts = np.diff(np.append(starts, keys.size)).astype(U64)
    return TrafficMatrix.from_sorted_keys(keys[starts], counts, dim_log2, anonymized)


def matrix_add(a: TrafficMatrix, b: TrafficMatrix) -> TrafficMatrix:
    """Entrywise sum. Raises :class:`MatrixOverflowError` rather than wrapping."""
    if a.dim_log2 != b.dim_log2:
        raise DimensionMismatchError(f"dim_log2 {a.dim_log2} != {b.dim_log2}")
    if a.anonymized != b.anonymized:
        raise DimensionMismatchError("cannot add raw and anonymized matrices")
    if b.nnz == 0:
        return a
    if a.nnz == 0:
        return b
    keys = np.concatenate((a.keys(), b.keys()))
    vals = np.concatenate((a.values, b.values))
    order = np.argsort(keys, kind="stable")
    keys = keys[order]
    vals = vals[order]
    starts = np.concatenate(([0], np.flatnonzero(keys[1:] != keys[:-1]) + 1))
    sums = np.add.reduceat(vals, starts)
    # each key appears at most once per operand, so wraparound shows up as sum < max
    if np.any(sums < np.maximum.reduceat(vals, starts)):
        raise MatrixOverflowError("entry sum exceeds 64-bit range")
    return TrafficMatrix.from_sorted_keys(keys[starts], sums, a.dim_log2, a.anonymized)


def sum_matrices(mats: Sequence[TrafficMatrix]) -> TrafficMatrix:
    if not mats:
        raise MatrixError("need at least one matrix")
    out = mats[0]
    for m in mats[1:]:
        out = matrix_add(out, m)
    return out


def get_entry(m: TrafficMatrix, i: int, j: int) -> int:
    limit = 1 << m.dim_log2
    if not (0 <= i < limit and 0 <= j < limit):
        raise MatrixIndexError(f"({i}, {j}) outside [0, 2^{m.dim_log2})", 0)
    r = int(np.searchsorted(m.row_ids, i))
    if r == m.nrows or m.row_ids[r] != i:
        return 0
    lo, hi = int(m.row_ptr[r]), int(m.row_ptr[r + 1])
    k = lo + int(np.searchsorted(m.col_ids[lo:hi], j))
    if k < hi and m.col_ids[k] == j:
        return int(m.values[k])
    return 0


def _pack_section(arr: np.ndarray, dtype: str) -> bytes:
    raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
    if not raw:
        return _SECTION.pack(0, 0)
    comp = _lz4.compress(raw)
    return _SECTION.pack(len(raw), len(comp)) + comp


def serialize(m: TrafficMatrix) -> bytes:
    """Encode as header + four LZ4 blocks (row_ids, row_ptr[1:], col_ids, values).

    See FORMAT.md for the byte layout.
    """
    flags = FLAG_ANONYMIZED if m.anonymized else 0
    parts = [
        _HEADER.pack(MAGIC, FORMAT_VERSION, m.dim_log2, flags, m.nnz, m.nrows),
        _pack_section(m.row_ids, "<u4"),
        _pack_section(m.row_ptr[1:], "<u8"),
        _pack_section(m.col_ids, "<u4"),
        _pack_section(m.values, "<u8"),
    ]
    return b"".join(parts)


def _read_section(buf: memoryview, off: int, expected: int, dtype: str, name: str):
    if off + _SECTION.size > len(buf):
        raise TruncatedError(f"{name}: section header truncated at offset {off}")
    ulen, clen = _SECTION.unpack_from(buf, off)
    off += _SECTION.size
    if ulen != expected:
        raise LengthMismatchError(f"{name}: stored length {ulen} != expected {expected}")
    if off + clen > len(buf):
        raise TruncatedError(f"{name}: block needs {clen} bytes, {len(buf) - off} remain")
    if ulen == 0:
        if clen != 0:
            raise LengthMismatchError(f"{name}: nonempty block for zero-length array")
        return np.empty(0, dtype), off
    try:
        raw = _lz4.decompress(bytes(buf[off:off + clen]), ulen)
    except _lz4.LZ4BlockError as exc:
        raise CorruptBlockError(f"{name}: {exc}") from None
    if len(raw) != ulen:
        raise LengthMismatchError(f"{name}: decompressed {len(raw)} bytes, expected {ulen}")
    return np.frombuffer(raw, dtype=dtype), off + clen


def deserialize(data: bytes) -> TrafficMatrix:
    buf = memoryview(data)
    if len(buf) < 8 or bytes(buf[:8]) != MAGIC:
        raise BadMagicError("not a serialized traffic matrix (bad magic)")
    if len(buf) < HEADER_SIZE:
        raise TruncatedError("header truncated")
    _, version, dim_log2, flags, nnz, nrows = _HEADER.unpack_from(buf, 0)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"format version {version} (supported: {FORMAT_VERSION})")
    if not 1 <= dim_log2 <= 32:
        raise InvariantError(f"dim_log2 {dim_log2} out of range")
    if nrows > nnz:
        raise InvariantError(f"{nrows} rows for {nnz} entries")
    off = HEADER_SIZE
    row_ids, off = _read_section(buf, off, 4 * nrows, "<u4", "row_ids")
    ptr_tail, off = _read_section(buf, off, 8 * nrows, "<u8", "row_ptr")
    col_ids, off = _read_section(buf, off, 4 * nnz, "<u4", "col_ids")
    values, off = _read_section(buf, off, 8 * nnz, "<u8", "values")
    if off != len(buf):
        raise LengthMismatchError(f"{len(buf) - off} trailing bytes")
    row_ptr = np.concatenate((np.zeros(1, U64), ptr_tail.astype(U64)))
    try:
        return TrafficMatrix(row_ids, row_ptr, col_ids, values, int(dim_log2),
                             bool(flags & FLAG_ANONYMIZED))
    except InvariantError:
        raise
    except MatrixError as exc:
        raise InvariantError(str(exc)) from None
