"""Network quantities, address-range masks and multi-temporal aggregation.

Every quantity is defined by its summation form over the traffic matrix A:
packets ``sum_ij A(i,j)``, links ``sum_ij |A(i,j)|_0``, source packets
``sum_j A(i,j)``, source fan-out ``sum_j |A(i,j)|_0``, and the column
analogues for destinations. Maxima over an empty matrix are 0.
"""
from __future__ import annotations

import csv
import io
import ipaddress
import json
import tarfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .anonymizer import AnonKey, CryptoPan
from .matrix import (
    MatrixError,
    SerializationError,
    TrafficMatrix,
    deserialize,
    matrix_add,
)

ENTRY_SUFFIX = ".hstm"


class RangeSpaceError(ValueError):
    """A raw-address range was applied to an anonymized matrix, or vice versa."""


class HierarchyError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkQuantities:
    valid_packets: int = 0
    unique_links: int = 0
    max_link_packets: int = 0
    unique_sources: int = 0
    max_source_packets: int = 0
    max_source_fanout: int = 0
    unique_destinations: int = 0
    max_destination_packets: int = 0
    max_destination_fanin: int = 0

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def as_dict(self) -> dict[str, int]:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class DegreeVectors:
    """Per-address degrees over active sources and destinations only."""

    sources: np.ndarray
    source_packets: np.ndarray
    source_fanout: np.ndarray
    destinations: np.ndarray
    destination_packets: np.ndarray
    destination_fanin: np.ndarray

    def source_dict(self) -> dict[int, tuple[int, int]]:
        return {int(a): (int(p), int(f)) for a, p, f in
                zip(self.sources, self.source_packets, self.source_fanout)}

    def destination_dict(self) -> dict[int, tuple[int, int]]:
        return {int(a): (int(p), int(f)) for a, p, f in
                zip(self.destinations, self.destination_packets, self.destination_fanin)}


def _column_groups(m: TrafficMatrix):
    order = np.argsort(m.col_ids, kind="stable")
    cols = m.col_ids[order]
    starts = np.concatenate(([0], np.flatnonzero(cols[1:] != cols[:-1]) + 1))
    return cols[starts], order, starts


def degree_vectors(m: TrafficMatrix) -> DegreeVectors:
    if m.nnz == 0:
        e32, e64 = np.empty(0, np.uint32), np.empty(0, np.uint64)
        return DegreeVectors(e32, e64, e64, e32, e64, e64)
    row_starts = m.row_ptr[:-1].astype(np.intp)
    src_packets = np.add.reduceat(m.values, row_starts)
    src_fanout = np.diff(m.row_ptr).astype(np.uint64)
    dests, order, starts = _column_groups(m)
    dst_packets = np.add.reduceat(m.values[order], starts)
    dst_fanin = np.diff(np.append(starts, m.nnz)).astype(np.uint64)
    return DegreeVectors(m.row_ids.copy(), src_packets, src_fanout,
                         dests, dst_packets, dst_fanin)


def _max(a: np.ndarray) -> int:
    return int(a.max()) if a.size else 0


def summarize(m: TrafficMatrix, dv: DegreeVectors | None = None) -> NetworkQuantities:
    dv = dv if dv is not None else degree_vectors(m)
    return NetworkQuantities(
        valid_packets=m.total,
        unique_links=int(np.count_nonzero(m.values)),
        max_link_packets=_max(m.values),
        unique_sources=int(np.count_nonzero(dv.source_packets)),
        max_source_packets=_max(dv.source_packets),
        max_source_fanout=_max(dv.source_fanout),
        unique_destinations=int(np.count_nonzero(dv.destination_packets)),
        max_destination_packets=_max(dv.destination_packets),
        max_destination_fanin=_max(dv.destination_fanin),
    )


def log2_histogram(values: np.ndarray) -> list[int]:
    """Counts per bin ``[2^k, 2^(k+1))`` for positive integer values."""
    if values.size == 0:
        return []
    _, e = np.frexp(values.astype(np.float64))
    return np.bincount(e - 1).tolist()


def distributions(m: TrafficMatrix, dv: DegreeVectors | None = None) -> dict[str, list[int]]:
    dv = dv if dv is not None else degree_vectors(m)
    return {
        "link_packets": log2_histogram(m.values),
        "source_packets": log2_histogram(dv.source_packets),
        "source_fanout": log2_histogram(dv.source_fanout),
        "destination_packets": log2_histogram(dv.destination_packets),
        "destination_fanin": log2_histogram(dv.destination_fanin),
    }


@dataclass(frozen=True, eq=False)
class RangeSet:
    """Normalized union of CIDR blocks in either the raw or anonymized space."""

    blocks: tuple[ipaddress.IPv4Network, ...]
    anonymized: bool = True
    _starts: np.ndarray = field(init=False, repr=False)
    _ends: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        nets = tuple(ipaddress.collapse_addresses(
            ipaddress.IPv4Network(b) if not isinstance(b, ipaddress.IPv4Network) else b
            for b in self.blocks))
        object.__setattr__(self, "blocks", nets)
        object.__setattr__(self, "_starts", np.array(
            [int(n.network_address) for n in nets], dtype=np.uint64))
        object.__setattr__(self, "_ends", np.array(
            [int(n.broadcast_address) for n in nets], dtype=np.uint64))

    @classmethod
    def parse(cls, text: str, anonymized: bool = True) -> "RangeSet":
        parts = [p.strip() for p in text.split(",") if p.strip()]
        try:
            return cls(tuple(ipaddress.IPv4Network(p, strict=False) for p in parts), anonymized)
        except ValueError as exc:
            raise ValueError(f"bad CIDR list {text!r}: {exc}") from None

    @classmethod
    def from_addresses(cls, addrs: Iterable[int], anonymized: bool = True) -> "RangeSet":
        return cls(tuple(ipaddress.IPv4Network(int(a)) for a in addrs), anonymized)

    @classmethod
    def full(cls, anonymized: bool = True) -> "RangeSet":
        return cls((ipaddress.IPv4Network("0.0.0.0/0"),), anonymized)

    @classmethod
    def empty(cls, anonymized: bool = True) -> "RangeSet":
        return cls((), anonymized)

    def contains(self, addrs) -> np.ndarray:
        a = np.asarray(addrs, dtype=np.uint64)
        if not self.blocks:
            return np.zeros(a.shape, dtype=bool)
        idx = np.searchsorted(self._starts, a, side="right") - 1
        inside = idx >= 0
        inside[inside] = a[inside] <= self._ends[idx[inside]]
        return inside

    def __contains__(self, addr: int) -> bool:
        return bool(self.contains([addr])[0])

    def __str__(self):
        return ",".join(str(b) for b in self.blocks)


def anonymize_ranges(r: RangeSet, key: AnonKey) -> RangeSet:
    """Map a raw range set into the anonymized space.

    Prefix preservation makes the image of a /k block exactly another /k block.
    """
    if r.anonymized:
        raise RangeSpaceError("range set is already in the anonymized space")
    cp = CryptoPan(key)
    out = []
    for net in r.blocks:
        image = cp.anonymize(int(net.network_address))
        out.append(ipaddress.IPv4Network((image, net.prefixlen), strict=False))
    return RangeSet(tuple(out), anonymized=True)


def _range_mask(m: TrafficMatrix, r: RangeSet) -> np.ndarray:
    if r.anonymized != m.anonymized:
        space = "anonymized" if m.anonymized else "raw"
        raise RangeSpaceError(f"range set does not address the matrix's {space} space")
    return r.contains(m.row_of_entry()) & r.contains(m.col_ids)


def _select(m: TrafficMatrix, keep: np.ndarray) -> TrafficMatrix:
    return TrafficMatrix.from_sorted_keys(m.keys()[keep], m.values[keep], m.dim_log2, m.anonymized)


def restrict_range(m: TrafficMatrix, r: RangeSet) -> TrafficMatrix:
    """Traffic with both endpoints in ``r`` (the two-sided diagonal mask product)."""
    return _select(m, _range_mask(m, r))


def exclude_range(m: TrafficMatrix, r: RangeSet) -> TrafficMatrix:
    """Everything except the traffic :func:`restrict_range` keeps."""
    return _select(m, ~_range_mask(m, r))


@dataclass
class Hierarchy:
    """``levels[l][k]`` sums leaves ``k*2^l .. (k+1)*2^l - 1``.

    ``unpaired[l]`` lists level-l indices left without a partner, which do
    not feed level l+1.
    """

    levels: list[list[TrafficMatrix]]
    unpaired: list[list[int]]

    @property
    def top(self) -> list[TrafficMatrix]:
        return self.levels[-1]


def aggregate_hierarchy(windows: Sequence[TrafficMatrix], levels: int) -> Hierarchy:
    if levels < 0:
        raise HierarchyError("levels must be nonnegative")
    if (1 << levels) > len(windows):
        raise HierarchyError(
            f"{levels} levels need at least {1 << levels} windows, got {len(windows)}")
    out = [list(windows)]
    unpaired = []
    for _ in range(levels):
        prev = out[-1]
        out.append([matrix_add(prev[2 * k], prev[2 * k + 1]) for k in range(len(prev) // 2)])
        unpaired.append([len(prev) - 1] if len(prev) % 2 else [])
    unpaired.append([])
    return Hierarchy(out, unpaired)


@dataclass
class ArchiveReport:
    windows: list[dict] = field(default_factory=list)
    levels: list[dict] = field(default_factory=list)
    errors: list[dict] = field(default_factory=list)
    unpaired: list[dict] = field(default_factory=list)

    def to_json(self, **kw) -> str:
        return json.dumps(asdict(self), **kw)

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["archive", "entry", "level", "index"] + NetworkQuantities.field_names()
        writer = csv.DictWriter(buf, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in self.windows + self.levels:
            writer.writerow(row)
        return buf.getvalue()


def read_archive(path) -> tuple[list[tuple[str, TrafficMatrix]], list[dict]]:
    """Deserialize every ``.hstm`` entry; problems are reported per entry."""
    path = str(path)
    found, errors = [], []
    try:
        with tarfile.open(path, "r:*") as tar:
            for info in tar:
                if not info.isfile():
                    continue
                if not info.name.endswith(ENTRY_SUFFIX):
                    errors.append({"archive": path, "entry": info.name,
                                   "error": "foreign entry (not a serialized matrix)"})
                    continue
                data = tar.extractfile(info).read()
                try:
                    found.append((info.name, deserialize(data)))
                except (SerializationError, MatrixError) as exc:
                    errors.append({"archive": path, "entry": info.name,
                                   "error": f"{type(exc).__name__}: {exc}"})
    except (OSError, tarfile.TarError) as exc:
        errors.append({"archive": path, "entry": None, "error": f"unreadable archive: {exc}"})
    return found, errors


def summarize_archive(paths: Sequence, levels: int = 0, *, ranges: RangeSet | None = None,
                      exclude: bool = False, histograms: bool = False,
                      workers: int = 1) -> ArchiveReport:
    """Per-window and per-level quantities for a list of archives.

    Windows keep the order of ``paths`` and, within each archive, entry order;
    that order also defines the pairing in the aggregation hierarchy.
    """
    report = ArchiveReport()
    named: list[tuple[str, str, TrafficMatrix]] = []
    for p in paths:
        found, errors = read_archive(p)
        report.errors.extend(errors)
        named.extend((str(p), name, m) for name, m in found)

    def prepare(m: TrafficMatrix) -> TrafficMatrix:
        if ranges is None:
            return m
        return exclude_range(m, ranges) if exclude else restrict_range(m, ranges)

    def row(m: TrafficMatrix) -> tuple[dict, dict | None]:
        dv = degree_vectors(m)
        q = summarize(m, dv).as_dict()
        return q, distributions(m, dv) if histograms else None

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            mats = list(pool.map(prepare, (m for _, _, m in named)))
            rows = list(pool.map(row, mats))
    else:
        mats = [prepare(m) for _, _, m in named]
        rows = [row(m) for m in mats]

    for k, ((archive, entry, _), (q, hist)) in enumerate(zip(named, rows)):
        rec = {"archive": archive, "entry": entry, "level": 0, "index": k, **q}
        if hist is not None:
            rec["histograms"] = hist
        report.windows.append(rec)

    if levels and mats:
        h = aggregate_hierarchy(mats, levels)
        for lvl in range(1, levels + 1):
            for k, m in enumerate(h.levels[lvl]):
                q, hist = row(m)
                rec = {"archive": None, "entry": None, "level": lvl, "index": k, **q}
                if hist is not None:
                    rec["histograms"] = hist
                report.levels.append(rec)
        report.unpaired = [{"level": lvl, "index": i}
                           for lvl, idx in enumerate(h.unpaired) for i in idx]
    return report
