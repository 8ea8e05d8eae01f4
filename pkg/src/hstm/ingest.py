"""Packet sources: classic pcap files and synthetic darknet-like traffic.

Streams are produced as chunks of aligned ``(src, dst)`` uint32 arrays, which
is what the pipeline consumes; :func:`read_pcap` and :func:`synth_traffic`
wrap those chunks as :class:`PacketRecord` tuples for record-level callers.
"""
from __future__ import annotations

import mmap
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

PCAP_MAGIC = 0xA1B2C3D4
PCAP_MAGIC_NS = 0xA1B23C4D
LINKTYPE_ETHERNET = 1

ETH_HDR = 14
VLAN_TAG = 4
IPV4_MIN_HDR = 20
ETHERTYPE_IPV4 = 0x0800
ETHERTYPE_VLAN = 0x8100

_GLOBAL_HDR = 24
_REC_HDR = 16

DEFAULT_CHUNK = 1 << 20
# the telescope observes one /8; synthetic darknet destinations are drawn from it
DEFAULT_DARK_PREFIX = 44 << 24
DEFAULT_DARK_BITS = 8


class PcapError(Exception):
    pass


class PacketRecord(NamedTuple):
    src: int
    dst: int


@dataclass
class IngestStats:
    packets_seen: int = 0
    ipv4_extracted: int = 0
    skipped_non_ipv4: int = 0
    skipped_malformed: int = 0

    def conserved(self) -> bool:
        return self.packets_seen == (
            self.ipv4_extracted + self.skipped_non_ipv4 + self.skipped_malformed)

    def merge(self, other: "IngestStats") -> None:
        self.packets_seen += other.packets_seen
        self.ipv4_extracted += other.ipv4_extracted
        self.skipped_non_ipv4 += other.skipped_non_ipv4
        self.skipped_malformed += other.skipped_malformed


def _open_bytes(path) -> memoryview:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            if path.stat().st_size == 0:
                return memoryview(b"")
            return memoryview(mmap.mmap(fh.fileno(), 0, access=mmap.ACCESS_READ))
    except OSError as exc:
        raise PcapError(f"{path}: cannot read: {exc}") from None


def _parse_global_header(buf, name) -> str:
    if len(buf) < _GLOBAL_HDR:
        raise PcapError(f"{name}: too short for a pcap global header ({len(buf)} bytes)")
    (magic,) = struct.unpack_from("<I", buf, 0)
    if magic in (PCAP_MAGIC, PCAP_MAGIC_NS):
        endian = "<"
    elif magic in (0xD4C3B2A1, 0x4D3CB2A1):
        endian = ">"
    else:
        raise PcapError(f"{name}: unknown pcap magic 0x{magic:08x} (pcapng is not supported)")
    linktype = struct.unpack_from(endian + "I", buf, 20)[0] & 0x0FFFFFFF
    if linktype != LINKTYPE_ETHERNET:
        raise PcapError(f"{name}: unsupported link type {linktype} (only Ethernet)")
    return endian


def _record_offsets(buf, endian: str) -> tuple[np.ndarray, np.ndarray, int]:
    """Locate every record; returns (data offsets, capture lengths, truncated count).

    Fixed-stride files (what :func:`write_pcap` emits) are detected and indexed
    without a Python loop; the stride is verified against every record header.
    """
    size = len(buf)
    rec_len = np.dtype(endian + "u4")
    if size >= _GLOBAL_HDR + _REC_HDR:
        incl0 = struct.unpack_from(endian + "I", buf, _GLOBAL_HDR + 8)[0]
        stride = _REC_HDR + incl0
        body = size - _GLOBAL_HDR
        if incl0 > 0 and body % stride == 0:
            n = body // stride
            arr = np.frombuffer(buf, dtype=np.uint8, offset=_GLOBAL_HDR).reshape(n, stride)
            incl = arr[:, 8:12].copy().view(rec_len).ravel()
            if np.all(incl == incl0):
                offs = _GLOBAL_HDR + _REC_HDR + np.arange(n, dtype=np.int64) * stride
                return offs, incl.astype(np.int64), 0

    offs, lens = [], []
    off = _GLOBAL_HDR
    unpack = struct.Struct(endian + "I").unpack_from
    truncated = 0
    while off < size:
        if off + _REC_HDR > size:
            truncated = 1
            break
        incl = unpack(buf, off + 8)[0]
        if off + _REC_HDR + incl > size:
            truncated = 1
            break
        offs.append(off + _REC_HDR)
        lens.append(incl)
        off += _REC_HDR + incl
    return np.array(offs, dtype=np.int64), np.array(lens, dtype=np.int64), truncated


def _gather_u16(data: np.ndarray, pos: np.ndarray) -> np.ndarray:
    return (data[pos].astype(np.uint16) << 8) | data[pos + 1]


def _gather_u32(data: np.ndarray, pos: np.ndarray) -> np.ndarray:
    return ((data[pos].astype(np.uint32) << 24) | (data[pos + 1].astype(np.uint32) << 16)
            | (data[pos + 2].astype(np.uint32) << 8) | data[pos + 3])


def _extract(data: np.ndarray, offs: np.ndarray, lens: np.ndarray, stats: IngestStats):
    """Pull IPv4 (src, dst) out of Ethernet frames; never reads past a capture length."""
    n = offs.size
    ok_eth = lens >= ETH_HDR
    etype = np.zeros(n, dtype=np.uint16)
    etype[ok_eth] = _gather_u16(data, offs[ok_eth] + 12)
    l3 = offs + ETH_HDR
    room = lens - ETH_HDR

    vlan = ok_eth & (etype == ETHERTYPE_VLAN)
    ok_vlan = vlan & (lens >= ETH_HDR + VLAN_TAG)
    etype[ok_vlan] = _gather_u16(data, offs[ok_vlan] + 16)
    l3 = np.where(vlan, l3 + VLAN_TAG, l3)
    room = np.where(vlan, room - VLAN_TAG, room)
    malformed = ~ok_eth | (vlan & ~ok_vlan)

    is_ip = ~malformed & (etype == ETHERTYPE_IPV4)
    non_ip = ~malformed & ~is_ip
    short = is_ip & (room < IPV4_MIN_HDR)
    is_ip &= ~short
    vihl = np.zeros(n, dtype=np.uint8)
    vihl[is_ip] = data[l3[is_ip]]
    bad_hdr = is_ip & (((vihl >> 4) != 4) | ((vihl & 0x0F) < 5))
    good = is_ip & ~bad_hdr

    stats.packets_seen += n
    stats.skipped_non_ipv4 += int(non_ip.sum())
    stats.skipped_malformed += int(malformed.sum() + short.sum() + bad_hdr.sum())
    stats.ipv4_extracted += int(good.sum())
    pos = l3[good]
    return _gather_u32(data, pos + 12), _gather_u32(data, pos + 16)


def read_pcap_chunks(path, chunk: int = DEFAULT_CHUNK, stats: IngestStats | None = None
                     ) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(src, dst)`` array chunks in file order; updates ``stats`` in place.

    A record whose declared capture length runs past end-of-file counts as
    malformed and ends the stream.
    """
    stats = stats if stats is not None else IngestStats()
    buf = _open_bytes(path)
    endian = _parse_global_header(buf, path)
    offs, lens, truncated = _record_offsets(buf, endian)
    data = np.frombuffer(buf, dtype=np.uint8)
    for lo in range(0, offs.size, chunk):
        src, dst = _extract(data, offs[lo:lo + chunk], lens[lo:lo + chunk], stats)
        if src.size:
            yield src, dst
    stats.packets_seen += truncated
    stats.skipped_malformed += truncated


def read_pcap(path, stats: IngestStats | None = None) -> Iterator[PacketRecord]:
    for src, dst in read_pcap_chunks(path, stats=stats):
        for s, d in zip(src.tolist(), dst.tolist()):
            yield PacketRecord(s, d)


def _ipv4_checksums(hdr: np.ndarray) -> np.ndarray:
    words = (hdr[:, 0::2].astype(np.uint32) << 8) | hdr[:, 1::2]
    s = words.sum(axis=1, dtype=np.uint32)
    s = (s & 0xFFFF) + (s >> 16)
    s = (s & 0xFFFF) + (s >> 16)
    return (~s & 0xFFFF).astype(np.uint16)


def write_pcap(records, path, *, snaplen: int = 65535) -> int:
    """Write a minimal Ethernet/IPv4 pcap with header-only packets.

    ``records`` is a sequence of (src, dst) pairs or a ``(src, dst)`` array
    tuple. Each packet is 14 + 20 captured bytes; returns the packet count.
    """
    if isinstance(records, tuple) and len(records) == 2 and isinstance(records[0], np.ndarray):
        src, dst = records
    else:
        arr = np.asarray(list(records), dtype=np.int64).reshape(-1, 2)
        src, dst = arr[:, 0], arr[:, 1]
    src = np.asarray(src, dtype=np.uint32)
    dst = np.asarray(dst, dtype=np.uint32)
    n = src.size
    frame = ETH_HDR + IPV4_MIN_HDR
    rec = np.zeros((n, _REC_HDR + frame), dtype=np.uint8)
    idx = np.arange(n, dtype=np.uint64)
    hdr = rec[:, :_REC_HDR].view("<u4")
    hdr[:, 0] = (idx // 1_000_000).astype(np.uint32)
    hdr[:, 1] = (idx % 1_000_000).astype(np.uint32)
    hdr[:, 2] = frame
    hdr[:, 3] = frame
    eth = rec[:, _REC_HDR:_REC_HDR + ETH_HDR]
    eth[:, 5] = 0x02
    eth[:, 11] = 0x01
    eth[:, 12:14] = (0x08, 0x00)
    ip = rec[:, _REC_HDR + ETH_HDR:]
    ip[:, 0] = 0x45
    ip[:, 3] = IPV4_MIN_HDR
    ip[:, 4:6] = (idx & 0xFFFF).astype(">u2").view(np.uint8).reshape(n, 2)
    ip[:, 8] = 64
    ip[:, 9] = 253  # experimental protocol number; no transport header follows
    ip[:, 12:16] = src.astype(">u4").view(np.uint8).reshape(n, 4)
    ip[:, 16:20] = dst.astype(">u4").view(np.uint8).reshape(n, 4)
    ip[:, 10:12] = _ipv4_checksums(ip).astype(">u2").view(np.uint8).reshape(n, 2)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<IHHiIII", PCAP_MAGIC, 2, 4, 0, 0, snaplen, LINKTYPE_ETHERNET))
        fh.write(rec.tobytes())
    return n


@dataclass(frozen=True)
class TrafficModel:
    """Synthetic traffic shape.

    ``uniform``: independent uniform 32-bit sources and destinations.
    ``zipf``: sources drawn by rank with P(k) ~ k^-alpha from a random pool,
    destinations uniform inside a dark /8 (heavy-tailed source fan-out).
    ``scan``: ``n_sources`` scanners, each sweeping consecutive destinations.
    """

    name: str = "zipf"
    alpha: float = 1.2
    pool_size: int = 1 << 20
    n_sources: int = 4
    dark_prefix: int = DEFAULT_DARK_PREFIX
    dark_bits: int = DEFAULT_DARK_BITS

    def __post_init__(self):
        if self.name not in ("uniform", "zipf", "scan"):
            raise ValueError(f"unknown traffic model {self.name!r}")
        if self.name == "zipf" and not (self.alpha > 0 and self.pool_size >= 1):
            raise ValueError("zipf model needs alpha > 0 and pool_size >= 1")
        if self.name == "scan" and self.n_sources < 1:
            raise ValueError("scan model needs n_sources >= 1")
        if not 0 <= self.dark_bits <= 32:
            raise ValueError("dark_bits must be in [0, 32]")

    @classmethod
    def parse(cls, text: str) -> "TrafficModel":
        """Parse ``uniform``, ``zipf[:alpha]`` or ``scan[:n_sources]``."""
        name, _, arg = text.partition(":")
        name = {"zipf-sources": "zipf", "scan-sweep": "scan"}.get(name, name)
        try:
            if name == "zipf":
                return cls("zipf", alpha=float(arg) if arg else 1.2)
            if name == "scan":
                return cls("scan", n_sources=int(arg) if arg else 4)
        except ValueError as exc:
            raise ValueError(f"bad model parameter in {text!r}: {exc}") from None
        if arg:
            raise ValueError(f"model {name!r} takes no parameter")
        return cls(name)


class _Generator:
    def __init__(self, seed: int, model: TrafficModel):
        self.model = model
        self.rng = np.random.default_rng(seed)
        if model.name == "zipf":
            ranks = np.arange(1, model.pool_size + 1, dtype=np.float64)
            cdf = np.cumsum(ranks ** -model.alpha)
            self.cdf = cdf / cdf[-1]
            self.pool = self.rng.integers(0, 1 << 32, model.pool_size, dtype=np.uint32)
        elif model.name == "scan":
            self.scanners = self.rng.integers(0, 1 << 32, model.n_sources, dtype=np.uint32)
            self.bases = self._dark(model.n_sources)
        self.emitted = 0

    def _dark(self, n: int) -> np.ndarray:
        m = self.model
        low = self.rng.integers(0, 1 << (32 - m.dark_bits), n, dtype=np.uint64)
        high = np.uint64(m.dark_prefix) & np.uint64((0xFFFFFFFF << (32 - m.dark_bits)) & 0xFFFFFFFF)
        return (high | low).astype(np.uint32)

    def chunk(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        m = self.model
        if m.name == "uniform":
            src = self.rng.integers(0, 1 << 32, n, dtype=np.uint32)
            dst = self.rng.integers(0, 1 << 32, n, dtype=np.uint32)
        elif m.name == "zipf":
            ranks = np.searchsorted(self.cdf, self.rng.random(n), side="right")
            src = self.pool[np.minimum(ranks, m.pool_size - 1)]
            dst = self._dark(n)
        else:
            k = np.arange(self.emitted, self.emitted + n, dtype=np.uint64)
            who = (k % np.uint64(m.n_sources)).astype(np.intp)
            step = k // np.uint64(m.n_sources)
            src = self.scanners[who]
            span = np.uint64(1 << (32 - m.dark_bits)) if m.dark_bits else np.uint64(1 << 32)
            base = self.bases[who].astype(np.uint64)
            high = base - base % span
            dst = (high + (base % span + step) % span).astype(np.uint32)
        self.emitted += n
        return src, dst


def synth_chunks(seed: int, n_packets: int, model: TrafficModel | str = "zipf",
                 chunk: int = DEFAULT_CHUNK) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Deterministic ``(src, dst)`` chunks; identical for a given seed and chunk size."""
    if isinstance(model, str):
        model = TrafficModel.parse(model)
    if n_packets < 0:
        raise ValueError("n_packets must be nonnegative")
    gen = _Generator(seed, model)
    left = n_packets
    while left > 0:
        take = min(chunk, left)
        yield gen.chunk(take)
        left -= take


def synth_arrays(seed: int, n_packets: int, model: TrafficModel | str = "zipf"
                 ) -> tuple[np.ndarray, np.ndarray]:
    chunks = list(synth_chunks(seed, n_packets, model))
    if not chunks:
        return np.empty(0, np.uint32), np.empty(0, np.uint32)
    return np.concatenate([c[0] for c in chunks]), np.concatenate([c[1] for c in chunks])


def synth_traffic(seed: int, n_packets: int, model: TrafficModel | str = "zipf"
                  ) -> Iterator[PacketRecord]:
    for src, dst in synth_chunks(seed, n_packets, model):
        for s, d in zip(src.tolist(), dst.tolist()):
            yield PacketRecord(s, d)
