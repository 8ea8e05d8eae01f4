"""Streaming pipeline: rings -> blocks -> window matrices -> TAR archives.

Each ring has one ingest thread that packs ``(src, dst)`` pairs into a
block buffer (2^23 packets = 64 MiB by default). Full blocks go through a
bounded queue to a pool of matrix workers. A worker cuts its block into
windows, anonymizes and counts each window into a matrix, serializes it, and
writes the block's TAR. The worker owns the buffer it takes off the queue, so
no buffer is ever shared.
"""
from __future__ import annotations

import gzip
import io
import json
import logging
import os
import queue
import resource
import shutil
import statistics
import tarfile
import tempfile
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .anonymizer import Anonymizer
from .ingest import IngestStats, read_pcap_chunks
from .matrix import build_matrix, serialize

log = logging.getLogger(__name__)

BITS_PER_PACKET = 10_000
ENTRY_FMT = "win_{}.hstm"
ARCHIVE_FMT = "block_{}.tar"

Chunks = Iterable[tuple[np.ndarray, np.ndarray]]


class ConfigError(ValueError):
    pass


class PipelineError(RuntimeError):
    """A stage failed; ``manifest`` lists the archives completed before the failure."""

    def __init__(self, message: str, manifest: list[str]):
        super().__init__(message)
        self.manifest = manifest


def _pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def default_workers(n_rings: int) -> int:
    return max(1, (os.cpu_count() or 1) - n_rings)


@dataclass
class PipelineConfig:
    out_dir: Path | str
    n_rings: int = 1
    block_packets: int = 1 << 23
    window_packets: int = 1 << 17
    windows_per_tar: int = 64
    anon_mode: str = "auto"
    queue_depth: int = 2
    backpressure: str = "block"
    flush_partial: bool = False
    gzip: bool = False
    deterministic: bool = False
    max_workers: int | None = None
    single_threaded: bool = False

    def __post_init__(self):
        self.out_dir = Path(self.out_dir)
        for name in ("block_packets", "window_packets", "windows_per_tar"):
            if not _pow2(getattr(self, name)):
                raise ConfigError(f"{name} must be a power of two, got {getattr(self, name)}")
        if self.block_packets != self.windows_per_tar * self.window_packets:
            raise ConfigError("block_packets must equal windows_per_tar * window_packets")
        if self.n_rings < 1:
            raise ConfigError("n_rings must be >= 1")
        if self.queue_depth < 1:
            raise ConfigError("queue_depth must be >= 1")
        if self.backpressure != "block":
            raise ConfigError("file mode only supports the 'block' backpressure policy")
        if self.anon_mode not in ("auto", "table", "direct"):
            raise ConfigError(f"unknown anonymization mode {self.anon_mode!r}")
        if self.max_workers is not None and self.max_workers < 1:
            raise ConfigError("max_workers must be >= 1")

    @property
    def workers(self) -> int:
        if self.single_threaded:
            return 1
        return self.max_workers or default_workers(self.n_rings)


@dataclass
class Block:
    ring: int
    first_index: int
    src: np.ndarray
    dst: np.ndarray
    final: bool = False

    @property
    def n(self) -> int:
        return int(self.src.size)


@dataclass
class BlockResult:
    ring: int
    first_index: int
    packets: int
    windows: int
    partial_windows: int
    archived_packets: int
    unarchived_packets: int
    archive: str | None
    archive_bytes: int


@dataclass
class PipelineReport:
    n_rings: int
    packets_per_ring: list[int]
    total_packets: int
    windows_emitted: int
    partial_windows: int
    archives_written: int
    archived_packets: int
    unarchived_packets: int
    dropped_packets: int
    bytes_written: int
    wall_time_s: float
    packets_per_sec: float
    anonymization_mode: str
    workers: int
    archives: list[str] = field(default_factory=list)
    ingest: list[dict] = field(default_factory=list)

    def to_json(self, **kw) -> str:
        return json.dumps(asdict(self), **kw)


def _tar_bytes(entries: list[tuple[str, bytes]], deterministic: bool) -> bytes:
    buf = io.BytesIO()
    mtime = 0 if deterministic else int(time.time())
    with tarfile.open(fileobj=buf, mode="w", format=tarfile.USTAR_FORMAT) as tar:
        for name, data in entries:
            info = tarfile.TarInfo(name)
            info.size = len(data)
            info.mtime = mtime
            info.mode = 0o644
            info.uid = info.gid = 0
            info.uname = info.gname = ""
            tar.addfile(info, io.BytesIO(data))
    return buf.getvalue()


def _write_atomic(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".part")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def ring_dir(out_dir: Path, ring: int) -> Path:
    return Path(out_dir) / f"ring_{ring}"


class _Run:
    def __init__(self, config: PipelineConfig, anonymizer: Anonymizer):
        self.cfg = config
        self.anon = anonymizer
        self.results: list[BlockResult] = []
        self.lock = threading.Lock()
        self.failed = threading.Event()
        self.errors: list[BaseException] = []

    def manifest(self) -> list[str]:
        with self.lock:
            return sorted(r.archive for r in self.results if r.archive)

    def process_block(self, block: Block) -> BlockResult:
        cfg = self.cfg
        w = cfg.window_packets
        full, rem = divmod(block.n, w)
        bounds = [(k * w, (k + 1) * w) for k in range(full)]
        if rem and cfg.flush_partial:
            bounds.append((full * w, block.n))
        entries = []
        for lo, hi in bounds:
            both = self.anon(np.concatenate((block.src[lo:hi], block.dst[lo:hi])))
            m = build_matrix(both[:hi - lo], both[hi - lo:], anonymized=True)
            entries.append((ENTRY_FMT.format(block.first_index + lo), serialize(m)))
        archived = bounds[-1][1] if bounds else 0
        archive, nbytes = None, 0
        if entries:
            data = _tar_bytes(entries, cfg.deterministic)
            name = ARCHIVE_FMT.format(block.first_index)
            if cfg.gzip:
                data = gzip.compress(data, compresslevel=6, mtime=0 if cfg.deterministic else None)
                name += ".gz"
            path = ring_dir(cfg.out_dir, block.ring) / name
            _write_atomic(path, data)
            archive, nbytes = str(path), len(data)
        return BlockResult(block.ring, block.first_index, block.n, full,
                           len(bounds) - full, archived, block.n - archived, archive, nbytes)

    def record(self, result: BlockResult) -> None:
        with self.lock:
            self.results.append(result)

    def blocks(self, ring: int, source: Chunks) -> Iterator[Block]:
        """Pack a chunk stream into blocks of ``block_packets`` (last one may be short)."""
        size = self.cfg.block_packets
        src_buf = np.empty(size, np.uint32)
        dst_buf = np.empty(size, np.uint32)
        fill = 0
        first = 0
        for src, dst in source:
            src = np.asarray(src, dtype=np.uint32)
            dst = np.asarray(dst, dtype=np.uint32)
            pos = 0
            while pos < src.size:
                take = min(size - fill, src.size - pos)
                src_buf[fill:fill + take] = src[pos:pos + take]
                dst_buf[fill:fill + take] = dst[pos:pos + take]
                fill += take
                pos += take
                if fill == size:
                    yield Block(ring, first, src_buf, dst_buf)
                    first += size
                    src_buf = np.empty(size, np.uint32)
                    dst_buf = np.empty(size, np.uint32)
                    fill = 0
            if self.failed.is_set():
                return
        if fill:
            yield Block(ring, first, src_buf[:fill], dst_buf[:fill], final=True)


def _ring_sources(inputs: Sequence) -> list[Chunks]:
    if not inputs:
        raise ConfigError("need at least one packet source")
    return list(inputs)


def run_pipeline(config: PipelineConfig, inputs: Sequence[Chunks], anonymizer: Anonymizer,
                 ingest_stats: Sequence[IngestStats] | None = None) -> PipelineReport:
    """Run every ring's source to exhaustion and archive its windows.

    ``inputs`` holds one chunk iterable per ring. Window membership follows
    arrival order within a ring; windows never span rings.
    """
    sources = _ring_sources(inputs)
    if len(sources) != config.n_rings:
        raise ConfigError(f"{config.n_rings} rings configured but {len(sources)} sources given")
    if config.anon_mode not in ("auto", anonymizer.mode):
        raise ConfigError(f"config wants {config.anon_mode!r} anonymization, "
                          f"anonymizer is in {anonymizer.mode!r} mode")
    for r in range(config.n_rings):
        ring_dir(config.out_dir, r).mkdir(parents=True, exist_ok=True)

    run = _Run(config, anonymizer)
    start = time.perf_counter()
    if config.single_threaded:
        _run_inline(run, sources)
    else:
        _run_threaded(run, sources)
    wall = time.perf_counter() - start

    if run.errors:
        exc = run.errors[0]
        raise PipelineError(f"pipeline failed: {type(exc).__name__}: {exc}",
                            run.manifest()) from exc

    results = sorted(run.results, key=lambda r: (r.ring, r.first_index))
    per_ring = [0] * config.n_rings
    for r in results:
        per_ring[r.ring] += r.packets
    total = sum(per_ring)
    return PipelineReport(
        n_rings=config.n_rings,
        packets_per_ring=per_ring,
        total_packets=total,
        windows_emitted=sum(r.windows + r.partial_windows for r in results),
        partial_windows=sum(r.partial_windows for r in results),
        archives_written=sum(1 for r in results if r.archive),
        archived_packets=sum(r.archived_packets for r in results),
        unarchived_packets=sum(r.unarchived_packets for r in results),
        dropped_packets=0,
        bytes_written=sum(r.archive_bytes for r in results),
        wall_time_s=wall,
        packets_per_sec=total / wall if wall > 0 else 0.0,
        anonymization_mode=anonymizer.mode,
        workers=config.workers,
        archives=[r.archive for r in results if r.archive],
        ingest=[asdict(s) for s in ingest_stats] if ingest_stats else [],
    )


def _run_inline(run: _Run, sources: list[Chunks]) -> None:
    try:
        for ring, source in enumerate(sources):
            for block in run.blocks(ring, source):
                run.record(run.process_block(block))
    except Exception as exc:  # surfaced as PipelineError by the caller
        run.errors.append(exc)


_DONE = object()


def _run_threaded(run: _Run, sources: list[Chunks]) -> None:
    cfg = run.cfg
    q: queue.Queue = queue.Queue(maxsize=cfg.queue_depth * cfg.n_rings)

    def put(item) -> bool:
        while not run.failed.is_set():
            try:
                q.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def ingest(ring: int, source: Chunks) -> None:
        try:
            for block in run.blocks(ring, source):
                if not put(block):
                    return
        except Exception as exc:
            with run.lock:
                run.errors.append(exc)
            run.failed.set()

    def worker() -> None:
        while True:
            item = q.get()
            if item is _DONE:
                return
            if run.failed.is_set():
                continue
            try:
                run.record(run.process_block(item))
            except Exception as exc:
                with run.lock:
                    run.errors.append(exc)
                run.failed.set()

    workers = [threading.Thread(target=worker, name=f"matrix-{k}", daemon=True)
               for k in range(cfg.workers)]
    ingests = [threading.Thread(target=ingest, args=(r, s), name=f"ring-{r}", daemon=True)
               for r, s in enumerate(sources)]
    for t in workers + ingests:
        t.start()
    for t in ingests:
        t.join()
    for _ in workers:
        q.put(_DONE)
    for t in workers:
        t.join()


def assign_files(paths: Sequence, n_rings: int) -> list[list[Path]]:
    """Round-robin input files over rings; every ring needs at least one file."""
    if len(paths) < n_rings:
        raise ConfigError(f"{n_rings} rings need at least {n_rings} input files, got {len(paths)}")
    groups: list[list[Path]] = [[] for _ in range(n_rings)]
    for k, p in enumerate(paths):
        groups[k % n_rings].append(Path(p))
    return groups


def pcap_sources(groups: list[list[Path]]) -> tuple[list[Chunks], list[IngestStats]]:
    stats = [IngestStats() for _ in groups]

    def chain(files, st):
        for f in files:
            yield from read_pcap_chunks(f, stats=st)

    return [chain(files, st) for files, st in zip(groups, stats)], stats


def array_chunks(src: np.ndarray, dst: np.ndarray, chunk: int = 1 << 20) -> Iterator:
    for lo in range(0, src.size, chunk):
        yield src[lo:lo + chunk], dst[lo:lo + chunk]


def shard(src: np.ndarray, dst: np.ndarray, n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split preloaded packets into ``n`` contiguous ring shards (views, no copies)."""
    edges = np.linspace(0, src.size, n + 1).astype(np.int64)
    return [(src[a:b], dst[a:b]) for a, b in zip(edges[:-1], edges[1:])]


def peak_rss_bytes() -> int:
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024


@dataclass
class BenchRow:
    rings: int
    workers: int
    packets: int
    repeats: int
    packets_per_sec: float
    packets_per_sec_all: list[float]
    equivalent_bandwidth_bps: float
    archive_bytes: int
    peak_rss_bytes: int


def bench(packets: tuple[np.ndarray, np.ndarray], anonymizer: Anonymizer,
          rings_list: Sequence[int] = (1, 2, 4, 8), repeats: int = 5, *,
          window_packets: int = 1 << 17, windows_per_tar: int = 64,
          gzip: bool = False, max_workers: int | None = None,
          out_dir: Path | str | None = None) -> list[BenchRow]:
    """Packets/sec per ring count, median over ``repeats`` runs.

    Packets are preloaded so parsing stays out of the measurement; archives
    still go to disk (a temporary directory unless ``out_dir`` is given).
    """
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    if not rings_list or min(rings_list) < 1:
        raise ConfigError("rings_list must hold positive ring counts")
    src, dst = packets
    rows = []
    for rings in rings_list:
        rates, nbytes, workers = [], 0, 0
        for _ in range(repeats):
            tmp = Path(tempfile.mkdtemp(prefix="hstm-bench-", dir=out_dir))
            try:
                cfg = PipelineConfig(tmp, n_rings=rings, window_packets=window_packets,
                                     windows_per_tar=windows_per_tar,
                                     block_packets=window_packets * windows_per_tar,
                                     gzip=gzip, deterministic=True, max_workers=max_workers)
                inputs = [array_chunks(s, d) for s, d in shard(src, dst, rings)]
                rep = run_pipeline(cfg, inputs, anonymizer)
            finally:
                shutil.rmtree(tmp, ignore_errors=True)
            rates.append(rep.packets_per_sec)
            nbytes, workers = rep.bytes_written, cfg.workers
            log.info("bench rings=%d: %.0f packets/s", rings, rep.packets_per_sec)
        pps = statistics.median(rates)
        rows.append(BenchRow(rings, workers + rings, int(src.size), repeats, pps, rates,
                             pps * BITS_PER_PACKET, nbytes, peak_rss_bytes()))
    return rows


def format_bench(rows: Sequence[BenchRow]) -> str:
    lines = [f"{'rings':>5} {'workers':>7} {'packets/s':>14} {'equiv Gbit/s':>13} "
             f"{'archive MB':>10} {'peak RSS MB':>11}"]
    for r in rows:
        lines.append(f"{r.rings:>5} {r.workers:>7} {r.packets_per_sec:>14,.0f} "
                     f"{r.equivalent_bandwidth_bps / 1e9:>13.2f} {r.archive_bytes / 2**20:>10.2f} "
                     f"{r.peak_rss_bytes / 2**20:>11.1f}")
    return "\n".join(lines)
