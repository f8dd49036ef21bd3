"""File-system bandwidth harness for the virtual FS and a host directory.

Payload bytes and the random block order both come from one xorshift64
stream: the first ``file_size / 8`` words (little-endian) are the file
contents, the following ``blocks - 1`` words drive a Fisher-Yates shuffle
of block indices.
"""

from __future__ import annotations

import csv
import enum
import gc
import hashlib
import json
import os
import statistics
import tempfile
import time
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from .errors import BenchConfigError, ZeroState
from .policy import Rights
from .vfs import IoVecSeq, VirtualFS, Whence

MASK64 = (1 << 64) - 1
BENCH_PATH = "/bench/data"


def xorshift64_next(state: int) -> tuple[int, int]:
    """One step; the new state is also the output value."""
    if state == 0:
        raise ZeroState("xorshift64 state must be nonzero")
    x = state & MASK64
    x ^= (x << 13) & MASK64
    x ^= x >> 7
    x ^= (x << 17) & MASK64
    return x, x


def xorshift64_iter(seed: int) -> Iterator[int]:
    state = seed
    while True:
        value, state = xorshift64_next(state)
        yield value


# The xorshift step is linear over GF(2)^64, so a 64x64 bit matrix
# (stored as 64 column words) jumps the generator ahead any distance.

def _apply(cols: list[int], v: int) -> int:
    out = 0
    i = 0
    while v:
        if v & 1:
            out ^= cols[i]
        v >>= 1
        i += 1
    return out


def _compose(a: list[int], b: list[int]) -> list[int]:
    return [_apply(a, c) for c in b]


def _step_matrix() -> list[int]:
    return [xorshift64_next(1 << i)[0] for i in range(64)]


def _power(cols: list[int], n: int) -> list[int]:
    result = [1 << i for i in range(64)]
    while n:
        if n & 1:
            result = _compose(cols, result)
        cols = _compose(cols, cols)
        n >>= 1
    return result


def jump(state: int, n: int) -> int:
    """State after `n` steps, in O(log n) matrix work."""
    if state == 0:
        raise ZeroState("xorshift64 state must be nonzero")
    return _apply(_power(_step_matrix(), n), state)


def xorshift64_words(seed: int, count: int, lanes: int = 4096) -> np.ndarray:
    """The first `count` outputs from `seed`, computed with parallel lanes.

    Lane k starts `k * per_lane` steps ahead of the seed; stepping every
    lane `per_lane` times and concatenating lanes gives the serial stream.
    """
    if seed == 0:
        raise ZeroState("xorshift64 state must be nonzero")
    if count <= 0:
        return np.zeros(0, dtype=np.uint64)
    lanes = max(1, min(lanes, count // 64 or 1))
    per_lane = -(-count // lanes)
    stride = _power(_step_matrix(), per_lane)
    starts = [seed & MASK64]
    for _ in range(lanes - 1):
        starts.append(_apply(stride, starts[-1]))
    x = np.array(starts, dtype=np.uint64)
    out = np.empty((lanes, per_lane), dtype=np.uint64)
    s13, s7, s17 = np.uint64(13), np.uint64(7), np.uint64(17)
    for j in range(per_lane):
        x ^= x << s13
        x ^= x >> s7
        x ^= x << s17
        out[:, j] = x
    return out.reshape(-1)[:count]


def stream_bytes(seed: int, nbytes: int) -> bytes:
    words = xorshift64_words(seed, -(-nbytes // 8))
    return words.astype("<u8").tobytes()[:nbytes]


def fisher_yates(n: int, values: Iterator[int] | np.ndarray) -> list[int]:
    """Shuffle range(n); step i swaps with index ``value % (i + 1)``."""
    perm = list(range(n))
    it = iter(values)
    for i in range(n - 1, 0, -1):
        j = int(next(it)) % (i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return perm


class Mode(str, enum.Enum):
    READ = "read"
    WRITE = "write"
    UPDATE = "update"


class Pattern(str, enum.Enum):
    IN_ORDER = "inorder"
    RANDOM = "random"


class Target(str, enum.Enum):
    VFS = "vfs"
    HOST = "host"


@dataclass(frozen=True)
class BenchConfig:
    file_size: int = 64 * 1024 * 1024
    buffer_size: int = 16 * 1024
    pattern: Pattern = Pattern.IN_ORDER
    mode: Mode = Mode.READ
    seed: int = 1
    repetitions: int = 5

    def __post_init__(self) -> None:
        if self.buffer_size <= 0 or self.file_size <= 0:
            raise BenchConfigError("sizes must be positive")
        if self.file_size % self.buffer_size:
            raise BenchConfigError("buffer_size must divide file_size")
        if self.repetitions < 3:
            raise BenchConfigError("at least 3 repetitions are required")
        if not 0 < self.seed <= MASK64:
            raise BenchConfigError("seed must be a nonzero u64")

    @property
    def blocks(self) -> int:
        return self.file_size // self.buffer_size


@dataclass
class BenchReport:
    mode: str
    pattern: str
    target: str
    file_size: int
    buffer_size: int
    seed: int
    repetitions: int
    backing_fs: str
    ops_per_repetition: list[int]
    seconds: list[float]
    bandwidth_bps: list[float]
    median_bps: float
    min_bps: float
    max_bps: float
    spread: float
    slice_copies: list[int] = field(default_factory=list)
    iovec_spills: list[int] = field(default_factory=list)
    cpu_seconds: list[float] = field(default_factory=list)
    # Hypervisor steal time per repetition; empty where the host does not report it.
    steal_seconds: list[float] = field(default_factory=list)
    file_sha256: str = ""
    stream_sha256: str = ""

    def to_json(self) -> dict:
        return asdict(self)

    def write_json(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)
            fh.write("\n")

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["mode", "pattern", "target", "repetition", "ops", "seconds", "bandwidth_bps"])
            for i, (ops, s, bw) in enumerate(zip(self.ops_per_repetition, self.seconds, self.bandwidth_bps)):
                w.writerow([self.mode, self.pattern, self.target, i, ops, f"{s:.6f}", f"{bw:.1f}"])


def block_order(cfg: BenchConfig, words: np.ndarray) -> list[int]:
    if cfg.pattern is Pattern.IN_ORDER:
        return list(range(cfg.blocks))
    return fisher_yates(cfg.blocks, words[cfg.file_size // 8:])


def _generate(cfg: BenchConfig) -> tuple[bytes, list[int]]:
    nwords = cfg.file_size // 8 + (cfg.blocks - 1 if cfg.pattern is Pattern.RANDOM else 0)
    words = xorshift64_words(cfg.seed, nwords)
    data = words[: cfg.file_size // 8].astype("<u8").tobytes()
    return data, block_order(cfg, words)


_CLK_TCK = os.sysconf("SC_CLK_TCK") if hasattr(os, "sysconf") else 100


def host_steal_seconds() -> float | None:
    """Cumulative steal time from /proc/stat (10 ms resolution), None if unavailable."""
    try:
        with open("/proc/stat") as fh:
            fields = fh.readline().split()
        return int(fields[8]) / _CLK_TCK
    except (OSError, IndexError, ValueError):
        return None


def fstype_of(path: str) -> str:
    """Filesystem type of the mount holding `path`, from /proc/mounts."""
    path = os.path.realpath(path)
    best, kind = "", "unknown"
    try:
        with open("/proc/mounts") as fh:
            for line in fh:
                parts = line.split()
                if len(parts) < 3:
                    continue
                mnt = parts[1].replace("\\040", " ")
                if (path == mnt or path.startswith(mnt.rstrip("/") + "/")) and len(mnt) >= len(best):
                    best, kind = mnt, parts[2]
    except OSError:
        pass
    return kind


class _VfsTarget:
    name = "vfs"

    def __init__(self, fs: VirtualFS | None = None):
        self.fs = fs or VirtualFS()
        self.session = self.fs.session("bench")
        self.fs.mkdirs("/bench")

    def backing_fs(self) -> str:
        return "attestbox-vfs"

    def prefill(self, data: bytes) -> None:
        self.fs.write_file(BENCH_PATH, data)

    def remove(self) -> None:
        if self.fs.exists(BENCH_PATH):
            self.fs.remove(BENCH_PATH)

    def run(self, cfg: BenchConfig, data: bytes, order: list[int]) -> int:
        s, bs, ops = self.session, cfg.buffer_size, 0
        if cfg.mode is Mode.READ:
            fd = s.open(BENCH_PATH, requested=Rights.READ | Rights.SEEK)
            buf = memoryview(bytearray(bs))
            iov = IoVecSeq([(0, bs)])
            for b in order:
                s.seek(fd, b * bs, Whence.SET)
                s.read(fd, iov, buf)
                ops += 1
        else:
            create = cfg.mode is Mode.WRITE
            fd = s.open(BENCH_PATH, create=create, requested=Rights.WRITE | Rights.SEEK)
            src = memoryview(data)
            for b in order:
                s.seek(fd, b * bs, Whence.SET)
                s.write(fd, IoVecSeq([(b * bs, bs)]), src)
                ops += 1
        s.close(fd)
        return ops

    def digest(self) -> str:
        return hashlib.sha256(self.fs.read_file(BENCH_PATH)).hexdigest()

    def cleanup(self) -> None:
        pass


class _HostTarget:
    name = "host"

    def __init__(self, directory: str | None = None):
        self.dir = tempfile.mkdtemp(prefix="attestbox-bench-", dir=directory)
        self.path = os.path.join(self.dir, "data")

    def backing_fs(self) -> str:
        return fstype_of(self.dir)

    def prefill(self, data: bytes) -> None:
        with open(self.path, "wb") as fh:
            fh.write(data)

    def remove(self) -> None:
        if os.path.exists(self.path):
            os.unlink(self.path)

    def run(self, cfg: BenchConfig, data: bytes, order: list[int]) -> int:
        bs, ops = cfg.buffer_size, 0
        if cfg.mode is Mode.READ:
            fd = os.open(self.path, os.O_RDONLY)
            try:
                buf = bytearray(bs)
                for b in order:
                    os.lseek(fd, b * bs, os.SEEK_SET)
                    os.readv(fd, [buf])
                    ops += 1
            finally:
                os.close(fd)
        else:
            flags = os.O_WRONLY | (os.O_CREAT if cfg.mode is Mode.WRITE else 0)
            fd = os.open(self.path, flags, 0o600)
            src = memoryview(data)
            try:
                for b in order:
                    os.pwrite(fd, src[b * bs:(b + 1) * bs], b * bs)
                    ops += 1
            finally:
                os.close(fd)
        return ops

    def digest(self) -> str:
        h = hashlib.sha256()
        with open(self.path, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
        return h.hexdigest()

    def cleanup(self) -> None:
        self.remove()
        os.rmdir(self.dir)


def run_bench(
    cfg: BenchConfig,
    target: Target = Target.VFS,
    *,
    fs: VirtualFS | None = None,
    host_dir: str | None = None,
) -> BenchReport:
    """Time ``cfg.repetitions`` passes over the file; set-up work is untimed.

    read:   file prefilled with the stream, then read block by block
    write:  no file at the start of each pass; blocks written from the stream
    update: file prefilled with zeros, then overwritten from the stream
    """
    data, order = _generate(cfg)
    tgt = _VfsTarget(fs) if target is Target.VFS else _HostTarget(host_dir)
    ops_list: list[int] = []
    seconds: list[float] = []
    copies: list[int] = []
    spills: list[int] = []
    cpu: list[float] = []
    steal: list[float] = []
    try:
        # One untimed pass warms allocator and caches; it is not reported.
        for rep in range(cfg.repetitions + 1):
            if cfg.mode is Mode.READ:
                tgt.prefill(data)
            elif cfg.mode is Mode.UPDATE:
                tgt.prefill(bytes(cfg.file_size))
            else:
                tgt.remove()
            if isinstance(tgt, _VfsTarget):
                tgt.fs.stats.reset()
            gc_was_enabled = gc.isenabled()
            gc.disable()
            try:
                s0, c0 = host_steal_seconds(), time.thread_time()
                t0 = time.perf_counter()
                ops = tgt.run(cfg, data, order)
                elapsed = time.perf_counter() - t0
                c1, s1 = time.thread_time(), host_steal_seconds()
            finally:
                if gc_was_enabled:
                    gc.enable()
            if rep == 0:
                continue
            seconds.append(elapsed)
            ops_list.append(ops)
            cpu.append(c1 - c0)
            if s0 is not None and s1 is not None:
                steal.append(s1 - s0)
            if isinstance(tgt, _VfsTarget):
                copies.append(tgt.fs.stats.slice_copies)
                spills.append(tgt.fs.stats.iovec_spills)
        file_digest = tgt.digest()
        backing = tgt.backing_fs()
    finally:
        tgt.cleanup()
    bw = [cfg.file_size / s if s > 0 else float("inf") for s in seconds]
    med = statistics.median(bw)
    return BenchReport(
        mode=cfg.mode.value,
        pattern=cfg.pattern.value,
        target=target.value,
        file_size=cfg.file_size,
        buffer_size=cfg.buffer_size,
        seed=cfg.seed,
        repetitions=cfg.repetitions,
        backing_fs=backing,
        ops_per_repetition=ops_list,
        seconds=seconds,
        bandwidth_bps=bw,
        median_bps=med,
        min_bps=min(bw),
        max_bps=max(bw),
        spread=(max(bw) - min(bw)) / med if med else float("inf"),
        slice_copies=copies,
        iovec_spills=spills,
        cpu_seconds=cpu,
        steal_seconds=steal,
        file_sha256=file_digest,
        stream_sha256=hashlib.sha256(data).hexdigest(),
    )
