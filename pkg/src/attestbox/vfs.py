"""In-memory filesystem with per-actor capability checks.

Inodes live in one hash table keyed by inode number; directories map names
to inode numbers; regular files are growable byte arrays. Reads and writes
move bytes directly between a caller-supplied memory view (the guest's linear
memory, or any writable buffer) and the file storage, one slice copy per
iovec buffer and no intermediate buffer.
"""

from __future__ import annotations

import enum
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Protocol

from .errors import (
    AccessDenied,
    BadDescriptor,
    InvalidPath,
    IsDirectory,
    NegativeOffset,
    NotDirectory,
    NotFound,
    OutOfBoundsIoVec,
    PathExists,
    TooManyDescriptors,
)
from .policy import ALL_RIGHTS, Rights, is_normalized_path

ROOT_INODE = 0
FIRST_FD = 3
MAX_DESCRIPTORS = 1024

RightsResolver = Callable[[str, str], Rights]


class Kind(enum.Enum):
    REGULAR_FILE = "RegularFile"
    DIRECTORY = "Directory"
    SPECIAL_FILE = "SpecialFile"


class Whence(enum.IntEnum):
    SET = 0
    CUR = 1
    END = 2


class SpecialDevice(Protocol):
    """Host-side handler bound to special-file inodes."""

    def opened(self, ino: int, writable: bool, truncate: bool) -> None: ...

    def closed(self, ino: int, writable: bool) -> None: ...

    def size(self, ino: int) -> int: ...

    def write_from(self, ino: int, offset: int, src: memoryview) -> int: ...

    def read_into(self, ino: int, offset: int, dst: memoryview) -> int: ...


@dataclass(slots=True)
class Inode:
    kind: Kind
    parent: int
    data: bytearray | None = None
    entries: dict[str, int] | None = None
    module_id: str | None = None

    @property
    def size(self) -> int:
        return len(self.data) if self.data is not None else 0


@dataclass(slots=True)
class FileDescriptor:
    fd: int
    inode: int
    offset: int
    rights: Rights
    path: str


@dataclass(frozen=True)
class FileStat:
    kind: Kind
    size: int
    inode: int


@dataclass
class IoStats:
    """Counters for the no-copy path; tests assert one pass per call."""

    calls: int = 0
    bytes_copied: int = 0
    slice_copies: int = 0
    iovec_spills: int = 0

    def reset(self) -> None:
        self.calls = self.bytes_copied = self.slice_copies = self.iovec_spills = 0


@dataclass(frozen=True)
class AuditRecord:
    actor: str
    op: str
    path: str
    allowed: bool


class IoVecSeq:
    """Sequence of (offset, length) buffer descriptors.

    Up to two descriptors are held in slots on the object itself; longer
    sequences (or ``spill=True``) keep them in a heap-allocated list.
    """

    __slots__ = ("_n", "_a", "_b", "_heap")

    def __init__(self, buffers: Iterable[tuple[int, int]] = (), *, spill: bool = False):
        bufs = buffers if isinstance(buffers, (list, tuple)) else list(buffers)
        self._n = len(bufs)
        self._a = self._b = None
        self._heap: list[tuple[int, int]] | None = None
        if spill or self._n > 2:
            self._heap = [(int(o), int(n)) for o, n in bufs]
        else:
            if self._n >= 1:
                self._a = (int(bufs[0][0]), int(bufs[0][1]))
            if self._n == 2:
                self._b = (int(bufs[1][0]), int(bufs[1][1]))

    @property
    def spilled(self) -> bool:
        return self._heap is not None

    def __len__(self) -> int:
        return self._n

    def __iter__(self) -> Iterator[tuple[int, int]]:
        if self._heap is not None:
            yield from self._heap
            return
        if self._a is not None:
            yield self._a
        if self._b is not None:
            yield self._b

    def total_length(self) -> int:
        return sum(n for _, n in self)

    def __repr__(self) -> str:
        return f"IoVecSeq({list(self)!r}, spilled={self.spilled})"


def _split(path: str) -> list[str]:
    return [p for p in path.strip("/").split("/") if p]


class VirtualFS:
    """Shared filesystem state. Each actor works through its own `FsSession`."""

    def __init__(self, rights: RightsResolver | None = None, *, audit: bool = False):
        self._rights = rights or (lambda actor, path: ALL_RIGHTS)
        self.lock = threading.RLock()
        self.inodes: dict[int, Inode] = {ROOT_INODE: Inode(Kind.DIRECTORY, ROOT_INODE, entries={})}
        self.next_inode = 1
        self.devices: dict[str, SpecialDevice] = {}
        self.stats = IoStats()
        self.audit_enabled = audit
        self.audit_log: list[AuditRecord] = []

    def session(
        self, actor: str, first_fd: int = FIRST_FD, rights: Callable[[str], Rights] | None = None
    ) -> "FsSession":
        return FsSession(self, actor, first_fd, rights)

    def rights_of(self, actor: str, path: str) -> Rights:
        return self._rights(actor, path)

    def _audit(self, actor: str, op: str, path: str, allowed: bool) -> None:
        if self.audit_enabled:
            self.audit_log.append(AuditRecord(actor, op, path, allowed))

    # path helpers, called with the lock held
    def _resolve(self, path: str) -> int:
        ino = ROOT_INODE
        for name in _split(path):
            node = self.inodes[ino]
            if node.kind is not Kind.DIRECTORY:
                raise NotDirectory(path)
            assert node.entries is not None
            try:
                ino = node.entries[name]
            except KeyError:
                raise NotFound(path) from None
        return ino

    def _parent_and_name(self, path: str, mkdirs: bool) -> tuple[int, str]:
        parts = _split(path)
        if not parts:
            raise IsDirectory(path)
        ino = ROOT_INODE
        for name in parts[:-1]:
            node = self.inodes[ino]
            if node.kind is not Kind.DIRECTORY:
                raise NotDirectory(path)
            assert node.entries is not None
            nxt = node.entries.get(name)
            if nxt is None:
                if not mkdirs:
                    raise NotFound(path)
                nxt = self._new_inode(Inode(Kind.DIRECTORY, ino, entries={}))
                node.entries[name] = nxt
            ino = nxt
        if self.inodes[ino].kind is not Kind.DIRECTORY:
            raise NotDirectory(path)
        return ino, parts[-1]

    def _new_inode(self, node: Inode) -> int:
        ino = self.next_inode
        self.next_inode += 1
        self.inodes[ino] = node
        return ino

    def _link(self, path: str, node: Inode, mkdirs: bool) -> int:
        parent, name = self._parent_and_name(path, mkdirs)
        entries = self.inodes[parent].entries
        assert entries is not None
        if name in entries:
            raise PathExists(path)
        node.parent = parent
        ino = self._new_inode(node)
        entries[name] = ino
        return ino

    # privileged host-side operations (no capability checks)
    def mkdirs(self, path: str) -> None:
        if not is_normalized_path(path):
            raise InvalidPath(path)
        with self.lock:
            ino = ROOT_INODE
            for name in _split(path):
                entries = self.inodes[ino].entries
                if entries is None:
                    raise NotDirectory(path)
                if name not in entries:
                    entries[name] = self._new_inode(Inode(Kind.DIRECTORY, ino, entries={}))
                ino = entries[name]

    def create_special(self, path: str, module_id: str, device: SpecialDevice) -> int:
        if not is_normalized_path(path, allow_trailing_slash=False) or path == "/":
            raise InvalidPath(path)
        with self.lock:
            ino = self._link(path, Inode(Kind.SPECIAL_FILE, 0, module_id=module_id), mkdirs=True)
            self.devices[module_id] = device
            return ino

    def exists(self, path: str) -> bool:
        with self.lock:
            try:
                self._resolve(path)
                return True
            except (NotFound, NotDirectory):
                return False

    def stat_path(self, path: str) -> FileStat:
        if not is_normalized_path(path):
            raise InvalidPath(path)
        with self.lock:
            ino = self._resolve(path)
            return self._stat(ino)

    def _stat(self, ino: int) -> FileStat:
        node = self.inodes[ino]
        if node.kind is Kind.SPECIAL_FILE:
            size = self.devices[node.module_id].size(ino)  # type: ignore[index]
        else:
            size = node.size
        return FileStat(node.kind, size, ino)

    def read_file(self, path: str) -> bytes:
        """Host-side snapshot of a regular file."""
        with self.lock:
            node = self.inodes[self._resolve(path)]
            if node.kind is Kind.DIRECTORY:
                raise IsDirectory(path)
            if node.data is None:
                raise NotFound(path)
            return bytes(node.data)

    def write_file(self, path: str, data: bytes, *, mkdirs: bool = False) -> None:
        """Replace (or create) a regular file's contents, bypassing capability checks."""
        if not is_normalized_path(path, allow_trailing_slash=False):
            raise InvalidPath(path)
        with self.lock:
            try:
                ino = self._resolve(path)
            except NotFound:
                ino = self._link(path, Inode(Kind.REGULAR_FILE, 0, data=bytearray()), mkdirs)
            node = self.inodes[ino]
            if node.kind is not Kind.REGULAR_FILE:
                raise IsDirectory(path)
            node.data = bytearray(data)

    def remove(self, path: str) -> None:
        """Unlink a regular file. Callers must not hold descriptors on it."""
        with self.lock:
            parent, name = self._parent_and_name(path, mkdirs=False)
            entries = self.inodes[parent].entries
            assert entries is not None
            ino = entries.get(name)
            if ino is None:
                raise NotFound(path)
            if self.inodes[ino].kind is not Kind.REGULAR_FILE:
                raise IsDirectory(path)
            del entries[name]
            del self.inodes[ino]

    def list_files(self) -> dict[str, FileStat]:
        """Every non-directory path in the tree."""
        out: dict[str, FileStat] = {}
        with self.lock:
            stack = [("", ROOT_INODE)]
            while stack:
                prefix, ino = stack.pop()
                for name, child in (self.inodes[ino].entries or {}).items():
                    path = f"{prefix}/{name}"
                    if self.inodes[child].kind is Kind.DIRECTORY:
                        stack.append((path, child))
                    else:
                        out[path] = self._stat(child)
        return out

    def check_invariants(self) -> None:
        """Assert the inode-table invariants; used by tests."""
        with self.lock:
            assert self.inodes[ROOT_INODE].kind is Kind.DIRECTORY
            for ino, node in self.inodes.items():
                if node.kind is Kind.DIRECTORY:
                    for name, child in (node.entries or {}).items():
                        assert name and "/" not in name
                        assert child in self.inodes
                seen = set()
                cur = ino
                while cur != ROOT_INODE:
                    assert cur not in seen, "directory cycle"
                    seen.add(cur)
                    cur = self.inodes[cur].parent


def _check_bounds(iov: IoVecSeq, mem_len: int) -> None:
    for off, n in iov:
        if off < 0 or n < 0 or off + n > mem_len:
            raise OutOfBoundsIoVec(f"buffer ({off}, {n}) outside memory of {mem_len} bytes")


class FsSession:
    """One actor's descriptor table over a shared `VirtualFS`."""

    def __init__(
        self,
        fs: VirtualFS,
        actor: str,
        first_fd: int = FIRST_FD,
        rights: Callable[[str], Rights] | None = None,
    ):
        self.fs = fs
        self.actor = actor
        self.first_fd = first_fd
        self.fds: dict[int, FileDescriptor] = {}
        self._rights = rights

    def granted(self, path: str) -> Rights:
        if self._rights is not None:
            return self._rights(path)
        return self.fs.rights_of(self.actor, path)

    def _alloc_fd(self) -> int:
        if len(self.fds) >= MAX_DESCRIPTORS:
            raise TooManyDescriptors(self.actor)
        fd = self.first_fd
        while fd in self.fds:
            fd += 1
        return fd

    def _get(self, fd: int) -> FileDescriptor:
        try:
            return self.fds[fd]
        except KeyError:
            raise BadDescriptor(fd) from None

    def _require(self, desc: FileDescriptor, right: Rights, op: str) -> None:
        if right not in desc.rights:
            self.fs._audit(self.actor, op, desc.path, False)
            raise AccessDenied(f"{self.actor}: {op} on {desc.path} not permitted")

    def open(
        self,
        path: str,
        *,
        create: bool = False,
        truncate: bool = False,
        requested: Rights = Rights.READ,
        mkdirs: bool = False,
    ) -> int:
        """Open `path`; the descriptor carries requested ∩ granted rights.

        Every requested right must be granted, otherwise AccessDenied.
        `create` and `truncate` additionally need WRITE. `mkdirs` creates
        missing parent directories and is reserved for server-side
        provisioning.
        """
        if not is_normalized_path(path, allow_trailing_slash=False):
            raise InvalidPath(path)
        requested = (requested | Rights.OPEN).closure()
        fs = self.fs
        with fs.lock:
            granted = self.granted(path)
            if requested & ~granted or ((create or truncate) and Rights.WRITE not in granted):
                fs._audit(self.actor, "open", path, False)
                raise AccessDenied(f"{self.actor}: open {path} with {requested} not permitted")
            fd = self._alloc_fd()
            try:
                ino = fs._resolve(path)
            except NotFound:
                if not create:
                    fs._audit(self.actor, "open", path, True)
                    raise
                if Rights.WRITE not in requested:
                    raise AccessDenied(f"{self.actor}: create {path} requires WRITE") from None
                ino = fs._link(path, Inode(Kind.REGULAR_FILE, 0, data=bytearray()), mkdirs)
            node = fs.inodes[ino]
            if node.kind is Kind.DIRECTORY:
                raise IsDirectory(path)
            writable = Rights.WRITE in requested
            if truncate and writable and node.kind is Kind.REGULAR_FILE:
                assert node.data is not None
                del node.data[:]
            if node.kind is Kind.SPECIAL_FILE:
                fs.devices[node.module_id].opened(ino, writable, truncate)  # type: ignore[index]
            fs._audit(self.actor, "open", path, True)
            self.fds[fd] = FileDescriptor(fd, ino, 0, requested & granted, path)
            return fd

    def write(self, fd: int, iov: IoVecSeq, source: memoryview) -> int:
        """Gather-write from `source` at the descriptor's offset."""
        fs = self.fs
        with fs.lock:
            desc = self._get(fd)
            self._require(desc, Rights.WRITE, "write")
            _check_bounds(iov, len(source))
            node = fs.inodes[desc.inode]
            fs.stats.calls += 1
            fs.stats.iovec_spills += iov.spilled
            fs._audit(self.actor, "write", desc.path, True)
            total = 0
            if node.kind is Kind.SPECIAL_FILE:
                dev = fs.devices[node.module_id]  # type: ignore[index]
                for off, n in iov:
                    total += dev.write_from(desc.inode, desc.offset + total, source[off:off + n])
                    fs.stats.slice_copies += 1
                fs.stats.bytes_copied += total
                desc.offset += total
                return total
            data = node.data
            assert data is not None
            pos = desc.offset
            if pos > len(data):
                data.extend(bytes(pos - len(data)))
            for off, n in iov:
                if n == 0:
                    continue
                data[pos:pos + n] = source[off:off + n]
                pos += n
                fs.stats.slice_copies += 1
            total = pos - desc.offset
            fs.stats.bytes_copied += total
            desc.offset = pos
            return total

    def read(self, fd: int, iov: IoVecSeq, dest: memoryview) -> int:
        """Scatter-read into `dest` from the descriptor's offset."""
        fs = self.fs
        with fs.lock:
            desc = self._get(fd)
            self._require(desc, Rights.READ, "read")
            _check_bounds(iov, len(dest))
            node = fs.inodes[desc.inode]
            fs.stats.calls += 1
            fs.stats.iovec_spills += iov.spilled
            fs._audit(self.actor, "read", desc.path, True)
            total = 0
            if node.kind is Kind.SPECIAL_FILE:
                dev = fs.devices[node.module_id]  # type: ignore[index]
                for off, n in iov:
                    got = dev.read_into(desc.inode, desc.offset + total, dest[off:off + n])
                    fs.stats.slice_copies += 1
                    total += got
                    if got < n:
                        break
                fs.stats.bytes_copied += total
                desc.offset += total
                return total
            data = node.data
            assert data is not None
            pos = desc.offset
            with memoryview(data) as view:
                for off, n in iov:
                    if n == 0:
                        continue
                    k = min(n, len(data) - pos)
                    if k <= 0:
                        break
                    dest[off:off + k] = view[pos:pos + k]
                    fs.stats.slice_copies += 1
                    pos += k
            total = pos - desc.offset
            fs.stats.bytes_copied += total
            desc.offset = pos
            return total

    def seek(self, fd: int, delta: int, whence: Whence = Whence.SET) -> int:
        fs = self.fs
        with fs.lock:
            desc = self._get(fd)
            self._require(desc, Rights.SEEK, "seek")
            if whence is Whence.SET:
                base = 0
            elif whence is Whence.CUR:
                base = desc.offset
            else:
                base = fs._stat(desc.inode).size
            new = base + delta
            if new < 0:
                raise NegativeOffset(new)
            desc.offset = new
            return new

    def tell(self, fd: int) -> int:
        with self.fs.lock:
            return self._get(fd).offset

    def close(self, fd: int) -> None:
        fs = self.fs
        with fs.lock:
            desc = self.fds.pop(fd, None)
            if desc is None:
                raise BadDescriptor(fd)
            node = fs.inodes[desc.inode]
            if node.kind is Kind.SPECIAL_FILE:
                fs.devices[node.module_id].closed(desc.inode, Rights.WRITE in desc.rights)  # type: ignore[index]

    def filestat(self, fd: int) -> FileStat:
        with self.fs.lock:
            return self.fs._stat(self._get(fd).inode)

    def rights(self, fd: int) -> Rights:
        with self.fs.lock:
            return self._get(fd).rights

    def close_all(self) -> None:
        for fd in list(self.fds):
            self.close(fd)
