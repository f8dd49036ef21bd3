"""Guest execution: a Wasi preview1 subset over the in-memory filesystem.

Wasmtime is the executor. ``Jit`` compiles with Cranelift to native code;
``Interpret`` targets wasmtime's Pulley bytecode interpreter. Either way the
guest only sees the host functions defined in `WasiShim`; every other
``wasi_snapshot_preview1`` import is linked to a stub that returns NOSYS.
"""

from __future__ import annotations

import collections
import ctypes
import hashlib
import logging
import os
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Mapping

import wasmtime as wt
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms

from .errors import (
    AccessDenied,
    BadDescriptor,
    InvalidPath,
    InvariantError,
    IsDirectory,
    MissingEntry,
    NegativeOffset,
    NotDirectory,
    NotFound,
    OutOfBoundsIoVec,
    PathExists,
    TooLarge,
    TooManyDescriptors,
    ValidationError,
    VfsError,
)
from .policy import (
    GUEST_ACTOR,
    ExecutionStrategy,
    GlobalPolicy,
    Rights,
    longest_prefix_rights,
    prefix_matches,
)
from .vfs import FsSession, IoVecSeq, Kind, VirtualFS, Whence

log = logging.getLogger(__name__)

WASM_MAGIC = b"\x00asm"
WASI_MODULE = "wasi_snapshot_preview1"
WASI_SNAPSHOT = "preview1"
MAX_RANDOM_CHUNK = 64 * 1024

# errno values from the preview1 witx
ESUCCESS = 0
EBADF = 8
EEXIST = 20
EFAULT = 21
EINVAL = 28
EIO = 29
EISDIR = 31
EMFILE = 33
ENOENT = 44
ENOSYS = 52
ENOTDIR = 54
ENOTSUP = 58
ESPIPE = 70
ENOTCAPABLE = 76

RIGHT_FD_READ = 1 << 1
RIGHT_FD_SEEK = 1 << 2
RIGHT_FD_TELL = 1 << 5
RIGHT_FD_WRITE = 1 << 6
RIGHT_FD_FILESTAT_GET = 1 << 21

OFLAG_CREAT = 1
OFLAG_DIRECTORY = 2
OFLAG_EXCL = 4
OFLAG_TRUNC = 8

FILETYPE_CHARACTER_DEVICE = 2
FILETYPE_DIRECTORY = 3
FILETYPE_REGULAR_FILE = 4

SUPPORTED_CALLS = (
    "args_sizes_get",
    "args_get",
    "environ_sizes_get",
    "environ_get",
    "fd_prestat_get",
    "fd_prestat_dir_name",
    "path_open",
    "fd_read",
    "fd_write",
    "fd_seek",
    "fd_close",
    "fd_fdstat_get",
    "fd_filestat_get",
    "random_get",
    "proc_exit",
)

_ERRNO = {
    AccessDenied: ENOTCAPABLE,
    NotFound: ENOENT,
    IsDirectory: EISDIR,
    NotDirectory: ENOTDIR,
    TooManyDescriptors: EMFILE,
    BadDescriptor: EBADF,
    OutOfBoundsIoVec: EFAULT,
    NegativeOffset: EINVAL,
    InvalidPath: ENOTCAPABLE,
    PathExists: EEXIST,
}


def errno_for(exc: VfsError) -> int:
    for cls in type(exc).__mro__:
        if cls in _ERRNO:
            return _ERRNO[cls]
    return EIO


def rights_to_wasi(rights: Rights) -> int:
    out = 0
    if Rights.READ in rights:
        out |= RIGHT_FD_READ
    if Rights.WRITE in rights:
        out |= RIGHT_FD_WRITE
    if Rights.SEEK in rights:
        out |= RIGHT_FD_SEEK | RIGHT_FD_TELL
    if Rights.OPEN in rights:
        out |= RIGHT_FD_FILESTAT_GET
    return out


def rights_from_wasi(bits: int) -> Rights:
    out = Rights.OPEN
    if bits & RIGHT_FD_READ:
        out |= Rights.READ
    if bits & RIGHT_FD_WRITE:
        out |= Rights.WRITE
    if bits & (RIGHT_FD_SEEK | RIGHT_FD_TELL):
        out |= Rights.SEEK
    return out


class RandomSource:
    """ChaCha20 keystream under a fixed seed, or OS entropy when unseeded."""

    def __init__(self, seed: bytes | None = None):
        if seed is not None and len(seed) != 32:
            raise ValueError("seed must be 32 bytes")
        self.seed = seed
        self._stream = None
        if seed is not None:
            # 16-byte nonce block: 32-bit counter then 96-bit nonce, all zero
            cipher = Cipher(algorithms.ChaCha20(seed, bytes(16)), mode=None)
            self._stream = cipher.encryptor()

    def fill(self, n: int) -> bytes:
        if n < 0 or n > MAX_RANDOM_CHUNK:
            raise TooLarge(f"random_fill limited to {MAX_RANDOM_CHUNK} bytes, got {n}")
        if self._stream is None:
            return os.urandom(n)
        return self._stream.update(bytes(n))


def random_fill(n: int, source: RandomSource) -> bytes:
    return source.fill(n)


class LogRing:
    """Bounded sink for guest stdout/stderr; never forwarded to principals."""

    def __init__(self, maxlen: int = 1024):
        self.entries: collections.deque[tuple[int, bytes]] = collections.deque(maxlen=maxlen)

    def append(self, fd: int, data: bytes) -> None:
        self.entries.append((fd, data))
        log.debug("guest fd %d: %r", fd, data[:200])

    def text(self, fd: int | None = None) -> str:
        return b"".join(d for f, d in self.entries if fd is None or f == fd).decode("utf-8", "replace")


@dataclass
class GuestEnvironment:
    program_bytes: bytes
    program_rights: Mapping[str, Rights]
    preopened_dirs: tuple[str, ...] = ("/",)
    strategy: ExecutionStrategy = ExecutionStrategy.JIT
    rng_seed: bytes | None = None
    args: tuple[str, ...] = ("main.wasm",)

    def __post_init__(self) -> None:
        if self.program_bytes[:4] != WASM_MAGIC:
            raise ValidationError("program does not start with the WebAssembly magic")
        for d in self.preopened_dirs:
            if not any(prefix_matches(d, k) or prefix_matches(k, d) for k in self.program_rights):
                raise InvariantError(f"preopened directory {d!r} has no rights entry")

    def rights_for(self, path: str) -> Rights:
        return longest_prefix_rights(self.program_rights, path)

    @classmethod
    def from_policy(cls, policy: GlobalPolicy, program_bytes: bytes) -> "GuestEnvironment":
        return cls(
            program_bytes=program_bytes,
            program_rights=dict(policy.program_file_rights),
            preopened_dirs=tuple(policy.program_preopens),
            strategy=policy.execution_strategy,
            rng_seed=policy.rng_seed,
            args=(policy.program_entry_path.rsplit("/", 1)[-1],),
        )


@dataclass
class ExecutionOutcome:
    exit_code: int | None
    trap: str | None
    host_call_count: int
    calls: collections.Counter = field(default_factory=collections.Counter)

    def __post_init__(self) -> None:
        assert (self.exit_code is None) != (self.trap is None)

    @property
    def ok(self) -> bool:
        return self.exit_code == 0


class GuestExit(Exception):
    def __init__(self, code: int):
        super().__init__(code)
        self.code = code


class Cancelled(Exception):
    pass


class _Fault(Exception):
    """Guest pointer outside linear memory."""


def _i32(v: int) -> int:
    return v & 0xFFFFFFFF


class WasiShim:
    """Host side of the Wasi subset. Methods take raw wasm arguments and return errno."""

    def __init__(
        self,
        env: GuestEnvironment,
        fs: VirtualFS,
        *,
        log_ring: LogRing | None = None,
        cancel: threading.Event | None = None,
    ):
        self.env = env
        self.fs = fs
        self.preopens = {3 + i: d for i, d in enumerate(env.preopened_dirs)}
        self.session: FsSession = fs.session(
            GUEST_ACTOR, first_fd=3 + len(self.preopens), rights=env.rights_for
        )
        self.random = RandomSource(env.rng_seed)
        self.log = log_ring or LogRing()
        self.cancel = cancel
        self.host_calls = 0
        self.calls: collections.Counter = collections.Counter()
        self.memory: memoryview = memoryview(bytearray(0))

    # memory helpers
    def _u32(self, ptr: int) -> int:
        if ptr + 4 > len(self.memory):
            raise _Fault(ptr)
        return int.from_bytes(self.memory[ptr:ptr + 4], "little")

    def _put(self, ptr: int, data: bytes) -> None:
        if ptr + len(data) > len(self.memory):
            raise _Fault(ptr)
        self.memory[ptr:ptr + len(data)] = data

    def _iovecs(self, ptr: int, count: int) -> IoVecSeq:
        if ptr + 8 * count > len(self.memory):
            raise _Fault(ptr)
        raw = self.memory[ptr:ptr + 8 * count]
        return IoVecSeq(struct.iter_unpack("<II", raw))

    def dispatch(self, name: str, memory: memoryview, *args: int) -> int:
        """Run one Wasi call against `memory` and return its errno."""
        self.host_calls += 1
        self.calls[name] += 1
        if self.cancel is not None and self.cancel.is_set():
            raise Cancelled("execution cancelled")
        handler = getattr(self, "wasi_" + name, None) if name in SUPPORTED_CALLS else None
        if handler is None:
            return ENOSYS
        self.memory = memory
        try:
            return handler(*args)
        except _Fault:
            return EFAULT
        except VfsError as exc:
            return errno_for(exc)
        finally:
            self.memory = memoryview(bytearray(0))

    def wasi_args_sizes_get(self, argc_ptr: int, size_ptr: int) -> int:
        self._put(argc_ptr, struct.pack("<I", len(self.env.args)))
        self._put(size_ptr, struct.pack("<I", sum(len(a.encode()) + 1 for a in self.env.args)))
        return ESUCCESS

    def wasi_args_get(self, argv_ptr: int, buf_ptr: int) -> int:
        for i, arg in enumerate(self.env.args):
            raw = arg.encode() + b"\x00"
            self._put(argv_ptr + 4 * i, struct.pack("<I", buf_ptr))
            self._put(buf_ptr, raw)
            buf_ptr += len(raw)
        return ESUCCESS

    def wasi_environ_sizes_get(self, count_ptr: int, size_ptr: int) -> int:
        self._put(count_ptr, bytes(4))
        self._put(size_ptr, bytes(4))
        return ESUCCESS

    def wasi_environ_get(self, environ_ptr: int, buf_ptr: int) -> int:
        return ESUCCESS

    def wasi_fd_prestat_get(self, fd: int, buf_ptr: int) -> int:
        name = self.preopens.get(fd)
        if name is None:
            return EBADF
        self._put(buf_ptr, struct.pack("<BxxxI", 0, len(name.encode())))
        return ESUCCESS

    def wasi_fd_prestat_dir_name(self, fd: int, path_ptr: int, path_len: int) -> int:
        name = self.preopens.get(fd)
        if name is None:
            return EBADF
        raw = name.encode()
        if path_len < len(raw):
            return EINVAL
        self._put(path_ptr, raw)
        return ESUCCESS

    def _resolve(self, dirfd: int, path_ptr: int, path_len: int) -> str:
        base = self.preopens.get(dirfd)
        if base is None:
            raise BadDescriptor(dirfd)
        if path_ptr + path_len > len(self.memory):
            raise _Fault(path_ptr)
        try:
            rel = bytes(self.memory[path_ptr:path_ptr + path_len]).decode("utf-8")
        except UnicodeDecodeError:
            raise InvalidPath("path is not UTF-8") from None
        if rel.startswith("/") or "\x00" in rel:
            raise InvalidPath(rel)
        stack: list[str] = []
        for part in rel.split("/"):
            if part in ("", "."):
                continue
            if part == "..":
                if not stack:
                    raise InvalidPath(f"{rel!r} escapes {base!r}")
                stack.pop()
            else:
                stack.append(part)
        if not stack:
            raise IsDirectory(base)
        return base.rstrip("/") + "/" + "/".join(stack)

    def wasi_path_open(
        self,
        dirfd: int,
        dirflags: int,
        path_ptr: int,
        path_len: int,
        oflags: int,
        rights_base: int,
        rights_inheriting: int,
        fdflags: int,
        fd_ptr: int,
    ) -> int:
        path = self._resolve(dirfd, path_ptr, path_len)
        if oflags & OFLAG_DIRECTORY:
            return ENOTSUP
        requested = rights_from_wasi(rights_base)
        if oflags & OFLAG_EXCL and self.fs.exists(path):
            return EEXIST
        fd = self.session.open(
            path,
            create=bool(oflags & OFLAG_CREAT),
            truncate=bool(oflags & OFLAG_TRUNC),
            requested=requested,
        )
        self._put(fd_ptr, struct.pack("<I", fd))
        return ESUCCESS

    def wasi_fd_read(self, fd: int, iovs_ptr: int, iovs_len: int, nread_ptr: int) -> int:
        iov = self._iovecs(iovs_ptr, iovs_len)
        if fd == 0:
            n = 0
        elif fd in (1, 2) or fd in self.preopens:
            return EBADF
        else:
            n = self.session.read(fd, iov, self.memory)
        self._put(nread_ptr, struct.pack("<I", n))
        return ESUCCESS

    def wasi_fd_write(self, fd: int, iovs_ptr: int, iovs_len: int, nwritten_ptr: int) -> int:
        iov = self._iovecs(iovs_ptr, iovs_len)
        if fd in (1, 2):
            for off, n in iov:
                if off + n > len(self.memory):
                    raise _Fault(off)
            chunk = b"".join(bytes(self.memory[o:o + n]) for o, n in iov)
            self.log.append(fd, chunk)
            n = len(chunk)
        elif fd == 0 or fd in self.preopens:
            return EBADF
        else:
            n = self.session.write(fd, iov, self.memory)
        self._put(nwritten_ptr, struct.pack("<I", n))
        return ESUCCESS

    def wasi_fd_seek(self, fd: int, offset: int, whence: int, newoffset_ptr: int) -> int:
        if fd in (0, 1, 2):
            return ESPIPE
        if fd in self.preopens:
            return EISDIR
        try:
            wh = Whence(whence)
        except ValueError:
            return EINVAL
        if offset >= 1 << 63:
            offset -= 1 << 64
        new = self.session.seek(fd, offset, wh)
        self._put(newoffset_ptr, struct.pack("<Q", new))
        return ESUCCESS

    def wasi_fd_close(self, fd: int) -> int:
        if fd in self.preopens or fd in (0, 1, 2):
            return ENOTSUP
        self.session.close(fd)
        return ESUCCESS

    def _filetype(self, fd: int) -> tuple[int, int, Rights]:
        if fd in (0, 1, 2):
            return FILETYPE_CHARACTER_DEVICE, 0, Rights.READ if fd == 0 else Rights.WRITE
        if fd in self.preopens:
            return FILETYPE_DIRECTORY, 0, Rights.OPEN
        st = self.session.filestat(fd)
        kind = {
            Kind.REGULAR_FILE: FILETYPE_REGULAR_FILE,
            Kind.SPECIAL_FILE: FILETYPE_CHARACTER_DEVICE,
            Kind.DIRECTORY: FILETYPE_DIRECTORY,
        }[st.kind]
        return kind, st.size, self.session.rights(fd)

    def _inheritable(self, dirfd: int) -> int:
        base = self.preopens[dirfd]
        bits = 0
        for key, rights in self.env.program_rights.items():
            if prefix_matches(base, key) or prefix_matches(key, base):
                bits |= rights_to_wasi(rights)
        return bits

    def wasi_fd_fdstat_get(self, fd: int, buf_ptr: int) -> int:
        filetype, _, rights = self._filetype(fd)
        inheriting = self._inheritable(fd) if fd in self.preopens else 0
        self._put(buf_ptr, struct.pack("<BxHxxxxQQ", filetype, 0, rights_to_wasi(rights), inheriting))
        return ESUCCESS

    def wasi_fd_filestat_get(self, fd: int, buf_ptr: int) -> int:
        filetype, size, _ = self._filetype(fd)
        ino = 0
        if fd in self.session.fds:
            ino = self.session.fds[fd].inode
        self._put(buf_ptr, struct.pack("<QQBxxxxxxxQQQQQ", 0, ino, filetype, 1, size, 0, 0, 0))
        return ESUCCESS

    def wasi_random_get(self, buf_ptr: int, buf_len: int) -> int:
        if buf_ptr + buf_len > len(self.memory):
            raise _Fault(buf_ptr)
        done = 0
        while done < buf_len:
            n = min(MAX_RANDOM_CHUNK, buf_len - done)
            self.memory[buf_ptr + done:buf_ptr + done + n] = self.random.fill(n)
            done += n
        return ESUCCESS

    def wasi_proc_exit(self, code: int) -> int:
        raise GuestExit(code)


_SIGNATURES: dict[str, tuple[list[str], list[str]]] = {
    "args_sizes_get": (["i32", "i32"], ["i32"]),
    "args_get": (["i32", "i32"], ["i32"]),
    "environ_sizes_get": (["i32", "i32"], ["i32"]),
    "environ_get": (["i32", "i32"], ["i32"]),
    "fd_prestat_get": (["i32", "i32"], ["i32"]),
    "fd_prestat_dir_name": (["i32", "i32", "i32"], ["i32"]),
    "path_open": (["i32", "i32", "i32", "i32", "i32", "i64", "i64", "i32", "i32"], ["i32"]),
    "fd_read": (["i32", "i32", "i32", "i32"], ["i32"]),
    "fd_write": (["i32", "i32", "i32", "i32"], ["i32"]),
    "fd_seek": (["i32", "i64", "i32", "i32"], ["i32"]),
    "fd_close": (["i32"], ["i32"]),
    "fd_fdstat_get": (["i32", "i32"], ["i32"]),
    "fd_filestat_get": (["i32", "i32"], ["i32"]),
    "random_get": (["i32", "i32"], ["i32"]),
    "proc_exit": (["i32"], []),
}


def _valtype(name: str) -> wt.ValType:
    return {"i32": wt.ValType.i32(), "i64": wt.ValType.i64()}[name]


def _guest_memory(caller: wt.Caller) -> memoryview:
    mem = caller.get("memory")
    if not isinstance(mem, wt.Memory):
        return memoryview(bytearray(0))
    size = mem.data_len(caller)
    if size == 0:
        return memoryview(bytearray(0))
    base = ctypes.addressof(mem.data_ptr(caller).contents)
    return memoryview((ctypes.c_ubyte * size).from_address(base)).cast("B")


class WasmExecutor:
    """Narrow executor interface: compile, link the shim, run ``_start``."""

    _engines: dict[ExecutionStrategy, wt.Engine] = {}
    _modules: dict[tuple[ExecutionStrategy, bytes], wt.Module] = {}
    _lock = threading.Lock()

    def __init__(self, strategy: ExecutionStrategy):
        self.strategy = strategy

    @property
    def engine(self) -> wt.Engine:
        with self._lock:
            eng = self._engines.get(self.strategy)
            if eng is None:
                cfg = wt.Config()
                if self.strategy is ExecutionStrategy.INTERPRET:
                    cfg.target = "pulley64"
                eng = wt.Engine(cfg)
                self._engines[self.strategy] = eng
            return eng

    def compile(self, program: bytes) -> wt.Module:
        if program[:4] != WASM_MAGIC:
            raise ValidationError("missing WebAssembly magic")
        key = (self.strategy, hashlib.sha256(program).digest())
        with self._lock:
            cached = self._modules.get(key)
        if cached is not None:
            return cached
        try:
            module = wt.Module(self.engine, program)
        except wt.WasmtimeError as exc:
            raise ValidationError(str(exc)) from None
        with self._lock:
            if len(self._modules) > 64:
                self._modules.clear()
            self._modules[key] = module
        return module

    def _link(self, module: wt.Module, shim: WasiShim) -> wt.Linker:
        linker = wt.Linker(self.engine)
        for imp in module.imports:
            if imp.module != WASI_MODULE:
                raise ValidationError(f"unsupported import {imp.module}.{imp.name}")
            if not isinstance(imp.type, wt.FuncType):
                raise ValidationError(f"import {imp.name} is not a function")
            name = imp.name
            sig = _SIGNATURES.get(name)
            if sig is not None:
                declared = ([str(p) for p in imp.type.params], [str(r) for r in imp.type.results])
                if declared != sig:
                    raise ValidationError(f"import {name} has signature {declared}, expected {sig}")
            linker.define_func(WASI_MODULE, name, imp.type, self._host_fn(name, imp.type, shim), access_caller=True)
        return linker

    @staticmethod
    def _host_fn(name: str, ftype: wt.FuncType, shim: WasiShim) -> Callable:
        returns_errno = [str(r) for r in ftype.results] == ["i32"]

        def call(caller: wt.Caller, *args: int) -> int | None:
            if name == "proc_exit":
                shim.dispatch(name, memoryview(bytearray(0)), *args)
            if name not in SUPPORTED_CALLS:
                shim.dispatch(name, memoryview(bytearray(0)))
                if returns_errno:
                    return ENOSYS
                raise wt.WasmtimeError(f"unsupported host call {name}")
            errno = shim.dispatch(name, _guest_memory(caller), *args)
            return errno if returns_errno else None

        return call

    def run(self, program: bytes, shim: WasiShim) -> ExecutionOutcome:
        module = self.compile(program)
        if not any(e.name == "_start" for e in module.exports):
            raise MissingEntry("module has no _start export")
        linker = self._link(module, shim)
        store = wt.Store(self.engine)
        exit_code: int | None = None
        trap: str | None = None
        try:
            instance = linker.instantiate(store, module)
            start = instance.exports(store)["_start"]
            assert isinstance(start, wt.Func)
            start(store)
            exit_code = 0
        except GuestExit as exc:
            exit_code = _i32(exc.code)
        except Cancelled as exc:
            trap = f"cancelled: {exc}"
        except (wt.Trap, wt.WasmtimeError) as exc:
            trap = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        return ExecutionOutcome(exit_code, trap, shim.host_calls, shim.calls)


def execute(
    env: GuestEnvironment,
    fs: VirtualFS,
    *,
    log_ring: LogRing | None = None,
    cancel: threading.Event | None = None,
) -> ExecutionOutcome:
    """Run the guest to completion; file effects land in `fs`."""
    shim = WasiShim(env, fs, log_ring=log_ring, cancel=cancel)
    try:
        return WasmExecutor(env.strategy).run(env.program_bytes, shim)
    finally:
        shim.session.close_all()
