"""Native modules reached through special files.

A guest writes a request to the module's request file and closes the
descriptor; closing runs the handler, whose output is then readable from the
response file starting at offset 0. Handler failures leave the response
empty and put the error text in ``<response_path>.err``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable

from .errors import InvalidPath, PathExists
from .policy import is_normalized_path
from .vfs import VirtualFS

INT64_MIN = -(1 << 63)
INT64_MAX = (1 << 63) - 1


class HandlerError(Exception):
    pass


@dataclass(frozen=True)
class NativeModule:
    id: str
    request_path: str
    response_path: str
    handler: Callable[[bytes], bytes]

    @property
    def error_path(self) -> str:
        return self.response_path + ".err"


class NativeDevice:
    """Holds one module's pending request and response buffers."""

    def __init__(self, fs: VirtualFS, module: NativeModule):
        self.fs = fs
        self.module = module
        self.request = bytearray()
        self.response = b""
        self.request_ino = -1
        self.response_ino = -1
        self.invocations = 0

    def opened(self, ino: int, writable: bool, truncate: bool) -> None:
        if ino == self.request_ino and writable:
            self.request = bytearray()
            self.response = b""

    def closed(self, ino: int, writable: bool) -> None:
        if ino != self.request_ino or not writable:
            return
        payload = bytes(self.request)
        self.request = bytearray()
        self.invocations += 1
        try:
            self.response = self.module.handler(payload)
            err = b""
        except Exception as exc:
            self.response = b""
            err = f"{type(exc).__name__}: {exc}".encode()
        self.fs.write_file(self.module.error_path, err, mkdirs=True)

    def size(self, ino: int) -> int:
        if ino == self.request_ino:
            return len(self.request)
        return len(self.response)

    def write_from(self, ino: int, offset: int, src: memoryview) -> int:
        if ino != self.request_ino:
            return 0
        req = self.request
        if offset > len(req):
            req.extend(bytes(offset - len(req)))
        req[offset:offset + len(src)] = src
        return len(src)

    def read_into(self, ino: int, offset: int, dst: memoryview) -> int:
        if ino != self.response_ino:
            return 0
        chunk = self.response[offset:offset + len(dst)]
        dst[: len(chunk)] = chunk
        return len(chunk)


def register_module(fs: VirtualFS, module: NativeModule) -> NativeDevice:
    for path in (module.request_path, module.response_path):
        if not is_normalized_path(path, allow_trailing_slash=False) or path == "/":
            raise InvalidPath(path)
    if module.request_path == module.response_path:
        raise InvalidPath("request and response paths must differ")
    with fs.lock:
        for path in (module.request_path, module.response_path):
            if fs.exists(path):
                raise PathExists(path)
        if module.id in fs.devices:
            raise PathExists(f"module {module.id!r} already registered")
        device = NativeDevice(fs, module)
        device.request_ino = fs.create_special(module.request_path, module.id, device)
        device.response_ino = fs.create_special(module.response_path, module.id, device)
    return device


def intcodec_encode(request: bytes) -> bytes:
    """Decimal integers, one per line, to u64le count followed by i64le values.

    Lines are separated by "\\n"; a single trailing "\\n" is allowed. Each
    line must be an optional "-" followed by ASCII digits and fit in a
    signed 64-bit integer.
    """
    if not request:
        return struct.pack("<Q", 0)
    lines = request.split(b"\n")
    if request.endswith(b"\n"):
        lines.pop()
    values = []
    for line in lines:
        digits = line[1:] if line.startswith(b"-") else line
        if not digits or not all(0x30 <= c <= 0x39 for c in digits):
            raise HandlerError(f"not an integer: {line[:32]!r}")
        value = int(line)
        if not INT64_MIN <= value <= INT64_MAX:
            raise HandlerError(f"out of 64-bit range: {line[:32]!r}")
        values.append(value)
    return struct.pack(f"<Q{len(values)}q", len(values), *values)


INTCODEC = NativeModule(
    id="intcodec",
    request_path="/modules/intcodec/in",
    response_path="/modules/intcodec/out",
    handler=intcodec_encode,
)

BUILTIN_MODULES = {INTCODEC.id: INTCODEC}
