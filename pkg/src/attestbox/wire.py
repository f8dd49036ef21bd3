"""Length-prefixed frames exchanged inside the attested TLS session.

    length u32be (bytes after the length field) | type u8 | payload

Every decoding failure raises MalformedFrame.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import BinaryIO, Union

from .errors import MalformedFrame
from .policy import is_normalized_path

MAX_FRAME = 256 * 1024 * 1024


class FrameType(enum.IntEnum):
    PROVISION_PROGRAM = 0x01
    PROVISION_DATA = 0x02
    REQUEST_RESULT = 0x03
    RESULT_OK = 0x04
    ERROR = 0x05
    ACK = 0x06
    QUERY_POLICY_DIGEST = 0x07
    POLICY_DIGEST = 0x08


class ErrorCode(enum.IntEnum):
    NOT_PERMITTED = 1
    WRONG_STATE = 2
    NOT_FOUND = 3
    MALFORMED_FRAME = 4


@dataclass(frozen=True)
class ProvisionProgram:
    path: str
    data: bytes


@dataclass(frozen=True)
class ProvisionData:
    path: str
    data: bytes


@dataclass(frozen=True)
class RequestResult:
    path: str


@dataclass(frozen=True)
class ResultOk:
    data: bytes


@dataclass(frozen=True)
class Error:
    code: int
    message: str


@dataclass(frozen=True)
class Ack:
    pass


@dataclass(frozen=True)
class QueryPolicyDigest:
    pass


@dataclass(frozen=True)
class PolicyDigest:
    digest: bytes


Frame = Union[
    ProvisionProgram, ProvisionData, RequestResult, ResultOk, Error, Ack, QueryPolicyDigest, PolicyDigest
]


def _path_bytes(path: str) -> bytes:
    raw = path.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError("path too long")
    return struct.pack(">H", len(raw)) + raw


def _payload(frame: Frame) -> tuple[FrameType, bytes]:
    if isinstance(frame, ProvisionProgram):
        return FrameType.PROVISION_PROGRAM, _path_bytes(frame.path) + frame.data
    if isinstance(frame, ProvisionData):
        return FrameType.PROVISION_DATA, _path_bytes(frame.path) + frame.data
    if isinstance(frame, RequestResult):
        return FrameType.REQUEST_RESULT, _path_bytes(frame.path)
    if isinstance(frame, ResultOk):
        return FrameType.RESULT_OK, frame.data
    if isinstance(frame, Error):
        msg = frame.message.encode("utf-8")[:0xFFFF]
        return FrameType.ERROR, struct.pack(">HH", frame.code, len(msg)) + msg
    if isinstance(frame, Ack):
        return FrameType.ACK, b""
    if isinstance(frame, QueryPolicyDigest):
        return FrameType.QUERY_POLICY_DIGEST, b""
    if isinstance(frame, PolicyDigest):
        if len(frame.digest) != 32:
            raise ValueError("policy digest must be 32 bytes")
        return FrameType.POLICY_DIGEST, frame.digest
    raise TypeError(f"not a frame: {frame!r}")


def encode(frame: Frame) -> bytes:
    ftype, payload = _payload(frame)
    if 1 + len(payload) > MAX_FRAME:
        raise ValueError("frame exceeds 256 MiB")
    return struct.pack(">IB", 1 + len(payload), ftype) + payload


def _split_path(payload: bytes) -> tuple[str, bytes]:
    if len(payload) < 2:
        raise MalformedFrame("missing path length")
    (n,) = struct.unpack_from(">H", payload)
    if len(payload) < 2 + n:
        raise MalformedFrame("path runs past end of frame")
    try:
        path = payload[2:2 + n].decode("utf-8")
    except UnicodeDecodeError:
        raise MalformedFrame("path is not UTF-8") from None
    if not is_normalized_path(path, allow_trailing_slash=False) or path == "/":
        raise MalformedFrame(f"path {path!r} is not absolute and normalized")
    return path, payload[2 + n:]


def decode_body(ftype_byte: int, payload: bytes) -> Frame:
    try:
        ftype = FrameType(ftype_byte)
    except ValueError:
        raise MalformedFrame(f"unknown frame type {ftype_byte:#04x}") from None
    if ftype is FrameType.PROVISION_PROGRAM:
        return ProvisionProgram(*_split_path(payload))
    if ftype is FrameType.PROVISION_DATA:
        return ProvisionData(*_split_path(payload))
    if ftype is FrameType.REQUEST_RESULT:
        path, rest = _split_path(payload)
        if rest:
            raise MalformedFrame("trailing bytes after RequestResult path")
        return RequestResult(path)
    if ftype is FrameType.RESULT_OK:
        return ResultOk(payload)
    if ftype is FrameType.ERROR:
        if len(payload) < 4:
            raise MalformedFrame("short Error frame")
        code, n = struct.unpack_from(">HH", payload)
        if len(payload) != 4 + n:
            raise MalformedFrame("Error message length mismatch")
        try:
            return Error(code, payload[4:].decode("utf-8"))
        except UnicodeDecodeError:
            raise MalformedFrame("Error message is not UTF-8") from None
    if ftype is FrameType.POLICY_DIGEST:
        if len(payload) != 32:
            raise MalformedFrame("PolicyDigest must carry 32 bytes")
        return PolicyDigest(payload)
    if payload:
        raise MalformedFrame(f"{ftype.name} carries no payload")
    return Ack() if ftype is FrameType.ACK else QueryPolicyDigest()


def decode(buf: bytes) -> Frame:
    """Decode exactly one frame occupying all of `buf`."""
    if len(buf) < 5:
        raise MalformedFrame("frame shorter than its header")
    (length,) = struct.unpack_from(">I", buf)
    if length < 1 or length > MAX_FRAME:
        raise MalformedFrame(f"bad frame length {length}")
    if len(buf) != 4 + length:
        raise MalformedFrame(f"declared length {length} but {len(buf) - 4} bytes follow")
    return decode_body(buf[4], bytes(buf[5:]))


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    chunks = []
    while n:
        chunk = stream.read(n)
        if not chunk:
            raise EOFError("connection closed mid-frame")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def read_frame(stream: BinaryIO) -> Frame | None:
    """Read one frame; None on clean EOF before the header."""
    first = stream.read(4)
    if not first:
        return None
    header = first if len(first) == 4 else first + _read_exact(stream, 4 - len(first))
    (length,) = struct.unpack(">I", header)
    if length < 1 or length > MAX_FRAME:
        raise MalformedFrame(f"bad frame length {length}")
    body = _read_exact(stream, length)
    return decode_body(body[0], body[1:])


def write_frame(stream: BinaryIO, frame: Frame) -> None:
    stream.write(encode(frame))
    stream.flush()
