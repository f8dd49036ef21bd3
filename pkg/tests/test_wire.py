import io
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attestbox import wire
from attestbox.errors import MalformedFrame

seg = st.text(alphabet="abcxyz019_-", min_size=1, max_size=8).filter(lambda s: s not in (".", ".."))
paths = st.lists(seg, min_size=1, max_size=4).map(lambda parts: "/" + "/".join(parts))
frames = st.one_of(
    st.builds(wire.ProvisionProgram, paths, st.binary(max_size=256)),
    st.builds(wire.ProvisionData, paths, st.binary(max_size=256)),
    st.builds(wire.RequestResult, paths),
    st.builds(wire.ResultOk, st.binary(max_size=256)),
    st.builds(wire.Error, st.integers(0, 0xFFFF), st.text(max_size=40)),
    st.just(wire.Ack()),
    st.just(wire.QueryPolicyDigest()),
    st.builds(wire.PolicyDigest, st.binary(min_size=32, max_size=32)),
)


@given(frames)
def test_round_trip(frame):
    raw = wire.encode(frame)
    assert struct.unpack(">I", raw[:4])[0] == len(raw) - 4
    assert wire.decode(raw) == frame
    assert wire.read_frame(io.BytesIO(raw)) == frame


@settings(max_examples=200)
@given(frames, st.data())
def test_every_truncation_is_malformed(frame, data):
    raw = wire.encode(frame)
    cut = data.draw(st.integers(0, len(raw) - 1))
    with pytest.raises(MalformedFrame):
        wire.decode(raw[:cut])


def test_known_layout():
    assert wire.encode(wire.RequestResult("/o")) == b"\x00\x00\x00\x05\x03\x00\x02/o"
    assert wire.encode(wire.Ack()) == b"\x00\x00\x00\x01\x06"
    assert wire.encode(wire.Error(2, "x")) == b"\x00\x00\x00\x06\x05\x00\x02\x00\x01x"


@pytest.mark.parametrize(
    "raw",
    [
        b"\x00\x00\x00\x00",
        b"\x00\x00\x00\x00\x06",
        b"\x00\x00\x00\x01\x09",
        b"\x00\x00\x00\x02\x06\x00",
        b"\x00\x00\x00\x02\x07\x00",
        b"\x00\x00\x00\x03\x08\x00\x00",
        b"\x00\x00\x00\x05\x03\x00\x02o/",
        b"\x00\x00\x00\x06\x03\x00\x02/o!",
        b"\x00\x00\x00\x04\x03\x00\x01/",
        b"\x00\x00\x00\x08\x03\x00\x05/a/..",
        b"\x00\x00\x00\x05\x03\x00\x02/\xff",
        b"\x00\x00\x00\x06\x05\x00\x02\x00\x02x",
        b"\x00\x00\x00\x03\x05\x00\x02",
        struct.pack(">IB", wire.MAX_FRAME + 1, 4),
    ],
)
def test_malformed_examples(raw):
    with pytest.raises(MalformedFrame):
        wire.decode(raw)


def test_stream_reader():
    buf = io.BytesIO(wire.encode(wire.Ack()) + wire.encode(wire.ResultOk(b"hi")))
    assert wire.read_frame(buf) == wire.Ack()
    assert wire.read_frame(buf) == wire.ResultOk(b"hi")
    assert wire.read_frame(buf) is None
    with pytest.raises(EOFError):
        wire.read_frame(io.BytesIO(wire.encode(wire.ResultOk(b"hello"))[:-1]))
    with pytest.raises(MalformedFrame):
        wire.read_frame(io.BytesIO(struct.pack(">I", wire.MAX_FRAME + 1)))
    out = io.BytesIO()
    wire.write_frame(out, wire.PolicyDigest(bytes(32)))
    assert wire.decode(out.getvalue()) == wire.PolicyDigest(bytes(32))


def test_encode_rejects_invalid_frames():
    with pytest.raises(ValueError):
        wire.encode(wire.PolicyDigest(b"short"))
    with pytest.raises(TypeError):
        wire.encode("not a frame")
