import threading

import pytest
import wasmtime

from attestbox.deploy import GUESTS, guest_rights
from attestbox.engine import (
    ENOSYS,
    SUPPORTED_CALLS,
    GuestEnvironment,
    LogRing,
    RandomSource,
    execute,
    rights_from_wasi,
    rights_to_wasi,
)
from attestbox.errors import InvariantError, MissingEntry, TooLarge, ValidationError
from attestbox.native import INTCODEC, register_module
from attestbox.policy import ExecutionStrategy, Rights
from attestbox.vfs import VirtualFS
from oracles import chacha20_keystream, intcodec, wordcount

STRATEGIES = list(ExecutionStrategy)
SEED = bytes(range(32))


def _env(name, strategy=ExecutionStrategy.JIT, seed=None, program=None):
    spec = GUESTS[name]
    return GuestEnvironment(
        program_bytes=program or spec.wasm(),
        program_rights=guest_rights(spec),
        strategy=strategy,
        rng_seed=seed,
    )


def _fs(**files):
    fs = VirtualFS()
    for d in ("/input", "/output"):
        fs.mkdirs(d)
    for path, data in files.items():
        fs.write_file(path, data)
    return fs


def _wat(body: str) -> bytes:
    return wasmtime.wat2wasm(body)


def test_random_source_matches_chacha20_oracle():
    src = RandomSource(SEED)
    got = src.fill(100) + src.fill(300)
    assert got == chacha20_keystream(SEED, bytes(12), 0, 400)


def test_random_source_rfc_vector():
    # RFC 7539 section 2.3.2 keystream under the all-zero key.
    assert RandomSource(bytes(32)).fill(8).hex() == "76b8e0ada0f13d90"


def test_random_fill_limit():
    with pytest.raises(TooLarge):
        RandomSource(SEED).fill(64 * 1024 + 1)
    assert len(RandomSource().fill(16)) == 16


def test_rights_wasi_bits_round_trip():
    for r in (Rights.READ, Rights.WRITE, Rights.READ | Rights.SEEK):
        assert rights_from_wasi(rights_to_wasi(r.closure())) == r.closure()


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_wordcount_guest(strategy):
    a, b = b"one two\tthree\n", b"  four\x0bfive\x0c six  "
    fs = _fs(**{"/input/a": a, "/input/b": b})
    out = execute(_env("wordcount", strategy), fs)
    assert out.ok, out
    assert fs.read_file("/output/count") == wordcount(a, b) == b"6\n"


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_copy_guest(strategy):
    a, b = bytes(range(256)) * 300, b""
    fs = _fs(**{"/input/a": a, "/input/b": b})
    assert execute(_env("copy", strategy), fs).ok
    assert fs.read_file("/output/a") == a and fs.read_file("/output/b") == b


def test_copy_guest_skips_missing_input():
    fs = _fs(**{"/input/a": b"x"})
    assert execute(_env("copy"), fs).ok
    assert not fs.exists("/output/b")


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_random_guest_is_seeded(strategy):
    outs = []
    for _ in range(2):
        fs = _fs()
        assert execute(_env("random", strategy, seed=SEED), fs).ok
        outs.append(fs.read_file("/output/random"))
    assert outs[0] == outs[1] == chacha20_keystream(SEED, bytes(12), 0, 64)


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_guest_cannot_escape_its_capabilities(strategy):
    fs = _fs()
    fs.write_file("/secret", b"s")
    env = GuestEnvironment(
        _probe(), {"/": Rights.NONE, "/output/": Rights.WRITE.closure()},
        strategy=strategy,
    )
    assert execute(env, fs).ok
    assert fs.read_file("/output/probe") == b"76\n76\n"


def _probe():
    from attestbox.deploy import GUEST_DIR

    return (GUEST_DIR / "probe.wasm").read_bytes()


@pytest.mark.parametrize("strategy", STRATEGIES)
@pytest.mark.parametrize("numbers", [b"", b"1\n-2\n3", b"9223372036854775807\n-9223372036854775808\n", b"12x\n"])
def test_intcodec_guests_agree(strategy, numbers):
    outs = []
    for name in ("intcodec", "intcodec_native"):
        fs = _fs(**{"/input/numbers": numbers})
        if name == "intcodec_native":
            register_module(fs, INTCODEC)
        assert execute(_env(name, strategy), fs).ok
        outs.append(fs.read_file("/output/codec"))
    expected = intcodec(numbers)
    assert outs[0] == outs[1] == (expected if expected is not None else b"")


def test_unsupported_wasi_call_returns_enosys():
    wasm = _wat("""
    (module
      (import "wasi_snapshot_preview1" "sock_accept" (func $acc (param i32 i32 i32) (result i32)))
      (import "wasi_snapshot_preview1" "proc_exit" (func $exit (param i32)))
      (memory (export "memory") 1)
      (func (export "_start") (call $exit (call $acc (i32.const 0) (i32.const 0) (i32.const 0)))))
    """)
    out = execute(GuestEnvironment(wasm, {"/": Rights.NONE}), VirtualFS())
    assert "sock_accept" not in SUPPORTED_CALLS
    assert out.exit_code == ENOSYS and out.calls["sock_accept"] == 1


def test_non_wasi_import_rejected():
    wasm = _wat('(module (import "env" "f" (func)) (func (export "_start")))')
    with pytest.raises(ValidationError):
        execute(GuestEnvironment(wasm, {"/": Rights.NONE}), VirtualFS())


def test_wrong_signature_rejected():
    wasm = _wat('(module (import "wasi_snapshot_preview1" "fd_close" (func (param i64) (result i32))) (func (export "_start")))')
    with pytest.raises(ValidationError):
        execute(GuestEnvironment(wasm, {"/": Rights.NONE}), VirtualFS())


def test_missing_start():
    wasm = _wat("(module (func (export \"main\")))")
    with pytest.raises(MissingEntry):
        execute(GuestEnvironment(wasm, {"/": Rights.NONE}), VirtualFS())


def test_invalid_module():
    with pytest.raises(ValidationError):
        GuestEnvironment(b"not wasm", {"/": Rights.NONE})
    with pytest.raises(ValidationError):
        execute(GuestEnvironment(b"\x00asm\x01\x00\x00\x00\xff", {"/": Rights.NONE}), VirtualFS())


def test_preopen_needs_rights_entry():
    with pytest.raises(InvariantError):
        GuestEnvironment(_probe(), {"/elsewhere/": Rights.READ}, preopened_dirs=("/data",))


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_trap_is_reported(strategy):
    wasm = _wat('(module (memory (export "memory") 1) (func (export "_start") unreachable))')
    out = execute(GuestEnvironment(wasm, {"/": Rights.NONE}, strategy=strategy), VirtualFS())
    assert out.exit_code is None and out.trap and not out.ok


def test_stdout_goes_to_log_ring():
    wasm = _wat("""
    (module
      (import "wasi_snapshot_preview1" "fd_write" (func $w (param i32 i32 i32 i32) (result i32)))
      (memory (export "memory") 1)
      (data (i32.const 8) "hello")
      (func (export "_start")
        (i32.store (i32.const 0) (i32.const 8))
        (i32.store (i32.const 4) (i32.const 5))
        (drop (call $w (i32.const 1) (i32.const 0) (i32.const 1) (i32.const 32)))))
    """)
    ring = LogRing()
    assert execute(GuestEnvironment(wasm, {"/": Rights.NONE}), VirtualFS(), log_ring=ring).ok
    assert ring.text(1) == "hello"


def test_out_of_bounds_pointer_is_efault():
    wasm = _wat("""
    (module
      (import "wasi_snapshot_preview1" "random_get" (func $r (param i32 i32) (result i32)))
      (import "wasi_snapshot_preview1" "proc_exit" (func $exit (param i32)))
      (memory (export "memory") 1)
      (func (export "_start") (call $exit (call $r (i32.const 65530) (i32.const 100)))))
    """)
    assert execute(GuestEnvironment(wasm, {"/": Rights.NONE}), VirtualFS()).exit_code == 21


def test_large_random_get_is_chunked():
    wasm = _wat("""
    (module
      (import "wasi_snapshot_preview1" "random_get" (func $r (param i32 i32) (result i32)))
      (import "wasi_snapshot_preview1" "proc_exit" (func $exit (param i32)))
      (memory (export "memory") 4)
      (func (export "_start") (call $exit (call $r (i32.const 0) (i32.const 200000)))))
    """)
    assert execute(GuestEnvironment(wasm, {"/": Rights.NONE}, rng_seed=SEED), VirtualFS()).exit_code == 0


def test_cancellation_stops_guest():
    wasm = _wat("""
    (module
      (import "wasi_snapshot_preview1" "random_get" (func $r (param i32 i32) (result i32)))
      (memory (export "memory") 1)
      (func (export "_start") (loop $l (drop (call $r (i32.const 0) (i32.const 1))) (br $l))))
    """)
    cancel = threading.Event()
    threading.Timer(0.2, cancel.set).start()
    out = execute(GuestEnvironment(wasm, {"/": Rights.NONE}), VirtualFS(), cancel=cancel)
    assert out.trap and "cancelled" in out.trap
