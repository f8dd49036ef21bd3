import itertools
import socket
import ssl
import time

import pytest

from attestbox import metrics, wire
from attestbox.attestation import ProxyState, TrustBundle, key_pem, new_key, pem, self_signed_client_cert
from attestbox.client import ClientIdentity, connect
from attestbox.deploy import PROGRAM_PATH
from attestbox.errors import (
    ClientCertRejected,
    HandshakeFailure,
    InvariantError,
    OnboardFailed,
    ServerError,
    UnknownClientCert,
)
from attestbox.isolate import ProcessIsolate
from attestbox.policy import ExecutionStrategy, GlobalPolicy, Principal, Rights, Role
from attestbox.proxy import LocalProxy
from attestbox.server import Lifecycle, RuntimeServer, State, expected_inputs
from oracles import wordcount

R, W = Rights.READ.closure(), Rights.WRITE.closure()
E = wire.ErrorCode


# -- lifecycle ---------------------------------------------------------------

def test_lifecycle_forward_only():
    lc = Lifecycle()
    order = [State.ONBOARDING, State.AWAITING_PROVISIONING, State.READY_TO_EXECUTE, State.EXECUTING, State.FINISHED]
    for st in order:
        with pytest.raises(RuntimeError):
            lc.advance(State.FINISHED if st is not State.FINISHED else State.ONBOARDING)
        lc.advance(st)
    assert lc.history == [State.BOOTING, *order]
    with pytest.raises(RuntimeError):
        lc.advance(State.BOOTING)


@pytest.mark.parametrize("steps", range(6))
def test_any_state_can_fail(steps):
    lc = Lifecycle()
    for st in list(State)[1:steps + 1]:
        lc.advance(st)
    lc.fail("boom")
    lc.fail("second reason ignored")
    assert lc.state is State.FAILED and lc.describe() == "Failed(boom)"
    with pytest.raises(RuntimeError):
        lc.advance(State.FINISHED)


def test_expected_inputs(make_fixture):
    pol = make_fixture("wordcount").policy
    assert expected_inputs(pol) == {PROGRAM_PATH, "/input/a", "/input/b"}
    p = pol.principals[1]
    widened = Principal(p.id, p.client_cert_pem, p.roles, {"/input/": W, "/input/a": W, "/ro": R})
    pol2 = GlobalPolicy(**{**pol.__dict__, "principals": (pol.principals[0], widened, *pol.principals[2:])})
    assert expected_inputs(pol2) == {PROGRAM_PATH, "/input/a", "/input/b"}


# -- role soundness ----------------------------------------------------------

ROLE_SETS = [frozenset(c) for n in range(4) for c in itertools.combinations(list(Role), n)]
_CERTS = {}


def _role_policy():
    if not _CERTS:
        for i in range(len(ROLE_SETS) + 1):
            _CERTS[i] = pem(self_signed_client_cert(new_key(), f"p{i}"))
    rights = {"/input/x": W, "/input/y": W, "/output/": R, PROGRAM_PATH: W | R}
    principals = [Principal(f"p{i}", _CERTS[i], roles, rights) for i, roles in enumerate(ROLE_SETS)]
    # Holds every role but no file rights.
    principals.append(Principal("bare", _CERTS[len(ROLE_SETS)], frozenset(Role), {}))
    return GlobalPolicy(
        computation_id="roles",
        principals=tuple(principals),
        program_entry_path=PROGRAM_PATH,
        runtime_measurement=bytes(32),
        proxy_root_ca_pem="",
        execution_strategy=ExecutionStrategy.JIT,
        certificate_lifetime_s=60,
        server_endpoint="127.0.0.1:0",
        proxy_endpoint="127.0.0.1:0",
        program_file_rights={"/": Rights.NONE},
    )


FRAMES = [
    wire.QueryPolicyDigest(),
    wire.ProvisionProgram(PROGRAM_PATH, b"p"),
    wire.ProvisionProgram("/input/x", b"p"),
    wire.ProvisionData("/input/x", b"d"),
    wire.ProvisionData(PROGRAM_PATH, b"d"),
    wire.ProvisionData("/elsewhere", b"d"),
    wire.RequestResult("/output/r"),
    wire.RequestResult("/output/missing"),
    wire.RequestResult("/input/x"),
    wire.Ack(),
    wire.ResultOk(b"x"),
    wire.PolicyDigest(bytes(32)),
    wire.Error(1, "x"),
]


def _expected_reply(roles, has_rights, frame, state):
    """Independent statement of the access rules."""
    if isinstance(frame, wire.QueryPolicyDigest):
        return "digest"
    if isinstance(frame, wire.ProvisionProgram):
        ok = Role.PROGRAM_PROVIDER in roles and frame.path == PROGRAM_PATH
        return ("ack" if state is State.AWAITING_PROVISIONING else E.WRONG_STATE) if ok else E.NOT_PERMITTED
    if isinstance(frame, wire.ProvisionData):
        ok = Role.DATA_PROVIDER in roles and has_rights and frame.path == "/input/x"
        return ("ack" if state is State.AWAITING_PROVISIONING else E.WRONG_STATE) if ok else E.NOT_PERMITTED
    if isinstance(frame, wire.RequestResult):
        ok = Role.RESULT_RECEIVER in roles and has_rights and frame.path.startswith("/output/")
        if not ok:
            return E.NOT_PERMITTED
        if state is not State.FINISHED:
            return E.WRONG_STATE
        return "result" if frame.path == "/output/r" else E.NOT_FOUND
    return E.MALFORMED_FRAME


def _observed(reply):
    if isinstance(reply, wire.PolicyDigest):
        return "digest"
    if isinstance(reply, wire.Ack):
        return "ack"
    if isinstance(reply, wire.ResultOk):
        assert reply.data == b"result"
        return "result"
    assert isinstance(reply, wire.Error)
    return E(reply.code)


def test_role_soundness_exhaustive(trust):
    policy = _role_policy()
    checked = 0
    for principal in policy.principals:
        for frame in FRAMES:
            for state in State:
                srv = RuntimeServer(policy, ProcessIsolate(trust.device, bytes(32)), None)
                srv.fs.write_file("/output/r", b"result", mkdirs=True)
                srv.lifecycle.state = state
                got = _observed(srv.handle_frame(principal.id, frame))
                want = _expected_reply(principal.roles, bool(principal.file_rights), frame, state)
                assert got == want, (principal.id, sorted(principal.roles), frame, state)
                # A rejected request leaves the filesystem untouched.
                if got != "ack":
                    assert not srv.fs.exists("/input/x") and not srv.fs.exists(PROGRAM_PATH)
                checked += 1
    assert checked == len(policy.principals) * len(FRAMES) * len(State)


def test_unknown_native_module_rejected(trust, make_fixture):
    fx = make_fixture()
    pol = GlobalPolicy(**{**fx.policy.__dict__, "native_modules": ("nope",)})
    with pytest.raises(InvariantError):
        RuntimeServer(pol, ProcessIsolate(trust.device), None)


# -- onboarding --------------------------------------------------------------

def test_boot_fails_on_foreign_device(trust, make_fixture):
    fx = make_fixture()
    state = ProxyState(trust.root_key, trust.root_cert, trust.device_ca_cert)
    rogue = TrustBundle.generate().device
    srv = RuntimeServer(fx.policy, ProcessIsolate(rogue, fx.policy.runtime_measurement), LocalProxy(state))
    with pytest.raises(OnboardFailed):
        srv.boot()
    assert srv.state is State.FAILED and srv.lifecycle.describe().startswith("Failed(OnboardFailed")
    a, b = socket.socketpair()
    with pytest.raises(HandshakeFailure):
        srv.accept_session(a)
    b.close()


def test_boot_records_phases(running, make_fixture):
    rt = running(make_fixture())
    names = rt.server.phases.totals()
    assert {metrics.ONBOARD, metrics.INIT_ISOLATE, metrics.REQUEST_ATTESTATION} <= set(names)
    assert rt.server.state is State.AWAITING_PROVISIONING


# -- sessions ----------------------------------------------------------------

def _wait_rejections(srv, n, timeout=5.0):
    deadline = time.monotonic() + timeout
    while len(srv.rejections) < n and time.monotonic() < deadline:
        time.sleep(0.01)
    return srv.rejections


class _Impostor(ClientIdentity):
    # Claims a listed principal id so the client-side lookup passes.
    def principal_id(self, policy):
        return "receiver"


def test_unknown_client_certificate_rejected(running, make_fixture):
    fx = make_fixture()
    rt = running(fx)
    key = new_key()
    stranger = _Impostor(pem(self_signed_client_cert(key, "stranger")), key_pem(key))
    with pytest.raises(ClientCertRejected):
        conn = connect(fx.policy, stranger, endpoint=rt.endpoint)
        conn.request_result("/output/count")
    assert isinstance(_wait_rejections(rt.server, 1)[0], UnknownClientCert)


def test_plaintext_connection_rejected(running, make_fixture):
    rt = running(make_fixture())
    host, port = rt.endpoint.split(":")
    with socket.create_connection((host, int(port))) as s:
        s.sendall(wire.encode(wire.QueryPolicyDigest()))
        s.settimeout(5)
        try:
            s.recv(100)
        except OSError:
            pass
    assert isinstance(_wait_rejections(rt.server, 1)[0], HandshakeFailure)


def test_full_run_and_post_finish_rules(running, make_fixture):
    fx = make_fixture("wordcount")
    rt = running(fx)
    with rt.connect("receiver") as rc:
        with pytest.raises(ServerError) as ei:
            rc.request_result("/output/count")
        assert ei.value.code == E.WRONG_STATE
    with rt.connect("program") as c:
        c.provision_program(PROGRAM_PATH, fx.program_path.read_bytes())
    with rt.connect("data-1") as c:
        with pytest.raises(ServerError) as ei:
            c.provision_data("/input/b", b"stolen")
        assert ei.value.code == E.NOT_PERMITTED
        c.provision_data("/input/a", b"one two\nthree")
    with rt.connect("data-2") as c:
        c.provision_data("/input/b", b"four")
    assert rt.server.wait({State.FINISHED, State.FAILED}, 30) is State.FINISHED
    with rt.connect("data-1") as c:
        with pytest.raises(ServerError) as ei:
            c.provision_data("/input/a", b"again")
        assert ei.value.code == E.WRONG_STATE
    assert not rt.server.done.is_set()
    with rt.connect("receiver") as rc:
        with pytest.raises(ServerError) as ei:
            rc.request_result("/output/nothing")
        assert ei.value.code == E.NOT_FOUND
        assert rc.fetch_result("/output/count") == wordcount(b"one two\nthree", b"four")
    assert rt.server.done.wait(5)
    assert rt.server.lifecycle.history == [
        State.BOOTING, State.ONBOARDING, State.AWAITING_PROVISIONING,
        State.READY_TO_EXECUTE, State.EXECUTING, State.FINISHED,
    ]


def test_invalid_program_fails_computation(running, make_fixture):
    fx = make_fixture("random")
    rt = running(fx)
    with rt.connect("program") as c:
        c.provision_program(PROGRAM_PATH, b"\0asm not really")
    with rt.connect("data-1") as c:
        c.provision_data("/input/unused", b"")
    assert rt.server.wait({State.FINISHED, State.FAILED}, 30) is State.FAILED
    assert rt.server.done.is_set()
    with rt.connect("receiver") as rc:
        with pytest.raises(ServerError) as ei:
            rc.fetch_result("/output/random", timeout=5)
        assert ei.value.code == E.WRONG_STATE and "Failed" in ei.value.message


def test_malformed_frame_closes_session(running, make_fixture):
    rt = running(make_fixture())
    with rt.connect("receiver") as c:
        c._stream.write(b"\x00\x00\x00\x01\x99")
        c._stream.flush()
        reply = wire.read_frame(c._stream)
        assert reply.code == E.MALFORMED_FRAME
        assert wire.read_frame(c._stream) is None
