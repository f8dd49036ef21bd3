"""Isolate-side runtime: onboarding, attested TLS, role-gated provisioning, execution."""

from __future__ import annotations

import enum
import hashlib
import logging
import socket
import ssl
import threading
from dataclasses import dataclass
from typing import Protocol

from cryptography import x509
from cryptography.hazmat.primitives.serialization import Encoding

from . import metrics, wire
from .attestation import AttestationEvidence, key_pem, load_chain, load_cert, make_csr, new_key, pem
from .engine import ExecutionOutcome, GuestEnvironment, LogRing, execute
from .errors import (
    AttestationError,
    HandshakeFailure,
    InvariantError,
    MalformedFrame,
    NotFound,
    OnboardFailed,
    UnknownClientCert,
    VfsError,
)
from .isolate import IsolateDriver
from .native import BUILTIN_MODULES, register_module
from .policy import GlobalPolicy, Rights, Role, policy_digest, rights_for
from .proxy import split_endpoint
from .vfs import IoVecSeq, VirtualFS

log = logging.getLogger(__name__)

SERVER_ACTOR = "<runtime>"


class State(enum.Enum):
    BOOTING = "Booting"
    ONBOARDING = "Onboarding"
    AWAITING_PROVISIONING = "AwaitingProvisioning"
    READY_TO_EXECUTE = "ReadyToExecute"
    EXECUTING = "Executing"
    FINISHED = "Finished"
    FAILED = "Failed"


_NEXT = {
    State.BOOTING: State.ONBOARDING,
    State.ONBOARDING: State.AWAITING_PROVISIONING,
    State.AWAITING_PROVISIONING: State.READY_TO_EXECUTE,
    State.READY_TO_EXECUTE: State.EXECUTING,
    State.EXECUTING: State.FINISHED,
}

ORDER = list(State)


class ProxyLink(Protocol):
    def challenge(self) -> bytes: ...

    def onboard(
        self, csr_der: bytes, evidence: AttestationEvidence, device_cert: x509.Certificate, nonce: bytes
    ) -> x509.Certificate: ...


class Lifecycle:
    """Forward-only state machine; any state may drop to FAILED."""

    def __init__(self) -> None:
        self.state = State.BOOTING
        self.reason: str | None = None
        self.lock = threading.RLock()
        self.changed = threading.Condition(self.lock)
        self.history: list[State] = [State.BOOTING]

    def advance(self, to: State) -> None:
        with self.lock:
            if _NEXT.get(self.state) is not to:
                raise RuntimeError(f"illegal transition {self.state.value} -> {to.value}")
            self.state = to
            self.history.append(to)
            self.changed.notify_all()

    def fail(self, reason: str) -> None:
        with self.lock:
            if self.state is State.FAILED:
                return
            self.state = State.FAILED
            self.reason = reason
            self.history.append(State.FAILED)
            self.changed.notify_all()

    def wait_for(self, states: set[State], timeout: float | None = None) -> State:
        with self.lock:
            self.changed.wait_for(lambda: self.state in states, timeout)
            return self.state

    def describe(self) -> str:
        if self.state is State.FAILED:
            return f"Failed({self.reason})"
        return self.state.value


def expected_inputs(policy: GlobalPolicy) -> set[str]:
    """Program path plus every file path some DataProvider may write.

    Directory-prefix entries (ending in "/") name no particular file and
    are not counted.
    """
    paths = {policy.program_entry_path}
    for p in policy.with_roles(Role.DATA_PROVIDER):
        for path, rights in p.file_rights.items():
            if Rights.WRITE in rights and not path.endswith("/"):
                paths.add(path)
    return paths


@dataclass
class Session:
    principal_id: str
    sock: ssl.SSLSocket


def _cert_der(pem_text: str) -> bytes:
    return load_cert(pem_text).public_bytes(Encoding.DER)


def _linger_close(sock: socket.socket, grace_s: float = 1.0) -> None:
    """Half-close and drain before closing.

    Closing with unread client bytes makes the kernel send RST, which can
    overtake the TLS alert; the client would then see a bare reset.
    """
    try:
        sock.shutdown(socket.SHUT_WR)
        sock.settimeout(grace_s)
        while socket.socket.recv(sock, 4096):
            pass
    except OSError:
        pass
    finally:
        sock.close()


class RuntimeServer:
    def __init__(
        self,
        policy: GlobalPolicy,
        isolate: IsolateDriver,
        proxy: ProxyLink,
        *,
        phases: metrics.PhaseLog | None = None,
        listen: str | None = None,
    ):
        self.policy = policy
        self.isolate = isolate
        self.proxy = proxy
        self.phases = phases or metrics.PhaseLog()
        self.listen_endpoint = listen or policy.server_endpoint
        self.lifecycle = Lifecycle()
        self.digest = policy_digest(policy)
        self.expected = expected_inputs(policy)
        self.fs = VirtualFS(self._rights, audit=True)
        for module_id in policy.native_modules:
            if module_id not in BUILTIN_MODULES:
                raise InvariantError(f"unknown native module {module_id!r}")
            register_module(self.fs, BUILTIN_MODULES[module_id])
        self.client_certs = {_cert_der(p.client_cert_pem): p.id for p in policy.principals}
        self.certificate: x509.Certificate | None = None
        self.tls: ssl.SSLContext | None = None
        self.outcome: ExecutionOutcome | None = None
        self.guest_log = LogRing()
        self.cancel = threading.Event()
        self.done = threading.Event()
        self.fetched: set[str] = set()
        self.rejections: list[Exception] = []
        self._listener: socket.socket | None = None
        self._exec_thread: threading.Thread | None = None

    def _rights(self, actor: str, path: str) -> Rights:
        if actor == SERVER_ACTOR:
            return Rights.WRITE | Rights.OPEN
        return rights_for(self.policy, actor, path)

    @property
    def state(self) -> State:
        return self.lifecycle.state

    # -- onboarding --------------------------------------------------------

    def boot(self) -> x509.Certificate:
        """Generate the TLS key and CSR, attest, and obtain the proxy certificate."""
        lc = self.lifecycle
        lc.advance(State.ONBOARDING)
        try:
            with self.phases.phase(metrics.ONBOARD):
                with self.phases.phase(metrics.INIT_ISOLATE):
                    key = new_key()
                    csr = make_csr(key)
                with self.phases.phase(metrics.REQUEST_ATTESTATION):
                    nonce = self.proxy.challenge()
                evidence, device_cert = self.isolate.attest(hashlib.sha256(csr).digest(), nonce)
                cert = self.proxy.onboard(csr, evidence, device_cert, nonce)
        except (AttestationError, OSError, ValueError) as exc:
            lc.fail(f"OnboardFailed: {exc}")
            raise OnboardFailed(str(exc)) from exc
        self.certificate = cert
        self.tls = self._tls_context(key, cert)
        lc.advance(State.AWAITING_PROVISIONING)
        log.info("onboarded; certificate valid until %s", cert.not_valid_after_utc)
        return cert

    def _tls_context(self, key, cert: x509.Certificate) -> ssl.SSLContext:
        ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
        ctx.minimum_version = ssl.TLSVersion.TLSv1_3
        load_chain(ctx, pem(cert), key_pem(key))
        ctx.verify_mode = ssl.CERT_REQUIRED
        ctx.load_verify_locations(cadata="".join(p.client_cert_pem for p in self.policy.principals))
        return ctx

    # -- sessions ----------------------------------------------------------

    def accept_session(self, conn: socket.socket) -> Session:
        """Run the server side of the mutual-TLS handshake and identify the principal."""
        if self.tls is None or ORDER.index(self.state) < ORDER.index(State.AWAITING_PROVISIONING):
            conn.close()
            raise HandshakeFailure(f"not serving in state {self.lifecycle.describe()}")
        tls = self.tls.wrap_socket(conn, server_side=True, do_handshake_on_connect=False)
        try:
            tls.do_handshake()
        except ssl.SSLCertVerificationError as exc:
            _linger_close(tls)
            err = UnknownClientCert(str(exc))
            self.rejections.append(err)
            raise err from None
        except (ssl.SSLError, OSError) as exc:
            _linger_close(tls)
            err = HandshakeFailure(str(exc))
            self.rejections.append(err)
            raise err from None
        der = tls.getpeercert(binary_form=True)
        principal = self.client_certs.get(der or b"")
        if principal is None:
            tls.close()
            err = UnknownClientCert("client certificate not listed in the policy")
            self.rejections.append(err)
            raise err
        return Session(principal, tls)

    def handle_frame(self, principal_id: str, frame: wire.Frame) -> wire.Frame:
        """Apply one request frame for an authenticated principal and return the reply."""
        policy = self.policy
        principal = policy.principal(principal_id)
        E = wire.ErrorCode

        if isinstance(frame, wire.QueryPolicyDigest):
            return wire.PolicyDigest(self.digest)

        if isinstance(frame, wire.ProvisionProgram):
            if not principal.has(Role.PROGRAM_PROVIDER) or frame.path != policy.program_entry_path:
                return wire.Error(E.NOT_PERMITTED, "not permitted to provision the program")
            return self._provision(SERVER_ACTOR, frame.path, frame.data, metrics.PROVISION_PROGRAM)

        if isinstance(frame, wire.ProvisionData):
            if (
                not principal.has(Role.DATA_PROVIDER)
                or frame.path == policy.program_entry_path
                or Rights.WRITE not in rights_for(policy, principal_id, frame.path)
            ):
                return wire.Error(E.NOT_PERMITTED, f"not permitted to write {frame.path}")
            return self._provision(principal_id, frame.path, frame.data, metrics.PROVISION_DATA)

        if isinstance(frame, wire.RequestResult):
            if not principal.has(Role.RESULT_RECEIVER) or Rights.READ not in rights_for(
                policy, principal_id, frame.path
            ):
                return wire.Error(E.NOT_PERMITTED, f"not permitted to read {frame.path}")
            with self.lifecycle.lock:
                if self.state is not State.FINISHED:
                    return wire.Error(E.WRONG_STATE, f"results unavailable in state {self.lifecycle.describe()}")
            sess = self.fs.session(principal_id)
            try:
                fd = sess.open(frame.path, requested=Rights.READ)
                size = sess.filestat(fd).size
                buf = bytearray(size)
                n = sess.read(fd, IoVecSeq([(0, size)]), memoryview(buf))
                sess.close(fd)
            except NotFound:
                return wire.Error(E.NOT_FOUND, f"{frame.path} does not exist")
            except VfsError as exc:
                return wire.Error(E.NOT_PERMITTED, f"{type(exc).__name__}: {exc}")
            with self.lifecycle.lock:
                self.fetched.add(principal_id)
            return wire.ResultOk(bytes(buf[:n]))

        return wire.Error(E.MALFORMED_FRAME, f"unexpected {type(frame).__name__} from client")

    def _provision(self, actor: str, path: str, data: bytes, phase: str) -> wire.Frame:
        with self.lifecycle.lock:
            if self.state is not State.AWAITING_PROVISIONING:
                return wire.Error(wire.ErrorCode.WRONG_STATE, f"provisioning closed in state {self.lifecycle.describe()}")
            with self.phases.phase(phase):
                sess = self.fs.session(actor)
                try:
                    fd = sess.open(path, create=True, truncate=True, requested=Rights.WRITE, mkdirs=True)
                    sess.write(fd, IoVecSeq([(0, len(data))]), memoryview(data))
                    sess.close(fd)
                except VfsError as exc:
                    return wire.Error(wire.ErrorCode.NOT_PERMITTED, f"{type(exc).__name__}: {exc}")
            if all(self.fs.exists(p) for p in self.expected):
                self.lifecycle.advance(State.READY_TO_EXECUTE)
                self._start_execution()
        return wire.Ack()

    # -- execution ---------------------------------------------------------

    def _start_execution(self) -> None:
        self.lifecycle.advance(State.EXECUTING)
        self._exec_thread = threading.Thread(target=self._execute, name="guest", daemon=True)
        self._exec_thread.start()

    def _execute(self) -> None:
        try:
            program = self.fs.read_file(self.policy.program_entry_path)
            # Directories the guest is granted rights on exist before it starts.
            for key in self.policy.program_file_rights:
                if key.endswith("/") and key != "/":
                    self.fs.mkdirs(key.rstrip("/"))
            env = GuestEnvironment.from_policy(self.policy, program)
            with self.phases.phase(metrics.EXECUTE):
                outcome = execute(env, self.fs, log_ring=self.guest_log, cancel=self.cancel)
        except Exception as exc:
            log.exception("execution failed")
            self.lifecycle.fail(f"{type(exc).__name__}: {exc}")
            self.done.set()
            return
        self.outcome = outcome
        if outcome.trap is not None:
            self.lifecycle.fail(f"trap: {outcome.trap}")
            self.done.set()
        elif outcome.exit_code != 0:
            self.lifecycle.fail(f"guest exited with status {outcome.exit_code}")
            self.done.set()
        else:
            self.lifecycle.advance(State.FINISHED)
            self._check_done()

    def wait(self, states: set[State], timeout: float | None = None) -> State:
        return self.lifecycle.wait_for(states, timeout)

    def _check_done(self) -> None:
        receivers = {p.id for p in self.policy.with_roles(Role.RESULT_RECEIVER)}
        with self.lifecycle.lock:
            if self.state is State.FINISHED and receivers <= self.fetched:
                self.done.set()

    # -- network loop ------------------------------------------------------

    def listen(self) -> str:
        host, port = split_endpoint(self.listen_endpoint)
        sock = socket.create_server((host, port), reuse_port=False)
        sock.settimeout(0.2)
        self._listener = sock
        h, p = sock.getsockname()[:2]
        self.listen_endpoint = f"{h}:{p}"
        return self.listen_endpoint

    def serve_connection(self, conn: socket.socket) -> None:
        try:
            session = self.accept_session(conn)
        except (UnknownClientCert, HandshakeFailure) as exc:
            log.warning("handshake rejected: %s: %s", type(exc).__name__, exc)
            return
        log.info("session for %s", session.principal_id)
        stream = session.sock.makefile("rwb")
        try:
            while True:
                try:
                    frame = wire.read_frame(stream)
                except MalformedFrame as exc:
                    wire.write_frame(stream, wire.Error(wire.ErrorCode.MALFORMED_FRAME, str(exc)))
                    break
                if frame is None:
                    break
                wire.write_frame(stream, self.handle_frame(session.principal_id, frame))
        except (EOFError, OSError, ssl.SSLError) as exc:
            log.info("session %s ended: %s", session.principal_id, exc)
        finally:
            try:
                stream.close()
                session.sock.close()
            except OSError:
                pass
            self._check_done()

    def serve_forever(self) -> None:
        if self._listener is None:
            self.listen()
        assert self._listener is not None
        workers: list[threading.Thread] = []
        try:
            while not self.done.is_set():
                try:
                    conn, _ = self._listener.accept()
                except socket.timeout:
                    continue
                conn.settimeout(None)
                t = threading.Thread(target=self.serve_connection, args=(conn,), daemon=True)
                t.start()
                workers.append(t)
        finally:
            self._listener.close()
            for t in workers:
                t.join(timeout=2.0)

    def start(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, name="runtime-server", daemon=True)
        t.start()
        return t

    def stop(self) -> None:
        self.cancel.set()
        self.done.set()
