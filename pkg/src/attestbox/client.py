"""Principal-side client: attested handshake, provisioning, result retrieval."""

from __future__ import annotations

import socket
import ssl
import time
from dataclasses import dataclass
from typing import Callable

from cryptography.hazmat.primitives.serialization import Encoding

from . import metrics, wire
from .attestation import load_cert, load_chain, verify_runtime_certificate
from .errors import (
    AttestationRejected,
    CertificateError,
    ClientCertRejected,
    MalformedFrame,
    PolicyMismatch,
    ServerError,
    Timeout,
    TransportError,
    UnknownPrincipal,
)
from .policy import GlobalPolicy, Role, policy_digest
from .proxy import split_endpoint

POLL_INTERVAL_S = 0.25
DEFAULT_RESULT_TIMEOUT_S = 120.0


@dataclass(frozen=True)
class ClientIdentity:
    cert_pem: str
    key_pem: bytes

    @classmethod
    def load(cls, cert_path: str, key_path: str) -> "ClientIdentity":
        with open(cert_path) as fh:
            cert = fh.read()
        with open(key_path, "rb") as fh:
            key = fh.read()
        return cls(cert, key)

    def principal_id(self, policy: GlobalPolicy) -> str:
        der = load_cert(self.cert_pem).public_bytes(Encoding.DER)
        for p in policy.principals:
            if load_cert(p.client_cert_pem).public_bytes(Encoding.DER) == der:
                return p.id
        raise UnknownPrincipal("client certificate does not belong to any principal of the policy")


def _client_context(identity: ClientIdentity) -> ssl.SSLContext:
    ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_CLIENT)
    ctx.minimum_version = ssl.TLSVersion.TLSv1_3
    # The runtime certificate is checked against the policy right after the
    # handshake (chain, validity, measurement); hostname checks do not apply.
    ctx.check_hostname = False
    ctx.verify_mode = ssl.CERT_NONE
    load_chain(ctx, identity.cert_pem, identity.key_pem)
    return ctx


def _is_cert_alert(exc: BaseException) -> bool:
    text = str(exc).upper()
    return "UNKNOWN_CA" in text or "CERTIFICATE" in text or "HANDSHAKE_FAILURE" in text


class Connection:
    """One attested session with the runtime. Frames go strictly request/response."""

    def __init__(self, policy: GlobalPolicy, sock: ssl.SSLSocket, principal_id: str):
        self.policy = policy
        self.sock = sock
        self.principal_id = principal_id
        self._stream = sock.makefile("rwb")

    def __enter__(self) -> "Connection":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def close(self) -> None:
        try:
            self._stream.close()
            self.sock.close()
        except OSError:
            pass

    def call(self, frame: wire.Frame) -> wire.Frame:
        try:
            wire.write_frame(self._stream, frame)
            reply = wire.read_frame(self._stream)
        except ssl.SSLError as exc:
            if _is_cert_alert(exc):
                raise ClientCertRejected(str(exc)) from exc
            raise TransportError(str(exc)) from exc
        except (OSError, EOFError) as exc:
            raise TransportError(str(exc)) from exc
        except MalformedFrame as exc:
            raise TransportError(f"malformed reply: {exc}") from exc
        if reply is None:
            raise TransportError("connection closed by runtime")
        return reply

    def _expect(self, reply: wire.Frame, kind: type) -> wire.Frame:
        if isinstance(reply, wire.Error):
            raise ServerError(reply.code, reply.message)
        if not isinstance(reply, kind):
            raise TransportError(f"expected {kind.__name__}, got {type(reply).__name__}")
        return reply

    def policy_digest(self) -> bytes:
        return self._expect(self.call(wire.QueryPolicyDigest()), wire.PolicyDigest).digest  # type: ignore[union-attr]

    def provision_program(self, path: str, data: bytes) -> None:
        self._expect(self.call(wire.ProvisionProgram(path, data)), wire.Ack)

    def provision_data(self, path: str, data: bytes) -> None:
        self._expect(self.call(wire.ProvisionData(path, data)), wire.Ack)

    def provision_file(self, path: str, data: bytes) -> None:
        """Program path plus ProgramProvider role -> ProvisionProgram; otherwise ProvisionData."""
        principal = self.policy.principal(self.principal_id)
        if path == self.policy.program_entry_path and principal.has(Role.PROGRAM_PROVIDER):
            self.provision_program(path, data)
        else:
            self.provision_data(path, data)

    def request_result(self, path: str) -> bytes:
        return self._expect(self.call(wire.RequestResult(path)), wire.ResultOk).data  # type: ignore[union-attr]

    def fetch_result(
        self,
        path: str,
        *,
        timeout: float = DEFAULT_RESULT_TIMEOUT_S,
        poll: float = POLL_INTERVAL_S,
        clock: Callable[[], float] = time.monotonic,
    ) -> bytes:
        """Poll until the result is released. A failed computation is not retried."""
        deadline = clock() + timeout
        while True:
            try:
                return self.request_result(path)
            except ServerError as exc:
                if exc.code != wire.ErrorCode.WRONG_STATE or "Failed" in exc.message:
                    raise
            if clock() >= deadline:
                raise Timeout(f"{path} not available after {timeout:g} s")
            time.sleep(poll)


def connect(
    policy: GlobalPolicy,
    identity: ClientIdentity,
    *,
    endpoint: str | None = None,
    now: Callable[[], float] = time.time,
    timeout: float = 30.0,
    phases: metrics.PhaseLog | None = None,
) -> Connection:
    """Handshake, check the runtime certificate, then check the policy digest.

    No provisioning frame is sent before both checks pass.
    """
    principal_id = identity.principal_id(policy)
    host, port = split_endpoint(endpoint or policy.server_endpoint)
    ctx = _client_context(identity)
    phases = phases or metrics.PhaseLog()
    with phases.phase(metrics.CHECK_HASHES):
        try:
            raw = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise TransportError(f"cannot reach runtime at {host}:{port}: {exc}") from exc
        try:
            tls = ctx.wrap_socket(raw, server_hostname=None)
        except ssl.SSLError as exc:
            raw.close()
            if _is_cert_alert(exc):
                raise ClientCertRejected(str(exc)) from exc
            raise TransportError(f"TLS handshake failed: {exc}") from exc
        except OSError as exc:
            raw.close()
            raise TransportError(f"TLS handshake failed: {exc}") from exc
        der = tls.getpeercert(binary_form=True)
        try:
            if not der:
                raise CertificateError("runtime presented no certificate")
            verify_runtime_certificate(
                der,
                policy.proxy_root_ca_pem,
                policy.runtime_measurement,
                now(),
                max_lifetime_s=policy.certificate_lifetime_s,
            )
        except CertificateError as exc:
            tls.close()
            raise AttestationRejected(exc) from exc
        conn = Connection(policy, tls, principal_id)
        try:
            digest = conn.policy_digest()
        except BaseException:
            conn.close()
            raise
        if digest != policy_digest(policy):
            conn.close()
            raise PolicyMismatch(f"runtime enforces policy {digest.hex()}, expected {policy_digest(policy).hex()}")
    return conn
