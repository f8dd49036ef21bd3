"""HTTP/1.1 front end for the proxy attestation service.

    POST /challenge                       -> {"nonce": b64}
    POST /onboard {csr, evidence, device_cert, nonce?}  -> {"certificate": PEM}
    GET  /rootca                          -> PEM

Binary fields are base64 inside JSON. Failures return a JSON body
``{"error": <exception class name>, "message": ...}``.
"""

from __future__ import annotations

import base64
import http.client
import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from cryptography import x509

from . import errors
from .attestation import AttestationEvidence, ProxyState, load_cert, pem
from .errors import AttestationError, EvidenceInvalid

log = logging.getLogger(__name__)

MAX_BODY = 1 << 20


def split_endpoint(endpoint: str) -> tuple[str, int]:
    host, _, port = endpoint.rpartition(":")
    return host.strip("[]"), int(port)


class _Handler(BaseHTTPRequestHandler):
    server: "ProxyServer"
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt: str, *args) -> None:
        log.debug("%s - " + fmt, self.address_string(), *args)

    def _send(self, status: int, body: bytes, ctype: str = "application/json") -> None:
        self.send_response(status)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _json(self, status: int, obj: dict) -> None:
        self._send(status, json.dumps(obj).encode())

    def _body(self) -> dict:
        n = int(self.headers.get("Content-Length", "0"))
        if n > MAX_BODY:
            raise ValueError("request body too large")
        raw = self.rfile.read(n) if n else b"{}"
        doc = json.loads(raw or b"{}")
        if not isinstance(doc, dict):
            raise ValueError("expected a JSON object")
        return doc

    def do_GET(self) -> None:
        if self.path == "/rootca":
            self._send(200, self.server.state.root_ca_pem.encode(), "application/x-pem-file")
        else:
            self._json(404, {"error": "NotFound", "message": self.path})

    def do_POST(self) -> None:
        state = self.server.state
        try:
            body = self._body()
            if self.path == "/challenge":
                nonce = state.new_challenge()
                self._json(200, {"nonce": base64.b64encode(nonce).decode()})
            elif self.path == "/onboard":
                csr = base64.b64decode(body["csr"], validate=True)
                evidence = base64.b64decode(body["evidence"], validate=True)
                device_cert = load_cert(body["device_cert"])
                nonce = body.get("nonce")
                challenge = None if nonce is None else base64.b64decode(nonce, validate=True)
                cert = state.onboard(csr, evidence, device_cert, challenge)
                self._json(200, {"certificate": pem(cert)})
            else:
                self._json(404, {"error": "NotFound", "message": self.path})
        except EvidenceInvalid as exc:
            log.info("onboard rejected: %s", exc)
            self._json(403, {"error": "EvidenceInvalid", "cause": type(exc.cause).__name__, "message": str(exc)})
        except AttestationError as exc:
            log.info("onboard rejected: %s", exc)
            self._json(403, {"error": type(exc).__name__, "message": str(exc)})
        except (KeyError, ValueError, TypeError) as exc:
            self._json(400, {"error": "BadRequest", "message": f"{type(exc).__name__}: {exc}"})


class ProxyServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, state: ProxyState, address: tuple[str, int]):
        super().__init__(address, _Handler)
        self.state = state

    @property
    def endpoint(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, name="proxy-http", daemon=True)
        t.start()
        return t


class ProxyClient:
    """Runtime-side client of the proxy service."""

    def __init__(self, endpoint: str, timeout: float = 30.0):
        self.host, self.port = split_endpoint(endpoint)
        self.timeout = timeout

    def _request(self, method: str, path: str, body: dict | None = None) -> tuple[int, bytes]:
        conn = http.client.HTTPConnection(self.host, self.port, timeout=self.timeout)
        try:
            payload = None if body is None else json.dumps(body).encode()
            headers = {"Content-Type": "application/json"} if payload is not None else {}
            conn.request(method, path, body=payload, headers=headers)
            resp = conn.getresponse()
            return resp.status, resp.read()
        finally:
            conn.close()

    def challenge(self) -> bytes:
        status, raw = self._request("POST", "/challenge", {})
        if status != 200:
            raise errors.AttestationError(f"challenge failed: {status} {raw[:200]!r}")
        return base64.b64decode(json.loads(raw)["nonce"])

    def onboard(
        self, csr_der: bytes, evidence: AttestationEvidence, device_cert: x509.Certificate, nonce: bytes
    ) -> x509.Certificate:
        status, raw = self._request(
            "POST",
            "/onboard",
            {
                "csr": base64.b64encode(csr_der).decode(),
                "evidence": base64.b64encode(evidence.to_bytes()).decode(),
                "device_cert": pem(device_cert),
                "nonce": base64.b64encode(nonce).decode(),
            },
        )
        if status == 200:
            return load_cert(json.loads(raw)["certificate"])
        try:
            doc = json.loads(raw)
        except ValueError:
            doc = {}
        name = doc.get("error", "AttestationError")
        cls = getattr(errors, name, None)
        message = doc.get("message", raw[:200].decode("utf-8", "replace"))
        if name == "EvidenceInvalid":
            cause_cls = getattr(errors, doc.get("cause", ""), errors.EvidenceError)
            raise EvidenceInvalid(cause_cls(message))
        if isinstance(cls, type) and issubclass(cls, AttestationError):
            raise cls(message)
        raise AttestationError(f"{name}: {message}")

    def root_ca(self) -> str:
        status, raw = self._request("GET", "/rootca")
        if status != 200:
            raise AttestationError(f"rootca failed: {status}")
        return raw.decode("ascii")


class LocalProxy:
    """In-process stand-in for `ProxyClient`, same call surface."""

    def __init__(self, state: ProxyState):
        self.state = state

    def challenge(self) -> bytes:
        return self.state.new_challenge()

    def onboard(
        self, csr_der: bytes, evidence: AttestationEvidence, device_cert: x509.Certificate, nonce: bytes
    ) -> x509.Certificate:
        return self.state.onboard(csr_der, evidence, device_cert, nonce)

    def root_ca(self) -> str:
        return self.state.root_ca_pem
