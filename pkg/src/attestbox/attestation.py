"""Mock native attestation and the proxy attestation service.

The native token ("evidence") is a fixed binary layout signed by a device
key whose certificate is issued by a device CA::

    magic "VATT" | version u8 | measurement[32] | user_data[32] | nonce[32]
    | device_key_id[32] | sig_len u16be | signature (DER ECDSA-P256/SHA-256)

The proxy checks the evidence, checks that ``user_data`` is the SHA-256 of
the submitted CSR, and issues a short-lived certificate for the CSR's key
carrying the measurement in a private extension.
"""

from __future__ import annotations

import datetime as dt
import hashlib
import hmac
import os
import secrets
import ssl
import struct
import tempfile
import threading
import time
from dataclasses import dataclass
from typing import Callable

from cryptography import x509
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.x509.oid import NameOID

from .errors import (
    BadSignature,
    ChainInvalid,
    CsrBindingMismatch,
    EvidenceError,
    EvidenceInvalid,
    Expired,
    ExtensionMissing,
    LifetimeExceeded,
    MalformedCsr,
    MalformedEvidence,
    MeasurementMismatch,
    NonceMismatch,
    StaleNonce,
    UnknownDeviceKey,
    VersionUnsupported,
)
from .policy import DEFAULT_CERT_LIFETIME_S

MAGIC = b"VATT"
VERSION = 1
MEASUREMENT_OID = x509.ObjectIdentifier("1.3.6.1.4.1.57255.1")
NONCE_WINDOW_S = 300
_BODY = struct.Struct(">4sB32s32s32s32s")

Clock = Callable[[], float]


def new_key() -> ec.EllipticCurvePrivateKey:
    return ec.generate_private_key(ec.SECP256R1())


def key_id(public_key: ec.EllipticCurvePublicKey) -> bytes:
    der = public_key.public_bytes(
        serialization.Encoding.DER, serialization.PublicFormat.SubjectPublicKeyInfo
    )
    return hashlib.sha256(der).digest()


def _utc(ts: float) -> dt.datetime:
    return dt.datetime.fromtimestamp(int(ts), tz=dt.timezone.utc)


def _name(cn: str) -> x509.Name:
    return x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, cn)])


def self_signed_ca(
    key: ec.EllipticCurvePrivateKey, cn: str, *, now: float | None = None, days: int = 3650
) -> x509.Certificate:
    now = time.time() if now is None else now
    return (
        x509.CertificateBuilder()
        .subject_name(_name(cn))
        .issuer_name(_name(cn))
        .public_key(key.public_key())
        .serial_number(x509.random_serial_number())
        .not_valid_before(_utc(now - 60))
        .not_valid_after(_utc(now + days * 86400))
        .add_extension(x509.BasicConstraints(ca=True, path_length=0), critical=True)
        .add_extension(
            x509.KeyUsage(
                digital_signature=True, content_commitment=False, key_encipherment=False,
                data_encipherment=False, key_agreement=False, key_cert_sign=True,
                crl_sign=True, encipher_only=False, decipher_only=False,
            ),
            critical=True,
        )
        .sign(key, hashes.SHA256())
    )


def self_signed_client_cert(
    key: ec.EllipticCurvePrivateKey, cn: str, *, now: float | None = None, days: int = 365
) -> x509.Certificate:
    """Leaf certificate a principal uses for mutual TLS."""
    now = time.time() if now is None else now
    return (
        x509.CertificateBuilder()
        .subject_name(_name(cn))
        .issuer_name(_name(cn))
        .public_key(key.public_key())
        .serial_number(x509.random_serial_number())
        .not_valid_before(_utc(now - 60))
        .not_valid_after(_utc(now + days * 86400))
        .add_extension(x509.BasicConstraints(ca=False, path_length=None), critical=True)
        .sign(key, hashes.SHA256())
    )


def issue_device_cert(
    device_ca_key: ec.EllipticCurvePrivateKey,
    device_ca_cert: x509.Certificate,
    device_public_key: ec.EllipticCurvePublicKey,
    cn: str = "mock-device",
) -> x509.Certificate:
    now = time.time()
    return (
        x509.CertificateBuilder()
        .subject_name(_name(cn))
        .issuer_name(device_ca_cert.subject)
        .public_key(device_public_key)
        .serial_number(x509.random_serial_number())
        .not_valid_before(_utc(now - 60))
        .not_valid_after(_utc(now + 3650 * 86400))
        .add_extension(x509.BasicConstraints(ca=False, path_length=None), critical=True)
        .sign(device_ca_key, hashes.SHA256())
    )


def make_csr(key: ec.EllipticCurvePrivateKey, cn: str = "computation-server") -> bytes:
    csr = x509.CertificateSigningRequestBuilder().subject_name(_name(cn)).sign(key, hashes.SHA256())
    return csr.public_bytes(serialization.Encoding.DER)


def pem(cert: x509.Certificate) -> str:
    return cert.public_bytes(serialization.Encoding.PEM).decode("ascii")


def key_pem(key: ec.EllipticCurvePrivateKey) -> bytes:
    return key.private_bytes(
        serialization.Encoding.PEM, serialization.PrivateFormat.PKCS8, serialization.NoEncryption()
    )


def load_cert(data: str | bytes | x509.Certificate) -> x509.Certificate:
    if isinstance(data, x509.Certificate):
        return data
    raw = data.encode("ascii") if isinstance(data, str) else data
    if raw.lstrip().startswith(b"-----BEGIN"):
        return x509.load_pem_x509_certificate(raw)
    return x509.load_der_x509_certificate(raw)


def load_key(data: bytes) -> ec.EllipticCurvePrivateKey:
    key = serialization.load_pem_private_key(data, password=None)
    if not isinstance(key, ec.EllipticCurvePrivateKey):
        raise TypeError("expected an EC private key")
    return key


@dataclass(frozen=True)
class AttestationEvidence:
    runtime_measurement: bytes
    user_data: bytes
    nonce: bytes
    device_key_id: bytes
    signature: bytes
    version: int = VERSION

    def signed_bytes(self) -> bytes:
        return _BODY.pack(
            MAGIC, self.version, self.runtime_measurement, self.user_data, self.nonce, self.device_key_id
        )

    def to_bytes(self) -> bytes:
        return self.signed_bytes() + struct.pack(">H", len(self.signature)) + self.signature

    @classmethod
    def from_bytes(cls, raw: bytes) -> "AttestationEvidence":
        if len(raw) < _BODY.size + 2:
            raise MalformedEvidence(f"evidence too short ({len(raw)} bytes)")
        magic, version, meas, user, nonce, kid = _BODY.unpack_from(raw)
        if magic != MAGIC:
            raise MalformedEvidence("bad magic")
        (sig_len,) = struct.unpack_from(">H", raw, _BODY.size)
        sig = raw[_BODY.size + 2:]
        if len(sig) != sig_len:
            raise MalformedEvidence(f"signature length {sig_len} does not match {len(sig)} trailing bytes")
        return cls(meas, user, nonce, kid, sig, version)


@dataclass(frozen=True)
class Claims:
    measurement: bytes
    user_data: bytes


@dataclass
class DeviceKey:
    """Private key of the (mock) attesting platform plus its device-CA certificate."""

    key: ec.EllipticCurvePrivateKey
    cert: x509.Certificate

    @property
    def key_id(self) -> bytes:
        return key_id(self.key.public_key())


def device_attest(
    measurement: bytes, csr_hash: bytes, nonce: bytes, device_key: DeviceKey, *, version: int = VERSION
) -> AttestationEvidence:
    for label, value in (("measurement", measurement), ("csr_hash", csr_hash), ("nonce", nonce)):
        if len(value) != 32:
            raise ValueError(f"{label} must be 32 bytes")
    unsigned = AttestationEvidence(measurement, csr_hash, nonce, device_key.key_id, b"", version)
    sig = device_key.key.sign(unsigned.signed_bytes(), ec.ECDSA(hashes.SHA256()))
    return AttestationEvidence(measurement, csr_hash, nonce, device_key.key_id, sig, version)


def _issued_by(cert: x509.Certificate, issuer: x509.Certificate) -> bool:
    try:
        cert.verify_directly_issued_by(issuer)
        return True
    except (ValueError, TypeError, InvalidSignature):
        return False


def verify_evidence(
    ev: AttestationEvidence | bytes,
    expected_nonce: bytes,
    device_ca: x509.Certificate,
    device_cert: x509.Certificate,
) -> Claims:
    """Check a native token; return its claims.

    Checks run in order: layout, version, device key chains to `device_ca`,
    signature, nonce.
    """
    if isinstance(ev, (bytes, bytearray)):
        raw = bytes(ev)
        ev = AttestationEvidence.from_bytes(raw)
        signed = raw[: _BODY.size]
    else:
        signed = ev.signed_bytes()
    if ev.version != VERSION:
        raise VersionUnsupported(f"evidence version {ev.version}")
    if not _issued_by(device_cert, device_ca):
        raise UnknownDeviceKey("device certificate not issued by the device CA")
    pub = device_cert.public_key()
    if not isinstance(pub, ec.EllipticCurvePublicKey) or key_id(pub) != ev.device_key_id:
        raise UnknownDeviceKey("evidence names a different device key")
    try:
        pub.verify(ev.signature, signed, ec.ECDSA(hashes.SHA256()))
    except (InvalidSignature, ValueError):
        raise BadSignature("evidence signature does not verify") from None
    if not hmac.compare_digest(ev.nonce, expected_nonce):
        raise NonceMismatch("evidence nonce differs from the challenge")
    return Claims(ev.runtime_measurement, ev.user_data)


class ProxyState:
    """Root CA, device CA trust anchor, and the outstanding-nonce table."""

    def __init__(
        self,
        root_key: ec.EllipticCurvePrivateKey,
        root_cert: x509.Certificate,
        device_ca: x509.Certificate,
        *,
        lifetime_s: int = DEFAULT_CERT_LIFETIME_S,
        nonce_window_s: float = NONCE_WINDOW_S,
        clock: Clock = time.time,
    ):
        self.root_key = root_key
        self.root_cert = root_cert
        self.device_ca = device_ca
        self.lifetime_s = lifetime_s
        self.nonce_window_s = nonce_window_s
        self.clock = clock
        self.nonces: dict[bytes, float] = {}
        self.issued = 0
        self._lock = threading.Lock()

    @classmethod
    def generate(cls, device_ca: x509.Certificate, **kwargs) -> "ProxyState":
        key = new_key()
        return cls(key, self_signed_ca(key, "proxy-attestation-root"), device_ca, **kwargs)

    @property
    def root_ca_pem(self) -> str:
        return pem(self.root_cert)

    def new_challenge(self) -> bytes:
        nonce = secrets.token_bytes(32)
        with self._lock:
            now = self.clock()
            self.nonces = {n: t for n, t in self.nonces.items() if now - t <= self.nonce_window_s}
            self.nonces[nonce] = now
        return nonce

    def _take_nonce(self, nonce: bytes) -> None:
        with self._lock:
            issued_at = self.nonces.pop(nonce, None)
        if issued_at is None:
            raise StaleNonce("nonce unknown or already used")
        if self.clock() - issued_at > self.nonce_window_s:
            raise StaleNonce("nonce expired")

    def onboard(
        self,
        csr_der: bytes,
        ev: AttestationEvidence | bytes,
        device_cert: x509.Certificate,
        challenge: bytes | None = None,
    ) -> x509.Certificate:
        """Issue a runtime certificate for the CSR's key, or raise.

        `challenge` is the nonce the caller is answering; it defaults to the
        nonce inside the evidence. Either way it must be outstanding and is
        consumed by this call.
        """
        try:
            csr = x509.load_der_x509_csr(csr_der)
        except ValueError as exc:
            raise MalformedCsr(str(exc)) from None
        if not csr.is_signature_valid:
            raise MalformedCsr("CSR self-signature does not verify")
        if not isinstance(csr.public_key(), ec.EllipticCurvePublicKey):
            raise MalformedCsr("CSR key is not an EC key")
        raw = ev.to_bytes() if isinstance(ev, AttestationEvidence) else bytes(ev)
        try:
            parsed = AttestationEvidence.from_bytes(raw)
        except EvidenceError as exc:
            raise EvidenceInvalid(exc) from None
        expected = parsed.nonce if challenge is None else challenge
        self._take_nonce(expected)
        try:
            claims = verify_evidence(raw, expected, self.device_ca, device_cert)
        except EvidenceError as exc:
            raise EvidenceInvalid(exc) from None
        if not hmac.compare_digest(hashlib.sha256(csr_der).digest(), claims.user_data):
            raise CsrBindingMismatch("SHA-256 of the CSR does not match the evidence user data")
        return self._issue(csr, claims.measurement)

    def _issue(self, csr: x509.CertificateSigningRequest, measurement: bytes) -> x509.Certificate:
        start = int(self.clock())
        cert = (
            x509.CertificateBuilder()
            .subject_name(csr.subject)
            .issuer_name(self.root_cert.subject)
            .public_key(csr.public_key())
            .serial_number(x509.random_serial_number())
            .not_valid_before(_utc(start))
            .not_valid_after(_utc(start + self.lifetime_s))
            .add_extension(x509.BasicConstraints(ca=False, path_length=None), critical=True)
            .add_extension(x509.UnrecognizedExtension(MEASUREMENT_OID, measurement), critical=False)
            .sign(self.root_key, hashes.SHA256())
        )
        with self._lock:
            self.issued += 1
        return cert


def _validity(cert: x509.Certificate) -> tuple[float, float]:
    return cert.not_valid_before_utc.timestamp(), cert.not_valid_after_utc.timestamp()


def measurement_of(cert: x509.Certificate) -> bytes:
    try:
        ext = cert.extensions.get_extension_for_oid(MEASUREMENT_OID)
    except x509.ExtensionNotFound:
        raise ExtensionMissing("certificate has no measurement extension") from None
    value = ext.value
    return value.value if isinstance(value, x509.UnrecognizedExtension) else b""


def verify_runtime_certificate(
    cert: x509.Certificate | bytes | str,
    root_ca_pem: str,
    expected_measurement: bytes,
    now: float | None = None,
    *,
    max_lifetime_s: int | None = None,
) -> None:
    """Augmented-handshake checks on the server's certificate; raise on failure."""
    now = time.time() if now is None else now
    try:
        cert = load_cert(cert)
        root = load_cert(root_ca_pem)
    except ValueError as exc:
        raise ChainInvalid(f"unparseable certificate: {exc}") from None
    if not _issued_by(cert, root):
        raise ChainInvalid("certificate is not signed by the proxy root CA")
    start, end = _validity(cert)
    if not start <= now <= end:
        raise Expired(f"certificate valid {start:.0f}..{end:.0f}, now {now:.0f}")
    if max_lifetime_s is not None and end - start > max_lifetime_s:
        raise LifetimeExceeded(f"certificate lifetime {end - start:.0f}s exceeds {max_lifetime_s}s")
    found = measurement_of(cert)
    if len(found) != 32 or not hmac.compare_digest(found, expected_measurement):
        raise MeasurementMismatch("runtime measurement differs from the policy")


@dataclass
class TrustBundle:
    """Material written by ``pas init``: proxy root CA, device CA and one device key."""

    root_key: ec.EllipticCurvePrivateKey
    root_cert: x509.Certificate
    device_ca_key: ec.EllipticCurvePrivateKey
    device_ca_cert: x509.Certificate
    device: DeviceKey

    FILES = {
        "root_key": "root_ca.key",
        "root_cert": "root_ca.pem",
        "device_ca_key": "device_ca.key",
        "device_ca_cert": "device_ca.pem",
        "device_key": "device.key",
        "device_cert": "device.pem",
    }

    @classmethod
    def generate(cls) -> "TrustBundle":
        root_key, dca_key, dev_key = new_key(), new_key(), new_key()
        root = self_signed_ca(root_key, "proxy-attestation-root")
        dca = self_signed_ca(dca_key, "mock-device-ca")
        dev = DeviceKey(dev_key, issue_device_cert(dca_key, dca, dev_key.public_key()))
        return cls(root_key, root, dca_key, dca, dev)

    def save(self, directory: str) -> None:
        os.makedirs(directory, exist_ok=True)
        blobs = {
            "root_key": key_pem(self.root_key),
            "root_cert": pem(self.root_cert).encode(),
            "device_ca_key": key_pem(self.device_ca_key),
            "device_ca_cert": pem(self.device_ca_cert).encode(),
            "device_key": key_pem(self.device.key),
            "device_cert": pem(self.device.cert).encode(),
        }
        for field_name, blob in blobs.items():
            path = os.path.join(directory, self.FILES[field_name])
            with open(path, "wb") as fh:
                fh.write(blob)
            if path.endswith(".key"):
                os.chmod(path, 0o600)


def load_root_ca(directory: str) -> tuple[ec.EllipticCurvePrivateKey, x509.Certificate]:
    with open(os.path.join(directory, TrustBundle.FILES["root_key"]), "rb") as fh:
        key = load_key(fh.read())
    with open(os.path.join(directory, TrustBundle.FILES["root_cert"]), "rb") as fh:
        cert = load_cert(fh.read())
    return key, cert


def load_device_key(key_path: str, cert_path: str) -> DeviceKey:
    with open(key_path, "rb") as fh:
        key = load_key(fh.read())
    with open(cert_path, "rb") as fh:
        cert = load_cert(fh.read())
    return DeviceKey(key, cert)


def load_chain(ctx: ssl.SSLContext, cert_pem: str, key_pem_bytes: bytes) -> None:
    """`SSLContext.load_cert_chain` for in-memory PEM (the stdlib only takes paths)."""
    with tempfile.TemporaryDirectory() as tmp:
        cert_path = os.path.join(tmp, "cert.pem")
        key_path = os.path.join(tmp, "key.pem")
        with open(cert_path, "w") as fh:
            fh.write(cert_pem)
        with open(os.open(key_path, os.O_WRONLY | os.O_CREAT, 0o600), "wb") as fh:
            fh.write(key_pem_bytes)
        ctx.load_cert_chain(cert_path, key_path)
