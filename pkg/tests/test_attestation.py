import hashlib
import os

import pytest

from attestbox.attestation import (
    MEASUREMENT_OID,
    AttestationEvidence,
    DeviceKey,
    ProxyState,
    TrustBundle,
    device_attest,
    issue_device_cert,
    key_id,
    load_device_key,
    load_root_ca,
    make_csr,
    measurement_of,
    new_key,
    self_signed_ca,
    verify_evidence,
    verify_runtime_certificate,
)
from attestbox.errors import (
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
from attestbox.proxy import ProxyClient, ProxyServer

MEAS = hashlib.sha256(b"runtime").digest()


class Clock:
    def __init__(self, t=1_700_000_000.0):
        self.t = t

    def __call__(self):
        return self.t


@pytest.fixture
def clock():
    return Clock()


@pytest.fixture
def proxy(trust, clock):
    return ProxyState(trust.root_key, trust.root_cert, trust.device_ca_cert, lifetime_s=3600, clock=clock)


def _onboard_inputs(trust, proxy, *, measurement=MEAS):
    csr = make_csr(new_key())
    nonce = proxy.new_challenge()
    ev = device_attest(measurement, hashlib.sha256(csr).digest(), nonce, trust.device)
    return csr, ev, nonce


def test_evidence_layout_round_trip(trust):
    ev = device_attest(MEAS, bytes(32), b"n" * 32, trust.device)
    raw = ev.to_bytes()
    assert raw[:4] == b"VATT" and raw[4] == 1
    assert raw[5:37] == MEAS and raw[69:101] == b"n" * 32 and raw[101:133] == trust.device.key_id
    assert int.from_bytes(raw[133:135], "big") == len(ev.signature) == len(raw) - 135
    assert AttestationEvidence.from_bytes(raw) == ev


def test_key_id_is_sha256_of_spki(trust):
    from cryptography.hazmat.primitives import serialization

    spki = trust.device.key.public_key().public_bytes(
        serialization.Encoding.DER, serialization.PublicFormat.SubjectPublicKeyInfo
    )
    assert key_id(trust.device.key.public_key()) == hashlib.sha256(spki).digest()


def test_verify_evidence_honest(trust):
    ev = device_attest(MEAS, b"u" * 32, b"n" * 32, trust.device)
    claims = verify_evidence(ev.to_bytes(), b"n" * 32, trust.device_ca_cert, trust.device.cert)
    assert claims.measurement == MEAS and claims.user_data == b"u" * 32


def test_verify_evidence_errors(trust):
    ev = device_attest(MEAS, b"u" * 32, b"n" * 32, trust.device)
    with pytest.raises(NonceMismatch):
        verify_evidence(ev, b"m" * 32, trust.device_ca_cert, trust.device.cert)
    with pytest.raises(MalformedEvidence):
        verify_evidence(ev.to_bytes()[:50], b"n" * 32, trust.device_ca_cert, trust.device.cert)
    v2 = device_attest(MEAS, b"u" * 32, b"n" * 32, trust.device, version=2)
    with pytest.raises(VersionUnsupported):
        verify_evidence(v2, b"n" * 32, trust.device_ca_cert, trust.device.cert)
    rogue_ca_key = new_key()
    rogue_ca = self_signed_ca(rogue_ca_key, "rogue")
    rogue_key = new_key()
    rogue = DeviceKey(rogue_key, issue_device_cert(rogue_ca_key, rogue_ca, rogue_key.public_key()))
    forged = device_attest(MEAS, b"u" * 32, b"n" * 32, rogue)
    with pytest.raises(UnknownDeviceKey):
        verify_evidence(forged, b"n" * 32, trust.device_ca_cert, rogue.cert)
    with pytest.raises(UnknownDeviceKey):
        verify_evidence(forged, b"n" * 32, trust.device_ca_cert, trust.device.cert)


def test_every_single_byte_flip_is_rejected(trust):
    raw = device_attest(MEAS, b"u" * 32, b"n" * 32, trust.device).to_bytes()
    for i in range(len(raw)):
        for mask in (0x01, 0x80):
            bad = bytearray(raw)
            bad[i] ^= mask
            with pytest.raises(EvidenceError):
                verify_evidence(bytes(bad), b"n" * 32, trust.device_ca_cert, trust.device.cert)


def test_onboard_issues_measured_certificate(trust, proxy, clock):
    csr, ev, nonce = _onboard_inputs(trust, proxy)
    cert = proxy.onboard(csr, ev, trust.device.cert, nonce)
    assert measurement_of(cert) == MEAS
    ext = cert.extensions.get_extension_for_oid(MEASUREMENT_OID)
    assert not ext.critical
    assert cert.not_valid_before_utc.timestamp() == int(clock.t)
    assert cert.not_valid_after_utc.timestamp() == int(clock.t) + 3600
    verify_runtime_certificate(cert, proxy.root_ca_pem, MEAS, clock.t + 10, max_lifetime_s=3600)


def test_onboard_rejections(trust, proxy, clock):
    csr, ev, nonce = _onboard_inputs(trust, proxy)
    with pytest.raises(CsrBindingMismatch):
        proxy.onboard(make_csr(new_key()), ev, trust.device.cert, nonce)
    # The nonce was consumed by the failed attempt.
    with pytest.raises(StaleNonce):
        proxy.onboard(csr, ev, trust.device.cert, nonce)

    csr, ev, nonce = _onboard_inputs(trust, proxy)
    other = proxy.new_challenge()
    with pytest.raises(EvidenceInvalid) as ei:
        proxy.onboard(csr, ev, trust.device.cert, other)
    assert isinstance(ei.value.cause, NonceMismatch)

    csr, ev, nonce = _onboard_inputs(trust, proxy)
    clock.t += 301
    with pytest.raises(StaleNonce):
        proxy.onboard(csr, ev, trust.device.cert, nonce)

    csr, ev, nonce = _onboard_inputs(trust, proxy)
    forged = AttestationEvidence(ev.runtime_measurement, ev.user_data, ev.nonce, ev.device_key_id, ev.signature[:-1] + bytes([ev.signature[-1] ^ 1]))
    with pytest.raises(EvidenceInvalid) as ei:
        proxy.onboard(csr, forged, trust.device.cert, nonce)
    assert isinstance(ei.value.cause, BadSignature)

    with pytest.raises(MalformedCsr):
        proxy.onboard(b"junk", ev, trust.device.cert, nonce)


def test_nonce_defaults_to_evidence_nonce(trust, proxy):
    csr, ev, nonce = _onboard_inputs(trust, proxy)
    proxy.onboard(csr, ev, trust.device.cert)
    with pytest.raises(StaleNonce):
        proxy.onboard(csr, ev, trust.device.cert)


def test_runtime_certificate_checks(trust, proxy, clock):
    csr, ev, nonce = _onboard_inputs(trust, proxy)
    cert = proxy.onboard(csr, ev, trust.device.cert, nonce)
    root = proxy.root_ca_pem
    other_root = ProxyState.generate(trust.device_ca_cert).root_ca_pem
    with pytest.raises(ChainInvalid):
        verify_runtime_certificate(cert, other_root, MEAS, clock.t)
    with pytest.raises(ChainInvalid):
        verify_runtime_certificate(b"garbage", root, MEAS, clock.t)
    with pytest.raises(Expired):
        verify_runtime_certificate(cert, root, MEAS, clock.t + 3601)
    with pytest.raises(Expired):
        verify_runtime_certificate(cert, root, MEAS, clock.t - 1)
    with pytest.raises(LifetimeExceeded):
        verify_runtime_certificate(cert, root, MEAS, clock.t, max_lifetime_s=60)
    with pytest.raises(MeasurementMismatch):
        verify_runtime_certificate(cert, root, bytes(32), clock.t)
    # A root-signed certificate without the extension.
    from attestbox.attestation import self_signed_client_cert  # noqa: F401
    from cryptography import x509
    from cryptography.hazmat.primitives import hashes
    import datetime as dt

    key = new_key()
    bare = (
        x509.CertificateBuilder()
        .subject_name(x509.Name([]))
        .issuer_name(trust.root_cert.subject)
        .public_key(key.public_key())
        .serial_number(1)
        .not_valid_before(dt.datetime.fromtimestamp(clock.t - 10, dt.timezone.utc))
        .not_valid_after(dt.datetime.fromtimestamp(clock.t + 10, dt.timezone.utc))
        .sign(trust.root_key, hashes.SHA256())
    )
    with pytest.raises(ExtensionMissing):
        verify_runtime_certificate(bare, root, MEAS, clock.t)


def test_trust_bundle_save_and_load(tmp_path):
    bundle = TrustBundle.generate()
    bundle.save(str(tmp_path))
    key, cert = load_root_ca(str(tmp_path))
    assert cert == bundle.root_cert
    dev = load_device_key(str(tmp_path / "device.key"), str(tmp_path / "device.pem"))
    assert dev.key_id == bundle.device.key_id
    assert os.stat(tmp_path / "root_ca.key").st_mode & 0o077 == 0


def test_http_proxy_round_trip(trust):
    state = ProxyState(trust.root_key, trust.root_cert, trust.device_ca_cert)
    server = ProxyServer(state, ("127.0.0.1", 0))
    server.start()
    try:
        client = ProxyClient(server.endpoint)
        assert client.root_ca() == state.root_ca_pem
        key = new_key()
        csr = make_csr(key)
        nonce = client.challenge()
        ev = device_attest(MEAS, hashlib.sha256(csr).digest(), nonce, trust.device)
        cert = client.onboard(csr, ev, trust.device.cert, nonce)
        assert measurement_of(cert) == MEAS
        with pytest.raises(StaleNonce):
            client.onboard(csr, ev, trust.device.cert, nonce)
        nonce = client.challenge()
        ev = device_attest(MEAS, bytes(32), nonce, trust.device)
        with pytest.raises(CsrBindingMismatch):
            client.onboard(csr, ev, trust.device.cert, nonce)
        nonce = client.challenge()
        ev = device_attest(MEAS, hashlib.sha256(csr).digest(), bytes(32), trust.device)
        with pytest.raises(EvidenceInvalid) as ei:
            client.onboard(csr, ev, trust.device.cert, nonce)
        assert isinstance(ei.value.cause, NonceMismatch)
    finally:
        server.shutdown()
        server.server_close()


def test_http_proxy_bad_request(trust):
    import http.client
    import json

    state = ProxyState(trust.root_key, trust.root_cert, trust.device_ca_cert)
    server = ProxyServer(state, ("127.0.0.1", 0))
    server.start()
    try:
        host, port = server.server_address[:2]
        conn = http.client.HTTPConnection(host, port)
        conn.request("POST", "/onboard", body=b'{"csr": "!!"}', headers={"Content-Type": "application/json"})
        resp = conn.getresponse()
        assert resp.status == 400 and json.loads(resp.read())["error"] == "BadRequest"
        conn.request("GET", "/nowhere")
        assert conn.getresponse().status == 404
        conn.close()
    finally:
        server.shutdown()
        server.server_close()
