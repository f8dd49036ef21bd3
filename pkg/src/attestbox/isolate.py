"""Isolate drivers.

`ProcessIsolate` is the one desk-scale driver: the "isolate" is a child
process and its measurement is the SHA-256 of the runtime image (this
package's source tree), computed by the parent before launch. The mock
device key stands in for the platform's attestation key.
"""

from __future__ import annotations

import hashlib
import json
import os
import pathlib
import subprocess
import sys
from typing import Protocol

from cryptography import x509

from .attestation import AttestationEvidence, DeviceKey, device_attest, load_device_key

ENV_VAR = "ATTESTBOX_ISOLATE"
PACKAGE_DIR = pathlib.Path(__file__).resolve().parent


class IsolateDriver(Protocol):
    def measurement(self) -> bytes: ...

    def attest(self, csr_hash: bytes, nonce: bytes) -> tuple[AttestationEvidence, x509.Certificate]: ...


def runtime_image_digest(root: pathlib.Path = PACKAGE_DIR) -> bytes:
    """SHA-256 over every .py file of the runtime, in sorted path order."""
    h = hashlib.sha256()
    for path in sorted(root.rglob("*.py")):
        rel = path.relative_to(root).as_posix().encode()
        data = path.read_bytes()
        h.update(len(rel).to_bytes(4, "big") + rel + len(data).to_bytes(8, "big") + data)
    return h.digest()


class ProcessIsolate:
    def __init__(self, device: DeviceKey, measurement: bytes | None = None):
        self.device = device
        self._measurement = runtime_image_digest() if measurement is None else measurement

    def measurement(self) -> bytes:
        return self._measurement

    def attest(self, csr_hash: bytes, nonce: bytes) -> tuple[AttestationEvidence, x509.Certificate]:
        return device_attest(self._measurement, csr_hash, nonce, self.device), self.device.cert

    @classmethod
    def spawn(
        cls,
        runtime_args: list[str],
        *,
        device_key_path: str,
        device_cert_path: str,
        measurement: bytes | None = None,
        **popen_kwargs,
    ) -> subprocess.Popen:
        """Launch ``attestbox runtime _isolate-main <runtime_args>`` as a child process."""
        measurement = runtime_image_digest() if measurement is None else measurement
        env = dict(popen_kwargs.pop("env", None) or os.environ)
        env[ENV_VAR] = json.dumps(
            {
                "device_key": os.path.abspath(device_key_path),
                "device_cert": os.path.abspath(device_cert_path),
                "measurement": measurement.hex(),
            }
        )
        cmd = [sys.executable, "-m", "attestbox.cli", "runtime", "_isolate-main", *runtime_args]
        return subprocess.Popen(cmd, env=env, **popen_kwargs)

    @classmethod
    def from_env(cls) -> "ProcessIsolate":
        """Reconstruct the driver inside the child from what the parent handed over."""
        cfg = json.loads(os.environ[ENV_VAR])
        device = load_device_key(cfg["device_key"], cfg["device_cert"])
        return cls(device, bytes.fromhex(cfg["measurement"]))
