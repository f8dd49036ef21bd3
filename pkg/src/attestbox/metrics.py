"""Wall-clock phase timings for deployment-overhead reports."""

from __future__ import annotations

import contextlib
import json
import threading
import time
from typing import Iterator

# Phase names follow the deployment steps, in order.
PROXY_START = "Proxy attestation service start"
ONBOARD = "Onboard new isolate"
REQUEST_ATTESTATION = "Request attestation message"
INIT_ISOLATE = "Initialization of isolate"
CHECK_HASHES = "Check hashes (including TLS handshake)"
PROVISION_PROGRAM = "Provision program"
PROVISION_DATA = "Provision data"
EXECUTE = "Execute program"
FETCH_RESULT = "Fetch result"


class PhaseLog:
    def __init__(self) -> None:
        self.phases: list[tuple[str, float]] = []
        self._lock = threading.Lock()

    def record(self, name: str, ms: float) -> None:
        with self._lock:
            self.phases.append((name, ms))

    @contextlib.contextmanager
    def phase(self, name: str) -> Iterator[None]:
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.record(name, (time.perf_counter() - t0) * 1000.0)

    def totals(self) -> dict[str, float]:
        out: dict[str, float] = {}
        with self._lock:
            for name, ms in self.phases:
                out[name] = out.get(name, 0.0) + ms
        return out

    def dump(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump([{"phase": n, "ms": ms} for n, ms in self.phases], fh, indent=1)

    @staticmethod
    def load(path: str) -> list[tuple[str, float]]:
        with open(path) as fh:
            return [(row["phase"], float(row["ms"])) for row in json.load(fh)]
