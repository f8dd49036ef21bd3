"""Build a self-contained local deployment: trust material, principal identities, policy.

Layout written by `create_fixture(dir, guest)`::

    trust/            proxy root CA, device CA, device key (see TrustBundle.FILES)
    principals/ID.pem principal client certificate
    principals/ID.key principal client key
    program.wasm      guest module to provision
    policy.json
"""

from __future__ import annotations

import json
import os
import pathlib
from dataclasses import dataclass, field

from .attestation import TrustBundle, key_pem, new_key, pem, self_signed_client_cert
from .isolate import runtime_image_digest
from .policy import (
    ExecutionStrategy,
    GlobalPolicy,
    Principal,
    Rights,
    Role,
    policy_to_dict,
    validate,
)

GUEST_DIR = pathlib.Path(__file__).resolve().parent / "guests"
PROGRAM_PATH = "/program/main.wasm"

R = Rights.READ.closure()
W = Rights.WRITE.closure()


@dataclass(frozen=True)
class GuestSpec:
    name: str
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    native_modules: tuple[str, ...] = ()

    def wasm(self) -> bytes:
        return (GUEST_DIR / f"{self.name}.wasm").read_bytes()


GUESTS = {
    g.name: g
    for g in (
        GuestSpec("wordcount", ("/input/a", "/input/b"), ("/output/count",)),
        GuestSpec("copy", ("/input/a", "/input/b"), ("/output/a", "/output/b")),
        GuestSpec("random", (), ("/output/random",)),
        GuestSpec("intcodec", ("/input/numbers",), ("/output/codec",)),
        GuestSpec("intcodec_native", ("/input/numbers",), ("/output/codec",), ("intcodec",)),
    )
}


def guest_rights(spec: GuestSpec) -> dict[str, Rights]:
    rights = {"/": Rights.NONE, "/input/": R, "/output/": W | R}
    if spec.native_modules:
        rights["/modules/"] = W | R
    return rights


@dataclass
class Fixture:
    directory: pathlib.Path
    guest: GuestSpec
    policy: GlobalPolicy
    trust: TrustBundle
    identities: dict[str, tuple[pathlib.Path, pathlib.Path]] = field(default_factory=dict)

    @property
    def policy_path(self) -> pathlib.Path:
        return self.directory / "policy.json"

    @property
    def program_path(self) -> pathlib.Path:
        return self.directory / "program.wasm"

    @property
    def trust_dir(self) -> pathlib.Path:
        return self.directory / "trust"

    def cert(self, principal_id: str) -> pathlib.Path:
        return self.identities[principal_id][0]

    def key(self, principal_id: str) -> pathlib.Path:
        return self.identities[principal_id][1]


def build_policy(
    guest: GuestSpec,
    root_ca_pem: str,
    client_certs: dict[str, str],
    *,
    measurement: bytes,
    server_endpoint: str = "127.0.0.1:7443",
    proxy_endpoint: str = "127.0.0.1:7080",
    strategy: ExecutionStrategy = ExecutionStrategy.JIT,
    rng_seed: bytes | None = None,
    lifetime_s: int = 86400,
) -> GlobalPolicy:
    """One program provider, one data provider per guest input, one result receiver.

    `client_certs` maps principal id to PEM and must contain "program",
    "receiver" and "data-<n>" for each input (n from 1).
    """
    principals = [Principal("program", client_certs["program"], frozenset({Role.PROGRAM_PROVIDER}), {})]
    inputs = guest.inputs or ("/input/unused",)
    for i, path in enumerate(inputs, 1):
        pid = f"data-{i}"
        principals.append(Principal(pid, client_certs[pid], frozenset({Role.DATA_PROVIDER}), {path: W}))
    principals.append(
        Principal("receiver", client_certs["receiver"], frozenset({Role.RESULT_RECEIVER}), {"/output/": R})
    )
    policy = GlobalPolicy(
        computation_id=f"{guest.name}-fixture",
        principals=tuple(principals),
        program_entry_path=PROGRAM_PATH,
        runtime_measurement=measurement,
        proxy_root_ca_pem=root_ca_pem,
        execution_strategy=strategy,
        certificate_lifetime_s=lifetime_s,
        server_endpoint=server_endpoint,
        proxy_endpoint=proxy_endpoint,
        program_file_rights=guest_rights(guest),
        native_modules=guest.native_modules,
        rng_seed=rng_seed,
    )
    validate(policy)
    return policy


def principal_ids(guest: GuestSpec) -> list[str]:
    n = max(1, len(guest.inputs))
    return ["program", *(f"data-{i}" for i in range(1, n + 1)), "receiver"]


def create_fixture(
    directory: str | os.PathLike,
    guest: str = "wordcount",
    *,
    trust: TrustBundle | None = None,
    measurement: bytes | None = None,
    **policy_kwargs,
) -> Fixture:
    spec = GUESTS[guest]
    root = pathlib.Path(directory)
    (root / "principals").mkdir(parents=True, exist_ok=True)
    trust = trust or TrustBundle.generate()
    trust.save(str(root / "trust"))
    certs: dict[str, str] = {}
    identities = {}
    for pid in principal_ids(spec):
        key = new_key()
        cert_pem = pem(self_signed_client_cert(key, pid))
        cert_path, key_path = root / "principals" / f"{pid}.pem", root / "principals" / f"{pid}.key"
        cert_path.write_text(cert_pem)
        key_path.write_bytes(key_pem(key))
        os.chmod(key_path, 0o600)
        certs[pid] = cert_pem
        identities[pid] = (cert_path, key_path)
    policy = build_policy(
        spec,
        pem(trust.root_cert),
        certs,
        measurement=runtime_image_digest() if measurement is None else measurement,
        **policy_kwargs,
    )
    (root / "policy.json").write_text(json.dumps(policy_to_dict(policy), indent=2) + "\n")
    (root / "program.wasm").write_bytes(spec.wasm())
    return Fixture(root, spec, policy, trust, identities)
