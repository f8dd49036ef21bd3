"""Global policy: parsing, canonical form, digest and capability lookup.

The policy is a JSON document with a closed schema. Every party to a
computation holds a copy and compares digests, so the canonical encoding
(sorted keys, no insignificant whitespace, ASCII-only) must be stable.
"""

from __future__ import annotations

import enum
import hashlib
import json
import posixpath
from dataclasses import dataclass, field
from typing import Any, Mapping

from cryptography import x509
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.serialization import Encoding
from cryptography.x509.oid import ExtensionOID

from .errors import InvariantError, PolicySyntaxError, SchemaError, UnknownPrincipal

GUEST_ACTOR = "<program>"
DEFAULT_CERT_LIFETIME_S = 24 * 3600


class Rights(enum.Flag):
    NONE = 0
    READ = enum.auto()
    WRITE = enum.auto()
    SEEK = enum.auto()
    OPEN = enum.auto()

    def closure(self) -> "Rights":
        """Add OPEN whenever READ or WRITE is present."""
        if self & (Rights.READ | Rights.WRITE):
            return self | Rights.OPEN
        return self

    def names(self) -> list[str]:
        return sorted(r.name for r in _ATOMIC_RIGHTS if r in self)

    @classmethod
    def from_names(cls, names: list[str]) -> "Rights":
        out = cls.NONE
        for n in names:
            try:
                out |= cls[n]
            except KeyError:
                raise SchemaError(f"unknown right {n!r}") from None
        return out.closure()

    def is_consistent(self) -> bool:
        return self.closure() == self


_ATOMIC_RIGHTS = (Rights.READ, Rights.WRITE, Rights.SEEK, Rights.OPEN)
ALL_RIGHTS = Rights.READ | Rights.WRITE | Rights.SEEK | Rights.OPEN


class Role(str, enum.Enum):
    PROGRAM_PROVIDER = "ProgramProvider"
    DATA_PROVIDER = "DataProvider"
    RESULT_RECEIVER = "ResultReceiver"


class ExecutionStrategy(str, enum.Enum):
    INTERPRET = "Interpret"
    JIT = "Jit"


def is_normalized_path(path: str, allow_trailing_slash: bool = True) -> bool:
    """True for absolute paths without '.', '..' or empty components."""
    if not path.startswith("/") or "\x00" in path:
        return False
    if path == "/":
        return True
    body = path[1:]
    if body.endswith("/"):
        if not allow_trailing_slash:
            return False
        body = body[:-1]
    parts = body.split("/")
    return all(p not in ("", ".", "..") for p in parts)


def prefix_matches(key: str, path: str) -> bool:
    """Component-aware prefix test: "/in" matches "/in/x" but not "/inx"."""
    if key == path:
        return True
    if key.endswith("/"):
        return path.startswith(key)
    return path.startswith(key + "/")


def longest_prefix_rights(table: Mapping[str, Rights], path: str) -> Rights:
    best_len = -1
    best = Rights.NONE
    for key, rights in table.items():
        if prefix_matches(key, path) and len(key) > best_len:
            best_len = len(key)
            best = rights
    return best


@dataclass(frozen=True)
class Principal:
    id: str
    client_cert_pem: str
    roles: frozenset[Role]
    file_rights: Mapping[str, Rights] = field(default_factory=dict)

    def has(self, role: Role) -> bool:
        return role in self.roles

    def __hash__(self) -> int:
        return hash((self.id, self.client_cert_pem, self.roles))


@dataclass(frozen=True)
class GlobalPolicy:
    computation_id: str
    principals: tuple[Principal, ...]
    program_entry_path: str
    runtime_measurement: bytes
    proxy_root_ca_pem: str
    execution_strategy: ExecutionStrategy
    certificate_lifetime_s: int
    server_endpoint: str
    proxy_endpoint: str
    program_file_rights: Mapping[str, Rights] = field(default_factory=dict)
    program_preopens: tuple[str, ...] = ("/",)
    native_modules: tuple[str, ...] = ()
    rng_seed: bytes | None = None

    def principal(self, principal_id: str) -> Principal:
        for p in self.principals:
            if p.id == principal_id:
                return p
        raise UnknownPrincipal(principal_id)

    def with_roles(self, role: Role) -> list[Principal]:
        return [p for p in self.principals if role in p.roles]

    def program_rights_for(self, path: str) -> Rights:
        return longest_prefix_rights(self.program_file_rights, path)

    def __hash__(self) -> int:
        return hash(policy_digest(self))


_TOP_KEYS = {
    "computation_id": True,
    "principals": True,
    "program_entry_path": True,
    "runtime_measurement": True,
    "proxy_root_ca_pem": True,
    "execution_strategy": True,
    "certificate_lifetime_s": False,
    "server_endpoint": True,
    "proxy_endpoint": True,
    "program_file_rights": False,
    "program_preopens": False,
    "native_modules": False,
    "rng_seed": False,
}
_PRINCIPAL_KEYS = {"id": True, "client_cert_pem": True, "roles": True, "file_rights": False}


def _reject_duplicates(pairs: list[tuple[str, Any]]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for k, v in pairs:
        if k in out:
            raise SchemaError(f"duplicate field {k!r}")
        out[k] = v
    return out


def _check_keys(obj: Any, spec: dict[str, bool], where: str) -> None:
    if not isinstance(obj, dict):
        raise SchemaError(f"{where}: expected an object")
    unknown = set(obj) - set(spec)
    if unknown:
        raise SchemaError(f"{where}: unknown field(s) {sorted(unknown)}")
    missing = [k for k, required in spec.items() if required and k not in obj]
    if missing:
        raise SchemaError(f"{where}: missing field(s) {missing}")


def _expect(value: Any, kind: type | tuple[type, ...], where: str) -> Any:
    if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
        raise SchemaError(f"{where}: wrong type {type(value).__name__}")
    return value


def _hex32(value: Any, where: str) -> bytes:
    _expect(value, str, where)
    try:
        raw = bytes.fromhex(value)
    except ValueError:
        raise SchemaError(f"{where}: not hex") from None
    if len(raw) != 32:
        raise InvariantError(f"{where}: expected 32 bytes, got {len(raw)}")
    return raw


def _rights_table(obj: Any, where: str) -> dict[str, Rights]:
    _expect(obj, dict, where)
    table: dict[str, Rights] = {}
    for path, names in obj.items():
        if not is_normalized_path(path):
            raise InvariantError(f"{where}: path {path!r} is not absolute and normalized")
        _expect(names, list, f"{where}[{path}]")
        for n in names:
            _expect(n, str, f"{where}[{path}]")
        table[path] = Rights.from_names(names)
    return table


def _endpoint(value: Any, where: str) -> str:
    _expect(value, str, where)
    host, sep, port = value.rpartition(":")
    if not sep or not host or not port.isdigit() or not 0 <= int(port) < 65536:
        raise SchemaError(f"{where}: expected host:port, got {value!r}")
    return value


def _load_cert(pem: str, where: str) -> x509.Certificate:
    try:
        return x509.load_pem_x509_certificate(pem.encode("ascii"))
    except (ValueError, UnicodeEncodeError) as exc:
        raise InvariantError(f"{where}: not a PEM certificate ({exc})") from None


def _check_self_signed_ca(pem: str) -> None:
    cert = _load_cert(pem, "proxy_root_ca_pem")
    if cert.subject != cert.issuer:
        raise InvariantError("proxy_root_ca_pem: not self-signed")
    try:
        bc = cert.extensions.get_extension_for_oid(ExtensionOID.BASIC_CONSTRAINTS).value
    except x509.ExtensionNotFound:
        raise InvariantError("proxy_root_ca_pem: no basicConstraints") from None
    if not bc.ca:
        raise InvariantError("proxy_root_ca_pem: not a CA certificate")
    pub = cert.public_key()
    if not isinstance(pub, ec.EllipticCurvePublicKey):
        raise InvariantError("proxy_root_ca_pem: expected an EC key")
    try:
        pub.verify(cert.signature, cert.tbs_certificate_bytes, ec.ECDSA(cert.signature_hash_algorithm))
    except Exception:
        raise InvariantError("proxy_root_ca_pem: self-signature does not verify") from None


def _parse_principal(obj: Any, idx: int) -> Principal:
    where = f"principals[{idx}]"
    _check_keys(obj, _PRINCIPAL_KEYS, where)
    pid = _expect(obj["id"], str, f"{where}.id")
    pem = _expect(obj["client_cert_pem"], str, f"{where}.client_cert_pem")
    _load_cert(pem, f"{where}.client_cert_pem")
    roles_raw = _expect(obj["roles"], list, f"{where}.roles")
    roles = set()
    for r in roles_raw:
        try:
            roles.add(Role(r))
        except ValueError:
            raise SchemaError(f"{where}.roles: unknown role {r!r}") from None
    if len(roles) != len(roles_raw):
        raise SchemaError(f"{where}.roles: duplicate role")
    if not roles:
        raise InvariantError(f"{where}.roles: empty")
    rights = _rights_table(obj.get("file_rights", {}), f"{where}.file_rights")
    return Principal(pid, pem, frozenset(roles), rights)


def policy_from_dict(doc: Any) -> GlobalPolicy:
    _check_keys(doc, _TOP_KEYS, "policy")
    principals = tuple(
        _parse_principal(p, i) for i, p in enumerate(_expect(doc["principals"], list, "principals"))
    )
    entry = _expect(doc["program_entry_path"], str, "program_entry_path")
    if not is_normalized_path(entry, allow_trailing_slash=False) or entry == "/":
        raise InvariantError("program_entry_path must be an absolute normalized file path")
    try:
        strategy = ExecutionStrategy(_expect(doc["execution_strategy"], str, "execution_strategy"))
    except ValueError:
        raise SchemaError(f"unknown execution_strategy {doc['execution_strategy']!r}") from None
    lifetime = _expect(doc.get("certificate_lifetime_s", DEFAULT_CERT_LIFETIME_S), int, "certificate_lifetime_s")
    if lifetime <= 0:
        raise InvariantError("certificate_lifetime_s must be positive")
    preopens = tuple(_expect(doc.get("program_preopens", ["/"]), list, "program_preopens"))
    for d in preopens:
        if not isinstance(d, str) or not is_normalized_path(d):
            raise InvariantError(f"program_preopens: bad directory {d!r}")
    modules = tuple(_expect(doc.get("native_modules", []), list, "native_modules"))
    for m in modules:
        _expect(m, str, "native_modules")
    seed = doc.get("rng_seed")
    policy = GlobalPolicy(
        computation_id=_expect(doc["computation_id"], str, "computation_id"),
        principals=principals,
        program_entry_path=entry,
        runtime_measurement=_hex32(doc["runtime_measurement"], "runtime_measurement"),
        proxy_root_ca_pem=_expect(doc["proxy_root_ca_pem"], str, "proxy_root_ca_pem"),
        execution_strategy=strategy,
        certificate_lifetime_s=lifetime,
        server_endpoint=_endpoint(doc["server_endpoint"], "server_endpoint"),
        proxy_endpoint=_endpoint(doc["proxy_endpoint"], "proxy_endpoint"),
        program_file_rights=_rights_table(doc.get("program_file_rights", {}), "program_file_rights"),
        program_preopens=preopens,
        native_modules=modules,
        rng_seed=None if seed is None else _hex32(seed, "rng_seed"),
    )
    validate(policy)
    return policy


def validate(policy: GlobalPolicy) -> None:
    """Check the cross-field invariants; raise InvariantError on the first violation."""
    providers = policy.with_roles(Role.PROGRAM_PROVIDER)
    if len(providers) != 1:
        raise InvariantError(f"expected exactly one ProgramProvider, found {len(providers)}")
    if not policy.with_roles(Role.RESULT_RECEIVER):
        raise InvariantError("at least one ResultReceiver is required")
    if len(policy.runtime_measurement) != 32:
        raise InvariantError("runtime_measurement must be 32 bytes")
    ids = [p.id for p in policy.principals]
    if len(set(ids)) != len(ids):
        raise InvariantError("duplicate principal id")
    certs = [_load_cert(p.client_cert_pem, p.id).public_bytes(Encoding.DER) for p in policy.principals]
    if len(set(certs)) != len(certs):
        raise InvariantError("two principals share a client certificate")
    _check_self_signed_ca(policy.proxy_root_ca_pem)
    for d in policy.program_preopens:
        if not any(prefix_matches(d, k) or prefix_matches(k, d) for k in policy.program_file_rights):
            raise InvariantError(f"preopened directory {d!r} has no rights entry")
    if len(set(policy.program_preopens)) != len(policy.program_preopens):
        raise InvariantError("duplicate preopened directory")


def parse_policy(text: bytes | str) -> GlobalPolicy:
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise PolicySyntaxError(f"policy is not UTF-8: {exc}") from None
    try:
        doc = json.loads(text, object_pairs_hook=_reject_duplicates)
    except json.JSONDecodeError as exc:
        raise PolicySyntaxError(str(exc)) from None
    return policy_from_dict(doc)


def load_policy(path: str) -> GlobalPolicy:
    with open(path, "rb") as fh:
        return parse_policy(fh.read())


def _rights_doc(table: Mapping[str, Rights]) -> dict[str, list[str]]:
    return {k: v.names() for k, v in table.items()}


def policy_to_dict(policy: GlobalPolicy) -> dict[str, Any]:
    doc: dict[str, Any] = {
        "computation_id": policy.computation_id,
        "principals": [
            {
                "id": p.id,
                "client_cert_pem": p.client_cert_pem,
                "roles": sorted(r.value for r in p.roles),
                "file_rights": _rights_doc(p.file_rights),
            }
            for p in policy.principals
        ],
        "program_entry_path": policy.program_entry_path,
        "runtime_measurement": policy.runtime_measurement.hex(),
        "proxy_root_ca_pem": policy.proxy_root_ca_pem,
        "execution_strategy": policy.execution_strategy.value,
        "certificate_lifetime_s": policy.certificate_lifetime_s,
        "server_endpoint": policy.server_endpoint,
        "proxy_endpoint": policy.proxy_endpoint,
        "program_file_rights": _rights_doc(policy.program_file_rights),
        "program_preopens": list(policy.program_preopens),
        "native_modules": list(policy.native_modules),
    }
    if policy.rng_seed is not None:
        doc["rng_seed"] = policy.rng_seed.hex()
    return doc


def canonical_bytes(policy: GlobalPolicy) -> bytes:
    return json.dumps(
        policy_to_dict(policy), sort_keys=True, separators=(",", ":"), ensure_ascii=True
    ).encode("ascii")


def policy_digest(policy: GlobalPolicy) -> bytes:
    return hashlib.sha256(canonical_bytes(policy)).digest()


def rights_for(policy: GlobalPolicy, principal_id: str, path: str) -> Rights:
    """Rights a principal holds on `path`, chosen by longest matching prefix entry."""
    if principal_id == GUEST_ACTOR:
        return policy.program_rights_for(path)
    return longest_prefix_rights(policy.principal(principal_id).file_rights, path)


def normpath(path: str) -> str:
    """posixpath.normpath that keeps a leading '/' single."""
    out = posixpath.normpath(path)
    return "/" + out.lstrip("/") if out.startswith("/") else out
