"""Exception hierarchy shared across the runtime, proxy and client."""


class AttestboxError(Exception):
    """Base class for every error raised by this package."""


# policy
class PolicyError(AttestboxError):
    pass


class PolicySyntaxError(PolicyError):
    pass


class SchemaError(PolicyError):
    pass


class InvariantError(PolicyError):
    pass


class UnknownPrincipal(PolicyError):
    pass


# vfs
class VfsError(AttestboxError):
    pass


class AccessDenied(VfsError):
    pass


class NotFound(VfsError):
    pass


class IsDirectory(VfsError):
    pass


class NotDirectory(VfsError):
    pass


class TooManyDescriptors(VfsError):
    pass


class BadDescriptor(VfsError):
    pass


class OutOfBoundsIoVec(VfsError):
    pass


class NegativeOffset(VfsError):
    pass


class InvalidPath(VfsError):
    pass


class PathExists(VfsError):
    pass


# engine
class EngineError(AttestboxError):
    pass


class ValidationError(EngineError):
    pass


class MissingEntry(EngineError):
    pass


class TooLarge(EngineError):
    pass


# attestation
class AttestationError(AttestboxError):
    pass


class EvidenceError(AttestationError):
    """Evidence failed to parse or verify."""


class MalformedEvidence(EvidenceError):
    pass


class BadSignature(EvidenceError):
    pass


class NonceMismatch(EvidenceError):
    pass


class UnknownDeviceKey(EvidenceError):
    pass


class VersionUnsupported(EvidenceError):
    pass


class EvidenceInvalid(AttestationError):
    """Raised by onboarding when the wrapped evidence check fails."""

    def __init__(self, cause: EvidenceError):
        super().__init__(f"{type(cause).__name__}: {cause}")
        self.cause = cause


class CsrBindingMismatch(AttestationError):
    pass


class MalformedCsr(AttestationError):
    pass


class StaleNonce(AttestationError):
    pass


class CertificateError(AttestationError):
    pass


class ChainInvalid(CertificateError):
    pass


class Expired(CertificateError):
    pass


class LifetimeExceeded(CertificateError):
    pass


class ExtensionMissing(CertificateError):
    pass


class MeasurementMismatch(CertificateError):
    pass


# wire / server
class MalformedFrame(AttestboxError):
    pass


class ServerSetupError(AttestboxError):
    pass


class OnboardFailed(ServerSetupError):
    pass


class UnknownClientCert(AttestboxError):
    pass


class HandshakeFailure(AttestboxError):
    pass


# client
class ClientError(AttestboxError):
    pass


class AttestationRejected(ClientError):
    def __init__(self, cause: Exception):
        super().__init__(f"{type(cause).__name__}: {cause}")
        self.cause = cause


class PolicyMismatch(ClientError):
    pass


class TransportError(ClientError):
    pass


class ClientCertRejected(TransportError):
    """The runtime refused our client certificate during the handshake."""


class ServerError(ClientError):
    def __init__(self, code: int, message: str):
        super().__init__(f"server error {code}: {message}")
        self.code = code
        self.message = message


class Timeout(ClientError):
    pass


# bench
class ZeroState(AttestboxError):
    pass


class BenchConfigError(AttestboxError):
    pass
