"""Attested, policy-governed delegated computation over a WebAssembly sandbox."""

__version__ = "0.1.0"
