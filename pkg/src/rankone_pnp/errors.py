"""Exception types shared across the package.

Each carries a short ``category`` used by the CLI for its one-line error output.
"""


class ReconError(Exception):
    category = "error"


class ConfigError(ReconError, ValueError):
    category = "invalid-config"


class UnknownDomainError(ReconError, KeyError):
    category = "unknown-domain"

    def __init__(self, domain_id, known=()):
        self.domain_id = domain_id
        self.known = sorted(known)
        super().__init__(f"unknown domain {domain_id!r}; known domains: {', '.join(self.known) or '(none)'}")

    def __str__(self):
        return self.args[0]


class FingerprintMismatchError(ReconError):
    category = "fingerprint-mismatch"


class BackboneMutatedError(ReconError):
    category = "backbone-mutated"


class NonFiniteError(ReconError, FloatingPointError):
    category = "non-finite"


class MissingModulationError(ReconError, KeyError):
    category = "missing-modulation"

    def __str__(self):
        return self.args[0] if self.args else ""


class ManifestError(ReconError):
    category = "manifest-mismatch"


class DataError(ReconError):
    category = "data"
