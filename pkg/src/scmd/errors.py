"""Exception types shared across the package."""


class ScmdError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(ScmdError):
    """Incompatible tensor shapes; the message reports both shapes."""


class ParameterError(ScmdError):
    """Invalid argument value (bad temperature, fraction, index, ...)."""


class DomainError(ScmdError):
    """Input outside an operation's mathematical domain (e.g. log of x <= 0)."""


class DegenerateVectorError(ScmdError):
    """Vector with norm below the normalization threshold."""


class ContractError(ScmdError):
    """A documented call contract was violated (non-unit rows, shape drift, ...)."""


class CapacityError(ScmdError):
    """Exact-enumeration size limits exceeded."""


class TrainingDiverged(ScmdError):
    """Non-finite loss encountered; carries a diagnostics dump."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ConfigError(ScmdError):
    """Configuration schema violation; lists every offending key."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class ArtifactError(ScmdError):
    """Base class for artifact/checkpoint file errors."""


class BadMagicError(ArtifactError):
    """File does not start with the expected magic bytes."""


class TruncatedArtifactError(ArtifactError):
    """File ends before the declared payload or trailer."""


class ChecksumError(ArtifactError):
    """Trailing CRC32 does not match the file contents."""


class ArtifactValidationError(ArtifactError):
    """Decoded payload violates a declared invariant (names the field/row)."""


class MissingEmbeddingError(ScmdError):
    """A requested sample id has no stored embedding."""


class TemplateError(ScmdError):
    """Prompt template does not contain exactly one placeholder."""
