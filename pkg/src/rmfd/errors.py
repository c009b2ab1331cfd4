"""Exception hierarchy shared across the package.

Every error carries an ``exit_code`` so the CLI can map failures onto its
documented process exit codes: 1 = usage, 2 = validation/integrity,
3 = numeric.
"""


class RmfdError(Exception):
    """Base class for all package errors."""

    exit_code = 2


class UsageError(RmfdError):
    """Bad command-line or configuration usage."""

    exit_code = 1


class ConfigError(RmfdError):
    """A configuration value violates its documented constraints."""

    exit_code = 2


class ManifestError(RmfdError):
    """A manifest line could not be parsed."""

    exit_code = 2


class SchemaError(ManifestError):
    """A manifest record is missing or mistypes a required field."""


class IntegrityError(RmfdError):
    """A record or corpus violates a structural invariant."""

    exit_code = 2


class PairingError(RmfdError):
    """Contrastive pairing preconditions cannot be met."""

    exit_code = 2


class BatchingError(RmfdError):
    """A corpus cannot satisfy batch-construction invariants."""

    exit_code = 2


class StalenessError(RmfdError):
    """A reference index is older than the caller allows."""

    exit_code = 2


class NumericError(RmfdError):
    """A numeric computation produced NaN/Inf or is undefined."""

    exit_code = 3


class SimilarityError(NumericError):
    """Cosine similarity is undefined (zero-norm vector)."""
