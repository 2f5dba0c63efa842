from .errors import (
    GapscoreError,
    ConfigurationError,
    ParseError,
    FormatError,
    UnsupportedInputError,
    DomainError,
    ContractViolationError,
    UndefinedAucError,
    ModelFormatError,
    MissingBaselineError,
)

__all__ = [
    "GapscoreError",
    "ConfigurationError",
    "ParseError",
    "FormatError",
    "UnsupportedInputError",
    "DomainError",
    "ContractViolationError",
    "UndefinedAucError",
    "ModelFormatError",
    "MissingBaselineError",
]
