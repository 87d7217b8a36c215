"""Exception types shared across the package."""


class CrossviewError(Exception):
    """Base class for package-specific errors."""


class NonFiniteError(CrossviewError, ArithmeticError):
    """A tensor op produced NaN or Inf."""


class DivergenceError(CrossviewError, RuntimeError):
    """Training hit a non-finite loss or parameter."""

    def __init__(self, step: int, detail: str = ""):
        self.step = step
        msg = f"training diverged at step {step}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class FormatError(CrossviewError, ValueError):
    """A binary artifact file does not match its format."""


class BadMagicError(FormatError):
    """File does not start with the expected magic bytes."""

    def __init__(self, expected: bytes, found: bytes):
        self.expected = expected
        self.found = found
        super().__init__(f"bad magic: expected {expected!r}, found {found!r}")


class BadVersionError(FormatError):
    """File carries an unsupported format version."""


class TruncatedFileError(FormatError):
    """File ended before the format said it would."""


class ConfigError(CrossviewError, ValueError):
    """Config document contains unknown or invalid keys."""
